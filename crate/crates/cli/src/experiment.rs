//! End-to-end experiment runs driven by a JSON config.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use epk_core::data::{self, BlobSpec};
use epk_core::gp::{self, FieldConfig, Jitter, KrigingOptions, PosteriorField, Targets};
use epk_core::kernel::{Method, Rule};
use epk_core::{nn, report, Error, LabeledDataset, PathKernel, Quadrature, Result, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSource,
    pub test: TestSource,
    /// Number of test points evaluated, spread evenly over the test set.
    pub test_points: usize,
    pub train: TrainConfig,
    /// Quadrature sizes for the model-vs-kernel comparison.
    #[serde(default = "default_quadrature")]
    pub quadrature_steps: Vec<usize>,
    #[serde(default)]
    pub rule: Rule,
    /// Methods tabulated in `preds.csv`; `epk` uses the largest quadrature size.
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<PointStudy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrib: Option<PointStudy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathdiag: Option<PathdiagStudy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gp: Option<GpStudy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_quadrature() -> Vec<usize> {
    vec![100]
}

fn default_methods() -> Vec<MethodName> {
    vec![MethodName::Epk]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        spec: BlobSpec,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        per_class: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        downsample: Option<usize>,
    },
    Csv {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestSource {
    Blobs { spec: BlobSpec },
    /// The next `per_class` digits of each class after the training subset.
    MnistHoldout { per_class: usize },
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodName {
    #[serde(rename = "epk")]
    Epk,
    #[serde(rename = "dpk")]
    Dpk,
    #[serde(rename = "ntk0")]
    Ntk0,
    #[serde(rename = "ntkN")]
    NtkN,
}

/// A query given by its index among the evaluated test points or by
/// coordinates (zero-padded to the input dimension).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointRef {
    Index(usize),
    Coords(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointStudy {
    pub point: PointRef,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathdiagStudy {
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpStudy {
    /// `x0:x1:nx,y0:y1:ny` over the first two input dimensions.
    pub grid: String,
    pub train_points: usize,
    pub steps: usize,
    pub mc_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub jitter: Jitter,
    #[serde(default)]
    pub targets: Targets,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTime {
    pub stage: &'static str,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefinementRecord {
    pub steps: usize,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub output_dir: PathBuf,
    pub config: ExperimentConfig,
    pub model: String,
    pub train_seed: u64,
    pub data_seed: Option<u64>,
    pub train_fingerprint: String,
    pub test_fingerprint: String,
    pub train_accuracy: f64,
    pub max_abs_err: Vec<RefinementRecord>,
    pub max_step_reconstruction_error: f64,
    pub files: Vec<String>,
    pub wall_clock: Vec<StageTime>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.test_points == 0 {
            return Err(Error::Config("test_points must be positive".into()));
        }
        if self.quadrature_steps.is_empty() || self.quadrature_steps.contains(&0) {
            return Err(Error::Config("quadrature_steps must list positive sizes".into()));
        }
        if matches!(self.test, TestSource::MnistHoldout { .. }) && !matches!(self.data, DataSource::Mnist { .. }) {
            return Err(Error::Config("mnist_holdout test points need an mnist data source".into()));
        }
        Ok(())
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Mnist { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            DataSource::Csv { path } => fix(path),
            DataSource::Blobs { .. } => {}
        }
        if let TestSource::Csv { path } = &mut self.test {
            fix(path);
        }
        if let Some(p) = &mut self.output_dir {
            fix(p);
        }
    }
}

pub fn run_from_file(path: &Path, out_dir: Option<&Path>) -> Result<Manifest, CliError> {
    let mut cfg: ExperimentConfig = crate::commands::read_json(path).map_err(|e| CliError::stage("config", e))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    let dir = match (out_dir, &cfg.output_dir) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => d.clone(),
        (None, None) => {
            return Err(CliError::stage(
                "config",
                Error::Config("no output directory: pass --out-dir or set output_dir".into()),
            ))
        }
    };
    run_experiment(&cfg, &dir)
}

/// Tracks written files so a failed run leaves nothing behind.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<String>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn remove(&self) {
        for f in &self.files {
            let _ = fs::remove_file(self.dir.join(f));
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

struct Clock {
    times: Vec<StageTime>,
}

impl Clock {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T, CliError> {
        let start = Instant::now();
        let out = f().map_err(|e| CliError::stage(stage, e))?;
        let seconds = start.elapsed().as_secs_f64();
        match self.times.iter_mut().find(|t| t.stage == stage) {
            Some(t) => t.seconds += seconds,
            None => self.times.push(StageTime { stage, seconds }),
        }
        Ok(out)
    }
}

/// Trains, reconstructs and tabulates everything the config asks for.
/// On any failure the files written so far are deleted.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest, CliError> {
    cfg.validate().map_err(|e| CliError::stage("config", e))?;
    let created_dir = !dir.exists();
    fs::create_dir_all(dir).map_err(|e| {
        CliError::stage(
            "output",
            Error::Io {
                path: dir.to_path_buf(),
                source: e,
            },
        )
    })?;
    let mut out = Outputs {
        dir: dir.to_path_buf(),
        created_dir,
        files: Vec::new(),
    };
    match run_stages(cfg, &mut out) {
        Ok(m) => Ok(m),
        Err(e) => {
            out.remove();
            Err(e)
        }
    }
}

fn load_sets(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let classes = cfg.train.model.num_classes();
    let train = match &cfg.data {
        DataSource::Blobs { spec } => data::gen_blobs(spec)?,
        DataSource::Mnist {
            images,
            labels,
            per_class,
            downsample,
        } => data::load_mnist(images, labels, *per_class, *downsample)?,
        DataSource::Csv { path } => LabeledDataset::read_csv(path, Some(classes))?,
    };
    let test = match (&cfg.test, &cfg.data) {
        (TestSource::Blobs { spec }, _) => data::gen_blobs(spec)?,
        (
            TestSource::MnistHoldout { per_class },
            DataSource::Mnist {
                images,
                labels,
                per_class: skip,
                downsample,
            },
        ) => data::load_mnist_slice(images, labels, *skip, *per_class, *downsample)?,
        (TestSource::Csv { path }, _) => LabeledDataset::read_csv(path, Some(classes))?,
        (TestSource::MnistHoldout { .. }, _) => unreachable!("rejected by validate"),
    };
    let idx = gp::spread_indices(test.len(), cfg.test_points);
    if idx.len() < cfg.test_points {
        return Err(Error::Config(format!(
            "test set has {} points, {} requested",
            test.len(),
            cfg.test_points
        )));
    }
    Ok((train, test.subset(&idx)?))
}

fn resolve_point<'a>(p: &PointRef, test: &'a LabeledDataset, buf: &'a mut Vec<f64>) -> Result<&'a [f64]> {
    match p {
        PointRef::Index(i) => {
            if *i >= test.len() {
                return Err(Error::Config(format!("point index {i} beyond {} test points", test.len())));
            }
            Ok(test.x(*i))
        }
        PointRef::Coords(c) => {
            if c.len() > test.dim() {
                return Err(Error::Config(format!(
                    "point has {} coordinates, inputs have {}",
                    c.len(),
                    test.dim()
                )));
            }
            buf.clear();
            buf.extend_from_slice(c);
            buf.resize(test.dim(), 0.0);
            Ok(buf)
        }
    }
}

fn run_stages(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Manifest, CliError> {
    let mut clock = Clock { times: Vec::new() };
    let (train, test) = clock.time("data", || {
        let sets = load_sets(cfg)?;
        Ok(sets)
    })?;
    clock.time("data", || {
        train.write_csv(&out.path("train.csv"))?;
        test.write_csv(&out.path("test.csv"))
    })?;
    let traj = clock.time("train", || cfg.train.train(&train))?;
    clock.time("train", || traj.save(&out.path("trajectory.epk")))?;
    let pk = PathKernel::new(&traj, &train).map_err(|e| CliError::stage("kernel", e))?;
    let recon = clock.time("reconstruction", || pk.step_reconstruction_errors())?;
    let max_recon = recon.iter().copied().fold(0.0, f64::max);

    let queries: Vec<&[f64]> = (0..test.len()).map(|i| test.x(i)).collect();
    let mut refinement = Vec::new();
    let mut all_rows = Vec::new();
    let mut per_t = Vec::new();
    for &t in &cfg.quadrature_steps {
        let quad = Quadrature { rule: cfg.rule, steps: t };
        let reports = clock.time("compare", || pk.predict(&queries, Method::Epk(quad)))?;
        refinement.push(RefinementRecord {
            steps: t,
            max_abs_err: reports.iter().map(|r| r.max_abs_err).fold(0.0, f64::max),
        });
        let rows: Vec<_> = reports.into_iter().enumerate().collect();
        all_rows.extend(rows.iter().cloned());
        per_t.push((t, rows));
    }
    clock.time("compare", || {
        report::write_compare(&out.path("compare.csv"), &all_rows)?;
        if per_t.len() > 1 {
            for (t, rows) in &per_t {
                report::write_compare(&out.path(&format!("compare_T{t}.csv")), rows)?;
            }
        }
        Ok(())
    })?;

    let t_max = *cfg.quadrature_steps.iter().max().expect("validated non-empty");
    clock.time("predict", || {
        let path = out.path("preds.csv");
        let mut first = true;
        for m in &cfg.methods {
            let method = match m {
                MethodName::Epk => Method::Epk(Quadrature { rule: cfg.rule, steps: t_max }),
                MethodName::Dpk => Method::Dpk,
                MethodName::Ntk0 => Method::Ntk0,
                MethodName::NtkN => Method::NtkN,
            };
            let reports = pk.predict(&queries, method)?;
            let name = method.name();
            if first {
                report::write_predictions(&path, name, &reports)?;
                first = false;
            } else {
                let tmp = path.with_extension("part");
                report::write_predictions(&tmp, name, &reports)?;
                append_without_header(&path, &tmp)?;
            }
        }
        if first {
            report::write_predictions(&path, "epk", &[])?;
        }
        Ok(())
    })?;

    if let Some(study) = &cfg.align {
        clock.time("align", || {
            let mut buf = Vec::new();
            let x = resolve_point(&study.point, &test, &mut buf)?;
            let recs = pk.alignment_error(x, Quadrature { rule: cfg.rule, steps: study.steps })?;
            report::write_alignment(&out.path("align.csv"), &recs)
        })?;
    }
    if let Some(study) = &cfg.contrib {
        clock.time("contrib", || {
            let mut buf = Vec::new();
            let x = resolve_point(&study.point, &test, &mut buf)?;
            let c = pk.kernel_contributions(x, Quadrature { rule: cfg.rule, steps: study.steps })?;
            report::write_contributions(&out.path("contrib.csv"), &train, x, &c)
        })?;
    }
    if let Some(study) = &cfg.pathdiag {
        clock.time("pathdiag", || {
            let recs = pk.weight_path_diagnostic(study.resolution)?;
            report::write_path_diagnostic(&out.path("pathdiag.csv"), &recs)
        })?;
    }
    if let Some(study) = &cfg.gp {
        clock.time("gp", || {
            let points = crate::commands::grid_points(&study.grid, train.dim())?;
            let field_cfg = FieldConfig {
                quadrature: Quadrature { rule: cfg.rule, steps: study.steps },
                train_points: study.train_points,
                kriging: KrigingOptions {
                    jitter: study.jitter,
                    ..Default::default()
                },
                targets: study.targets,
                mc_samples: study.mc_samples,
                seed: study.seed,
            };
            let field = gp::posterior_field(&pk, points, &field_cfg)?;
            report::write_field(&out.path("field.csv"), &field)?;
            report::write_json(&out.path("field.meta.json"), &field_metadata(&field))
        })?;
    }

    let correct = (0..train.len())
        .filter(|&i| {
            nn::forward(&traj.spec, traj.last(), train.x(i)).map(|l| l.argmax() == train.label(i)).unwrap_or(false)
        })
        .count();
    let manifest_path = out.path("manifest.json");
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        output_dir: out.dir.clone(),
        config: cfg.clone(),
        model: format!(
            "dense network, widths {:?}, relu hidden layers, {:?} head",
            traj.spec.layers, traj.spec.head
        ),
        train_seed: cfg.train.seed,
        data_seed: match &cfg.data {
            DataSource::Blobs { spec } => Some(spec.seed),
            _ => None,
        },
        train_fingerprint: train.fingerprint().to_hex(),
        test_fingerprint: test.fingerprint().to_hex(),
        train_accuracy: correct as f64 / train.len() as f64,
        max_abs_err: refinement,
        max_step_reconstruction_error: max_recon,
        files: out.files.clone(),
        wall_clock: clock.times,
    };
    report::write_json(&manifest_path, &manifest).map_err(|e| CliError::stage("manifest", e))?;
    Ok(manifest)
}

fn append_without_header(dst: &Path, part: &Path) -> Result<()> {
    fn io(p: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
        move |e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }
    }
    let text = fs::read_to_string(part).map_err(io(part))?;
    let body = text.split_once('\n').map_or("", |(_, rest)| rest);
    let mut file = fs::OpenOptions::new().append(true).open(dst).map_err(io(dst))?;
    std::io::Write::write_all(&mut file, body.as_bytes()).map_err(io(dst))?;
    fs::remove_file(part).map_err(io(part))
}

#[derive(Debug, Serialize)]
pub struct FieldMetadata {
    pub quadrature: Quadrature,
    pub targets: Targets,
    pub prior_mean: Vec<f64>,
    pub jitter_used: Vec<f64>,
    pub train_indices: Vec<usize>,
    pub mc_samples: usize,
    pub seed: u64,
}

pub fn field_metadata(f: &PosteriorField) -> FieldMetadata {
    FieldMetadata {
        quadrature: f.quadrature,
        targets: f.targets,
        prior_mean: f.prior_mean.clone(),
        jitter_used: f.posterior.jitter_used.clone(),
        train_indices: f.train_indices.clone(),
        mc_samples: f.mc_samples,
        seed: f.seed,
    }
}
