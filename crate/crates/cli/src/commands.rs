use std::fs;
use std::path::Path;

use epk_core::data::{self, BlobSpec};
use epk_core::gp::{self, FieldConfig, GridSpec, Jitter, KrigingOptions, Targets};
use epk_core::kernel::{Method, Rule};
use epk_core::{report, Error, LabeledDataset, PathKernel, Quadrature, Result, TrainConfig, Trajectory};

use crate::args::*;
use crate::CliError;

pub fn dispatch(command: Command) -> std::result::Result<(), CliError> {
    let done = match command {
        Command::Data(DataCommand::GenBlobs(a)) => gen_blobs(&a),
        Command::Data(DataCommand::Mnist(a)) => mnist(&a),
        Command::Train(a) => train(&a),
        Command::Predict(a) => predict(&a),
        Command::Compare(a) => compare(&a),
        Command::Align(a) => align(&a),
        Command::Gram(a) => gram(&a),
        Command::Gp(a) => gp_field(&a),
        Command::Contrib(a) => contrib(&a),
        Command::Pathdiag(a) => pathdiag(&a),
        Command::Run(a) => {
            let manifest = crate::experiment::run_from_file(&a.config, a.out_dir.as_deref())?;
            println!("{}", manifest.output_dir.display());
            Ok(())
        }
    };
    done.map_err(CliError::from)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn gen_blobs(a: &GenBlobsArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => read_json::<BlobSpec>(p)?,
        None => {
            let mut s = BlobSpec::toy(a.seed);
            if let Some(n) = a.per_class {
                s.per_class_count = n;
            }
            s
        }
    };
    data::gen_blobs(&spec)?.write_csv(&a.out)
}

fn mnist(a: &MnistArgs) -> Result<()> {
    data::load_mnist_slice(&a.images, &a.labels, a.skip_per_class, a.per_class, a.downsample)?.write_csv(&a.out)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg: TrainConfig = read_json(&a.config)?;
    cfg.validate()?;
    let data = LabeledDataset::read_csv(&a.data, Some(cfg.model.num_classes()))?;
    cfg.train(&data)?.save(&a.out)
}

pub fn quadrature(rule: RuleArg, steps: usize) -> Quadrature {
    Quadrature {
        rule: match rule {
            RuleArg::Left => Rule::Left,
            RuleArg::Midpoint => Rule::Midpoint,
        },
        steps,
    }
}

/// Trajectory plus the training set it was fitted on.
struct Loaded {
    traj: Trajectory,
    data: LabeledDataset,
}

impl Loaded {
    fn open(k: &KernelInputs) -> Result<Self> {
        let traj = Trajectory::load(&k.traj)?;
        let data = LabeledDataset::read_csv(&k.data, Some(traj.spec.num_classes()))?;
        Ok(Loaded { traj, data })
    }

    fn kernel(&self) -> Result<PathKernel<'_>> {
        PathKernel::new(&self.traj, &self.data)
    }
}

/// Query rows from a CSV with or without a label column.
pub fn read_inputs(path: &Path, dim: usize) -> Result<Vec<f64>> {
    let (d, values, _) = data::read_points(path)?;
    if d != dim {
        return Err(Error::Input(format!(
            "{}: points have dimension {d}, model expects {dim}",
            path.display()
        )));
    }
    Ok(values)
}

fn method(m: MethodArg, quad: Quadrature) -> Method {
    match m {
        MethodArg::Epk => Method::Epk(quad),
        MethodArg::Dpk => Method::Dpk,
        MethodArg::Ntk0 => Method::Ntk0,
        MethodArg::NtkN => Method::NtkN,
    }
}

fn predict(a: &PredictArgs) -> Result<()> {
    let l = Loaded::open(&a.kernel)?;
    let pk = l.kernel()?;
    let pts = read_inputs(&a.inputs, l.data.dim())?;
    let queries: Vec<&[f64]> = pts.chunks(l.data.dim()).collect();
    let m = method(a.method, quadrature(a.rule, a.steps));
    let reports = pk.predict(&queries, m)?;
    report::write_predictions(&a.out, m.name(), &reports)
}

fn compare(a: &CompareArgs) -> Result<()> {
    let l = Loaded::open(&a.kernel)?;
    let pk = l.kernel()?;
    let pts = read_inputs(&a.inputs, l.data.dim())?;
    let queries: Vec<&[f64]> = pts.chunks(l.data.dim()).collect();
    let mut rows = Vec::new();
    for &t in &a.steps {
        let reports = pk.predict(&queries, Method::Epk(quadrature(a.rule, t)))?;
        rows.extend(reports.into_iter().enumerate());
    }
    report::write_compare(&a.out, &rows)
}

fn point<'a>(pts: &'a [f64], dim: usize, index: usize, path: &Path) -> Result<&'a [f64]> {
    pts.chunks(dim).nth(index).ok_or_else(|| {
        Error::Input(format!("{}: no point with index {index}", path.display()))
    })
}

fn align(a: &PointArgs) -> Result<()> {
    let l = Loaded::open(&a.kernel)?;
    let pk = l.kernel()?;
    let pts = read_inputs(&a.inputs, l.data.dim())?;
    let x = point(&pts, l.data.dim(), a.point, &a.inputs)?;
    report::write_alignment(&a.out, &pk.alignment_error(x, quadrature(a.rule, a.steps))?)
}

fn contrib(a: &PointArgs) -> Result<()> {
    let l = Loaded::open(&a.kernel)?;
    let pk = l.kernel()?;
    let pts = read_inputs(&a.inputs, l.data.dim())?;
    let x = point(&pts, l.data.dim(), a.point, &a.inputs)?;
    let c = pk.kernel_contributions(x, quadrature(a.rule, a.steps))?;
    report::write_contributions(&a.out, &l.data, x, &c)
}

fn gram(a: &GramArgs) -> Result<()> {
    let l = Loaded::open(&a.kernel)?;
    let pk = l.kernel()?;
    let pts = read_inputs(&a.points, l.data.dim())?;
    let queries: Vec<&[f64]> = pts.chunks(l.data.dim()).collect();
    let g = pk.symmetric_gram(&queries, &queries, quadrature(a.rule, a.steps))?;
    report::write_gram(&a.out, &g)?;
    if let Some(path) = &a.report {
        report::write_json(path, &gp::check_psd(&g)?)?;
    }
    Ok(())
}

pub fn grid_points(grid: &str, dim: usize) -> Result<Vec<f64>> {
    match grid.parse::<GridSpec>() {
        Ok(spec) => spec.embed(dim),
        Err(parse_err) => {
            let path = Path::new(grid);
            if path.exists() {
                read_inputs(path, dim)
            } else {
                Err(parse_err)
            }
        }
    }
}

fn gp_field(a: &GpArgs) -> Result<()> {
    let l = Loaded::open(&a.kernel)?;
    let pk = l.kernel()?;
    let points = grid_points(&a.grid, l.data.dim())?;
    let cfg = FieldConfig {
        quadrature: quadrature(a.rule, a.steps),
        train_points: a.train_points,
        kriging: KrigingOptions {
            jitter: match a.jitter_abs {
                Some(v) => Jitter::Absolute(v),
                None => Jitter::Relative(a.jitter),
            },
            ..Default::default()
        },
        targets: match a.targets {
            TargetArg::Labels => Targets::Labels {
                smoothing: a.label_smoothing,
            },
            TargetArg::Model => Targets::Model,
        },
        mc_samples: a.mc_samples,
        seed: a.seed,
    };
    let field = gp::posterior_field(&pk, points, &cfg)?;
    report::write_field(&a.out, &field)?;
    report::write_json(&a.out.with_extension("meta.json"), &crate::experiment::field_metadata(&field))
}

fn pathdiag(a: &PathdiagArgs) -> Result<()> {
    let l = Loaded::open(&a.kernel)?;
    let pk = l.kernel()?;
    report::write_path_diagnostic(&a.out, &pk.weight_path_diagnostic(a.resolution)?)
}
