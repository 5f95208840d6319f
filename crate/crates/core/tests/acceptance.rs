//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! with the achieved value and exits non-zero if any fails.
//!
//! CSVs are left under `$CARGO_TARGET_TMPDIR/acceptance` for plotting.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::oracles;
use epk_core::data::{gen_blobs, load_mnist, load_mnist_slice, BlobSpec};
use epk_core::gp::{check_psd, kriging, mc_prob_std, spread_indices, Jitter, KrigingOptions};
use epk_core::kernel::{Method, PathKernel, Quadrature};
use epk_core::nn::{forward, Head, ModelSpec};
use epk_core::{report, Error, LabeledDataset, Loss, PredictionReport, StepSchedule, TrainConfig, Trajectory};

const TOY_STEPS: usize = 300;
const TOY_LR: f64 = 0.04;
const TOY_TOL: f64 = 1e-3;
const RECON_TOL: f64 = 1e-12;
const SYM_TOL: f64 = 1e-8;
const EIG_TOL: f64 = 1e-8;
const KRIGING_VAR_TOL: f64 = 1e-6;
const KRIGING_JITTER: f64 = 1e-10;
const MC_TOL: f64 = 0.01;
const LINEAR_TOL: f64 = 1e-10;

type Outcome = Result<(bool, String), Error>;

struct Harness {
    failures: usize,
}

impl Harness {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            self.failures += 1;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {detail} [{:.1}s]", start.elapsed().as_secs_f64());
    }
}

fn out_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn toy_config(loss: Loss, steps: usize) -> TrainConfig {
    TrainConfig {
        model: ModelSpec::mlp(&[100, 8, 3]),
        lr: StepSchedule::Constant(TOY_LR),
        steps,
        seed: 0,
        loss,
    }
}

/// Held-out toy points: a second draw of the same classes, spread over all three.
fn toy_test() -> LabeledDataset {
    let test = gen_blobs(&BlobSpec {
        per_class_count: 34,
        ..BlobSpec::toy(1)
    })
    .unwrap();
    test.subset(&spread_indices(test.len(), 100)).unwrap()
}

fn points(d: &LabeledDataset) -> Vec<&[f64]> {
    (0..d.len()).map(|i| d.x(i)).collect()
}

fn max_err(reports: &[PredictionReport]) -> f64 {
    reports.iter().map(|r| r.max_abs_err).fold(0.0, f64::max)
}

fn max_recon(pk: &PathKernel) -> Result<f64, Error> {
    Ok(pk.step_reconstruction_errors()?.into_iter().fold(0.0, f64::max))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn enumerate(reports: Vec<PredictionReport>) -> Vec<(usize, PredictionReport)> {
    reports.into_iter().enumerate().collect()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn main() {
    let mut h = Harness { failures: 0 };
    let dir = out_dir();
    let mut recon = Vec::new();

    let toy = gen_blobs(&BlobSpec::toy(0)).unwrap();
    let test = toy_test();
    let traj = toy_config(Loss::Nll, TOY_STEPS).train(&toy).unwrap();
    let pk = PathKernel::new(&traj, &toy).unwrap();
    recon.push(("toy", max_recon(&pk)));
    let queries = points(&test);
    let toy_quad = Quadrature::left(100);

    let mut toy_reports = Vec::new();
    h.check("toy exactness (T=100, 100 held-out points)", || {
        let reports = pk.predict(&queries, Method::Epk(toy_quad))?;
        let err = max_err(&reports);
        report::write_compare(&dir.join("toy_compare.csv"), &enumerate(reports.clone()))?;
        let dpk = pk.predict(&queries, Method::Dpk)?;
        toy_reports = reports;
        Ok((
            err <= TOY_TOL,
            format!("max_abs_err={err:.3e} (bound {TOY_TOL:e}; single-step kernel gives {:.3e})", max_err(&dpk)),
        ))
    });

    h.check("quadrature refinement on digits (T=1,10,200)", || {
        let train = load_mnist(&fixture("digits-images.idx"), &fixture("digits-labels.idx"), 50, Some(14))?;
        let held = load_mnist_slice(&fixture("digits-images.idx"), &fixture("digits-labels.idx"), 50, 1, Some(14))?;
        let cfg = TrainConfig {
            model: ModelSpec::mlp(&[196, 8, 10]),
            lr: StepSchedule::Constant(0.5),
            steps: 300,
            seed: 0,
            loss: Loss::Nll,
        };
        let traj = cfg.train(&train)?;
        let pk = PathKernel::new(&traj, &train)?;
        recon.push(("digits", max_recon(&pk)));
        let q = points(&held);
        let mut errs = Vec::new();
        let mut rows = Vec::new();
        let mut t1 = Vec::new();
        for t in [1, 10, 200] {
            let reports = pk.predict(&q, Method::Epk(Quadrature::left(t)))?;
            errs.push(max_err(&reports));
            if t == 1 {
                t1 = reports.clone();
            }
            rows.extend(enumerate(reports));
        }
        report::write_compare(&dir.join("digits_compare.csv"), &rows)?;
        let dpk = pk.predict(&q, Method::Dpk)?;
        let same = t1.iter().zip(&dpk).all(|(a, b)| bits(&a.kernel_logits) == bits(&b.kernel_logits));
        let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
        Ok((
            decreasing && same,
            format!(
                "max_abs_err T=1 {:.3e}, T=10 {:.3e}, T=200 {:.3e}; T=1 equals single-step kernel bit-for-bit: {same}",
                errs[0], errs[1], errs[2]
            ),
        ))
    });

    h.check("reduction to a kernel machine", || {
        let quad = Quadrature::left(10);
        let coeffs = pk.coefficients()?;
        let mut exact = coeffs.constant_flag;
        for i in [0, 41, 99] {
            let machine = pk.reduce_to_kernel_machine(queries[i], quad)?;
            let ensemble = pk.epk_predict(queries[i], quad)?;
            exact &= bits(&machine.predict()) == bits(&ensemble.kernel_logits);
        }
        let sq = toy_config(Loss::SquaredError, 20).train(&toy)?;
        let sq_pk = PathKernel::new(&sq, &toy)?;
        recon.push(("toy squared error", max_recon(&sq_pk)));
        let refused = match sq_pk.reduce_to_kernel_machine(queries[0], quad) {
            Err(e @ Error::ReductionRefused { .. }) => Some(e.to_string()),
            _ => None,
        };
        Ok((
            exact && refused.is_some(),
            format!(
                "log-likelihood machine matches ensemble bit-for-bit on 3 points: {exact}; squared error: {}",
                refused.unwrap_or_else(|| "not refused".into())
            ),
        ))
    });

    h.check("aggregated Gram over 20 held-out toy points", || {
        let pts: Vec<&[f64]> = spread_indices(queries.len(), 20).into_iter().map(|i| queries[i]).collect();
        let g = pk.symmetric_gram(&pts, &pts, Quadrature::left(10))?;
        report::write_gram(&dir.join("toy_gram.csv"), &g)?;
        let r = check_psd(&g)?;
        let pass = r.symmetric_defect <= SYM_TOL && r.min_eig >= -EIG_TOL * r.max_eig;
        Ok((
            pass,
            format!(
                "relative asymmetry {:.1e}, eigenvalues [{:.3e}, {:.3e}]",
                r.symmetric_defect, r.min_eig, r.max_eig
            ),
        ))
    });

    h.check("Jacobian against finite differences (100 cases)", || {
        let cases = oracles::fd_cases(100);
        let worst = cases.iter().map(|c| c.1).fold(0.0, f64::max);
        Ok((
            cases.len() == 100 && worst <= oracles::FD_REL_TOL,
            format!("{} cases, worst relative error {worst:.2e}", cases.len()),
        ))
    });

    h.check("Kriging interpolation and softmax spread", || {
        let idx = spread_indices(toy.len(), 30);
        let train: Vec<&[f64]> = idx.iter().map(|&i| toy.x(i)).collect();
        let quad = Quadrature::left(10);
        let g = pk.symmetric_gram(&train, &train, quad)?;
        let selfs = pk.self_blocks(&train, quad)?;
        let targets: Vec<f64> = idx.iter().flat_map(|&i| toy.y(i).to_vec()).collect();
        let prior = forward(&traj.spec, &traj.checkpoints[0], train[0])?.values;
        let opts = KrigingOptions {
            jitter: Jitter::Absolute(KRIGING_JITTER),
            ..Default::default()
        };
        let post = kriging(&g, &g, &selfs, &targets, &prior, &opts)?;
        let var = post.variance.iter().copied().fold(0.0, f64::max);
        let oracle = oracles::logistic_std(2.0);
        let est = mc_prob_std(&[0.0, 0.0], &[1.0, 1.0], 2, 20_000, 5)?;
        let mc = est.iter().map(|e| (e - oracle).abs()).fold(0.0, f64::max);
        Ok((
            var < KRIGING_VAR_TOL && mc <= MC_TOL,
            format!(
                "max variance at 30 training points {var:.2e} (jitter used {:.1e}); MC std off the quadrature value by {mc:.1e}",
                post.jitter_used.iter().copied().fold(0.0, f64::max)
            ),
        ))
    });

    h.check("alignment gap", || {
        let lin_data = gen_blobs(&BlobSpec {
            per_class_count: 30,
            dim: 10,
            ..BlobSpec::toy(2)
        })?;
        let lin = TrainConfig {
            model: ModelSpec {
                head: Head::Linear,
                ..ModelSpec::mlp(&[10, 3])
            },
            lr: StepSchedule::Constant(0.05),
            steps: 50,
            seed: 0,
            loss: Loss::Nll,
        }
        .train(&lin_data)?;
        let lin_pk = PathKernel::new(&lin, &lin_data)?;
        recon.push(("linear", max_recon(&lin_pk)));
        let x: Vec<f64> = (0..10).map(|j| 0.3 * j as f64 - 1.0).collect();
        let quad = Quadrature::left(3);
        let lin_gap = lin_pk.alignment_error(&x, quad)?.iter().map(|r| r.epk_dpk_gap).fold(0.0, f64::max);
        // An affine model moves by exactly its first-order increment each step.
        let r = lin_pk.epk_predict(&x, quad)?;
        let mut closed = 0.0f64;
        for s in 0..lin.steps() {
            let a = forward(&lin.spec, &lin.checkpoints[s], &x)?.values;
            let b = forward(&lin.spec, &lin.checkpoints[s + 1], &x)?.values;
            for k in 0..3 {
                closed = closed.max((r.per_step_contrib[s * 3 + k] - (b[k] - a[k])).abs());
            }
        }
        let recs = pk.alignment_error(queries[0], toy_quad)?;
        report::write_alignment(&dir.join("toy_align.csv"), &recs)?;
        let toy_gap = recs.iter().map(|r| r.epk_dpk_gap).fold(0.0, f64::max);
        let cum = recs.last().map_or(0.0, |r| r.cum_epk_dpk);
        Ok((
            lin_gap == 0.0 && closed <= LINEAR_TOL && toy_gap > 1e-8,
            format!(
                "linear model gap {lin_gap:e}, closed-form error {closed:.1e}; toy largest per-step gap {toy_gap:.3e}, cumulative {cum:.3e}"
            ),
        ))
    });

    h.check("contributions are not ordered by distance", || {
        let mut x = vec![0.0; 100];
        x[0] = 1.0;
        x[1] = 4.0;
        let c = pk.kernel_contributions(&x, toy_quad)?;
        report::write_contributions(&dir.join("toy_contrib.csv"), &toy, &x, &c)?;
        let class = epk_core::nn::argmax(&c.report.kernel_logits);
        let dist = |i: usize| toy.x(i).iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut order: Vec<(f64, usize)> = (0..toy.len()).map(|i| (dist(i), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Closer point with the smallest contribution so far, against any later one.
        let mut best: Option<(usize, usize, f64)> = None;
        let mut low = order[0].1;
        for &(_, j) in &order[1..] {
            let gap = c.row(j)[class] - c.row(low)[class];
            if gap > 0.0 && best.map_or(true, |b| gap > b.2) {
                best = Some((low, j, gap));
            }
            if c.row(j)[class] < c.row(low)[class] {
                low = j;
            }
        }
        Ok(match best {
            Some((i, j, gap)) => (
                true,
                format!(
                    "class {class}: point {i} (distance {:.2}) contributes {gap:.2e} less than point {j} (distance {:.2})",
                    dist(i).sqrt(),
                    dist(j).sqrt()
                ),
            ),
            None => (false, "contributions fall off monotonically with distance".into()),
        })
    });

    h.check("determinism", || {
        let a = dir.join("toy_a.epk");
        let b = dir.join("toy_b.epk");
        traj.save(&a)?;
        let again = toy_config(Loss::Nll, TOY_STEPS).train(&toy)?;
        again.save(&b)?;
        let same_traj = fs::read(&a).unwrap() == fs::read(&b).unwrap();
        let reloaded = Trajectory::load(&b)?;
        let pk2 = PathKernel::new(&reloaded, &toy)?;
        let first: Vec<&[f64]> = queries[..10].to_vec();
        let rerun = pk2.predict(&first, Method::Epk(toy_quad))?;
        report::write_compare(&dir.join("toy_compare_a.csv"), &enumerate(toy_reports[..10].to_vec()))?;
        report::write_compare(&dir.join("toy_compare_b.csv"), &enumerate(rerun))?;
        report::write_alignment(&dir.join("toy_align_b.csv"), &pk2.alignment_error(queries[0], toy_quad)?)?;
        let same = |x: &str, y: &str| fs::read(dir.join(x)).unwrap() == fs::read(dir.join(y)).unwrap();
        let same_csv = same("toy_compare_a.csv", "toy_compare_b.csv") && same("toy_align.csv", "toy_align_b.csv");
        Ok((
            same_traj && same_csv,
            format!("retrained trajectory identical: {same_traj}; recomputed CSVs identical: {same_csv}"),
        ))
    });

    h.check("step reconstruction on every run", || {
        let mut worst = 0.0f64;
        let mut parts = Vec::new();
        for (name, r) in recon.drain(..) {
            let r = r?;
            worst = worst.max(r);
            parts.push(format!("{name} {r:.1e}"));
        }
        Ok((worst <= RECON_TOL, format!("max ∞-norm error: {}", parts.join(", "))))
    });

    if h.failures > 0 {
        println!("{} acceptance check(s) failed", h.failures);
        std::process::exit(1);
    }
}
