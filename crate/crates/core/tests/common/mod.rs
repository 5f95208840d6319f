#![allow(dead_code)]

use epk_core::data::{gen_blobs, BlobSpec};
use epk_core::nn::{Head, ModelSpec};
use epk_core::trainer::train_full_batch;
use epk_core::{LabeledDataset, Loss, StepSchedule, Trajectory};

pub fn small_blobs(seed: u64, per_class: usize) -> LabeledDataset {
    gen_blobs(&BlobSpec {
        means: vec![vec![1.0, 2.0], vec![2.0, -1.0], vec![-1.5, 0.5]],
        std: 0.7,
        per_class_count: per_class,
        dim: 4,
        seed,
    })
    .unwrap()
}

pub fn small_mlp() -> ModelSpec {
    ModelSpec::mlp(&[4, 5, 3])
}

pub fn linear_model() -> ModelSpec {
    ModelSpec {
        layers: vec![4, 3],
        head: Head::Linear,
        ..ModelSpec::mlp(&[4, 3])
    }
}

pub fn train(spec: &ModelSpec, data: &LabeledDataset, lr: StepSchedule, steps: usize, loss: Loss) -> Trajectory {
    train_full_batch(spec, data, &lr, steps, 3, loss).unwrap()
}

pub fn small_run(steps: usize) -> (LabeledDataset, Trajectory) {
    let data = small_blobs(1, 8);
    let traj = train(&small_mlp(), &data, StepSchedule::Constant(0.2), steps, Loss::Nll);
    (data, traj)
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub mod oracles {
    use epk_core::nn::{forward, forward_with_jacobian, min_abs_preactivation, FlatWeights, Head, ModelSpec};
    use epk_core::rng::{generator, uniform};

    pub const FD_STEP: f64 = 1e-5;
    pub const FD_REL_TOL: f64 = 1e-5;
    pub const KINK_MARGIN: f64 = 1e-3;

    /// A random architecture, weights and input drawn from `seed`.
    pub fn random_case(seed: u64) -> (ModelSpec, FlatWeights, Vec<f64>) {
        let mut g = generator(seed, 17);
        let pick = |g: &mut _, lo: usize, hi: usize| lo + (uniform(g, 0.0, (hi - lo + 1) as f64) as usize).min(hi - lo);
        let d = pick(&mut g, 1, 6);
        let k = pick(&mut g, 2, 4);
        let depth = pick(&mut g, 0, 2);
        let mut layers = vec![d];
        for _ in 0..depth {
            layers.push(pick(&mut g, 1, 6));
        }
        layers.push(k);
        let head = if seed % 4 == 3 { Head::Linear } else { Head::LogSoftmax };
        let spec = ModelSpec {
            head,
            ..ModelSpec::mlp(&layers)
        };
        let w = FlatWeights {
            values: (0..spec.num_weights()).map(|_| uniform(&mut g, -1.0, 1.0)).collect(),
        };
        let x = (0..d).map(|_| uniform(&mut g, -2.0, 2.0)).collect();
        (spec, w, x)
    }

    /// Worst relative gap between the analytic Jacobian and central
    /// differences, or `None` when the input sits too close to a ReLU kink.
    pub fn fd_relative_error(seed: u64) -> Option<f64> {
        let (spec, w, x) = random_case(seed);
        if min_abs_preactivation(&spec, &w, &x).unwrap() < KINK_MARGIN {
            return None;
        }
        let (_, jac) = forward_with_jacobian(&spec, &w, &x).unwrap();
        let mut worst: f64 = 0.0;
        for j in 0..w.len() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus.values[j] += FD_STEP;
            minus.values[j] -= FD_STEP;
            let fp = forward(&spec, &plus, &x).unwrap().values;
            let fm = forward(&spec, &minus, &x).unwrap().values;
            for k in 0..spec.num_classes() {
                let fd = (fp[k] - fm[k]) / (2.0 * FD_STEP);
                let an = jac.row(k)[j];
                worst = worst.max((fd - an).abs() / an.abs().max(1.0));
            }
        }
        Some(worst)
    }

    /// The first `n` kink-free cases as `(seed, worst relative error)`.
    pub fn fd_cases(n: usize) -> Vec<(u64, f64)> {
        (1..).filter_map(|s| fd_relative_error(s).map(|e| (s, e))).take(n).collect()
    }

    /// Standard deviation of `σ(u)` for `u ~ N(0, var)` by the trapezoid rule.
    pub fn logistic_std(var: f64) -> f64 {
        let sd = var.sqrt();
        let (lo, hi, n) = (-12.0 * sd, 12.0 * sd, 200_000);
        let h = (hi - lo) / n as f64;
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..=n {
            let u = lo + h * i as f64;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let pdf = (-u * u / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            let s = 1.0 / (1.0 + (-u).exp());
            m1 += w * h * pdf * s;
            m2 += w * h * pdf * s * s;
        }
        (m2 - m1 * m1).sqrt()
    }
}
