//! Gram matrices, positive semi-definiteness checks and Gaussian-process
//! regression on a kernel.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelBlock, PathKernel, Quadrature};
use crate::rng;

/// Flat `[n K x m K]` row-major view of the `[n x m]` grid of `[K x K]`
/// blocks: row `i K + a`, column `j K + b` holds block `(i, j)` entry `(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub rows: usize,
    pub cols: usize,
    pub classes: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    pub fn from_flat(rows: usize, cols: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols * classes * classes {
            return Err(Error::Config(format!(
                "Gram matrix of {rows}x{cols} blocks of size {classes} needs {} values, got {}",
                rows * cols * classes * classes,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let width = cols * classes;
            return Err(Error::NonFiniteBlock {
                row: pos / width / classes.max(1),
                col: pos % width / classes.max(1),
            });
        }
        Ok(GramMatrix {
            rows,
            cols,
            classes,
            values,
        })
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn flat_rows(&self) -> usize {
        self.rows * self.classes
    }

    pub fn flat_cols(&self) -> usize {
        self.cols * self.classes
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.flat_cols() + c]
    }

    pub fn block(&self, i: usize, j: usize) -> Vec<f64> {
        let k = self.classes;
        let mut out = Vec::with_capacity(k * k);
        for a in 0..k {
            for b in 0..k {
                out.push(self.get(i * k + a, j * k + b));
            }
        }
        out
    }

    /// The `[rows x cols]` scalar kernel between outputs `a` and `b`.
    pub fn class_matrix(&self, a: usize, b: usize) -> DMatrix<f64> {
        let k = self.classes;
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i * k + a, j * k + b))
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.flat_rows(), self.flat_cols(), &self.values)
    }
}

/// Gram matrix of an arbitrary block kernel. Refuses non-finite blocks.
pub fn gram<P, F>(a: &[P], b: &[P], classes: usize, mut kernel: F) -> Result<GramMatrix>
where
    F: FnMut(&P, &P) -> Result<Vec<f64>>,
{
    let k = classes;
    let width = b.len() * k;
    let mut values = vec![0.0; a.len() * k * width];
    for (i, pa) in a.iter().enumerate() {
        for (j, pb) in b.iter().enumerate() {
            let block = kernel(pa, pb)?;
            if block.len() != k * k {
                return Err(Error::Config(format!(
                    "kernel returned {} values, expected {}",
                    block.len(),
                    k * k
                )));
            }
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteBlock { row: i, col: j });
            }
            for r in 0..k {
                let dst = (i * k + r) * width + j * k;
                values[dst..dst + k].copy_from_slice(&block[r * k..(r + 1) * k]);
            }
        }
    }
    GramMatrix::from_flat(a.len(), b.len(), k, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsdReport {
    pub min_eig: f64,
    pub max_eig: f64,
    /// `max |G - Gᵀ| / max |G|`.
    pub symmetric_defect: f64,
    pub pass: bool,
}

pub const PSD_SYMMETRY_TOL: f64 = 1e-8;
pub const PSD_EIGEN_TOL: f64 = 1e-8;

/// Eigenvalue check of the symmetrised matrix. Passes when the symmetry
/// defect is at most `1e-8` and `min_eig >= -1e-8 |max_eig|`.
pub fn check_psd(g: &GramMatrix) -> Result<PsdReport> {
    if g.flat_rows() != g.flat_cols() {
        return Err(Error::Input(format!(
            "PSD check needs a square matrix, got {}x{}",
            g.flat_rows(),
            g.flat_cols()
        )));
    }
    let m = g.to_matrix();
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let asym = (&m - m.transpose()).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let symmetric_defect = if scale > 0.0 { asym / scale } else { 0.0 };
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let (min_eig, max_eig) = if eig.is_empty() {
        (0.0, 0.0)
    } else {
        (eig.min(), eig.max())
    };
    let pass = symmetric_defect <= PSD_SYMMETRY_TOL && min_eig >= -PSD_EIGEN_TOL * max_eig.abs();
    Ok(PsdReport {
        min_eig,
        max_eig,
        symmetric_defect,
        pass,
    })
}

/// Diagonal regulariser added before factorisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Jitter {
    /// Multiple of the mean diagonal.
    Relative(f64),
    Absolute(f64),
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter::Relative(1e-8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrigingOptions {
    pub jitter: Jitter,
    /// Doubling stops once the jitter exceeds this multiple of the mean diagonal.
    pub max_relative: f64,
    /// Negative variances below `-variance_tol max(1, prior variance)` are errors;
    /// smaller ones are clamped to zero.
    pub variance_tol: f64,
}

impl Default for KrigingOptions {
    fn default() -> Self {
        KrigingOptions {
            jitter: Jitter::default(),
            max_relative: 1e-2,
            variance_tol: 1e-10,
        }
    }
}

/// Posterior mean and variance of every output at every query point.
/// Outputs are modelled as independent processes with covariance given by
/// the diagonal kernel entries.
#[derive(Debug, Clone, PartialEq)]
pub struct KrigingResult {
    pub queries: usize,
    pub classes: usize,
    /// `[G x K]`.
    pub mean: Vec<f64>,
    /// `[G x K]`.
    pub variance: Vec<f64>,
    /// `[G]` sum of the per-output variances.
    pub total_variance: Vec<f64>,
    /// Per output, the jitter that made the factorisation succeed.
    pub jitter_used: Vec<f64>,
}

/// Simple kriging with known prior mean.
///
/// `g_tt` is the training Gram, `g_qt` the query-by-training Gram,
/// `query_self` the `K(x_q, x_q)` blocks, `targets` `[n x K]` observed
/// values, and `prior_mean` one constant per output.
pub fn kriging(
    g_tt: &GramMatrix,
    g_qt: &GramMatrix,
    query_self: &[KernelBlock],
    targets: &[f64],
    prior_mean: &[f64],
    opts: &KrigingOptions,
) -> Result<KrigingResult> {
    let k = g_tt.classes;
    let n = g_tt.rows;
    let nq = g_qt.rows;
    if g_tt.cols != n || g_qt.cols != n || g_qt.classes != k {
        return Err(Error::Config("inconsistent Gram matrix shapes for kriging".into()));
    }
    if query_self.len() != nq || targets.len() != n * k || prior_mean.len() != k {
        return Err(Error::Config("kriging inputs disagree on sizes".into()));
    }
    let mut mean = vec![0.0; nq * k];
    let mut variance = vec![0.0; nq * k];
    let mut jitter_used = Vec::with_capacity(k);
    for c in 0..k {
        let a = g_tt.class_matrix(c, c);
        let (chol, lambda) = factor_with_jitter(&a, opts)?;
        jitter_used.push(lambda);
        let r = DVector::from_fn(n, |i, _| targets[i * k + c] - prior_mean[c]);
        let alpha = chol.solve(&r);
        let cross = g_qt.class_matrix(c, c);
        let l = chol.l();
        for q in 0..nq {
            let g = cross.row(q).transpose();
            mean[q * k + c] = prior_mean[c] + g.dot(&alpha);
            let v = l
                .solve_lower_triangular(&g)
                .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
            let prior = query_self[q].get(c, c);
            let var = prior - v.norm_squared();
            if var < -opts.variance_tol * prior.abs().max(1.0) {
                return Err(Error::Numerical(format!(
                    "negative posterior variance {var:e} at query {q}, output {c}"
                )));
            }
            variance[q * k + c] = var.max(0.0);
        }
    }
    let total_variance = variance.chunks(k).map(|v| v.iter().sum()).collect();
    Ok(KrigingResult {
        queries: nq,
        classes: k,
        mean,
        variance,
        total_variance,
        jitter_used,
    })
}

fn factor_with_jitter(a: &DMatrix<f64>, opts: &KrigingOptions) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let n = a.nrows();
    let mean_diag = if n == 0 { 0.0 } else { a.diagonal().sum() / n as f64 };
    let ceiling = opts.max_relative * mean_diag.abs();
    let mut lambda = match opts.jitter {
        Jitter::Relative(r) => r * mean_diag.abs(),
        Jitter::Absolute(v) => v,
    };
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("jitter must be non-negative, got {lambda}")));
    }
    loop {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += lambda;
        }
        if let Some(c) = shifted.cholesky() {
            return Ok((c, lambda));
        }
        lambda = if lambda == 0.0 { 1e-16 * mean_diag.abs().max(f64::MIN_POSITIVE) } else { 2.0 * lambda };
        if lambda > ceiling {
            return Err(Error::Numerical(format!(
                "Gram matrix not factorisable with jitter up to {ceiling:e}"
            )));
        }
    }
}

/// Monte-Carlo standard deviation of softmax probabilities under
/// independent Gaussian logits. Point `g` uses PCG stream `g`, so results
/// do not depend on how points are batched.
pub fn mc_prob_std(mean: &[f64], variance: &[f64], classes: usize, samples: usize, seed: u64) -> Result<Vec<f64>> {
    if samples < 2 {
        return Err(Error::Input("Monte-Carlo estimate needs at least 2 samples".into()));
    }
    if classes == 0 || mean.len() != variance.len() || mean.len() % classes != 0 {
        return Err(Error::Config("mean and variance must be [G x K]".into()));
    }
    if variance.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Input("variances must be non-negative".into()));
    }
    let k = classes;
    let mut out = Vec::with_capacity(mean.len());
    let mut z = vec![0.0; k];
    for (g, (mu, var)) in mean.chunks(k).zip(variance.chunks(k)).enumerate() {
        let mut r = rng::generator(seed, g as u64);
        let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let mut avg = vec![0.0; k];
        let mut m2 = vec![0.0; k];
        for n in 0..samples {
            for c in 0..k {
                z[c] = mu[c] + sd[c] * rng::standard_normal(&mut r);
            }
            softmax_in_place(&mut z);
            let count = (n + 1) as f64;
            for c in 0..k {
                let d = z[c] - avg[c];
                avg[c] += d / count;
                m2[c] += d * (z[c] - avg[c]);
            }
        }
        out.extend(m2.iter().map(|v| (v / (samples - 1) as f64).sqrt()));
    }
    Ok(out)
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

/// Axis-aligned 2-D grid, parsed from `"x0:x1:nx,y0:y1:ny"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x: (f64, f64, usize),
    pub y: (f64, f64, usize),
}

impl std::str::FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let axis = |part: &str| -> Result<(f64, f64, usize)> {
            let bad = || Error::Input(format!("bad grid axis '{part}', expected lo:hi:n"));
            let f: Vec<&str> = part.trim().split(':').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let lo: f64 = f[0].parse().map_err(|_| bad())?;
            let hi: f64 = f[1].parse().map_err(|_| bad())?;
            let n: usize = f[2].parse().map_err(|_| bad())?;
            if !lo.is_finite() || !hi.is_finite() || n == 0 || (n > 1 && !(hi > lo)) {
                return Err(bad());
            }
            Ok((lo, hi, n))
        };
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 2 {
            return Err(Error::Input(format!("bad grid '{s}', expected x0:x1:nx,y0:y1:ny")));
        }
        Ok(GridSpec {
            x: axis(parts[0])?,
            y: axis(parts[1])?,
        })
    }
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.x.2 * self.y.2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points placed in the first two of `dim` coordinates, the rest zero.
    pub fn embed(&self, dim: usize) -> Result<Vec<f64>> {
        if dim < 2 {
            return Err(Error::Input(format!("a 2-D grid needs inputs of dimension >= 2, got {dim}")));
        }
        let mut out = Vec::with_capacity(dim * self.len());
        for p in self.points().chunks(2) {
            out.extend_from_slice(p);
            out.extend(std::iter::repeat(0.0).take(dim - 2));
        }
        Ok(out)
    }

    /// Points in row-major order (`y` outer, `x` inner), `[G x 2]`.
    pub fn points(&self) -> Vec<f64> {
        let ax = |(lo, hi, n): (f64, f64, usize), i: usize| {
            if n == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(2 * self.len());
        for j in 0..self.y.2 {
            for i in 0..self.x.2 {
                out.push(ax(self.x, i));
                out.push(ax(self.y, j));
            }
        }
        out
    }
}

/// Observed values the process is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Targets {
    /// `log((1 - α) y + α / K)` for one-hot `y`.
    Labels { smoothing: f64 },
    /// Final model logits.
    Model,
}

impl Default for Targets {
    fn default() -> Self {
        Targets::Labels { smoothing: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConfig {
    pub quadrature: Quadrature,
    /// Observations, spread evenly over the training set.
    pub train_points: usize,
    pub kriging: KrigingOptions,
    pub targets: Targets,
    pub mc_samples: usize,
    pub seed: u64,
}

/// Posterior over a set of query points, ready for tabulation.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorField {
    pub dim: usize,
    /// `[G x dim]`.
    pub points: Vec<f64>,
    pub posterior: KrigingResult,
    /// `[G x K]`.
    pub mc_prob_std: Vec<f64>,
    /// `[G]` mean over the observations of `trace K(x, x_i) / K`.
    pub kernel_value: Vec<f64>,
    /// Training indices used as observations.
    pub train_indices: Vec<usize>,
    /// Prior mean, the initial model's constant output.
    pub prior_mean: Vec<f64>,
    pub targets: Targets,
    pub quadrature: Quadrature,
    pub mc_samples: usize,
    pub seed: u64,
}

/// `n` indices spread evenly over `0..m`.
pub fn spread_indices(m: usize, n: usize) -> Vec<usize> {
    let n = n.min(m);
    (0..n).map(|j| j * m / n).collect()
}

/// Conditions the path-kernel process on a subset of the training set and
/// evaluates it at `points` (`[G x D]`). The prior mean is the initial
/// model's constant output.
pub fn posterior_field(pk: &PathKernel<'_>, points: Vec<f64>, cfg: &FieldConfig) -> Result<PosteriorField> {
    let traj = pk.trajectory();
    let data = pk.data();
    let dim = data.dim();
    let k = data.classes();
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Input(format!("query points do not have dimension {dim}")));
    }
    if cfg.train_points == 0 {
        return Err(Error::Input("posterior field needs at least one observation".into()));
    }
    let train_indices = spread_indices(data.len(), cfg.train_points);
    let train: Vec<&[f64]> = train_indices.iter().map(|&i| data.x(i)).collect();
    let queries: Vec<&[f64]> = points.chunks(dim).collect();
    let prior_mean = crate::nn::forward(&traj.spec, traj.initial(), data.x(0))?.values;
    let mut targets = Vec::with_capacity(train.len() * k);
    for (&i, x) in train_indices.iter().zip(&train) {
        match cfg.targets {
            Targets::Labels { smoothing } => {
                if !(0.0..1.0).contains(&smoothing) || smoothing == 0.0 {
                    return Err(Error::Config(format!("label smoothing must lie in (0, 1), got {smoothing}")));
                }
                targets.extend(data.y(i).iter().map(|y| ((1.0 - smoothing) * y + smoothing / k as f64).ln()));
            }
            Targets::Model => targets.extend(crate::nn::forward(&traj.spec, traj.last(), x)?.values),
        }
    }
    let g_tt = pk.symmetric_gram(&train, &train, cfg.quadrature)?;
    let g_qt = pk.symmetric_gram(&queries, &train, cfg.quadrature)?;
    let selfs = pk.self_blocks(&queries, cfg.quadrature)?;
    let posterior = kriging(&g_tt, &g_qt, &selfs, &targets, &prior_mean, &cfg.kriging)?;
    let mc = mc_prob_std(&posterior.mean, &posterior.variance, k, cfg.mc_samples, cfg.seed)?;
    Ok(PosteriorField {
        dim,
        points,
        kernel_value: mean_kernel_value(&g_qt),
        posterior,
        mc_prob_std: mc,
        train_indices,
        prior_mean,
        targets: cfg.targets,
        quadrature: cfg.quadrature,
        mc_samples: cfg.mc_samples,
        seed: cfg.seed,
    })
}

/// Mean normalised trace of each row of query-by-training blocks.
pub fn mean_kernel_value(g_qt: &GramMatrix) -> Vec<f64> {
    let k = g_qt.classes;
    (0..g_qt.rows)
        .map(|q| {
            let total: f64 = (0..g_qt.cols)
                .map(|j| (0..k).map(|a| g_qt.get(q * k + a, j * k + a)).sum::<f64>())
                .sum();
            total / (k * g_qt.cols.max(1)) as f64
        })
        .collect()
}
