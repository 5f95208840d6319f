//! Exact path kernel.
//!
//! A model trained by full-batch forward Euler from a constant-output
//! initialisation is reproduced as
//!
//! ```text
//! f_{w_N}(x) = b - (1/M) Σ_s ε_s Σ_i ⟨ J̄_s(x), J_s(x_i)ᵀ ∂L/∂f(x_i) ⟩
//! ```
//!
//! where `J_s(x_i)` is the training-point Jacobian at the checkpoint `w_s`
//! and `J̄_s(x)` is the test-point Jacobian averaged along the straight
//! segment from `w_s` to `w_{s+1}`. Training-side Jacobians are always taken
//! at the start of the step; test-side ones move along the segment.
//!
//! Sums over `(s, i)` go through [`ExactSum`], so the ensemble, the reduced
//! kernel machine and the per-train-point contributions all round the same
//! exact total.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, FlatWeights, Jacobian, ModelSpec};
use crate::numeric::{dot, dot_rows, max_abs_diff, ExactSum};
use crate::trainer::Trajectory;

/// `(1 - t) w_s + t w_next`; exact at both endpoints.
pub fn interpolate_weights(w_s: &FlatWeights, w_next: &FlatWeights, t: f64) -> Result<FlatWeights> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("interpolation parameter {t} outside [0, 1]")));
    }
    if w_s.len() != w_next.len() {
        return Err(Error::Config(format!(
            "cannot interpolate weight vectors of length {} and {}",
            w_s.len(),
            w_next.len()
        )));
    }
    Ok(FlatWeights {
        values: w_s
            .values
            .iter()
            .zip(&w_next.values)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Nodes `τ/T`, `τ = 0..T-1`.
    #[default]
    Left,
    /// Nodes `(τ + 1/2)/T`.
    Midpoint,
}

/// Equal-weight quadrature over the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadrature {
    pub rule: Rule,
    pub steps: usize,
}

impl Quadrature {
    pub fn left(steps: usize) -> Self {
        Quadrature {
            rule: Rule::Left,
            steps,
        }
    }

    pub fn midpoint(steps: usize) -> Self {
        Quadrature {
            rule: Rule::Midpoint,
            steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Input("quadrature needs at least one node".into()));
        }
        Ok(())
    }

    pub fn nodes(&self) -> Vec<f64> {
        let t = self.steps as f64;
        (0..self.steps)
            .map(|tau| match self.rule {
                Rule::Left => tau as f64 / t,
                Rule::Midpoint => (tau as f64 + 0.5) / t,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockStep {
    Step(usize),
    Aggregated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMeta {
    pub step: BlockStep,
    pub test_point: usize,
    pub train_point: usize,
}

/// `[K x K]` kernel value between two points: entry `(a, b)` pairs output
/// `a` of the first (test-side) argument with output `b` of the second.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlock {
    pub classes: usize,
    pub values: Vec<f64>,
    pub meta: BlockMeta,
}

impl KernelBlock {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.classes + b]
    }

    pub fn transpose(&self) -> KernelBlock {
        let k = self.classes;
        let mut values = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                values[b * k + a] = self.values[a * k + b];
            }
        }
        KernelBlock {
            classes: k,
            values,
            meta: self.meta,
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.classes).map(|a| self.get(a, a)).sum()
    }

    /// `A Bᵀ` for two Jacobians.
    pub fn from_jacobians(left: &Jacobian, right: &Jacobian, meta: BlockMeta) -> KernelBlock {
        let k = left.classes;
        let mut values = vec![0.0; k * right.classes];
        for a in 0..k {
            dot_rows(left.row(a), &right.values, &mut values[a * right.classes..(a + 1) * right.classes]);
        }
        KernelBlock {
            classes: k,
            values,
            meta,
        }
    }
}

/// Average of the Jacobian at `x` over the quadrature nodes of the segment
/// `w_s -> w_next`, as a running mean in node order (exact when the
/// Jacobian does not change along the segment).
pub fn mean_segment_jacobian(
    spec: &ModelSpec,
    w_s: &FlatWeights,
    w_next: &FlatWeights,
    x: &[f64],
    quad: Quadrature,
) -> Result<Jacobian> {
    quad.validate()?;
    let mut mean = Jacobian::zeros(spec.num_classes(), spec.num_weights());
    for (tau, t) in quad.nodes().into_iter().enumerate() {
        let w = interpolate_weights(w_s, w_next, t)?;
        let j = nn::per_sample_jacobian(spec, &w, x)?;
        accumulate_mean(&mut mean, &j, tau);
    }
    Ok(mean)
}

fn accumulate_mean(mean: &mut Jacobian, j: &Jacobian, tau: usize) {
    let n = (tau + 1) as f64;
    for (m, v) in mean.values.iter_mut().zip(&j.values) {
        *m += (v - *m) / n;
    }
}

/// Empirical tangent kernel `J(w, x) J(w, x')ᵀ`.
pub fn ntk_block(spec: &ModelSpec, w: &FlatWeights, x: &[f64], x_prime: &[f64]) -> Result<KernelBlock> {
    let a = nn::per_sample_jacobian(spec, w, x)?;
    let b = nn::per_sample_jacobian(spec, w, x_prime)?;
    Ok(KernelBlock::from_jacobians(
        &a,
        &b,
        BlockMeta {
            step: BlockStep::Aggregated,
            test_point: 0,
            train_point: 0,
        },
    ))
}

/// Model output vs. its kernel reconstruction at one test point.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionReport {
    pub model_logits: Vec<f64>,
    pub kernel_logits: Vec<f64>,
    /// `f_{w_0}(x)`.
    pub bias: Vec<f64>,
    /// `[N x K]`: rounded per-step increments. Their sum with `bias` equals
    /// `kernel_logits` up to the rounding of each row.
    pub per_step_contrib: Vec<f64>,
    pub quadrature_steps: usize,
    pub max_abs_err: f64,
}

/// Which test-side Jacobian a prediction pairs with the training gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Jacobian averaged along each step.
    Epk(Quadrature),
    /// Jacobian at the start of each step.
    Dpk,
    /// Tangent kernel frozen at `w_0` (both sides).
    Ntk0,
    /// Tangent kernel frozen at `w_N` (both sides).
    NtkN,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Epk(_) => "epk",
            Method::Dpk => "dpk",
            Method::Ntk0 => "ntk0",
            Method::NtkN => "ntkN",
        }
    }

    pub fn quadrature_steps(&self) -> usize {
        match self {
            Method::Epk(q) => q.steps,
            _ => 1,
        }
    }
}

/// Per-step loss gradients at the training points and the resulting
/// coefficients `a_{i,s} = -(ε_s / M) ∂L/∂f(x_i; w_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCoefficients {
    pub steps: usize,
    pub samples: usize,
    pub classes: usize,
    /// `[N x M x K]` loss gradients `∂L/∂f` at `w_s`.
    pub loss_grads: Vec<f64>,
    /// `[N x M x K]` coefficients with `ε_s / M` folded in.
    pub a: Vec<f64>,
    /// Whether every step's loss gradients equal step 0's exactly. Step
    /// sizes are carried by the aggregated kernel, so a variable schedule
    /// does not clear this flag.
    pub constant_flag: bool,
    /// First `(step, sample, deviation)` breaking constancy.
    pub first_deviation: Option<(usize, usize, f64)>,
}

impl SampleCoefficients {
    pub fn loss_grad(&self, s: usize, i: usize) -> &[f64] {
        let k = self.classes;
        let o = (s * self.samples + i) * k;
        &self.loss_grads[o..o + k]
    }
}

/// Kernel machine `b + Σ_i a_i · K(x, x_i)` obtained by summing the step
/// kernels when the coefficients do not change along training.
#[derive(Debug, Clone)]
pub struct KernelMachine {
    pub classes: usize,
    /// `[M x K]` constant loss gradient rows; the prediction scales their
    /// contraction by `-1/M`.
    pub coefficients: Vec<f64>,
    /// Per training point, `Σ_s ε_s K_EPK(x, x_i, s)` rounded for reporting.
    pub aggregated: Vec<KernelBlock>,
    exact: Vec<ExactSum>,
    pub bias: Vec<f64>,
    samples: usize,
}

impl KernelMachine {
    /// Evaluates the machine from its exact aggregated kernel.
    pub fn predict(&self) -> Vec<f64> {
        let k = self.classes;
        let mut totals = vec![ExactSum::new(); k];
        for i in 0..self.samples {
            let coef = &self.coefficients[i * k..(i + 1) * k];
            for (a, total) in totals.iter_mut().enumerate() {
                for (b, &c) in coef.iter().enumerate() {
                    total.merge_scaled(&self.exact[(i * k + a) * k + b], c);
                }
            }
        }
        finish(&self.bias, &totals, self.samples)
    }
}

fn finish(bias: &[f64], totals: &[ExactSum], m: usize) -> Vec<f64> {
    bias.iter()
        .zip(totals)
        .map(|(b, s)| b - s.value() / m as f64 + 0.0)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentRecord {
    pub step: usize,
    pub epk_dpk_gap: f64,
    pub epk_ntk0_gap: f64,
    pub epk_ntk_n_gap: f64,
    pub cum_epk_dpk: f64,
    pub cum_epk_ntk0: f64,
    pub cum_epk_ntk_n: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contributions {
    pub classes: usize,
    /// `[M x K]` total contribution of each training point.
    pub rows: Vec<f64>,
    pub report: PredictionReport,
}

impl Contributions {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.classes..(i + 1) * self.classes]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathRecord {
    pub t: f64,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub l2_norm: f64,
    /// `⟨Σ_i ∇_w f_{y_i}(x_i), (w_N - w_0)/‖w_N - w_0‖⟩` at `w(t)`.
    pub grad_dot_direction: f64,
}

/// Training-side quantities at one checkpoint.
struct TrainSide {
    /// `[M]` full Jacobians (kept only on request).
    jacobians: Vec<Jacobian>,
    /// `[M x K]` loss gradients.
    grads: Vec<f64>,
    /// `[M x W]` `Jᵢᵀ ∂L/∂f`.
    contracted: Vec<f64>,
}

/// Training rows per cache tile when contracting many test rows.
const TILE_ROWS: usize = 32;

/// `[M x (Q K)]` dot products of every training vector with every test
/// Jacobian row, computed tile by tile over the training vectors.
fn tiled_dots(test: &[Jacobian], train: &[f64], w_len: usize) -> Vec<f64> {
    let rows: Vec<&[f64]> = test
        .iter()
        .flat_map(|j| (0..j.classes).map(move |a| j.row(a)))
        .collect();
    let nr = rows.len();
    let m = if w_len == 0 { 0 } else { train.len() / w_len };
    let mut out = vec![0.0; m * nr];
    if nr == 0 || m == 0 {
        return out;
    }
    out.par_chunks_mut(TILE_ROWS * nr)
        .zip(train.par_chunks(TILE_ROWS * w_len))
        .for_each(|(dst, tile)| {
            let n_tile = tile.len() / w_len;
            let mut buf = vec![0.0; n_tile];
            for (r, row) in rows.iter().enumerate() {
                dot_rows(row, tile, &mut buf);
                for (i, v) in buf.iter().enumerate() {
                    dst[i * nr + r] = *v;
                }
            }
        });
    out
}

/// Kernel views of a trajectory and the dataset it was trained on.
pub struct PathKernel<'a> {
    traj: &'a Trajectory,
    data: &'a LabeledDataset,
}

impl<'a> PathKernel<'a> {
    /// Refuses a dataset whose fingerprint differs from the trajectory's.
    pub fn new(traj: &'a Trajectory, data: &'a LabeledDataset) -> Result<Self> {
        traj.check_dataset(data)?;
        Ok(PathKernel { traj, data })
    }

    pub fn trajectory(&self) -> &Trajectory {
        self.traj
    }

    pub fn data(&self) -> &LabeledDataset {
        self.data
    }

    fn spec(&self) -> &ModelSpec {
        &self.traj.spec
    }

    fn m(&self) -> usize {
        self.data.len()
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec().input_dim() {
            return Err(Error::Config(format!(
                "query has dimension {}, model expects {}",
                x.len(),
                self.spec().input_dim()
            )));
        }
        Ok(())
    }

    fn check_step(&self, s: usize) -> Result<()> {
        if s >= self.traj.steps() {
            return Err(Error::Input(format!(
                "step {s} out of range for a {}-step trajectory",
                self.traj.steps()
            )));
        }
        Ok(())
    }

    fn train_side(&self, w: &FlatWeights, keep_jacobians: bool) -> Result<TrainSide> {
        let spec = self.spec();
        let loss = self.traj.loss;
        let k = spec.num_classes();
        let parts: Vec<(Jacobian, Vec<f64>, Vec<f64>)> = (0..self.m())
            .into_par_iter()
            .map(|i| {
                let (logits, jac) = nn::forward_with_jacobian(spec, w, self.data.x(i))?;
                let g = loss.grad(&logits, &self.data.y(i))?;
                let v = jac.contract(&g);
                let jac = if keep_jacobians { jac } else { Jacobian::zeros(0, 0) };
                Ok((jac, g, v))
            })
            .collect::<Result<_>>()?;
        let mut side = TrainSide {
            jacobians: Vec::with_capacity(if keep_jacobians { parts.len() } else { 0 }),
            grads: Vec::with_capacity(parts.len() * k),
            contracted: Vec::with_capacity(parts.len() * spec.num_weights()),
        };
        for (j, g, v) in parts {
            if keep_jacobians {
                side.jacobians.push(j);
            }
            side.grads.extend(g);
            side.contracted.extend(v);
        }
        Ok(side)
    }

    /// The step-`s` update rebuilt from training-point Jacobians:
    /// `-ε_s (1/M) Σ_i Jᵢᵀ ∂L/∂f(x_i)`.
    pub fn step_update(&self, s: usize) -> Result<Vec<f64>> {
        self.check_step(s)?;
        let side = self.train_side(&self.traj.checkpoints[s], false)?;
        Ok(self.update_from(&side, s))
    }

    fn update_from(&self, side: &TrainSide, s: usize) -> Vec<f64> {
        let w = self.spec().num_weights();
        let parts: Vec<Vec<f64>> = side.contracted.chunks(w).map(|c| c.to_vec()).collect();
        let mean = nn::mean_in_order(&parts, w);
        let eps = self.traj.step_sizes[s];
        mean.iter().map(|g| -eps * g).collect()
    }

    /// Per step, `‖step_update(s) - (w_{s+1} - w_s)‖_∞`.
    pub fn step_reconstruction_errors(&self) -> Result<Vec<f64>> {
        (0..self.traj.steps())
            .map(|s| {
                let update = self.step_update(s)?;
                let actual: Vec<f64> = self.traj.checkpoints[s + 1]
                    .values
                    .iter()
                    .zip(&self.traj.checkpoints[s].values)
                    .map(|(b, a)| b - a)
                    .collect();
                Ok(max_abs_diff(&update, &actual))
            })
            .collect()
    }

    /// `[K x K]` step kernel between test point `x` and training point `i`:
    /// the test Jacobian averaged along step `s` against the training
    /// Jacobian at `w_s`.
    pub fn epk_step_block(&self, s: usize, x: &[f64], i: usize, quad: Quadrature) -> Result<KernelBlock> {
        self.check_step(s)?;
        self.check_query(x)?;
        if i >= self.m() {
            return Err(Error::Input(format!("training index {i} out of range")));
        }
        let spec = self.spec();
        let (w_s, w_next) = (&self.traj.checkpoints[s], &self.traj.checkpoints[s + 1]);
        let test = mean_segment_jacobian(spec, w_s, w_next, x, quad)?;
        let train = nn::per_sample_jacobian(spec, w_s, self.data.x(i))?;
        Ok(KernelBlock::from_jacobians(
            &test,
            &train,
            BlockMeta {
                step: BlockStep::Step(s),
                test_point: 0,
                train_point: i,
            },
        ))
    }

    pub fn coefficients(&self) -> Result<SampleCoefficients> {
        let (n, m, k) = (self.traj.steps(), self.m(), self.spec().num_classes());
        let spec = self.spec();
        let loss = self.traj.loss;
        let mut loss_grads = Vec::with_capacity(n * m * k);
        for s in 0..n {
            let w = &self.traj.checkpoints[s];
            let rows: Vec<Vec<f64>> = (0..m)
                .into_par_iter()
                .map(|i| {
                    let logits = nn::forward(spec, w, self.data.x(i))?;
                    loss.grad(&logits, &self.data.y(i))
                })
                .collect::<Result<_>>()?;
            loss_grads.extend(rows.into_iter().flatten());
        }
        let mut a = Vec::with_capacity(loss_grads.len());
        for s in 0..n {
            let scale = -self.traj.step_sizes[s] / m as f64;
            a.extend(loss_grads[s * m * k..(s + 1) * m * k].iter().map(|g| scale * g));
        }
        let mut first_deviation = None;
        'outer: for s in 1..n {
            for i in 0..m {
                let cur = &loss_grads[(s * m + i) * k..(s * m + i + 1) * k];
                let first = &loss_grads[i * k..(i + 1) * k];
                let dev = max_abs_diff(cur, first);
                if dev != 0.0 {
                    first_deviation = Some((s, i, dev));
                    break 'outer;
                }
            }
        }
        Ok(SampleCoefficients {
            steps: n,
            samples: m,
            classes: k,
            loss_grads,
            a,
            constant_flag: first_deviation.is_none(),
            first_deviation,
        })
    }

    /// Ensemble reconstruction for several test points at once.
    pub fn predict(&self, queries: &[&[f64]], method: Method) -> Result<Vec<PredictionReport>> {
        Ok(self
            .ensemble(queries, method, false)?
            .into_iter()
            .map(|(r, _)| r)
            .collect())
    }

    pub fn epk_predict(&self, x: &[f64], quad: Quadrature) -> Result<PredictionReport> {
        Ok(self.predict(&[x], Method::Epk(quad))?.remove(0))
    }

    /// The one-node left rule: identical arithmetic to `epk_predict` with `T = 1`.
    pub fn dpk_predict(&self, x: &[f64]) -> Result<PredictionReport> {
        Ok(self.predict(&[x], Method::Dpk)?.remove(0))
    }

    /// Total contribution of every training point to the reconstruction at `x`.
    pub fn kernel_contributions(&self, x: &[f64], quad: Quadrature) -> Result<Contributions> {
        let (report, per_train) = self.ensemble(&[x], Method::Epk(quad), true)?.remove(0);
        let m = self.m() as f64;
        let rows = per_train
            .expect("requested per-train sums")
            .iter()
            .map(|s| -s.value() / m + 0.0)
            .collect();
        Ok(Contributions {
            classes: self.spec().num_classes(),
            rows,
            report,
        })
    }

    fn ensemble(
        &self,
        queries: &[&[f64]],
        method: Method,
        per_train: bool,
    ) -> Result<Vec<(PredictionReport, Option<Vec<ExactSum>>)>> {
        for q in queries {
            self.check_query(q)?;
        }
        let quad = match method {
            Method::Epk(q) => q,
            Method::Dpk => Quadrature::left(1),
            Method::Ntk0 | Method::NtkN => Quadrature::left(1),
        };
        quad.validate()?;
        let spec = self.spec();
        let (n, m, k, w_len) = (self.traj.steps(), self.m(), spec.num_classes(), spec.num_weights());
        let w0 = self.traj.initial();
        let wn = self.traj.last();

        let bias: Vec<Vec<f64>> = queries
            .iter()
            .map(|x| nn::forward(spec, w0, x).map(|l| l.values))
            .collect::<Result<_>>()?;
        let model: Vec<Vec<f64>> = queries
            .iter()
            .map(|x| nn::forward(spec, wn, x).map(|l| l.values))
            .collect::<Result<_>>()?;

        // Frozen-kernel baselines use fixed Jacobians on both sides.
        let frozen = match method {
            Method::Ntk0 => Some(w0),
            Method::NtkN => Some(wn),
            _ => None,
        };
        let frozen_train: Option<Vec<Jacobian>> = frozen
            .map(|w| {
                (0..m)
                    .into_par_iter()
                    .map(|i| nn::per_sample_jacobian(spec, w, self.data.x(i)))
                    .collect::<Result<_>>()
            })
            .transpose()?;
        let frozen_test: Option<Vec<Jacobian>> = frozen
            .map(|w| {
                queries
                    .iter()
                    .map(|x| nn::per_sample_jacobian(spec, w, x))
                    .collect::<Result<_>>()
            })
            .transpose()?;

        let nq = queries.len();
        let mut totals = vec![vec![ExactSum::new(); k]; nq];
        let mut per_step = vec![vec![0.0; n * k]; nq];
        let mut train_sums = if per_train {
            Some(vec![vec![ExactSum::new(); m * k]; nq])
        } else {
            None
        };

        for s in 0..n {
            let eps = self.traj.step_sizes[s];
            let (w_s, w_next) = (&self.traj.checkpoints[s], &self.traj.checkpoints[s + 1]);

            let side = self.train_side(w_s, false)?;
            let train_vectors: Vec<f64> = match &frozen_train {
                None => side.contracted,
                Some(jacs) => {
                    let mut out = Vec::with_capacity(m * w_len);
                    for (i, j) in jacs.iter().enumerate() {
                        out.extend(j.contract(&side.grads[i * k..(i + 1) * k]));
                    }
                    out
                }
            };

            let test: Vec<Jacobian> = match &frozen_test {
                Some(j) => j.clone(),
                None => self.segment_jacobians(queries, w_s, w_next, quad)?,
            };

            let dots = tiled_dots(&test, &train_vectors, w_len);
            let nr = nq * k;
            let step_out: Vec<(Vec<ExactSum>, Option<Vec<f64>>)> = (0..nq)
                .into_par_iter()
                .map(|q| {
                    let mut step_acc = vec![ExactSum::new(); k];
                    let mut terms = if per_train { Some(vec![0.0; m * k]) } else { None };
                    for (a, acc) in step_acc.iter_mut().enumerate() {
                        for i in 0..m {
                            let term = eps * dots[i * nr + q * k + a];
                            acc.add(term);
                            if let Some(t) = terms.as_mut() {
                                t[i * k + a] = term;
                            }
                        }
                    }
                    (step_acc, terms)
                })
                .collect();

            for (q, (step_acc, terms)) in step_out.into_iter().enumerate() {
                for a in 0..k {
                    per_step[q][s * k + a] = -step_acc[a].value() / m as f64 + 0.0;
                    totals[q][a].merge(&step_acc[a]);
                }
                if let (Some(sums), Some(terms)) = (train_sums.as_mut(), terms) {
                    for (acc, t) in sums[q].iter_mut().zip(terms) {
                        acc.add(t);
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(nq);
        for q in 0..nq {
            let kernel_logits = finish(&bias[q], &totals[q], m);
            let max_abs_err = max_abs_diff(&model[q], &kernel_logits);
            out.push((
                PredictionReport {
                    model_logits: model[q].clone(),
                    kernel_logits,
                    bias: bias[q].clone(),
                    per_step_contrib: std::mem::take(&mut per_step[q]),
                    quadrature_steps: method.quadrature_steps(),
                    max_abs_err,
                },
                train_sums.as_mut().map(|s| std::mem::take(&mut s[q])),
            ));
        }
        Ok(out)
    }

    /// Test-side Jacobians of every query averaged over the segment nodes.
    fn segment_jacobians(
        &self,
        queries: &[&[f64]],
        w_s: &FlatWeights,
        w_next: &FlatWeights,
        quad: Quadrature,
    ) -> Result<Vec<Jacobian>> {
        let spec = self.spec();
        let (k, w_len) = (spec.num_classes(), spec.num_weights());
        let mut means = vec![Jacobian::zeros(k, w_len); queries.len()];
        for (tau, t) in quad.nodes().into_iter().enumerate() {
            let w = interpolate_weights(w_s, w_next, t)?;
            means
                .par_iter_mut()
                .zip(queries.par_iter())
                .try_for_each(|(mean, x)| -> Result<()> {
                    let j = nn::per_sample_jacobian(spec, &w, x)?;
                    accumulate_mean(mean, &j, tau);
                    Ok(())
                })?;
        }
        Ok(means)
    }

    /// Sums the step kernels into one kernel per training point and
    /// evaluates the resulting kernel machine at `x`. Refused when the loss
    /// gradients at the training points change during training.
    pub fn reduce_to_kernel_machine(&self, x: &[f64], quad: Quadrature) -> Result<KernelMachine> {
        self.check_query(x)?;
        quad.validate()?;
        let coeffs = self.coefficients()?;
        if let Some((step, index, deviation)) = coeffs.first_deviation {
            return Err(Error::ReductionRefused {
                step,
                index,
                deviation,
            });
        }
        let spec = self.spec();
        let (n, m, k) = (self.traj.steps(), self.m(), spec.num_classes());
        let mut exact = vec![ExactSum::new(); m * k * k];
        for s in 0..n {
            let eps = self.traj.step_sizes[s];
            let (w_s, w_next) = (&self.traj.checkpoints[s], &self.traj.checkpoints[s + 1]);
            let side = self.train_side(w_s, true)?;
            let jbar = &self.segment_jacobians(&[x], w_s, w_next, quad)?[0];
            let flat: Vec<f64> = side.jacobians.iter().flat_map(|j| j.values.iter().copied()).collect();
            let mut dots = vec![0.0; m * k];
            for a in 0..k {
                dot_rows(jbar.row(a), &flat, &mut dots);
                for i in 0..m {
                    for b in 0..k {
                        exact[(i * k + a) * k + b].add(eps * dots[i * k + b]);
                    }
                }
            }
        }
        let aggregated = (0..m)
            .map(|i| KernelBlock {
                classes: k,
                values: exact[i * k * k..(i + 1) * k * k].iter().map(|e| e.value()).collect(),
                meta: BlockMeta {
                    step: BlockStep::Aggregated,
                    test_point: 0,
                    train_point: i,
                },
            })
            .collect();
        let coefficients = if n == 0 {
            (0..m).flat_map(|i| self.data.y(i).into_iter().map(|v| -v)).collect()
        } else {
            coeffs.loss_grads[..m * k].to_vec()
        };
        Ok(KernelMachine {
            classes: k,
            coefficients,
            aggregated,
            exact,
            bias: nn::forward(spec, self.traj.initial(), x)?.values,
            samples: m,
        })
    }

    /// Per-step gap between the path-averaged test gradient and the
    /// single-point baselines, each contracted with the same step update.
    pub fn alignment_error(&self, x: &[f64], quad: Quadrature) -> Result<Vec<AlignmentRecord>> {
        self.check_query(x)?;
        quad.validate()?;
        let spec = self.spec();
        let j0 = nn::per_sample_jacobian(spec, self.traj.initial(), x)?;
        let jn = nn::per_sample_jacobian(spec, self.traj.last(), x)?;
        let k = spec.num_classes();
        let mut out = Vec::with_capacity(self.traj.steps());
        let (mut c_dpk, mut c_ntk0, mut c_ntkn) = (0.0, 0.0, 0.0);
        for s in 0..self.traj.steps() {
            let (w_s, w_next) = (&self.traj.checkpoints[s], &self.traj.checkpoints[s + 1]);
            let update = self.step_update(s)?;
            let jbar = mean_segment_jacobian(spec, w_s, w_next, x, quad)?;
            let js = nn::per_sample_jacobian(spec, w_s, x)?;
            let inc = |j: &Jacobian| -> Vec<f64> { (0..k).map(|a| dot(j.row(a), &update)).collect() };
            let epk = inc(&jbar);
            let gap = |other: &Jacobian| -> f64 {
                epk.iter()
                    .zip(inc(other))
                    .map(|(e, o)| (e - o) * (e - o))
                    .sum::<f64>()
                    .sqrt()
            };
            let (g_dpk, g_ntk0, g_ntkn) = (gap(&js), gap(&j0), gap(&jn));
            c_dpk += g_dpk;
            c_ntk0 += g_ntk0;
            c_ntkn += g_ntkn;
            out.push(AlignmentRecord {
                step: s,
                epk_dpk_gap: g_dpk,
                epk_ntk0_gap: g_ntk0,
                epk_ntk_n_gap: g_ntkn,
                cum_epk_dpk: c_dpk,
                cum_epk_ntk0: c_ntk0,
                cum_epk_ntk_n: c_ntkn,
            });
        }
        Ok(out)
    }

    /// Training accuracy, loss, norm and gradient alignment along the chord
    /// `w(t) = (1 - t) w_0 + t w_N` at `resolution` evenly spaced `t`.
    pub fn weight_path_diagnostic(&self, resolution: usize) -> Result<Vec<PathRecord>> {
        if resolution < 2 {
            return Err(Error::Input("path diagnostic needs a resolution of at least 2".into()));
        }
        let spec = self.spec();
        let (w0, wn) = (self.traj.initial(), self.traj.last());
        let chord: Vec<f64> = wn.values.iter().zip(&w0.values).map(|(b, a)| b - a).collect();
        let len = crate::numeric::norm2(&chord);
        let direction: Vec<f64> = if len > 0.0 {
            chord.iter().map(|v| v / len).collect()
        } else {
            vec![0.0; chord.len()]
        };
        let loss = self.traj.loss;
        (0..resolution)
            .map(|r| {
                let t = r as f64 / (resolution - 1) as f64;
                let w = interpolate_weights(w0, wn, t)?;
                let per: Vec<(bool, f64, Vec<f64>)> = (0..self.m())
                    .into_par_iter()
                    .map(|i| {
                        let (logits, jac) = nn::forward_with_jacobian(spec, &w, self.data.x(i))?;
                        let c = self.data.label(i);
                        let l = loss.value(&logits, &self.data.y(i))?;
                        Ok((logits.argmax() == c, l, jac.row(c).to_vec()))
                    })
                    .collect::<Result<_>>()?;
                let correct = per.iter().filter(|p| p.0).count();
                let mean_loss = per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64;
                let mut grad_sum = vec![0.0; spec.num_weights()];
                for (_, _, g) in &per {
                    for (s, v) in grad_sum.iter_mut().zip(g) {
                        *s += v;
                    }
                }
                Ok(PathRecord {
                    t,
                    accuracy: correct as f64 / per.len() as f64,
                    mean_loss,
                    l2_norm: crate::numeric::norm2(&w.values),
                    grad_dot_direction: dot(&grad_sum, &direction),
                })
            })
            .collect()
    }

    /// Kernel blocks between every pair of `a` and `b`, both treated as test
    /// points on the same node grid:
    /// `Σ_s ε_s (1/T) Σ_τ J(w_s(t_τ), a) J(w_s(t_τ), b)ᵀ`.
    /// Symmetric and positive semi-definite when `a == b`.
    pub fn symmetric_gram(&self, a: &[&[f64]], b: &[&[f64]], quad: Quadrature) -> Result<crate::gp::GramMatrix> {
        quad.validate()?;
        for x in a.iter().chain(b) {
            self.check_query(x)?;
        }
        let spec = self.spec();
        let k = spec.num_classes();
        let (na, nb) = (a.len(), b.len());
        let same = std::ptr::eq(a, b) || (na == nb && a.iter().zip(b).all(|(x, y)| x == y));
        let mut total = vec![0.0; na * k * nb * k];
        let nodes = quad.nodes();
        for s in 0..self.traj.steps() {
            let (w_s, w_next) = (&self.traj.checkpoints[s], &self.traj.checkpoints[s + 1]);
            let mut step = vec![0.0; total.len()];
            for &t in &nodes {
                let w = interpolate_weights(w_s, w_next, t)?;
                let ja: Vec<Jacobian> = a
                    .par_iter()
                    .map(|x| nn::per_sample_jacobian(spec, &w, x))
                    .collect::<Result<_>>()?;
                let jb: Vec<Jacobian> = if same {
                    ja.clone()
                } else {
                    b.par_iter()
                        .map(|x| nn::per_sample_jacobian(spec, &w, x))
                        .collect::<Result<_>>()?
                };
                let flat_b: Vec<f64> = jb.iter().flat_map(|j| j.values.iter().copied()).collect();
                let rows: Vec<Vec<f64>> = ja
                    .par_iter()
                    .flat_map_iter(|j| (0..k).map(move |p| j.row(p).to_vec()))
                    .map(|row| {
                        let mut out = vec![0.0; nb * k];
                        dot_rows(&row, &flat_b, &mut out);
                        out
                    })
                    .collect();
                for (r, vals) in rows.iter().enumerate() {
                    let dst = &mut step[r * nb * k..(r + 1) * nb * k];
                    for (d, v) in dst.iter_mut().zip(vals) {
                        *d += v;
                    }
                }
            }
            let scale = self.traj.step_sizes[s] / quad.steps as f64;
            for (t, v) in total.iter_mut().zip(&step) {
                *t += scale * v;
            }
        }
        crate::gp::GramMatrix::from_flat(na, nb, k, total)
    }

    /// `K(x, x)` for each point: the diagonal blocks of `symmetric_gram`.
    pub fn self_blocks(&self, points: &[&[f64]], quad: Quadrature) -> Result<Vec<KernelBlock>> {
        quad.validate()?;
        let spec = self.spec();
        let k = spec.num_classes();
        let mut total = vec![vec![0.0; k * k]; points.len()];
        let nodes = quad.nodes();
        for s in 0..self.traj.steps() {
            let (w_s, w_next) = (&self.traj.checkpoints[s], &self.traj.checkpoints[s + 1]);
            let mut step = vec![vec![0.0; k * k]; points.len()];
            for &t in &nodes {
                let w = interpolate_weights(w_s, w_next, t)?;
                step.par_iter_mut()
                    .zip(points.par_iter())
                    .try_for_each(|(acc, x)| -> Result<()> {
                        let j = nn::per_sample_jacobian(spec, &w, x)?;
                        let mut vals = vec![0.0; k];
                        for p in 0..k {
                            dot_rows(j.row(p), &j.values, &mut vals);
                            for q in 0..k {
                                acc[p * k + q] += vals[q];
                            }
                        }
                        Ok(())
                    })?;
            }
            let scale = self.traj.step_sizes[s] / quad.steps as f64;
            for (tot, st) in total.iter_mut().zip(&step) {
                for (t, v) in tot.iter_mut().zip(st) {
                    *t += scale * v;
                }
            }
        }
        Ok(total
            .into_iter()
            .enumerate()
            .map(|(p, values)| KernelBlock {
                classes: k,
                values,
                meta: BlockMeta {
                    step: BlockStep::Aggregated,
                    test_point: p,
                    train_point: p,
                },
            })
            .collect())
    }
}
