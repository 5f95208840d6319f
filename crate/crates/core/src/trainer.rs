//! Checkpointed full-batch gradient descent and the trajectory file format.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Fingerprint, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{self, FlatWeights, Loss, ModelSpec};
use crate::rng;

/// Step size per training step: one value for every step, or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSchedule {
    Constant(f64),
    PerStep(Vec<f64>),
}

impl StepSchedule {
    pub fn sizes(&self, steps: usize) -> Result<Vec<f64>> {
        let sizes = match self {
            StepSchedule::Constant(e) => vec![*e; steps],
            StepSchedule::PerStep(v) => {
                if v.len() != steps {
                    return Err(Error::Config(format!(
                        "schedule lists {} step sizes for {steps} steps",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if let Some(bad) = sizes.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
            return Err(Error::Config(format!("invalid step size {bad}")));
        }
        Ok(sizes)
    }
}

/// Everything that determines a training run besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub lr: StepSchedule,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub loss: Loss,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("training needs at least one step".into()));
        }
        let sizes = self.lr.sizes(self.steps)?;
        if sizes.iter().any(|&e| e == 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn train(&self, data: &LabeledDataset) -> Result<Trajectory> {
        self.validate()?;
        train_full_batch(&self.model, data, &self.lr, self.steps, self.seed, self.loss)
    }
}

/// Hidden layers uniform in `±1/√fan_in` from PCG32(seed); the output layer,
/// weights and biases, is zero so the initial model outputs the same logits
/// for every input.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<FlatWeights> {
    spec.validate()?;
    let mut w = FlatWeights::zeros(spec);
    let mut g = rng::generator(seed, rng::DEFAULT_STREAM);
    let layout = spec.layout();
    for l in &layout[..layout.len() - 1] {
        let bound = 1.0 / (l.fan_in as f64).sqrt();
        for v in &mut w.values[l.weight_offset..l.end()] {
            *v = rng::uniform(&mut g, -bound, bound);
        }
    }
    Ok(w)
}

/// Ordered weight checkpoints `w_0 .. w_N` of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub spec: ModelSpec,
    pub loss: Loss,
    pub checkpoints: Vec<FlatWeights>,
    /// `ε_s` for each of the `N` steps.
    pub step_sizes: Vec<f64>,
    pub dataset_fingerprint: Fingerprint,
    pub seed: u64,
    /// Training set shape `(M, D, K)`.
    pub data_shape: (usize, usize, usize),
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.step_sizes.len()
    }

    pub fn initial(&self) -> &FlatWeights {
        &self.checkpoints[0]
    }

    pub fn last(&self) -> &FlatWeights {
        self.checkpoints.last().expect("trajectory has w_0")
    }

    /// Fails unless `data` is the dataset this trajectory was trained on.
    pub fn check_dataset(&self, data: &LabeledDataset) -> Result<()> {
        let fp = data.fingerprint();
        if fp != self.dataset_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.dataset_fingerprint.to_hex(),
                actual: fp.to_hex(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Trajectory::from_bytes(&bytes)
    }
}

/// Mean loss and mean loss gradient over the dataset, with per-sample terms
/// summed in index order.
pub(crate) fn loss_and_gradient(
    spec: &ModelSpec,
    w: &FlatWeights,
    data: &LabeledDataset,
    loss: Loss,
) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<(f64, Vec<f64>)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (logits, jac) = nn::forward_with_jacobian(spec, w, data.x(i))?;
            let y = data.y(i);
            let l = loss.value(&logits, &y)?;
            let g = loss.grad(&logits, &y)?;
            Ok((l, jac.contract(&g)))
        })
        .collect::<Result<_>>()?;
    let mean_loss = parts.iter().map(|p| p.0).sum::<f64>() / parts.len() as f64;
    let grads: Vec<Vec<f64>> = parts.into_iter().map(|p| p.1).collect();
    Ok((mean_loss, nn::mean_in_order(&grads, spec.num_weights())))
}

/// `w_{s+1} = w_s - ε_s ∇L(w_s)` for `steps` steps, keeping every iterate.
pub fn train_full_batch(
    spec: &ModelSpec,
    data: &LabeledDataset,
    schedule: &StepSchedule,
    steps: usize,
    seed: u64,
    loss: Loss,
) -> Result<Trajectory> {
    spec.validate()?;
    if data.dim() != spec.input_dim() || data.classes() != spec.num_classes() {
        return Err(Error::Config(format!(
            "dataset is {}-dimensional with {} classes, model expects {} and {}",
            data.dim(),
            data.classes(),
            spec.input_dim(),
            spec.num_classes()
        )));
    }
    if data.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    let step_sizes = schedule.sizes(steps)?;
    let mut checkpoints = Vec::with_capacity(steps + 1);
    checkpoints.push(init_model(spec, seed)?);
    for (s, &eps) in step_sizes.iter().enumerate() {
        let w = &checkpoints[s];
        let (mean_loss, grad) = loss_and_gradient(spec, w, data, loss)?;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { step: s, what: "loss" });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step: s, what: "gradient" });
        }
        let next = apply_step(w, &grad, eps);
        if next.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: s, what: "weights" });
        }
        checkpoints.push(next);
    }
    Ok(Trajectory {
        spec: spec.clone(),
        loss,
        checkpoints,
        step_sizes,
        dataset_fingerprint: data.fingerprint(),
        seed,
        data_shape: (data.len(), data.dim(), data.classes()),
    })
}

fn apply_step(w: &FlatWeights, grad: &[f64], eps: f64) -> FlatWeights {
    FlatWeights {
        values: w.values.iter().zip(grad).map(|(v, g)| v - eps * g).collect(),
    }
}

/// Recomputes every update from the stored checkpoints and returns the first
/// step whose replay is not bit-identical, if any.
pub fn first_replay_mismatch(traj: &Trajectory, data: &LabeledDataset) -> Result<Option<usize>> {
    traj.check_dataset(data)?;
    for s in 0..traj.steps() {
        let (_, grad) = loss_and_gradient(&traj.spec, &traj.checkpoints[s], data, traj.loss)?;
        let next = apply_step(&traj.checkpoints[s], &grad, traj.step_sizes[s]);
        let same = next
            .values
            .iter()
            .zip(&traj.checkpoints[s + 1].values)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Ok(Some(s));
        }
    }
    Ok(None)
}

const MAGIC: &[u8; 4] = b"EPK1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelSpec,
    loss: Loss,
    steps: usize,
    m: usize,
    d: usize,
    k: usize,
    seed: u64,
    dataset_fingerprint: String,
}

impl Trajectory {
    /// `"EPK1"`, u32 version, u32 header length, header JSON, `N` step sizes,
    /// then `(N+1) * W` weights; integers and floats little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (m, d, k) = self.data_shape;
        let header = serde_json::to_vec(&Header {
            model: self.spec.clone(),
            loss: self.loss,
            steps: self.steps(),
            m,
            d,
            k,
            seed: self.seed,
            dataset_fingerprint: self.dataset_fingerprint.to_hex(),
        })?;
        let w = self.spec.num_weights();
        let mut out = Vec::with_capacity(12 + header.len() + 8 * (self.steps() + (self.steps() + 1) * w));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.step_sizes {
            out.extend_from_slice(&e.to_le_bytes());
        }
        for c in &self.checkpoints {
            for v in &c.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format(0, "not a trajectory file (bad magic)"));
        }
        let u32_at = |off: usize| -> Result<u32> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::format(off as u64, "truncated header"))
        };
        let version = u32_at(4)?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let header_len = u32_at(8)? as usize;
        let header_bytes = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| Error::format(12, "truncated header JSON"))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::format(12, format!("bad header JSON: {e}")))?;
        header
            .model
            .validate()
            .map_err(|e| Error::format(12, e.to_string()))?;
        let fingerprint = Fingerprint::from_hex(&header.dataset_fingerprint)
            .map_err(|e| Error::format(12, e.to_string()))?;
        let w = header.model.num_weights();
        let n = header.steps;
        let mut off = 12 + header_len;
        let need = off + 8 * (n + (n + 1) * w);
        if bytes.len() < need {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated payload: expected {need} bytes"),
            ));
        }
        if bytes.len() > need {
            return Err(Error::format(need as u64, "trailing bytes after payload"));
        }
        let read_f64 = |off: &mut usize| {
            let v = f64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
            *off += 8;
            v
        };
        let step_sizes: Vec<f64> = (0..n).map(|_| read_f64(&mut off)).collect();
        let checkpoints = (0..=n)
            .map(|_| FlatWeights {
                values: (0..w).map(|_| read_f64(&mut off)).collect(),
            })
            .collect();
        Ok(Trajectory {
            spec: header.model,
            loss: header.loss,
            checkpoints,
            step_sizes,
            dataset_fingerprint: fingerprint,
            seed: header.seed,
            data_shape: (header.m, header.d, header.k),
        })
    }
}
