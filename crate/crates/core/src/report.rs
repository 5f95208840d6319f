//! CSV tables with fixed headers, one writer per artefact.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::gp::{GramMatrix, PosteriorField};
use crate::kernel::{AlignmentRecord, Contributions, PathRecord, PredictionReport};
use crate::numeric::norm2;

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |k| format!("{prefix}_{k}"))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// `point,steps,model_*,kernel_*,max_abs_err`.
pub fn write_compare(path: &Path, rows: &[(usize, PredictionReport)]) -> Result<()> {
    let k = rows.first().map_or(0, |(_, r)| r.model_logits.len());
    let mut w = writer(path)?;
    let mut header = vec!["point".to_string(), "steps".to_string()];
    header.extend(numbered("model", k));
    header.extend(numbered("kernel", k));
    header.push("max_abs_err".into());
    w.write_record(&header)?;
    for (point, r) in rows {
        let mut rec = vec![point.to_string(), r.quadrature_steps.to_string()];
        rec.extend(r.model_logits.iter().map(f64::to_string));
        rec.extend(r.kernel_logits.iter().map(f64::to_string));
        rec.push(r.max_abs_err.to_string());
        w.write_record(&rec)?;
    }
    finish(w, path)
}

/// `point,method,steps,predicted,logit_*`.
pub fn write_predictions(path: &Path, method: &str, rows: &[PredictionReport]) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.kernel_logits.len());
    let mut w = writer(path)?;
    let mut header: Vec<String> = ["point", "method", "steps", "predicted"].map(String::from).to_vec();
    header.extend(numbered("logit", k));
    w.write_record(&header)?;
    for (p, r) in rows.iter().enumerate() {
        let mut rec = vec![
            p.to_string(),
            method.to_string(),
            r.quadrature_steps.to_string(),
            crate::nn::argmax(&r.kernel_logits).to_string(),
        ];
        rec.extend(r.kernel_logits.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

/// `s,epk_dpk_gap,epk_ntk0_gap,epk_ntkN_gap,cum_epk_dpk,cum_epk_ntk0,cum_epk_ntkN`.
pub fn write_alignment(path: &Path, rows: &[AlignmentRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "s",
        "epk_dpk_gap",
        "epk_ntk0_gap",
        "epk_ntkN_gap",
        "cum_epk_dpk",
        "cum_epk_ntk0",
        "cum_epk_ntkN",
    ])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.epk_dpk_gap.to_string(),
            r.epk_ntk0_gap.to_string(),
            r.epk_ntk_n_gap.to_string(),
            r.cum_epk_dpk.to_string(),
            r.cum_epk_ntk0.to_string(),
            r.cum_epk_ntk_n.to_string(),
        ])?;
    }
    finish(w, path)
}

/// `train_index,label,distance,contrib_*`; distance is Euclidean in input space.
pub fn write_contributions(path: &Path, data: &LabeledDataset, x: &[f64], c: &Contributions) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = ["train_index", "label", "distance"].map(String::from).to_vec();
    header.extend(numbered("contrib", c.classes));
    w.write_record(&header)?;
    for i in 0..data.len() {
        let diff: Vec<f64> = data.x(i).iter().zip(x).map(|(a, b)| a - b).collect();
        let mut rec = vec![i.to_string(), data.label(i).to_string(), norm2(&diff).to_string()];
        rec.extend(c.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

/// `t,accuracy,mean_loss,l2_norm,grad_dot_direction`.
pub fn write_path_diagnostic(path: &Path, rows: &[PathRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "accuracy", "mean_loss", "l2_norm", "grad_dot_direction"])?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.accuracy.to_string(),
            r.mean_loss.to_string(),
            r.l2_norm.to_string(),
            r.grad_dot_direction.to_string(),
        ])?;
    }
    finish(w, path)
}

/// `x0..,mean_*,var_*,total_var,mcstd_*,kernel_value`.
pub fn write_field(path: &Path, f: &PosteriorField) -> Result<()> {
    let k = f.posterior.classes;
    let mut w = writer(path)?;
    let mut header: Vec<String> = (0..f.dim).map(|j| format!("x{j}")).collect();
    header.extend(numbered("mean", k));
    header.extend(numbered("var", k));
    header.push("total_var".into());
    header.extend(numbered("mcstd", k));
    header.push("kernel_value".into());
    w.write_record(&header)?;
    for q in 0..f.posterior.queries {
        let mut rec: Vec<String> = f.points[q * f.dim..(q + 1) * f.dim].iter().map(f64::to_string).collect();
        rec.extend(f.posterior.mean[q * k..(q + 1) * k].iter().map(f64::to_string));
        rec.extend(f.posterior.variance[q * k..(q + 1) * k].iter().map(f64::to_string));
        rec.push(f.posterior.total_variance[q].to_string());
        rec.extend(f.mc_prob_std[q * k..(q + 1) * k].iter().map(f64::to_string));
        rec.push(f.kernel_value[q].to_string());
        w.write_record(&rec)?;
    }
    finish(w, path)
}

/// Flat Gram matrix, one CSV row per matrix row, header `c0..`.
pub fn write_gram(path: &Path, g: &GramMatrix) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record((0..g.flat_cols()).map(|c| format!("c{c}")))?;
    for r in 0..g.flat_rows() {
        w.write_record(g.flat()[r * g.flat_cols()..(r + 1) * g.flat_cols()].iter().map(f64::to_string))?;
    }
    finish(w, path)
}

/// Writes `value` as pretty JSON.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))
}
