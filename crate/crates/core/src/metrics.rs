//! Evaluation metrics and report assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::data::BlendshapeSequence;
use crate::error::{Error, Result};
use crate::nn::checkpoint::write_kv;
use crate::tensor::Tensor;

fn check_shapes(pred: &Tensor, gt: &Tensor) -> Result<()> {
    pred.ensure_same_shape(gt, "metric inputs")?;
    if pred.rows() == 0 {
        return Err(Error::Input("metric inputs have no frames".into()));
    }
    Ok(())
}

/// Mean over frames of the Euclidean distance between the selected
/// channels of each frame.
pub fn mean_frame_distance(pred: &Tensor, gt: &Tensor, channels: &[usize]) -> Result<f64> {
    check_shapes(pred, gt)?;
    if channels.is_empty() {
        return Err(Error::Config("metric channel set is empty".into()));
    }
    let mut total = 0.0;
    for f in 0..pred.rows() {
        let (p, g) = (pred.row(f), gt.row(f));
        total += channels.iter().map(|&c| (p[c] - g[c]).powi(2)).sum::<f64>().sqrt();
    }
    Ok(total / pred.rows() as f64)
}

pub fn mbe(pred: &BlendshapeSequence, gt: &BlendshapeSequence) -> Result<f64> {
    let all: Vec<usize> = (0..pred.values().cols()).collect();
    mean_frame_distance(pred.values(), gt.values(), &all)
}

pub fn lbe(pred: &BlendshapeSequence, gt: &BlendshapeSequence, lip_indices: &[usize]) -> Result<f64> {
    mean_frame_distance(pred.values(), gt.values(), lip_indices)
}

/// Sample standard deviation of each selected column over time.
pub fn channel_dynamics(x: &Tensor, channels: &[usize]) -> Result<Vec<f64>> {
    if x.rows() < 2 {
        return Err(Error::Input("dynamics need at least two frames".into()));
    }
    let n = x.rows() as f64;
    Ok(channels
        .iter()
        .map(|&c| {
            let mean = (0..x.rows()).map(|f| x.get(f, c)).sum::<f64>() / n;
            let ss: f64 = (0..x.rows()).map(|f| (x.get(f, c) - mean).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        })
        .collect())
}

/// Signed deviation of upper-face dynamics: mean over channels of
/// `dyn(pred) − dyn(gt)`.
pub fn fdd_tensor(pred: &Tensor, gt: &Tensor, upper_face: &[usize]) -> Result<f64> {
    check_shapes(pred, gt)?;
    if upper_face.is_empty() {
        return Err(Error::Config("upper-face channel set is empty".into()));
    }
    let dp = channel_dynamics(pred, upper_face)?;
    let dg = channel_dynamics(gt, upper_face)?;
    Ok(dp.iter().zip(&dg).map(|(p, g)| p - g).sum::<f64>() / upper_face.len() as f64)
}

pub fn fdd(pred: &BlendshapeSequence, gt: &BlendshapeSequence, upper_face: &[usize]) -> Result<f64> {
    fdd_tensor(pred.values(), gt.values(), upper_face)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro one-vs-rest precision and recall over every label seen; F1 is
/// their harmonic mean.
pub fn identity_report(matches: &[(String, String)]) -> Result<IdentityScores> {
    if matches.is_empty() {
        return Err(Error::Input("no identity matches to score".into()));
    }
    let labels: BTreeSet<&str> = matches
        .iter()
        .flat_map(|(p, t)| [p.as_str(), t.as_str()])
        .collect();
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for label in &labels {
        let tp = matches.iter().filter(|(p, t)| p == label && t == label).count() as f64;
        let predicted = matches.iter().filter(|(p, _)| p == label).count() as f64;
        let actual = matches.iter().filter(|(_, t)| t == label).count() as f64;
        p_sum += if predicted > 0.0 { tp / predicted } else { 0.0 };
        r_sum += if actual > 0.0 { tp / actual } else { 0.0 };
    }
    let k = labels.len() as f64;
    let (precision, recall) = (p_sum / k, r_sum / k);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(IdentityScores { precision, recall, f1 })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub checkpoint_id: String,
    pub steps: usize,
    pub distilled: bool,
    pub sequences: usize,
    pub mbe: f64,
    pub lbe: f64,
    pub fdd: f64,
    pub fdd_abs: f64,
    pub itf: Option<f64>,
    pub identity: Option<IdentityScores>,
}

const CSV_HEADER: &str = "checkpoint_id,steps,distilled,sequences,mbe,lbe,fdd,fdd_abs,itf,precision,recall,f1";

impl MetricsReport {
    pub fn to_kv(&self) -> String {
        let mut m = BTreeMap::new();
        m.insert("checkpoint_id".to_string(), self.checkpoint_id.clone());
        m.insert("steps".to_string(), self.steps.to_string());
        m.insert("distilled".to_string(), self.distilled.to_string());
        m.insert("sequences".to_string(), self.sequences.to_string());
        m.insert("mbe".to_string(), self.mbe.to_string());
        m.insert("lbe".to_string(), self.lbe.to_string());
        m.insert("fdd".to_string(), self.fdd.to_string());
        m.insert("fdd_abs".to_string(), self.fdd_abs.to_string());
        if let Some(itf) = self.itf {
            m.insert("itf".to_string(), itf.to_string());
        }
        if let Some(s) = self.identity {
            m.insert("identity_precision".to_string(), s.precision.to_string());
            m.insert("identity_recall".to_string(), s.recall.to_string());
            m.insert("identity_f1".to_string(), s.f1.to_string());
        }
        write_kv(&m)
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.checkpoint_id,
            self.steps,
            self.distilled,
            self.sequences,
            self.mbe,
            self.lbe,
            self.fdd,
            self.fdd_abs,
            opt(self.itf),
            opt(self.identity.map(|s| s.precision)),
            opt(self.identity.map(|s| s.recall)),
            opt(self.identity.map(|s| s.f1)),
        )
        .expect("string write");
        s
    }

    /// Append a row to a results CSV, writing the header for a new file.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str(CSV_HEADER);
            text.push('\n');
        }
        text.push_str(&self.csv_row());
        text.push('\n');
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Sequence-averaged MBE, LBE and signed FDD over prediction/truth pairs.
pub fn aggregate(
    pairs: &[(BlendshapeSequence, BlendshapeSequence)],
    lip_indices: &[usize],
    upper_face: &[usize],
) -> Result<(f64, f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Input("no sequences to evaluate".into()));
    }
    let (mut m, mut l, mut f) = (0.0, 0.0, 0.0);
    for (p, g) in pairs {
        m += mbe(p, g)?;
        l += lbe(p, g, lip_indices)?;
        f += fdd(p, g, upper_face)?;
    }
    let n = pairs.len() as f64;
    Ok((m / n, l / n, f / n))
}
