//! Pose metrics (MPJPE and Procrustes-aligned MPJPE), fixed-length sequence
//! standardization and action-recognition confusion reporting.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames per standardized sequence.
pub const STANDARD_LENGTH: usize = 100;

const DEGENERATE_RTOL: f64 = 1e-12;

pub fn mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>], valid: &[bool]) -> Result<f64> {
    check_shapes(pred, gt, valid)?;
    let (sum, n) = pred
        .iter()
        .zip(gt)
        .zip(valid)
        .filter(|(_, &v)| v)
        .fold((0.0, 0usize), |(s, n), ((p, g), _)| (s + (p - g).norm(), n + 1));
    if n == 0 {
        return Err(Error::NoValidJoints);
    }
    Ok(sum / n as f64)
}

fn check_shapes(pred: &[Vector3<f64>], gt: &[Vector3<f64>], valid: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(Error::DimensionMismatch(format!(
            "pred {} / gt {} / mask {} joints",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    Ok(())
}

/// `x ↦ scale · rotation · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }
}

/// Least-squares similarity (or rigid, when `with_scale` is false) taking
/// the valid `pred` joints onto `gt`.
pub fn fit_similarity(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    valid: &[bool],
    with_scale: bool,
) -> Result<Similarity> {
    check_shapes(pred, gt, valid)?;
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = pred
        .iter()
        .zip(gt)
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|((p, g), _)| (*p, *g))
        .collect();
    if pairs.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "{} valid joints, need at least 3",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mu_p = pairs.iter().map(|(p, _)| p).sum::<Vector3<f64>>() / n;
    let mu_g = pairs.iter().map(|(_, g)| g).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in &pairs {
        let (dp, dg) = (p - mu_p, g - mu_g);
        cov += dg * dp.transpose();
        var_p += dp.norm_squared();
    }
    cov /= n;
    var_p /= n;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s = svd.singular_values;
    let mut sorted = [s[0], s[1], s[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(sorted[0] > 0.0) || sorted[1] <= DEGENERATE_RTOL * sorted[0] {
        return Err(Error::DegenerateConfiguration(
            "valid joints are coincident or collinear".into(),
        ));
    }
    // reflection guard: flip the axis of the smallest singular value
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        let smallest = (0..3).min_by(|&i, &j| s[i].total_cmp(&s[j])).expect("three values");
        d[(smallest, smallest)] = -1.0;
        s[smallest] = -s[smallest];
    }
    let rotation = u * d * v_t;
    let scale = if with_scale { s.sum() / var_p } else { 1.0 };
    let translation = mu_g - rotation * mu_p * scale;
    Ok(Similarity {
        rotation,
        scale,
        translation,
    })
}

/// Procrustes alignment with uniform scale; returns the transform and the
/// aligned copy of every `pred` joint (valid or not).
pub fn procrustes_align(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    valid: &[bool],
) -> Result<(Similarity, Vec<Vector3<f64>>)> {
    let sim = fit_similarity(pred, gt, valid, true)?;
    let aligned = pred.iter().map(|p| sim.apply(p)).collect();
    Ok((sim, aligned))
}

pub fn pa_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>], valid: &[bool]) -> Result<f64> {
    let (_, aligned) = procrustes_align(pred, gt, valid)?;
    mpjpe(&aligned, gt, valid)
}

/// PA-MPJPE over a joint subset with its own alignment.
pub fn pa_mpjpe_subset(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    valid: &[bool],
    subset: &[usize],
) -> Result<f64> {
    check_shapes(pred, gt, valid)?;
    let p: Vec<_> = subset.iter().map(|&i| pred[i]).collect();
    let g: Vec<_> = subset.iter().map(|&i| gt[i]).collect();
    let v: Vec<_> = subset.iter().map(|&i| valid[i]).collect();
    pa_mpjpe(&p, &g, &v)
}

/// Fixed-length resampling: longer inputs keep their first `target_len`
/// frames, shorter ones are tiled end to end (`out[t] = in[t mod len]`).
pub fn standardize_sequence<T: Clone>(frames: &[T], target_len: usize) -> Result<Vec<T>> {
    if frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok((0..target_len).map(|t| frames[t % frames.len()].clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionLabel {
    PickUp,
    PutDown,
    Position,
    Remove,
    Screw,
    Unscrew,
}

impl ActionLabel {
    pub const ALL: [ActionLabel; 6] = [
        ActionLabel::PickUp,
        ActionLabel::PutDown,
        ActionLabel::Position,
        ActionLabel::Remove,
        ActionLabel::Screw,
        ActionLabel::Unscrew,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionLabel::PickUp => "pick_up",
            ActionLabel::PutDown => "put_down",
            ActionLabel::Position => "position",
            ActionLabel::Remove => "remove",
            ActionLabel::Screw => "screw",
            ActionLabel::Unscrew => "unscrew",
        }
    }
}

impl FromStr for ActionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        ActionLabel::ALL
            .into_iter()
            .find(|l| l.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown action label {s:?}")))
    }
}

/// A pose sequence with an optional action label.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub frames: Vec<Vec<Vector3<f64>>>,
    pub label: Option<ActionLabel>,
}

impl PoseSequence {
    pub fn new(frames: Vec<Vec<Vector3<f64>>>, label: Option<ActionLabel>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if frames.iter().any(|f| f.len() != first.len()) {
                return Err(Error::DimensionMismatch("inconsistent joint count across frames".into()));
            }
        }
        Ok(Self { frames, label })
    }

    pub fn standardized(&self, target_len: usize) -> Result<Self> {
        Ok(Self {
            frames: standardize_sequence(&self.frames, target_len)?,
            label: self.label,
        })
    }
}

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 6]; 6],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..6).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Each row as percentages of that row's total (zero rows stay zero).
    pub fn row_percentages(&self) -> [[f64; 6]; 6] {
        let mut out = [[0.0; 6]; 6];
        for (r, row) in self.counts.iter().enumerate() {
            let sum: u64 = row.iter().sum();
            if sum > 0 {
                for c in 0..6 {
                    out[r][c] = 100.0 * row[c] as f64 / sum as f64;
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let pct = self.row_percentages();
        let mut out = String::from("truth\\pred");
        for l in ActionLabel::ALL {
            let _ = write!(out, ",{}", l.name());
        }
        out.push_str(",count\n");
        for (r, l) in ActionLabel::ALL.iter().enumerate() {
            out.push_str(l.name());
            for v in pct[r] {
                let _ = write!(out, ",{:.1}", v);
            }
            let _ = writeln!(out, ",{}", self.counts[r].iter().sum::<u64>());
        }
        let _ = writeln!(out, "accuracy,{:.4}", self.accuracy());
        out
    }

    /// Heat-map rendering of the row-normalized matrix.
    pub fn to_svg(&self) -> String {
        let cell = 56.0;
        let margin = 90.0;
        let size = margin + 6.0 * cell + 10.0;
        let pct = self.row_percentages();
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" font-family=\"sans-serif\" font-size=\"11\">\n"
        );
        for (i, l) in ActionLabel::ALL.iter().enumerate() {
            let pos = margin + cell * (i as f64 + 0.5);
            let _ = writeln!(out, "<text x=\"{pos}\" y=\"{}\" text-anchor=\"middle\">{}</text>", margin - 8.0, l.name());
            let _ = writeln!(out, "<text x=\"{}\" y=\"{pos}\" text-anchor=\"end\">{}</text>", margin - 6.0, l.name());
        }
        for (r, row) in pct.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let shade = 255 - (v / 100.0 * 200.0).round() as u8;
                let (x, y) = (margin + cell * c as f64, margin + cell * r as f64);
                let _ = writeln!(
                    out,
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#888\"/>"
                );
                let _ = writeln!(
                    out,
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{v:.1}</text>",
                    x + cell / 2.0,
                    y + cell / 2.0 + 4.0
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Tallies `(truth, prediction)` pairs.
pub fn confusion_and_accuracy(pairs: &[(ActionLabel, ActionLabel)]) -> Result<(ConfusionMatrix, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut m = ConfusionMatrix::default();
    for (t, p) in pairs {
        m.counts[t.index()][p.index()] += 1;
    }
    let acc = m.accuracy();
    Ok((m, acc))
}
