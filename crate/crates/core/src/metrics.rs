//! Evaluation metrics: PCK, segmentation scores and 3D joint error.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::render::Mask;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("no visible keypoints")]
    NoVisibleKeypoints,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    /// Fraction correct per keypoint; `None` where it was never visible.
    pub per_keypoint: Vec<Option<f64>>,
    /// Fraction of all visible keypoints that are correct.
    pub mean: f64,
    pub threshold: f64,
    /// Normalization size in pixels (mean over samples when aggregated).
    pub norm_size: f64,
    pub normalization: PckNormalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PckNormalization {
    /// Diagonal of the bounding box of the torso keypoints.
    TorsoDiagonal,
    /// Height of the bounding box of all visible keypoints.
    BoxHeight,
    /// Supplied by the caller.
    Explicit,
}

/// Normalization size of a ground-truth keypoint set.
pub fn pck_norm_size(
    gt: &[Vector2<f64>],
    visible: &[bool],
    kind: PckNormalization,
    torso: &[usize],
) -> Result<f64, MetricError> {
    let pts: Vec<&Vector2<f64>> = match kind {
        PckNormalization::TorsoDiagonal => {
            torso.iter().filter(|&&i| i < gt.len() && visible.get(i) == Some(&true)).map(|&i| &gt[i]).collect()
        }
        PckNormalization::BoxHeight => gt.iter().zip(visible).filter(|(_, &v)| v).map(|(p, _)| p).collect(),
        PckNormalization::Explicit => {
            return Err(MetricError::InvalidArgument("explicit normalization has no derived size".into()))
        }
    };
    if pts.len() < 2 {
        return Err(MetricError::NoVisibleKeypoints);
    }
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let size = match kind {
        PckNormalization::TorsoDiagonal => (hi - lo).norm(),
        _ => hi.y - lo.y,
    };
    if size > 0.0 {
        Ok(size)
    } else {
        Err(MetricError::InvalidArgument("degenerate normalization size".into()))
    }
}

/// Keypoint `p` is correct iff visible and `|pred_p - gt_p| <= tau * norm_size`.
pub fn pck(
    pred: &[Vector2<f64>],
    gt: &[Vector2<f64>],
    visible: &[bool],
    tau: f64,
    norm_size: f64,
) -> Result<PckResult, MetricError> {
    pck_many(&[(pred, gt, visible, norm_size)], tau)
}

/// PCK over several samples with per-sample normalization sizes.
pub fn pck_many(
    samples: &[(&[Vector2<f64>], &[Vector2<f64>], &[bool], f64)],
    tau: f64,
) -> Result<PckResult, MetricError> {
    if !(tau > 0.0) {
        return Err(MetricError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let n = samples.first().map_or(0, |s| s.1.len());
    let mut correct = vec![0usize; n];
    let mut seen = vec![0usize; n];
    let mut size_sum = 0.0;
    for (pred, gt, visible, norm_size) in samples {
        if pred.len() != n || gt.len() != n || visible.len() != n {
            return Err(MetricError::Dimension(format!(
                "pred {}, gt {}, visibility {}, expected {n}",
                pred.len(),
                gt.len(),
                visible.len()
            )));
        }
        if !(*norm_size > 0.0) {
            return Err(MetricError::InvalidArgument(format!("norm_size must be positive, got {norm_size}")));
        }
        size_sum += norm_size;
        for p in 0..n {
            if visible[p] {
                seen[p] += 1;
                if (pred[p] - gt[p]).norm() <= tau * norm_size {
                    correct[p] += 1;
                }
            }
        }
    }
    let total: usize = seen.iter().sum();
    if total == 0 {
        return Err(MetricError::NoVisibleKeypoints);
    }
    Ok(PckResult {
        per_keypoint: correct.iter().zip(&seen).map(|(&c, &s)| (s > 0).then(|| c as f64 / s as f64)).collect(),
        mean: correct.iter().sum::<usize>() as f64 / total as f64,
        threshold: tau,
        norm_size: size_sum / samples.len() as f64,
        normalization: PckNormalization::Explicit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub accuracy: f64,
    /// Indexed by class value; `None` where the class is absent from both masks.
    pub iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub f1: Vec<Option<f64>>,
    pub macro_f1: f64,
    /// Classes present in the ground truth; the means run over these.
    pub gt_classes: Vec<u8>,
    pub n_pixels: usize,
}

/// Pixel confusion counts between two label masks, skipping pixels where
/// `ignore` is nonzero. Entry `[g][p]` counts ground truth `g` predicted `p`.
pub fn confusion_matrix(pred: &Mask, gt: &Mask, ignore: Option<&Mask>) -> Result<Vec<Vec<u64>>, MetricError> {
    if !pred.same_size(gt) || ignore.is_some_and(|i| !i.same_size(gt)) {
        return Err(MetricError::Dimension("masks differ in size".into()));
    }
    let n = pred.data().iter().chain(gt.data()).copied().max().unwrap_or(0) as usize + 1;
    let mut cm = vec![vec![0u64; n]; n];
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if ignore.is_some_and(|m| m.data()[i] != 0) {
            continue;
        }
        cm[g as usize][p as usize] += 1;
    }
    Ok(cm)
}

pub fn seg_scores(pred: &Mask, gt: &Mask, ignore: Option<&Mask>) -> Result<SegScores, MetricError> {
    let cm = confusion_matrix(pred, gt, ignore)?;
    let n = cm.len();
    let total: u64 = cm.iter().flatten().sum();
    let diag: u64 = (0..n).map(|c| cm[c][c]).sum();
    let mut iou = vec![None; n];
    let mut f1 = vec![None; n];
    let mut gt_classes = Vec::new();
    for c in 0..n {
        let tp = cm[c][c] as f64;
        let gt_c: u64 = cm[c].iter().sum();
        let pred_c: u64 = cm.iter().map(|row| row[c]).sum();
        let (fn_, fp) = (gt_c as f64 - tp, pred_c as f64 - tp);
        if gt_c + pred_c > 0 {
            iou[c] = Some(tp / (tp + fp + fn_));
            f1[c] = Some(2.0 * tp / (2.0 * tp + fp + fn_));
        }
        if gt_c > 0 {
            gt_classes.push(c as u8);
        }
    }
    let mean_over = |v: &[Option<f64>]| {
        if gt_classes.is_empty() {
            0.0
        } else {
            gt_classes.iter().map(|&c| v[c as usize].unwrap_or(0.0)).sum::<f64>() / gt_classes.len() as f64
        }
    };
    Ok(SegScores {
        accuracy: if total > 0 { diag as f64 / total as f64 } else { 0.0 },
        mean_iou: mean_over(&iou),
        macro_f1: mean_over(&f1),
        iou,
        f1,
        gt_classes,
        n_pixels: total as usize,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Translate so the root joints (index 0) coincide.
    #[default]
    Root,
    /// Optimal similarity transform of the prediction onto the ground truth.
    Procrustes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint3DError {
    pub per_joint_mm: Vec<f64>,
    pub mean_mm: f64,
    pub alignment: Alignment,
}

/// Joint positions in meters; errors reported in millimeters.
pub fn joint3d_error(pred: &[Vector3<f64>], gt: &[Vector3<f64>], mode: Alignment) -> Result<Joint3DError, MetricError> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(MetricError::Dimension(format!("pred has {} joints, gt {}", pred.len(), gt.len())));
    }
    let aligned: Vec<Vector3<f64>> = match mode {
        Alignment::Root => pred.iter().map(|p| p - pred[0] + gt[0]).collect(),
        Alignment::Procrustes => {
            let (s, r, t) = similarity_alignment(pred, gt);
            pred.iter().map(|p| s * (r * p) + t).collect()
        }
    };
    let per_joint_mm: Vec<f64> = aligned.iter().zip(gt).map(|(p, g)| (p - g).norm() * 1000.0).collect();
    let mean_mm = per_joint_mm.iter().sum::<f64>() / per_joint_mm.len() as f64;
    Ok(Joint3DError { per_joint_mm, mean_mm, alignment: mode })
}

/// Least-squares `(s, R, t)` minimizing `sum |s R a_i + t - b_i|^2` (Umeyama).
pub fn similarity_alignment(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<Vector3<f64>>() / n;
    let mb = b.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_a = 0.0;
    for (p, q) in a.iter().zip(b) {
        cov += (q - mb) * (p - ma).transpose();
        var_a += (p - ma).norm_squared();
    }
    cov /= n;
    var_a /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        let smallest = svd.singular_values.imin();
        d[(smallest, smallest)] = -1.0;
    }
    let r = u * d * vt;
    let s = if var_a > 0.0 { (svd.singular_values.component_mul(&d.diagonal())).sum() / var_a } else { 1.0 };
    let t = mb - s * (r * ma);
    (s, r, t)
}
