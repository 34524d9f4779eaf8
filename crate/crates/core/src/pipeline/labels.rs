use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{keypoint_positions, BodyModel, Kinematics};
use crate::fitting::{read_keypoint_file, torso_keypoints, FitResult};
use crate::labelgen::{
    foreground, generate_labels, model_hash, sha256_hex, write_bundle, BundleManifest, PartReductionMap, BUNDLE_MANIFEST,
};
use crate::metrics::{joint3d_error, pck_many, pck_norm_size, seg_scores, Alignment, PckNormalization};
use crate::render::{project, read_mask_png};

use super::{with_jobs, DatasetManifest, PipelineError, SampleError, Status};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelgenReport {
    pub written: Vec<String>,
    /// Bundles already on disk for the same fit and model.
    pub unchanged: Vec<String>,
    /// Samples without a fit or outside the status filter.
    pub skipped: Vec<String>,
    pub errors: Vec<SampleError>,
}

fn bundle_is_current(dir: &Path, fit_id: &str, model_hash: &str, cam: &crate::render::Camera) -> bool {
    let Ok(text) = std::fs::read_to_string(dir.join(BUNDLE_MANIFEST)) else {
        return false;
    };
    let Ok(b) = serde_json::from_str::<BundleManifest>(&text) else {
        return false;
    };
    b.provenance.fit_id == fit_id
        && b.provenance.model_hash == model_hash
        && b.provenance.camera == *cam
        && b.members.iter().all(|m| std::fs::read(dir.join(&m.file)).is_ok_and(|bytes| sha256_hex(&bytes) == m.sha256))
}

/// Writes a label bundle per fitted sample into `out/<sample id>/`.
pub fn cmd_labelgen(
    manifest_path: &Path,
    model: &BodyModel,
    map: &PartReductionMap,
    out: &Path,
    status: Option<Status>,
    jobs: Option<usize>,
) -> Result<LabelgenReport, PipelineError> {
    let m = DatasetManifest::load(manifest_path)?;
    map.validate(model)?;
    let mh = model_hash(model)?;
    let mut report = LabelgenReport::default();
    let mut todo = Vec::new();
    for s in &m.samples {
        match &s.fit {
            Some(f) if status.is_none_or(|st| st == s.status) => todo.push((s, f)),
            _ => report.skipped.push(s.id.clone()),
        }
    }
    let results: Vec<(String, Result<bool, PipelineError>)> = with_jobs(jobs, || {
        todo.par_iter()
            .map(|(s, fit_id)| {
                let dir = out.join(&s.id);
                let run = || -> Result<bool, PipelineError> {
                    if bundle_is_current(&dir, fit_id, &mh, &m.camera) {
                        return Ok(false);
                    }
                    let fit = m.load_fit(fit_id)?;
                    let bundle = generate_labels(model, &fit, &m.camera, map)?;
                    write_bundle(&bundle, &dir)?;
                    Ok(true)
                };
                (s.id.clone(), run())
            })
            .collect()
    });
    for (id, r) in results {
        match r {
            Ok(true) => report.written.push(id),
            Ok(false) => report.unchanged.push(id),
            Err(e) => report.errors.push(SampleError { id, message: e.to_string() }),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub pck_threshold: f64,
    pub pck_normalization: PckNormalization,
    pub alignment: Alignment,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { pck_threshold: 0.2, pck_normalization: PckNormalization::TorsoDiagonal, alignment: Alignment::Root }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pck: Option<f64>,
    /// Foreground/background segmentation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fb_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fb_f1: Option<f64>,
    /// Reduced-part segmentation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub part_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub part_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub part_mean_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint_error_mm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_samples: usize,
    /// PCK pooled over every visible keypoint of every sample.
    pub pck: Option<f64>,
    pub fb_accuracy: Option<f64>,
    pub fb_f1: Option<f64>,
    pub part_accuracy: Option<f64>,
    pub part_f1: Option<f64>,
    pub part_mean_iou: Option<f64>,
    pub joint_error_mm: Option<f64>,
    pub options: Option<EvalOptions>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
    pub errors: Vec<SampleError>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut out = format!(
            "{:<24} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}\n",
            "sample", "status", "pck", "fb_acc", "fb_f1", "p_acc", "p_f1", "p_iou", "joint_mm"
        );
        let line = |id: &str, st: &str, r: [Option<f64>; 7]| {
            format!(
                "{id:<24} {st:>10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}\n",
                f(r[0]),
                f(r[1]),
                f(r[2]),
                f(r[3]),
                f(r[4]),
                f(r[5]),
                r[6].map_or("-".to_string(), |v| format!("{v:.1}"))
            )
        };
        for r in &self.rows {
            out += &line(
                &r.id,
                r.status.name(),
                [r.pck, r.fb_accuracy, r.fb_f1, r.part_accuracy, r.part_f1, r.part_mean_iou, r.joint_error_mm],
            );
        }
        let s = &self.summary;
        out += &line(
            "mean",
            "",
            [s.pck, s.fb_accuracy, s.fb_f1, s.part_accuracy, s.part_f1, s.part_mean_iou, s.joint_error_mm],
        );
        for e in &self.errors {
            out += &format!("{:<24} error: {}\n", e.id, e.message);
        }
        out
    }
}

type PckSample = (Vec<Vector2<f64>>, Vec<Vector2<f64>>, Vec<bool>, f64);

fn eval_sample(
    m: &DatasetManifest,
    s: &super::Sample,
    fit: &FitResult,
    model: &BodyModel,
    map: &PartReductionMap,
    opts: &EvalOptions,
) -> Result<(EvalRow, Option<PckSample>), PipelineError> {
    let mut row = EvalRow { id: s.id.clone(), status: s.status, ..EvalRow::default() };
    let kin = Kinematics::new(model, &fit.pose_params(), &fit.shape_params(), &fit.translation_vec())?;
    let mut pck_sample = None;
    if let Some(p) = &s.gt_keypoints {
        let gt = read_keypoint_file(&m.resolve(p))?;
        let set = gt.resolve(model)?;
        let pred = project(&keypoint_positions(&kin, set), &m.camera)?;
        let visible: Vec<bool> = gt.confidence.iter().map(|&c| c > 0.0).collect();
        let size = pck_norm_size(&gt.points, &visible, opts.pck_normalization, &torso_keypoints(model, set))?;
        let r = pck_many(&[(&pred, &gt.points, &visible, size)], opts.pck_threshold)?;
        row.pck = Some(r.mean);
        pck_sample = Some((pred, gt.points, visible, size));
    }
    if let Some(p) = &s.gt_parts {
        let gt = read_mask_png(&m.resolve(p))?;
        let pred = super::render_reduced(model, fit, &m.camera, map)?;
        let parts = seg_scores(&pred, &gt, None)?;
        let fb = seg_scores(&foreground(&pred), &foreground(&gt), None)?;
        row.part_accuracy = Some(parts.accuracy);
        row.part_f1 = Some(parts.macro_f1);
        row.part_mean_iou = Some(parts.mean_iou);
        row.fb_accuracy = Some(fb.accuracy);
        row.fb_f1 = Some(fb.macro_f1);
    }
    if let Some(p) = &s.gt_joints {
        let path = m.resolve(p);
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        let gt: Vec<[f64; 3]> =
            serde_json::from_str(&text).map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?;
        let gt: Vec<Vector3<f64>> = gt.iter().map(|j| Vector3::from(*j)).collect();
        row.joint_error_mm = Some(joint3d_error(&kin.joints(), &gt, opts.alignment)?.mean_mm);
    }
    Ok((row, pck_sample))
}

/// Scores every fitted sample against whatever ground truth it carries.
pub fn cmd_eval(
    manifest_path: &Path,
    model: &BodyModel,
    map: &PartReductionMap,
    opts: &EvalOptions,
    jobs: Option<usize>,
) -> Result<EvalReport, PipelineError> {
    let m = DatasetManifest::load(manifest_path)?;
    let todo: Vec<&super::Sample> = m.samples.iter().filter(|s| s.fit.is_some()).collect();
    let results: Vec<_> = with_jobs(jobs, || {
        todo.par_iter()
            .map(|s| {
                let fit = m.load_fit(s.fit.as_deref().expect("filtered"));
                (s.id.clone(), fit.and_then(|fit| eval_sample(&m, s, &fit, model, map, opts)))
            })
            .collect()
    });
    let mut report = EvalReport::default();
    let mut pck_samples = Vec::new();
    for (id, r) in results {
        match r {
            Ok((row, pck)) => {
                report.rows.push(row);
                pck_samples.extend(pck);
            }
            Err(e) => report.errors.push(SampleError { id, message: e.to_string() }),
        }
    }
    let mean = |f: fn(&EvalRow) -> Option<f64>| {
        let v: Vec<f64> = report.rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let pooled: Vec<_> = pck_samples.iter().map(|(p, g, v, s)| (p.as_slice(), g.as_slice(), v.as_slice(), *s)).collect();
    report.summary = EvalSummary {
        n_samples: report.rows.len(),
        pck: pck_many(&pooled, opts.pck_threshold).ok().map(|r| r.mean),
        fb_accuracy: mean(|r| r.fb_accuracy),
        fb_f1: mean(|r| r.fb_f1),
        part_accuracy: mean(|r| r.part_accuracy),
        part_f1: mean(|r| r.part_f1),
        part_mean_iou: mean(|r| r.part_mean_iou),
        joint_error_mm: mean(|r| r.joint_error_mm),
        options: Some(opts.clone()),
    };
    Ok(report)
}
