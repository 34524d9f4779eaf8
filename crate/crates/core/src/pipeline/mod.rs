//! Dataset-level commands behind the `upfit` binary.
//!
//! Every command reads a [`DatasetManifest`], works on its samples in
//! parallel and, where it changes the dataset, rewrites the manifest once at
//! the end from a single thread. Per-sample failures are collected in the
//! command's report instead of aborting the run.

mod dp;
mod fixture;
mod labels;
mod manifest;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body_model::{pose_mesh, BodyModel, ModelError};
use crate::direct_predict::DpError;
use crate::fitting::{fit, read_keypoint_file, FitConfig, FitError, FitResult, RatioTable};
use crate::labelgen::{model_hash, reduce_parts, LabelError, PartReductionMap};
use crate::metrics::{seg_scores, MetricError};
use crate::render::{rasterize, read_mask_png, Camera, Mask, RasterMode, RenderError};

pub use dp::{cmd_dp_predict, cmd_dp_train, DpPredictReport, DpTrainConfig, DpTrainReport};
pub use fixture::{write_synthetic_dataset, SyntheticDataset, SyntheticSample};
pub use labels::{cmd_eval, cmd_labelgen, EvalOptions, EvalReport, EvalRow, EvalSummary, LabelgenReport};
pub use manifest::{DatasetManifest, Sample, Status, FITS_DIR, MANIFEST_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub id: String,
    pub message: String,
}

/// Runs `f` on a pool of `jobs` threads; all cores when `None`.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("thread pool: {e}; using the global pool");
            f()
        }
    }
}

/// SHA-256 over length-prefixed parts.
pub fn hash_parts(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("configuration serializes")
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, PipelineError> {
    std::fs::read(path).map_err(|e| PipelineError::io(path, e))
}

/// Shared inputs of the fitting commands.
pub struct FitJob<'a> {
    pub model: &'a BodyModel,
    pub config: &'a FitConfig,
    pub table: &'a RatioTable,
    pub jobs: Option<usize>,
}

impl FitJob<'_> {
    /// Everything but the per-sample files that a fit depends on.
    fn context_hash(&self, cam: &Camera) -> Result<String, PipelineError> {
        Ok(hash_parts(&[
            b"fit-v1",
            model_hash(self.model)?.as_bytes(),
            json(self.config).as_bytes(),
            json(self.table).as_bytes(),
            json(cam).as_bytes(),
        ]))
    }

    /// Fits one sample to the keypoint file at `kp_path`; returns the fit
    /// and the hash of its inputs.
    fn fit_file(
        &self,
        m: &DatasetManifest,
        s: &Sample,
        kp_path: &Path,
        context: &str,
    ) -> Result<(FitResult, String), PipelineError> {
        let input = self.input_hash(m, s, kp_path, context)?;
        let sil_path = s.silhouette.as_ref().filter(|_| self.config.use_silhouette).map(|p| m.resolve(p));
        let kp = read_keypoint_file(kp_path)?;
        let sil = sil_path.as_deref().map(read_mask_png).transpose()?.map(|mask| mask.binarized());
        let result = fit(self.model, &m.camera, &kp, sil.as_ref(), self.config, self.table)?;
        if !result.is_finite() {
            return Err(FitError::Diverged { stage: "final".into() }.into());
        }
        Ok((result, input))
    }

    fn input_hash(&self, m: &DatasetManifest, s: &Sample, kp_path: &Path, context: &str) -> Result<String, PipelineError> {
        let kp_bytes = read_bytes(kp_path)?;
        let sil = s.silhouette.as_ref().filter(|_| self.config.use_silhouette).map(|p| read_bytes(&m.resolve(p))).transpose()?;
        Ok(hash_parts(&[context.as_bytes(), &kp_bytes, sil.as_deref().unwrap_or(b"-")]))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub fitted: Vec<String>,
    /// Unchanged inputs, already fitted.
    pub skipped: Vec<String>,
    /// Accepted samples are never refitted.
    pub accepted: Vec<String>,
    pub errors: Vec<SampleError>,
    pub manifest_written: bool,
}

enum Outcome {
    Skipped,
    Fitted { fit: FitResult, input: String },
    Failed(String),
}

/// Fits every sample without an accepted fit whose inputs changed since its
/// last fit.
pub fn cmd_fit(manifest_path: &Path, job: &FitJob<'_>) -> Result<FitReport, PipelineError> {
    let mut m = DatasetManifest::load(manifest_path)?;
    let context = job.context_hash(&m.camera)?;
    let mut report = FitReport::default();
    let todo: Vec<usize> = (0..m.samples.len()).filter(|&i| m.samples[i].status != Status::Accepted).collect();
    report.accepted = m.samples.iter().filter(|s| s.status == Status::Accepted).map(|s| s.id.clone()).collect();

    let outcomes: Vec<(usize, Outcome)> = with_jobs(job.jobs, || {
        todo.par_iter()
            .map(|&i| {
                let s = &m.samples[i];
                let kp_path = m.resolve(&s.keypoints);
                let unchanged = s.fit.as_ref().is_some_and(|f| m.fit_path(f).is_file())
                    && s.fit_input.is_some()
                    && job.input_hash(&m, s, &kp_path, &context).ok() == s.fit_input;
                if unchanged {
                    return (i, Outcome::Skipped);
                }
                let outcome = match job.fit_file(&m, s, &kp_path, &context) {
                    Ok((fit, input)) => Outcome::Fitted { fit, input },
                    Err(e) => Outcome::Failed(e.to_string()),
                };
                (i, outcome)
            })
            .collect()
    });

    for (i, outcome) in outcomes {
        match outcome {
            Outcome::Skipped => report.skipped.push(m.samples[i].id.clone()),
            Outcome::Fitted { fit, input } => {
                let id = m.store_fit(&fit)?;
                let s = &mut m.samples[i];
                if s.fit.as_deref() != Some(id.as_str()) {
                    if let Some(old) = s.fit.take() {
                        s.previous_fits.push(old);
                    }
                    s.fit = Some(id);
                    s.status = Status::Unreviewed;
                }
                s.fit_input = Some(input);
                s.error = None;
                report.fitted.push(s.id.clone());
            }
            Outcome::Failed(message) => {
                let s = &mut m.samples[i];
                log::warn!("sample {}: {message}", s.id);
                s.error = Some(message.clone());
                report.errors.push(SampleError { id: s.id.clone(), message });
            }
        }
    }
    report.manifest_written = m.save(manifest_path)?;
    Ok(report)
}

/// Reduced part mask of a fit. Unlike label generation this tolerates
/// bodies partly behind the camera, which render as empty.
pub fn render_reduced(model: &BodyModel, fit: &FitResult, cam: &Camera, map: &PartReductionMap) -> Result<Mask, PipelineError> {
    let mesh = pose_mesh(model, &fit.pose_params(), &fit.shape_params(), &fit.translation_vec())?;
    if mesh.vertices.iter().any(|v| !(v.z > 0.0)) {
        return Ok(Mask::new(cam.width as usize, cam.height as usize));
    }
    let (parts, _) = rasterize(&mesh, model, cam, RasterMode::Parts);
    Ok(reduce_parts(&parts, map)?)
}

/// Macro f1 of a fit's reduced part mask against a ground-truth mask.
pub fn part_f1(model: &BodyModel, fit: &FitResult, cam: &Camera, map: &PartReductionMap, gt: &Mask) -> Result<f64, PipelineError> {
    Ok(seg_scores(&render_reduced(model, fit, cam, map)?, gt, None)?.macro_f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRow {
    pub id: String,
    pub fit_before: String,
    pub fit_after: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_after: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_delta: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub rows: Vec<LoopRow>,
    /// Rejected samples without a predicted-landmark file.
    pub missing_predictions: Vec<String>,
    pub errors: Vec<SampleError>,
    pub manifest_written: bool,
}

impl LoopReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<24} {:>10} {:>10} {:>10}\n", "sample", "f1_before", "f1_after", "delta");
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            out.push_str(&format!("{:<24} {:>10} {:>10} {:>10}\n", r.id, f(r.f1_before), f(r.f1_after), f(r.f1_delta)));
        }
        for id in &self.missing_predictions {
            out.push_str(&format!("{id:<24} missing predicted landmarks\n"));
        }
        for e in &self.errors {
            out.push_str(&format!("{:<24} error: {}\n", e.id, e.message));
        }
        out
    }
}

/// Refits every rejected sample from its predicted surface landmarks, keeps
/// the old fit in the sample's history and returns it to review.
pub fn cmd_loop_iterate(manifest_path: &Path, job: &FitJob<'_>, map: &PartReductionMap) -> Result<LoopReport, PipelineError> {
    let mut m = DatasetManifest::load(manifest_path)?;
    map.validate(job.model)?;
    let context = job.context_hash(&m.camera)?;
    let mut report = LoopReport::default();
    let mut todo = Vec::new();
    for (i, s) in m.samples.iter().enumerate() {
        if s.status != Status::Rejected {
            continue;
        }
        match &s.predicted_landmarks {
            Some(p) if m.resolve(p).is_file() => todo.push(i),
            _ => report.missing_predictions.push(s.id.clone()),
        }
    }

    type Refit = Result<(FitResult, String, Option<(f64, f64)>), PipelineError>;
    let refits: Vec<(usize, Refit)> = with_jobs(job.jobs, || {
        todo.par_iter()
            .map(|&i| {
                let s = &m.samples[i];
                let lm = m.resolve(s.predicted_landmarks.as_ref().expect("checked above"));
                let run = || -> Refit {
                    let (new, input) = job.fit_file(&m, s, &lm, &context)?;
                    let f1 = match (&s.gt_parts, &s.fit) {
                        (Some(gt), Some(old)) => {
                            let gt = read_mask_png(&m.resolve(gt))?;
                            let before = part_f1(job.model, &m.load_fit(old)?, &m.camera, map, &gt)?;
                            let after = part_f1(job.model, &new, &m.camera, map, &gt)?;
                            Some((before, after))
                        }
                        _ => None,
                    };
                    Ok((new, input, f1))
                };
                (i, run())
            })
            .collect()
    });

    for (i, r) in refits {
        match r {
            Ok((fit, input, f1)) => {
                let id = m.store_fit(&fit)?;
                let s = &mut m.samples[i];
                let before = s.fit.clone().unwrap_or_default();
                if let Some(old) = s.fit.replace(id.clone()) {
                    s.previous_fits.push(old);
                }
                s.fit_input = Some(input);
                s.status = Status::Unreviewed;
                s.error = None;
                report.rows.push(LoopRow {
                    id: s.id.clone(),
                    fit_before: before,
                    fit_after: id,
                    f1_before: f1.map(|f| f.0),
                    f1_after: f1.map(|f| f.1),
                    f1_delta: f1.map(|f| f.1 - f.0),
                });
            }
            Err(e) => {
                let s = &mut m.samples[i];
                s.error = Some(e.to_string());
                report.errors.push(SampleError { id: s.id.clone(), message: e.to_string() });
            }
        }
    }
    report.manifest_written = m.save(manifest_path)?;
    Ok(report)
}

#[cfg(test)]
mod tests;
