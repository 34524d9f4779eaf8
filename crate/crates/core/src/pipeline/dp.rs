use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::BodyModel;
use crate::direct_predict::{predict, refine_global_rotation, save_dp_model, synthesize_training_set, train, DpModel, ForestParams};
use crate::fitting::read_keypoint_file;
use crate::render::{sample_viewpoints, Camera};
use crate::synth::PoseSampler;

use super::{with_jobs, DatasetManifest, PipelineError, SampleError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpTrainConfig {
    pub n_poses: usize,
    pub elevations: usize,
    pub azimuths: usize,
    /// Camera distance to the body centroid, meters.
    pub distance: f64,
    pub camera: Camera,
    pub sampler: PoseSampler,
    pub forest: ForestParams,
}

impl Default for DpTrainConfig {
    fn default() -> Self {
        DpTrainConfig {
            n_poses: 2000,
            elevations: 5,
            azimuths: 36,
            distance: 4.0,
            camera: Camera::centered(500.0, 320, 320),
            sampler: PoseSampler::mini(),
            forest: ForestParams::default(),
        }
    }
}

impl DpTrainConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let cfg: DpTrainConfig = serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.forest.validate().map_err(PipelineError::Config)?;
        cfg.camera.validate()?;
        if cfg.n_poses == 0 || !(cfg.distance > 0.0) {
            return Err(PipelineError::Config("n_poses and distance must be positive".into()));
        }
        Ok(cfg)
    }

    /// Poses in the body's own frame: the root rotation comes from the views.
    pub fn sample_poses(&self, model: &BodyModel, seed: u64) -> Vec<(crate::body_model::PoseParams, crate::body_model::ShapeParams)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.n_poses)
            .map(|_| {
                let mut pose = self.sampler.sample_body_pose(model, &mut rng);
                pose.0[0] = Vector3::zeros();
                (pose, self.sampler.sample_beta(model, &mut rng))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpTrainReport {
    pub rows: usize,
    pub dropped: usize,
    pub training_hash: String,
    pub synthesis_seconds: f64,
    pub training_seconds: f64,
}

pub fn cmd_dp_train(
    model: &BodyModel,
    cfg: &DpTrainConfig,
    seed: u64,
    out: &Path,
    jobs: Option<usize>,
) -> Result<(DpModel, DpTrainReport), PipelineError> {
    with_jobs(jobs, || {
        let t0 = Instant::now();
        let poses = cfg.sample_poses(model, seed);
        let views = sample_viewpoints(cfg.elevations, cfg.azimuths, cfg.distance);
        let ts = synthesize_training_set(&poses, model, &views, &cfg.camera)?;
        let t1 = Instant::now();
        let dp = train(&ts, &cfg.forest, seed)?;
        let t2 = Instant::now();
        save_dp_model(&dp, out)?;
        let report = DpTrainReport {
            rows: ts.len(),
            dropped: ts.dropped,
            training_hash: dp.meta.training_hash.clone(),
            synthesis_seconds: (t1 - t0).as_secs_f64(),
            training_seconds: (t2 - t1).as_secs_f64(),
        };
        Ok((dp, report))
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DpPredictReport {
    /// Sample id and the written file.
    pub written: Vec<(String, String)>,
    pub skipped: Vec<String>,
    pub errors: Vec<SampleError>,
}

/// Predicts a body configuration for every sample with surface landmarks
/// (its predicted landmarks, else its keypoints when they are surface
/// landmarks) and writes them as fit results to `out/<id>.json`.
pub fn cmd_dp_predict(
    manifest_path: &Path,
    model: &BodyModel,
    dp: &DpModel,
    out: &Path,
    refine_steps: usize,
    jobs: Option<usize>,
) -> Result<DpPredictReport, PipelineError> {
    let m = DatasetManifest::load(manifest_path)?;
    std::fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let surface = model.surface_set_name();
    let results: Vec<(String, Result<Option<String>, PipelineError>)> = with_jobs(jobs, || {
        m.samples
            .par_iter()
            .map(|s| {
                let run = || -> Result<Option<String>, PipelineError> {
                    let candidates = s.predicted_landmarks.iter().chain(std::iter::once(&s.keypoints));
                    let mut kp = None;
                    for p in candidates {
                        let k = read_keypoint_file(&m.resolve(p))?;
                        if k.set_name == surface {
                            kp = Some(k);
                            break;
                        }
                    }
                    let Some(kp) = kp else {
                        return Ok(None);
                    };
                    let pred = predict(dp, model, &kp.points, &m.camera)?;
                    let fit = if refine_steps > 0 {
                        refine_global_rotation(&pred, model, &m.camera, &kp, refine_steps)?
                    } else {
                        pred.to_fit_result(&surface)
                    };
                    let path = out.join(format!("{}.json", s.id));
                    let bytes = serde_json::to_vec_pretty(&fit).expect("fit results serialize");
                    if std::fs::read(&path).ok().as_deref() != Some(bytes.as_slice()) {
                        crate::util::write_atomic(&path, &bytes).map_err(|e| PipelineError::io(&path, e))?;
                    }
                    Ok(Some(path.display().to_string()))
                };
                (s.id.clone(), run())
            })
            .collect()
    });
    let mut report = DpPredictReport::default();
    for (id, r) in results {
        match r {
            Ok(Some(path)) => report.written.push((id, path)),
            Ok(None) => report.skipped.push(id),
            Err(e) => report.errors.push(SampleError { id, message: e.to_string() }),
        }
    }
    Ok(report)
}
