use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body_model::BodyModel;
use crate::fitting::{write_keypoint_file, FitResult, KeypointSet2D};
use crate::labelgen::{generate_labels, PartReductionMap, ReducedClass, REDUCED_CLASSES};
use crate::render::{write_mask_png, write_rgb_png, Camera, Palette};
use crate::synth::{place_root, PoseSampler};

use super::{DatasetManifest, PipelineError, Sample, Status};

/// Recipe for a dataset of rendered random bodies with full ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDataset {
    pub n: usize,
    pub seed: u64,
    pub camera: Camera,
    /// Keypoint set written as the fitting input.
    pub keypoint_set: String,
    /// Standard deviation of the Gaussian noise on input keypoints, pixels.
    pub noise_px: f64,
    /// Root joint depth range, meters.
    pub depth: (f64, f64),
    pub sampler: PoseSampler,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        SyntheticDataset {
            n: 10,
            seed: 0,
            camera: Camera::centered(500.0, 320, 320),
            keypoint_set: "skeleton".into(),
            noise_px: 0.0,
            depth: (3.6, 4.4),
            sampler: PoseSampler::mini(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: String,
    pub truth: FitResult,
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::io(path, e)
}

/// Writes inputs, ground truth and `manifest.json` into `dir`. Every sample
/// carries its true surface landmarks as predicted landmarks.
pub fn write_synthetic_dataset(
    dir: &Path,
    model: &BodyModel,
    spec: &SyntheticDataset,
) -> Result<(PathBuf, Vec<SyntheticSample>), PipelineError> {
    model
        .keypoint_set(&spec.keypoint_set)
        .ok_or_else(|| PipelineError::Config(format!("unknown keypoint set {}", spec.keypoint_set)))?;
    let map = PartReductionMap::mini();
    let cam = spec.camera;
    let noise = Normal::new(0.0, spec.noise_px.max(0.0)).map_err(|e| PipelineError::Config(e.to_string()))?;
    for sub in ["kp", "sil", "gt", "lm", "img"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(write_err(&p))?;
    }
    let names: Vec<&str> = REDUCED_CLASSES[1..].iter().map(|c: &ReducedClass| c.name()).collect();
    let palette = Palette::for_names(&names);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut manifest = DatasetManifest::new(cam, dir);
    let mut out = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let id = format!("s{i:04}");
        let (pose, beta) = spec.sampler.sample(model, &mut rng);
        let depth = rng.gen_range(spec.depth.0..=spec.depth.1);
        let t = place_root(model, &beta, rng.gen_range(-0.2..=0.2), rng.gen_range(-0.1..=0.1), depth);
        let truth = FitResult::from_params(&spec.keypoint_set, &pose, &beta, &t);
        let labels = generate_labels(model, &truth, &cam, &map)?;

        let exact = KeypointSet2D::from_model(model, &spec.keypoint_set, &cam, &pose, &beta, &t)?;
        let noisy = KeypointSet2D::new(
            spec.keypoint_set.clone(),
            exact.points.iter().map(|p| p + nalgebra::Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))).collect(),
            exact.confidence.clone(),
        );
        let rel = |sub: &str, name: String| PathBuf::from(sub).join(name);
        let kp = rel("kp", format!("{id}.txt"));
        let sil = rel("sil", format!("{id}.png"));
        let parts = rel("gt", format!("{id}.parts6.png"));
        let joints = rel("gt", format!("{id}.joints.json"));
        let gt_kp = rel("gt", format!("{id}.kp.txt"));
        let lm = rel("lm", format!("{id}.txt"));
        let img = rel("img", format!("{id}.png"));
        write_keypoint_file(&noisy, &dir.join(&kp))?;
        write_keypoint_file(&exact, &dir.join(&gt_kp))?;
        let all_visible = KeypointSet2D::certain(labels.landmarks.set_name.clone(), labels.landmarks.points.clone());
        write_keypoint_file(&all_visible, &dir.join(&lm))?;
        write_mask_png(&labels.foreground, &dir.join(&sil))?;
        write_mask_png(&labels.reduced_mask, &dir.join(&parts))?;
        let rgb = palette.colorize(&labels.reduced_mask);
        write_rgb_png(cam.width as usize, cam.height as usize, rgb, &dir.join(&img))?;
        let mesh = crate::body_model::pose_mesh(model, &pose, &beta, &t)?;
        let jp = dir.join(&joints);
        let joints_json: Vec<[f64; 3]> = mesh.joints3d.iter().map(|j| [j.x, j.y, j.z]).collect();
        std::fs::write(&jp, serde_json::to_string(&joints_json).expect("joints serialize")).map_err(write_err(&jp))?;

        manifest.samples.push(Sample {
            id: id.clone(),
            keypoints: kp,
            image: Some(img),
            silhouette: Some(sil),
            gt_parts: Some(parts),
            gt_joints: Some(joints),
            gt_keypoints: Some(gt_kp),
            predicted_landmarks: Some(lm),
            status: Status::Unreviewed,
            ..Sample::default()
        });
        out.push(SyntheticSample { id, truth });
    }
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok((path, out))
}
