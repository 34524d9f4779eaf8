//! Dense labels from accepted fits: part masks, reduced six-part and
//! foreground masks, and projected surface-landmark files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body_model::{pose_mesh, surface_landmarks, write_model, BodyModel, ModelError};
use crate::fitting::{write_keypoint_file, FitError, FitResult, KeypointSet2D};
use crate::render::{project, rasterize, write_mask_png, Camera, Mask, RasterMode, RenderError};

/// Landmarks whose depth is within this distance (meters) of the z-buffer
/// count as visible.
pub const VISIBILITY_TOLERANCE: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("the fitted body lies (partly) behind the camera")]
    BehindCamera,
    #[error("part id {0} has no entry in the reduction map")]
    UnmappedPart(u8),
    #[error("invalid reduction map: {0}")]
    InvalidMap(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Classes of the coarse segmentation; the discriminant is the mask value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum ReducedClass {
    Background = 0,
    Head = 1,
    Torso = 2,
    LeftArm = 3,
    RightArm = 4,
    LeftLeg = 5,
    RightLeg = 6,
}

pub const REDUCED_CLASSES: [ReducedClass; 7] = [
    ReducedClass::Background,
    ReducedClass::Head,
    ReducedClass::Torso,
    ReducedClass::LeftArm,
    ReducedClass::RightArm,
    ReducedClass::LeftLeg,
    ReducedClass::RightLeg,
];

impl ReducedClass {
    pub fn name(self) -> &'static str {
        match self {
            ReducedClass::Background => "background",
            ReducedClass::Head => "head",
            ReducedClass::Torso => "torso",
            ReducedClass::LeftArm => "left_arm",
            ReducedClass::RightArm => "right_arm",
            ReducedClass::LeftLeg => "left_leg",
            ReducedClass::RightLeg => "right_leg",
        }
    }
}

/// Maps model part labels onto the coarse classes. Entry `i` is the class of
/// part label `i` (mask value `i + 1`); mask value 0 is always background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartReductionMap {
    pub parts: Vec<ReducedClass>,
}

impl PartReductionMap {
    /// The bundled mini model's six parts.
    pub fn mini() -> Self {
        use ReducedClass::*;
        // torso, head, left upper arm, left forearm, right upper arm, right forearm
        PartReductionMap { parts: vec![Torso, Head, LeftArm, LeftArm, RightArm, RightArm] }
    }

    /// Every part of `model` must be mapped, and only onto a body class.
    pub fn validate(&self, model: &BodyModel) -> Result<(), LabelError> {
        if self.parts.len() < model.n_parts() {
            return Err(LabelError::InvalidMap(format!(
                "{} entries for a model with {} parts",
                self.parts.len(),
                model.n_parts()
            )));
        }
        if let Some(i) = self.parts.iter().position(|&c| c == ReducedClass::Background) {
            return Err(LabelError::InvalidMap(format!("part {i} maps to background")));
        }
        Ok(())
    }

    pub fn class_of(&self, value: u8) -> Result<ReducedClass, LabelError> {
        if value == 0 {
            return Ok(ReducedClass::Background);
        }
        self.parts.get(value as usize - 1).copied().ok_or(LabelError::UnmappedPart(value))
    }

    pub fn load(path: &Path) -> Result<Self, LabelError> {
        let map: PartReductionMap = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let Some(i) = map.parts.iter().position(|&c| c == ReducedClass::Background) {
            return Err(LabelError::InvalidMap(format!("part {i} maps to background")));
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<(), LabelError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Pixel-wise relabeling of a part mask into the coarse classes.
pub fn reduce_parts(mask: &Mask, map: &PartReductionMap) -> Result<Mask, LabelError> {
    let mut lut = [None; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        *slot = map.class_of(v as u8).ok().map(|c| c as u8);
    }
    let data = mask
        .data()
        .iter()
        .map(|&v| lut[v as usize].ok_or(LabelError::UnmappedPart(v)))
        .collect::<Result<Vec<u8>, _>>()?;
    Ok(Mask::from_vec(mask.width(), mask.height(), data)?)
}

/// 1 wherever any part is present.
pub fn foreground(mask: &Mask) -> Mask {
    let data = mask.data().iter().map(|&v| u8::from(v != 0)).collect();
    Mask::from_vec(mask.width(), mask.height(), data).expect("same size")
}

/// Pixels where the projected labels and an external human foreground
/// disagree; these are excluded from training and scoring.
pub fn ignore_mask(labels: &Mask, human_foreground: &Mask) -> Result<Mask, LabelError> {
    if !labels.same_size(human_foreground) {
        return Err(RenderError::Dimension(format!(
            "labels {}x{} vs foreground {}x{}",
            labels.width(),
            labels.height(),
            human_foreground.width(),
            human_foreground.height()
        ))
        .into());
    }
    let data = labels.data().iter().zip(human_foreground.data()).map(|(&a, &b)| u8::from((a != 0) != (b != 0))).collect();
    Ok(Mask::from_vec(labels.width(), labels.height(), data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub fit_id: String,
    pub model_hash: String,
    pub camera: Camera,
}

#[derive(Debug, Clone)]
pub struct LabelBundle {
    /// Part label + 1 per pixel, 0 background.
    pub part_mask: Mask,
    pub reduced_mask: Mask,
    pub foreground: Mask,
    /// Projected surface landmarks; confidence 1 if visible, 0 if occluded.
    pub landmarks: KeypointSet2D,
    pub provenance: Provenance,
}

impl LabelBundle {
    pub fn visible(&self) -> Vec<bool> {
        self.landmarks.confidence.iter().map(|&c| c > 0.0).collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn model_hash(model: &BodyModel) -> Result<String, LabelError> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    Ok(sha256_hex(&buf))
}

/// Content id of a fit: hash of its canonical JSON.
pub fn fit_id(fit: &FitResult) -> String {
    sha256_hex(&serde_json::to_vec(fit).expect("fit results serialize"))
}

/// Renders the labels of one fit.
pub fn generate_labels(
    model: &BodyModel,
    fit: &FitResult,
    cam: &Camera,
    map: &PartReductionMap,
) -> Result<LabelBundle, LabelError> {
    cam.validate()?;
    map.validate(model)?;
    let mesh = pose_mesh(model, &fit.pose_params(), &fit.shape_params(), &fit.translation_vec())?;
    if mesh.vertices.iter().any(|v| !(v.z > 0.0)) {
        return Err(LabelError::BehindCamera);
    }
    let (part_mask, raster) = rasterize(&mesh, model, cam, RasterMode::Parts);
    let reduced_mask = reduce_parts(&part_mask, map)?;
    let fg = foreground(&part_mask);

    let points3 = surface_landmarks(&mesh, model);
    let uv = project(&points3, cam)?;
    let (w, h) = (cam.width as i64, cam.height as i64);
    let confidence = points3
        .iter()
        .zip(&uv)
        .map(|(p, q)| {
            let (px, py) = (q.x.floor() as i64, q.y.floor() as i64);
            let mut visible = false;
            for y in py - 1..=py + 1 {
                for x in px - 1..=px + 1 {
                    if x < 0 || y < 0 || x >= w || y >= h {
                        continue;
                    }
                    if let Some(z) = raster.depth_at(x as usize, y as usize) {
                        visible |= (z - p.z).abs() <= VISIBILITY_TOLERANCE;
                    }
                }
            }
            if visible {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let landmarks = KeypointSet2D::new(model.surface_set_name(), uv, confidence);
    let provenance = Provenance { fit_id: fit_id(fit), model_hash: model_hash(model)?, camera: *cam };
    Ok(LabelBundle { part_mask, reduced_mask, foreground: fg, landmarks, provenance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMember {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub provenance: Provenance,
    pub members: Vec<BundleMember>,
}

pub const BUNDLE_MANIFEST: &str = "bundle.json";

/// Writes the bundle's files into `dir` plus a manifest with their hashes.
pub fn write_bundle(bundle: &LabelBundle, dir: &Path) -> Result<BundleManifest, LabelError> {
    std::fs::create_dir_all(dir)?;
    write_mask_png(&bundle.part_mask, &dir.join("parts.png"))?;
    write_mask_png(&bundle.reduced_mask, &dir.join("parts6.png"))?;
    write_mask_png(&bundle.foreground, &dir.join("foreground.png"))?;
    write_keypoint_file(&bundle.landmarks, &dir.join("landmarks.txt")).map_err(LabelError::Fit)?;
    let mut members = Vec::new();
    for file in ["parts.png", "parts6.png", "foreground.png", "landmarks.txt"] {
        let sha256 = sha256_hex(&std::fs::read(dir.join(file))?);
        members.push(BundleMember { file: file.to_string(), sha256 });
    }
    let manifest = BundleManifest { provenance: bundle.provenance.clone(), members };
    crate::util::write_atomic(&dir.join(BUNDLE_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests;
