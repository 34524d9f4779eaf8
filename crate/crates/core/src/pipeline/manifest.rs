use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fitting::FitResult;
use crate::render::Camera;

use super::PipelineError;

pub const MANIFEST_VERSION: u32 = 1;
/// Fit results live in this directory beside the manifest, one file per
/// content hash.
pub const FITS_DIR: &str = "fits";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    #[default]
    Unreviewed,
    Accepted,
    Rejected,
}

impl Status {
    pub const ALL: [Status; 3] = [Status::Unreviewed, Status::Accepted, Status::Rejected];

    pub fn name(self) -> &'static str {
        match self {
            Status::Unreviewed => "unreviewed",
            Status::Accepted => "accepted",
            Status::Rejected => "rejected",
        }
    }

    pub fn parse(s: &str) -> Option<Status> {
        Status::ALL.into_iter().find(|st| st.name() == s)
    }
}

/// One image of the dataset. Paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Sample {
    pub id: String,
    pub keypoints: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub silhouette: Option<PathBuf>,
    /// Ground-truth reduced part mask.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_parts: Option<PathBuf>,
    /// Ground-truth 3D joints, JSON list of `[x, y, z]` in meters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_joints: Option<PathBuf>,
    /// Ground-truth 2D keypoints in the keypoint file format.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_keypoints: Option<PathBuf>,
    /// Surface landmarks from an external predictor, used by the loop.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_landmarks: Option<PathBuf>,
    /// Content hash of the current fit under `fits/`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<String>,
    /// Hash of everything the current fit was computed from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_input: Option<String>,
    /// Earlier fits, oldest first.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub previous_fits: Vec<String>,
    pub status: Status,
    /// Error of the last command that failed on this sample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Sample {
    fn paths(&self) -> impl Iterator<Item = (&'static str, &PathBuf)> {
        [
            ("keypoints", Some(&self.keypoints)),
            ("image", self.image.as_ref()),
            ("silhouette", self.silhouette.as_ref()),
            ("gt_parts", self.gt_parts.as_ref()),
            ("gt_joints", self.gt_joints.as_ref()),
            ("gt_keypoints", self.gt_keypoints.as_ref()),
        ]
        .into_iter()
        .filter_map(|(k, p)| p.map(|p| (k, p)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub camera: Camera,
    pub samples: Vec<Sample>,
    /// Directory relative paths resolve against, when it is not the one
    /// holding the manifest (exported subsets point back at their source).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<PathBuf>,
    /// Effective base directory; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(camera: Camera, root: impl Into<PathBuf>) -> Self {
        DatasetManifest { version: MANIFEST_VERSION, camera, samples: Vec::new(), base: None, root: root.into() }
    }

    /// Parses and checks a manifest without touching the filesystem.
    pub fn from_json(text: &str, root: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let mut m: DatasetManifest = serde_json::from_str(text).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(PipelineError::Manifest(format!("unsupported manifest version {}", m.version)));
        }
        m.camera.validate().map_err(|e| PipelineError::Manifest(e.to_string()))?;
        let mut seen = HashSet::new();
        for s in &m.samples {
            if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id.starts_with('.') {
                return Err(PipelineError::Manifest(format!("invalid sample id {:?}", s.id)));
            }
            if !seen.insert(&s.id) {
                return Err(PipelineError::Manifest(format!("duplicate sample id {}", s.id)));
            }
        }
        let root = root.into();
        m.root = match &m.base {
            Some(b) => root.join(b),
            None => root,
        };
        Ok(m)
    }

    /// Loads a manifest and checks that every referenced input file exists.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = DatasetManifest::from_json(&text, root)?;
        for s in &m.samples {
            for (what, p) in s.paths() {
                if !m.resolve(p).is_file() {
                    return Err(PipelineError::Manifest(format!("sample {}: {what} file {} not found", s.id, p.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifests serialize");
        s.push('\n');
        s
    }

    /// Atomic write; a no-op when the file already holds the same content.
    pub fn save(&self, path: &Path) -> Result<bool, PipelineError> {
        let text = self.to_json();
        if std::fs::read(path).is_ok_and(|old| old == text.as_bytes()) {
            return Ok(false);
        }
        crate::util::write_atomic(path, text.as_bytes()).map_err(|e| PipelineError::io(path, e))?;
        Ok(true)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn fit_path(&self, fit_id: &str) -> PathBuf {
        self.root.join(FITS_DIR).join(format!("{fit_id}.json"))
    }

    pub fn load_fit(&self, fit_id: &str) -> Result<FitResult, PipelineError> {
        let path = self.fit_path(fit_id);
        let bytes = std::fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))
    }

    /// Stores a fit under its content hash and returns the hash.
    pub fn store_fit(&self, fit: &FitResult) -> Result<String, PipelineError> {
        let bytes = serde_json::to_vec(fit).expect("fit results serialize");
        let id = crate::labelgen::sha256_hex(&bytes);
        let path = self.fit_path(&id);
        if !path.is_file() {
            std::fs::create_dir_all(path.parent().expect("fit dir")).map_err(|e| PipelineError::io(&path, e))?;
            crate::util::write_atomic(&path, &bytes).map_err(|e| PipelineError::io(&path, e))?;
        }
        Ok(id)
    }

    pub fn count(&self, status: Status) -> usize {
        self.samples.iter().filter(|s| s.status == status).count()
    }

    /// The manifest restricted to samples with `status`, with an absolute
    /// base so it can be saved anywhere.
    pub fn subset(&self, status: Status) -> DatasetManifest {
        let root = std::path::absolute(&self.root).unwrap_or_else(|_| self.root.clone());
        DatasetManifest {
            samples: self.samples.iter().filter(|s| s.status == status).cloned().collect(),
            base: Some(root.clone()),
            root,
            ..self.clone()
        }
    }
}
