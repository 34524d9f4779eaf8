//! Review renders: the fit turned about its vertical axis, shaded per body
//! part, plus the front view blended over the original image.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::body_model::{pose_mesh, BodyModel};
use crate::fitting::FitResult;
use crate::labelgen::{model_hash, sha256_hex};
use crate::pipeline::{hash_parts, DatasetManifest, Sample};
use crate::render::{rasterize_region, Camera, Palette, Viewport};
use crate::so3;

use super::{ReviewError, ReviewItem};

pub const REVIEW_AZIMUTHS: [f64; 4] = [0.0, 90.0, 180.0, 270.0];
const BACKGROUND: [u8; 3] = [48, 48, 48];

/// Content-addressed PNG files in one directory.
#[derive(Debug, Clone)]
pub struct AssetStore {
    dir: PathBuf,
}

pub fn is_asset_hash(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

impl AssetStore {
    pub fn open(dir: &Path) -> Result<Self, ReviewError> {
        std::fs::create_dir_all(dir.join("items")).map_err(|e| ReviewError::io(dir, e))?;
        Ok(AssetStore { dir: dir.to_path_buf() })
    }

    pub fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.png"))
    }

    pub fn put(&self, bytes: &[u8]) -> Result<String, ReviewError> {
        let hash = sha256_hex(bytes);
        let path = self.path(&hash);
        if !path.is_file() {
            crate::util::write_atomic(&path, bytes).map_err(|e| ReviewError::io(&path, e))?;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> Option<Vec<u8>> {
        if !is_asset_hash(hash) {
            return None;
        }
        std::fs::read(self.path(hash)).ok()
    }

    pub fn contains(&self, hash: &str) -> bool {
        is_asset_hash(hash) && self.path(hash).is_file()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetRef {
    pub hash: String,
    pub url: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub azimuth_deg: Option<f64>,
}

impl AssetRef {
    fn new(hash: String, azimuth_deg: Option<f64>) -> Self {
        AssetRef { url: format!("/assets/{hash}"), hash, azimuth_deg }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewAssets {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<AssetRef>,
    pub renders: Vec<AssetRef>,
    pub overlay: AssetRef,
}

impl ReviewAssets {
    pub fn hashes(&self) -> impl Iterator<Item = &str> {
        self.image.iter().chain(&self.renders).chain(std::iter::once(&self.overlay)).map(|a| a.hash.as_str())
    }
}

fn encode_png(width: u32, height: u32, rgb: Vec<u8>) -> Vec<u8> {
    let img = RgbImage::from_raw(width, height, rgb).expect("buffer matches the image size");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory png encoding");
    out.into_inner()
}

/// Shaded part render of the fit turned by `azimuth_deg` about the vertical
/// axis through its centroid. Returns RGB pixels and per-pixel coverage.
pub fn render_turned(
    model: &BodyModel,
    fit: &FitResult,
    cam: &Camera,
    azimuth_deg: f64,
) -> Result<(Vec<u8>, Vec<bool>), ReviewError> {
    let mesh = pose_mesh(model, &fit.pose_params(), &fit.shape_params(), &fit.translation_vec())?;
    let c = mesh.centroid();
    let r = so3::rot_y(azimuth_deg.to_radians());
    let verts: Vec<_> = mesh.vertices.iter().map(|v| r * (v - c) + c).collect();
    let raster = rasterize_region(&verts, &model.faces, cam, Viewport::full(cam));
    let names: Vec<String> = (0..model.n_parts()).map(|p| format!("part{p}")).collect();
    let palette = Palette::for_names(&names);
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut covered = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let Some(f) = raster.face_at(x, y) else {
                rgb.extend(BACKGROUND);
                covered.push(false);
                continue;
            };
            let [a, b, cc] = model.faces[f as usize].map(|i| verts[i as usize]);
            let n = (b - a).cross(&(cc - a));
            let view = -(a + b + cc) / 3.0;
            let lambert = (n.dot(&view) / (n.norm() * view.norm()).max(1e-12)).abs();
            let shade = 0.3 + 0.7 * lambert;
            let base = palette.color(model.part_label[f as usize] + 1).unwrap_or([200, 200, 200]);
            rgb.extend(base.map(|ch| (ch as f64 * shade).round().clamp(0.0, 255.0) as u8));
            covered.push(true);
        }
    }
    Ok((rgb, covered))
}

/// Original image at camera resolution, or black when absent.
fn base_image(path: Option<&Path>, cam: &Camera) -> Result<Vec<u8>, ReviewError> {
    let (w, h) = (cam.width, cam.height);
    let Some(path) = path else {
        return Ok(vec![0; (w * h * 3) as usize]);
    };
    let img = image::open(path).map_err(|e| ReviewError::Asset(format!("{}: {e}", path.display())))?.into_rgb8();
    let img = if img.dimensions() == (w, h) {
        img
    } else {
        image::imageops::resize(&img, w, h, image::imageops::FilterType::Triangle)
    };
    Ok(img.into_raw())
}

/// Renders (or finds in the cache) the review assets of a sample's fit.
pub fn prepare_review_assets(
    manifest: &DatasetManifest,
    sample: &Sample,
    model: &BodyModel,
    store: &AssetStore,
) -> Result<ReviewItem, ReviewError> {
    let fit_id = sample.fit.as_deref().ok_or_else(|| ReviewError::MissingFit(sample.id.clone()))?;
    let fit = manifest.load_fit(fit_id)?;
    let assets = cached_assets(manifest, sample, fit_id, &fit, model, store)?;
    Ok(ReviewItem {
        id: sample.id.clone(),
        status: sample.status,
        fit: fit_id.to_string(),
        assets,
        energies: fit.energies.clone(),
        lease: None,
    })
}

fn cached_assets(
    manifest: &DatasetManifest,
    sample: &Sample,
    fit_id: &str,
    fit: &FitResult,
    model: &BodyModel,
    store: &AssetStore,
) -> Result<ReviewAssets, ReviewError> {
    let cam = &manifest.camera;
    let image_path = sample.image.as_ref().map(|p| manifest.resolve(p));
    let image_bytes = match &image_path {
        Some(p) => Some(std::fs::read(p).map_err(|e| ReviewError::io(p, e))?),
        None => None,
    };
    let key = hash_parts(&[
        b"review-v1",
        fit_id.as_bytes(),
        model_hash(model)?.as_bytes(),
        serde_json::to_string(cam).expect("camera serializes").as_bytes(),
        image_bytes.as_deref().map(sha256_hex).unwrap_or_default().as_bytes(),
    ]);
    let index = store.dir.join("items").join(format!("{key}.json"));
    if let Ok(text) = std::fs::read_to_string(&index) {
        if let Ok(assets) = serde_json::from_str::<ReviewAssets>(&text) {
            if assets.hashes().all(|h| store.contains(h)) {
                return Ok(assets);
            }
        }
    }

    let image = match &image_bytes {
        Some(bytes) => {
            let png = image::load_from_memory(bytes).map_err(|e| ReviewError::Asset(e.to_string()))?.into_rgb8();
            let (w, h) = png.dimensions();
            Some(AssetRef::new(store.put(&encode_png(w, h, png.into_raw()))?, None))
        }
        None => None,
    };
    let mut renders = Vec::with_capacity(REVIEW_AZIMUTHS.len());
    let mut front = None;
    for az in REVIEW_AZIMUTHS {
        let (rgb, covered) = render_turned(model, fit, cam, az)?;
        renders.push(AssetRef::new(store.put(&encode_png(cam.width, cam.height, rgb.clone()))?, Some(az)));
        if front.is_none() {
            front = Some((rgb, covered));
        }
    }
    let (front_rgb, covered) = front.expect("at least one azimuth");
    let mut overlay = base_image(image_path.as_deref(), cam)?;
    for (i, &c) in covered.iter().enumerate() {
        if c {
            for k in 0..3 {
                let (a, b) = (overlay[3 * i + k] as u16, front_rgb[3 * i + k] as u16);
                overlay[3 * i + k] = ((a + b + 1) / 2) as u8;
            }
        }
    }
    let overlay = AssetRef::new(store.put(&encode_png(cam.width, cam.height, overlay))?, None);
    let assets = ReviewAssets { image, renders, overlay };
    crate::util::write_atomic(&index, serde_json::to_string_pretty(&assets).expect("assets serialize").as_bytes())
        .map_err(|e| ReviewError::io(&index, e))?;
    Ok(assets)
}
