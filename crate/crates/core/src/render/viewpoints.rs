use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::so3;

/// Elevation range (degrees) swept by [`sample_viewpoints`].
pub const DEFAULT_ELEVATION_BAND: (f64, f64) = (-15.0, 45.0);

/// A virtual camera around the subject, expressed as the rotation applied to
/// the subject (in its own frame) and the camera distance to its centroid.
///
/// Positive elevation means the camera looks down on the subject; azimuth
/// turns the subject about its vertical axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    pub distance: f64,
}

impl Viewpoint {
    pub fn frontal(distance: f64) -> Self {
        Viewpoint { elevation_deg: 0.0, azimuth_deg: 0.0, distance }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        so3::rot_x(self.elevation_deg.to_radians()) * so3::rot_y(self.azimuth_deg.to_radians())
    }

    /// Root rotation and translation that show a body, posed with
    /// `root_rotation` and zero translation, from this viewpoint.
    ///
    /// `root_joint` is the rest root joint and `centroid` the centroid of the
    /// posed (untranslated) mesh; the result puts the centroid on the optical
    /// axis at `self.distance`.
    pub fn place(
        &self,
        root_rotation: &Matrix3<f64>,
        root_joint: &Vector3<f64>,
        centroid: &Vector3<f64>,
    ) -> (Matrix3<f64>, Vector3<f64>) {
        let view = self.rotation();
        let translation = view * (root_joint - centroid) + Vector3::new(0.0, 0.0, self.distance) - root_joint;
        (view * root_rotation, translation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointSet {
    pub elevations: usize,
    pub azimuths: usize,
    pub views: Vec<Viewpoint>,
}

impl ViewpointSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Deterministic `elevations x azimuths` grid in the default elevation band.
pub fn sample_viewpoints(elevations: usize, azimuths: usize, distance: f64) -> ViewpointSet {
    sample_viewpoints_in_band(elevations, azimuths, distance, DEFAULT_ELEVATION_BAND)
}

/// Azimuths are uniform in `[0, 360)`; elevations are evenly spaced over
/// `band` inclusive, or 0 when a single elevation is requested.
pub fn sample_viewpoints_in_band(elevations: usize, azimuths: usize, distance: f64, band: (f64, f64)) -> ViewpointSet {
    let elevations = elevations.max(1);
    let azimuths = azimuths.max(1);
    let mut views = Vec::with_capacity(elevations * azimuths);
    for e in 0..elevations {
        let elevation_deg = if elevations == 1 {
            0.0f64.clamp(band.0, band.1)
        } else {
            band.0 + (band.1 - band.0) * e as f64 / (elevations - 1) as f64
        };
        for a in 0..azimuths {
            views.push(Viewpoint { elevation_deg, azimuth_deg: 360.0 * a as f64 / azimuths as f64, distance });
        }
    }
    ViewpointSet { elevations, azimuths, views }
}
