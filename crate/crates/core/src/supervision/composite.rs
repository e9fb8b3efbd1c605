use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{project_box, CameraIntrinsics, PixelBox, Pose, DEFAULT_Z_MIN};
use crate::graph::VariableKey;
use crate::map::MapState;

pub const DEFAULT_MAX_OVERLAYS: usize = 25;

/// Crop boxes pad the overlay box by this fraction of its size per side.
const CROP_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayEntry {
    pub key: VariableKey,
    pub number: u32,
    pub pixel_box: PixelBox,
    pub label: String,
    pub crop_box: PixelBox,
    /// World position at composite time; lets a ground-truth referee
    /// stand in for the vision model.
    pub position: Vector3<f64>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeSpec {
    pub frame_id: u64,
    pub width: u32,
    pub height: u32,
    pub overlays: Vec<OverlayEntry>,
}

impl CompositeSpec {
    pub fn is_empty(&self) -> bool {
        self.overlays.is_empty()
    }

    pub fn entry(&self, number: u32) -> Option<&OverlayEntry> {
        self.overlays.iter().find(|o| o.number == number)
    }

    pub fn key_of(&self, number: u32) -> Option<VariableKey> {
        self.entry(number).map(|o| o.key)
    }
}

/// Numbered overlay of every landmark whose center is in front of the
/// camera and whose projected box touches the image, in key order.
pub fn build_composite(
    map: &MapState,
    pose: &Pose,
    k: &CameraIntrinsics,
    frame_id: u64,
    max_overlays: usize,
) -> CompositeSpec {
    let mut overlays = Vec::new();
    for (key, lm) in &map.landmarks {
        if overlays.len() >= max_overlays {
            break;
        }
        let Some(hull) = project_box(k, pose, &lm.position, &lm.extent, DEFAULT_Z_MIN) else { continue };
        let Some(pixel_box) = hull.clip(k.width, k.height) else { continue };
        let crop_box = pixel_box.expand(CROP_MARGIN).clip(k.width, k.height).unwrap_or(pixel_box);
        overlays.push(OverlayEntry {
            key: *key,
            number: overlays.len() as u32 + 1,
            pixel_box,
            label: lm.semantics.primary_label().to_string(),
            crop_box,
            position: lm.position,
            labels: lm.semantics.labels().to_vec(),
        });
    }
    CompositeSpec { frame_id, width: k.width, height: k.height, overlays }
}
