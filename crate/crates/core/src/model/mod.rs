//! Staged residual backbones, the four fusion architectures, and checkpoints.

mod backbone;
mod checkpoint;
mod fusion;
mod layers;
mod params;

pub use backbone::{build_backbone, Backbone, BackboneConfig, BackboneNet, StageOutputs, STAGES};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_FORMAT};
pub use fusion::{
    build_fusion, ChannelNorm, FusionStrategy, Modality, Model, ModelDescriptor, ModelInput, ModelKind,
};
pub use layers::{global_avg_pool, Activation, FMap};
pub use params::{ParamSpec, ParamStore, Slot};

use serde::{Deserialize, Serialize};

use crate::bands::ModalityStacks;
use crate::raster::resize_plane;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("input shape {found:?} does not match expected {expected:?}")]
    InputShape {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("checkpoint is missing parameter {0}")]
    MissingParameter(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("cannot concatenate feature maps {0:?} and {1:?}")]
    ConcatMismatch((usize, usize), (usize, usize)),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Bilinear upsampling of 10x10 px patches to the backbone's nominal grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputAdapter {
    pub nominal_input_px: usize,
}

impl InputAdapter {
    pub fn new(nominal_input_px: usize) -> Self {
        Self { nominal_input_px }
    }

    pub fn adapt<T: Scalar>(&self, stacks: &ModalityStacks<T>) -> ModelInput<T> {
        let n = self.nominal_input_px;
        let plane = |grid: &crate::raster::RasterGrid<T>| {
            let mut data = Vec::with_capacity(grid.bands() * n * n);
            for b in 0..grid.bands() {
                data.extend(resize_plane(grid.band_slice(b), grid.rows(), grid.cols(), n, n));
            }
            FMap::new(grid.bands(), n, n, data)
        };
        ModelInput {
            rgb: plane(&stacks.rgb),
            ndd: plane(&stacks.ndd),
        }
    }
}

/// Softmax with max subtraction.
pub fn softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the largest score; the first wins ties.
pub fn argmax<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            scores in proptest::collection::vec(-30.0f64..30.0, 6),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&scores);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            prop_assert_eq!(argmax(&scores), argmax(&shifted));
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn adapter_resizes_every_band() {
        use crate::bands::{NDD_BANDS, RGB_BANDS};
        use crate::raster::{GeoPoint, GridGeometry, RasterGrid};
        let geo = GridGeometry {
            rows: 10,
            cols: 10,
            resolution_m: 3.0,
            origin: GeoPoint::new(0.0, 0.0),
        };
        let rgb = RasterGrid::new(vec![0.25f32; 300], geo, RGB_BANDS.map(String::from).to_vec(), None).unwrap();
        let ndd = RasterGrid::new(vec![0.5f32; 300], geo, NDD_BANDS.map(String::from).to_vec(), None).unwrap();
        let x = InputAdapter::new(16).adapt(&ModalityStacks::new(rgb, ndd).unwrap());
        assert_eq!((x.rgb.channels, x.rgb.height, x.rgb.width), (3, 16, 16));
        assert!(x.rgb.data.iter().all(|&v| v == 0.25));
        assert!(x.ndd.data.iter().all(|&v| v == 0.5));
    }
}
