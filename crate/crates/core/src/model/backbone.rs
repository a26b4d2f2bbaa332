use serde::{Deserialize, Serialize};

use super::layers::{global_avg_pool, Activation, Chain, Conv2d, FMap, Linear, ResBlock, Unit};
use super::params::ParamStore;
use super::ModelError;
use crate::classes::NUM_CLASSES;
use crate::scalar::Scalar;

pub const STAGES: usize = 4;

/// Shape of a four-stage residual backbone. Every stage opens with a
/// stride-2 block, so spatial size halves at each stage transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channel_widths: [usize; STAGES],
    pub blocks_per_stage: [usize; STAGES],
    pub stem_channels: usize,
    pub input_channels: usize,
    pub nominal_input_px: usize,
    pub class_count: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl BackboneConfig {
    /// Smallest configuration that keeps every fusion tap point.
    pub fn tiny(input_channels: usize) -> Self {
        Self {
            stage_channel_widths: [4, 8, 16, 32],
            blocks_per_stage: [1, 1, 1, 1],
            stem_channels: 4,
            input_channels,
            nominal_input_px: 16,
            class_count: NUM_CLASSES,
            activation: Activation::Silu,
        }
    }

    /// Desk-scale default.
    pub fn desk(input_channels: usize) -> Self {
        Self {
            stage_channel_widths: [16, 32, 64, 128],
            blocks_per_stage: [1, 1, 1, 1],
            stem_channels: 16,
            input_channels,
            nominal_input_px: 64,
            class_count: NUM_CLASSES,
            activation: Activation::Silu,
        }
    }

    /// Full-width residual network on 224 px inputs.
    pub fn standard(input_channels: usize) -> Self {
        Self {
            stage_channel_widths: [64, 128, 256, 512],
            blocks_per_stage: [2, 2, 2, 2],
            stem_channels: 64,
            input_channels,
            nominal_input_px: 224,
            class_count: NUM_CLASSES,
            activation: Activation::Relu,
        }
    }

    pub fn with_input_channels(self, input_channels: usize) -> Self {
        Self { input_channels, ..self }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.stage_channel_widths.contains(&0) || self.blocks_per_stage.contains(&0) || self.stem_channels == 0 {
            return bad("widths, block counts and stem channels must be positive");
        }
        if !matches!(self.input_channels, 3 | 6) {
            return bad("input_channels must be 3 or 6");
        }
        if self.nominal_input_px < 8 {
            return bad("nominal_input_px must be at least 8");
        }
        if self.class_count != NUM_CLASSES {
            return bad("class_count must be 6");
        }
        Ok(())
    }

    /// Spatial side after each stage for the nominal input.
    pub fn stage_sides(&self) -> [usize; STAGES] {
        let mut side = self.nominal_input_px;
        let mut out = [0; STAGES];
        for s in out.iter_mut() {
            side = (side + 2 - 3) / 2 + 1;
            *s = side;
        }
        out
    }
}

/// Stages `first..last` (zero-based, exclusive end) appended as units.
pub(crate) fn build_stages<T: Scalar>(
    store: &mut ParamStore<T>,
    seed: u64,
    prefix: &str,
    cfg: &BackboneConfig,
    mut in_ch: usize,
    first: usize,
    last: usize,
    units: &mut Vec<Unit>,
    stage_ends: &mut Vec<usize>,
) {
    for stage in first..last {
        let out_ch = cfg.stage_channel_widths[stage];
        for b in 0..cfg.blocks_per_stage[stage] {
            let stride = if b == 0 { 2 } else { 1 };
            let name = format!("{prefix}layer{}.{b}", stage + 1);
            units.push(Unit::Block(ResBlock::build(store, seed, &name, in_ch, out_ch, stride)));
            in_ch = out_ch;
        }
        stage_ends.push(units.len());
    }
}

/// Stem plus stages `0..upto`.
pub(crate) fn build_trunk<T: Scalar>(store: &mut ParamStore<T>, seed: u64, prefix: &str, cfg: &BackboneConfig, upto: usize) -> Chain {
    let mut units = vec![Unit::Stem(Conv2d::build(
        store,
        seed,
        &format!("{prefix}stem"),
        cfg.input_channels,
        cfg.stem_channels,
        3,
        1,
    ))];
    let mut stage_ends = Vec::new();
    build_stages(store, seed, prefix, cfg, cfg.stem_channels, 0, upto, &mut units, &mut stage_ends);
    Chain {
        units,
        stage_ends,
        activation: cfg.activation,
    }
}

/// Feature maps at every stage of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutputs<T> {
    pub stages: Vec<FMap<T>>,
    pub pooled: Vec<T>,
    pub logits: Vec<T>,
}

impl<T> StageOutputs<T> {
    pub fn stage(&self, n: usize) -> &FMap<T> {
        &self.stages[n - 1]
    }
}

/// Topology of a full backbone (stem, four stages, pooled classifier) whose
/// parameters live in an external store under `prefix`.
#[derive(Debug, Clone)]
pub struct BackboneNet {
    pub config: BackboneConfig,
    pub trunk: Chain,
    pub fc: Linear,
}

impl BackboneNet {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, seed: u64, prefix: &str, config: &BackboneConfig) -> Self {
        let trunk = build_trunk(store, seed, prefix, config, STAGES);
        let fc = Linear::build(
            store,
            seed,
            &format!("{prefix}fc"),
            config.stage_channel_widths[STAGES - 1],
            config.class_count,
        );
        Self {
            config: *config,
            trunk,
            fc,
        }
    }

    pub fn check_input<T: Scalar>(&self, x: &FMap<T>) -> Result<(), ModelError> {
        let c = &self.config;
        if x.channels != c.input_channels || x.height != c.nominal_input_px || x.width != c.nominal_input_px {
            return Err(ModelError::InputShape {
                expected: (c.input_channels, c.nominal_input_px, c.nominal_input_px),
                found: (x.channels, x.height, x.width),
            });
        }
        Ok(())
    }

    pub fn forward_stages<T: Scalar>(&self, p: &[T], x: &FMap<T>) -> Result<StageOutputs<T>, ModelError> {
        self.check_input(x)?;
        let (stages, _) = self.trunk.forward(p, x, false);
        let pooled = global_avg_pool(stages.last().expect("four stages"));
        let logits = self.fc.forward(p, &pooled);
        Ok(StageOutputs { stages, pooled, logits })
    }
}

/// A standalone backbone owning its parameters.
#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub net: BackboneNet,
    pub store: ParamStore<T>,
}

/// Deterministic construction from a seed.
pub fn build_backbone<T: Scalar>(config: &BackboneConfig, seed: u64) -> Result<Backbone<T>, ModelError> {
    config.validate()?;
    let mut store = ParamStore::new();
    let net = BackboneNet::build(&mut store, seed, "", config);
    Ok(Backbone { net, store })
}

impl<T: Scalar> Backbone<T> {
    pub fn config(&self) -> &BackboneConfig {
        &self.net.config
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }

    pub fn forward_stages(&self, x: &FMap<T>) -> Result<StageOutputs<T>, ModelError> {
        self.net.forward_stages(self.store.data(), x)
    }

    /// Logits for each input of a batch.
    pub fn forward_batch(&self, xs: &[FMap<T>]) -> Result<Vec<Vec<T>>, ModelError> {
        xs.iter().map(|x| self.forward_stages(x).map(|o| o.logits)).collect()
    }

    /// Overwrites parameters from another store, matching by name and shape.
    /// Every parameter of this backbone must be present.
    pub fn import_weights(&mut self, source: &ParamStore<T>) -> Result<(), ModelError> {
        import_matching(&mut self.store, source, "", "", |_| true)
    }
}

/// Copies every parameter of `dst` whose name starts with `dst_prefix` and
/// passes `filter` from `src` (names re-prefixed with `src_prefix`).
pub(crate) fn import_matching<T: Scalar>(
    dst: &mut ParamStore<T>,
    src: &ParamStore<T>,
    dst_prefix: &str,
    src_prefix: &str,
    filter: impl Fn(&str) -> bool,
) -> Result<(), ModelError> {
    let specs: Vec<_> = dst.specs().to_vec();
    for spec in specs {
        let Some(local) = spec.name.strip_prefix(dst_prefix) else {
            continue;
        };
        if !filter(local) {
            continue;
        }
        let src_name = format!("{src_prefix}{local}");
        let src_spec = src
            .spec(&src_name)
            .ok_or_else(|| ModelError::MissingParameter(src_name.clone()))?;
        if src_spec.shape != spec.shape {
            return Err(ModelError::ShapeMismatch {
                name: src_name,
                expected: spec.shape.clone(),
                found: src_spec.shape.clone(),
            });
        }
        let values = src.get(&src_name).expect("spec exists").to_vec();
        dst.get_mut(&spec.name).expect("own parameter").copy_from_slice(&values);
    }
    Ok(())
}
