use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::backbone::{build_stages, build_trunk, import_matching, Backbone, BackboneConfig, BackboneNet, STAGES};
use super::layers::{global_avg_pool, global_avg_pool_backward, Chain, ChainTape, FMap, Linear};
use super::params::{ParamStore, Slot};
use super::ModelError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Ndd,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ndd => "ndd",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "ndd" => Ok(Modality::Ndd),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Early,
    MiddleL2,
    MiddleL3,
    Late,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::Early,
        FusionStrategy::MiddleL2,
        FusionStrategy::MiddleL3,
        FusionStrategy::Late,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Early => "early",
            FusionStrategy::MiddleL2 => "middle-l2",
            FusionStrategy::MiddleL3 => "middle-l3",
            FusionStrategy::Late => "late",
        }
    }

    /// Stage after which branch maps are concatenated, for middle fusion.
    pub fn tap(self) -> Option<usize> {
        match self {
            FusionStrategy::MiddleL2 => Some(2),
            FusionStrategy::MiddleL3 => Some(3),
            _ => None,
        }
    }

    /// Whether the strategy inherits weights from single-modality models.
    pub fn inherits(self) -> bool {
        self != FusionStrategy::Early
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s || f.name().replace('-', "_") == s)
            .ok_or_else(|| format!("unknown fusion strategy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelKind {
    Single { modality: Modality },
    Fusion { strategy: FusionStrategy },
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Single { modality } => write!(f, "{modality}"),
            ModelKind::Fusion { strategy } => write!(f, "{strategy}"),
        }
    }
}

/// Per-channel affine map bringing NIR/DEM/NDVI to the RGB channel statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

impl Default for ChannelNorm {
    fn default() -> Self {
        Self {
            scale: [1.0; 3],
            shift: [0.0; 3],
        }
    }
}

impl ChannelNorm {
    /// Matches mean and standard deviation of ndd channel c to rgb channel c.
    pub fn fit<T: Scalar>(inputs: &[ModelInput<T>]) -> Self {
        let stats = |pick: &dyn Fn(&ModelInput<T>) -> &FMap<T>, c: usize| {
            let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
            for x in inputs {
                for &v in pick(x).plane(c) {
                    let v = v.as_f64();
                    n += 1.0;
                    sum += v;
                    sq += v * v;
                }
            }
            if n == 0.0 {
                return (0.0, 1.0);
            }
            let mean = sum / n;
            (mean, (sq / n - mean * mean).max(0.0).sqrt())
        };
        let mut out = Self::default();
        for c in 0..3 {
            let (rm, rs) = stats(&|x| &x.rgb, c);
            let (nm, ns) = stats(&|x| &x.ndd, c);
            let scale = if ns > 1e-12 { rs / ns } else { 1.0 };
            out.scale[c] = scale;
            out.shift[c] = rm - scale * nm;
        }
        out
    }

    pub fn apply<T: Scalar>(&self, ndd: &FMap<T>) -> FMap<T> {
        let n = ndd.height * ndd.width;
        let mut out = ndd.clone();
        for c in 0..ndd.channels.min(3) {
            let (a, b) = (T::of(self.scale[c]), T::of(self.shift[c]));
            out.data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = *v * a + b);
        }
        out
    }
}

/// Everything needed to rebuild a model's topology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub kind: ModelKind,
    /// Per-branch configuration; input_channels is 3. Early fusion widens it to 6.
    pub base: BackboneConfig,
    #[serde(default)]
    pub channel_norm: ChannelNorm,
    /// Lets middle and late fusion update inherited branch weights.
    #[serde(default)]
    pub fine_tune: bool,
}

/// Both modalities of one patch on the nominal grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    pub rgb: FMap<T>,
    pub ndd: FMap<T>,
}

#[derive(Debug, Clone)]
enum Arch {
    Single { modality: Modality, net: BackboneNet },
    Early { net: BackboneNet },
    Middle { rgb: Chain, ndd: Chain, head: Chain, fc: Linear },
    Late { rgb: Chain, ndd: Chain, fc: Linear },
}

/// A single-modality backbone or one of the four fusion architectures, with
/// all parameters in one store partitioned into trainable and frozen names.
#[derive(Debug, Clone)]
pub struct Model<T> {
    descriptor: ModelDescriptor,
    arch: Arch,
    store: ParamStore<T>,
    frozen: BTreeSet<String>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model of the described topology, initialized from `seed`.
    pub fn from_descriptor(descriptor: ModelDescriptor, seed: u64) -> Result<Self, ModelError> {
        let base = descriptor.base.with_input_channels(3);
        base.validate()?;
        let descriptor = ModelDescriptor { base, ..descriptor };
        let mut store = ParamStore::new();
        let arch = match descriptor.kind {
            ModelKind::Single { modality } => Arch::Single {
                modality,
                net: BackboneNet::build(&mut store, seed, "", &base),
            },
            ModelKind::Fusion { strategy } => match strategy {
                FusionStrategy::Early => Arch::Early {
                    net: BackboneNet::build(&mut store, seed, "", &base.with_input_channels(6)),
                },
                FusionStrategy::MiddleL2 | FusionStrategy::MiddleL3 => {
                    let tap = strategy.tap().expect("middle strategy");
                    let rgb = build_trunk(&mut store, seed, "rgb.", &base, tap);
                    let ndd = build_trunk(&mut store, seed, "ndd.", &base, tap);
                    let mut units = Vec::new();
                    let mut stage_ends = Vec::new();
                    let w_tap = base.stage_channel_widths[tap - 1];
                    build_stages(&mut store, seed, "head.", &base, 2 * w_tap, tap, STAGES, &mut units, &mut stage_ends);
                    let head = Chain {
                        units,
                        stage_ends,
                        activation: base.activation,
                    };
                    let fc = Linear::build(&mut store, seed, "fc", base.stage_channel_widths[STAGES - 1], base.class_count);
                    Arch::Middle { rgb, ndd, head, fc }
                }
                FusionStrategy::Late => {
                    let rgb = build_trunk(&mut store, seed, "rgb.", &base, STAGES);
                    let ndd = build_trunk(&mut store, seed, "ndd.", &base, STAGES);
                    let w4 = base.stage_channel_widths[STAGES - 1];
                    let fc = Linear::build(&mut store, seed, "fc", 2 * w4, base.class_count);
                    Arch::Late { rgb, ndd, fc }
                }
            },
        };
        let frozen = match (&arch, descriptor.fine_tune) {
            (Arch::Middle { .. } | Arch::Late { .. }, false) => store
                .specs()
                .iter()
                .filter(|s| s.name.starts_with("rgb.") || s.name.starts_with("ndd."))
                .map(|s| s.name.clone())
                .collect(),
            _ => BTreeSet::new(),
        };
        Ok(Self {
            descriptor,
            arch,
            store,
            frozen,
        })
    }

    /// Single-modality model initialized from `seed`.
    pub fn single(modality: Modality, config: &BackboneConfig, seed: u64) -> Result<Self, ModelError> {
        Self::from_descriptor(
            ModelDescriptor {
                kind: ModelKind::Single { modality },
                base: *config,
                channel_norm: ChannelNorm::default(),
                fine_tune: false,
            },
            seed,
        )
    }

    /// Wraps a standalone backbone as a single-modality model.
    pub fn from_backbone(modality: Modality, backbone: Backbone<T>) -> Result<Self, ModelError> {
        let mut model = Self::single(modality, backbone.config(), 0)?;
        model.import_weights(&backbone.store, "", "")?;
        Ok(model)
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    pub fn kind(&self) -> ModelKind {
        self.descriptor.kind
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn params(&self) -> &[T] {
        self.store.data()
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }

    pub fn nominal_input_px(&self) -> usize {
        self.descriptor.base.nominal_input_px
    }

    pub fn frozen_set(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn trainable_set(&self) -> BTreeSet<String> {
        self.store
            .specs()
            .iter()
            .filter(|s| !self.frozen.contains(&s.name))
            .map(|s| s.name.clone())
            .collect()
    }

    /// Buffer locations of every trainable tensor.
    pub fn trainable_slots(&self) -> Vec<Slot> {
        self.store
            .specs()
            .iter()
            .filter(|s| !self.frozen.contains(&s.name))
            .map(|s| Slot {
                offset: s.offset,
                len: s.len,
            })
            .collect()
    }

    pub fn set_channel_norm(&mut self, norm: ChannelNorm) {
        self.descriptor.channel_norm = norm;
    }

    /// Copies parameters named `dst_prefix*` from `src` (as `src_prefix*`).
    pub fn import_weights(&mut self, src: &ParamStore<T>, dst_prefix: &str, src_prefix: &str) -> Result<(), ModelError> {
        import_matching(&mut self.store, src, dst_prefix, src_prefix, |_| true)
    }

    fn check(&self, x: &FMap<T>, channels: usize) -> Result<(), ModelError> {
        let n = self.nominal_input_px();
        if x.channels != channels || x.height != n || x.width != n {
            return Err(ModelError::InputShape {
                expected: (channels, n, n),
                found: (x.channels, x.height, x.width),
            });
        }
        Ok(())
    }

    fn early_input(&self, x: &ModelInput<T>) -> Result<FMap<T>, ModelError> {
        self.check(&x.rgb, 3)?;
        self.check(&x.ndd, 3)?;
        let ndd = self.descriptor.channel_norm.apply(&x.ndd);
        Ok(x.rgb.concat(&ndd).expect("same grid"))
    }

    /// Stage outputs of one modality branch; for fusion models these stop at
    /// the branch's last stage.
    pub fn branch_stages(&self, modality: Modality, x: &FMap<T>) -> Result<Vec<FMap<T>>, ModelError> {
        self.check(x, 3)?;
        let p = self.store.data();
        let chain = match (&self.arch, modality) {
            (Arch::Single { net, modality: m }, _) if *m == modality => &net.trunk,
            (Arch::Middle { rgb, .. } | Arch::Late { rgb, .. }, Modality::Rgb) => rgb,
            (Arch::Middle { ndd, .. } | Arch::Late { ndd, .. }, Modality::Ndd) => ndd,
            _ => {
                return Err(ModelError::IncompatibleCheckpoint(format!(
                    "model {} has no {modality} branch",
                    self.kind()
                )))
            }
        };
        Ok(chain.forward(p, x, false).0)
    }

    /// Post-concatenation layers of middle fusion applied to a fused map.
    pub fn forward_head(&self, fused: &FMap<T>) -> Result<Vec<T>, ModelError> {
        let Arch::Middle { head, fc, .. } = &self.arch else {
            return Err(ModelError::IncompatibleCheckpoint("forward_head needs middle fusion".into()));
        };
        let p = self.store.data();
        let (stages, _) = head.forward(p, fused, false);
        Ok(fc.forward(p, &global_avg_pool(stages.last().expect("head stages"))))
    }

    /// Concatenated pooled branch vectors of late fusion.
    pub fn late_features(&self, x: &ModelInput<T>) -> Result<Vec<T>, ModelError> {
        let Arch::Late { .. } = &self.arch else {
            return Err(ModelError::IncompatibleCheckpoint("late_features needs late fusion".into()));
        };
        let mut v = global_avg_pool(self.branch_stages(Modality::Rgb, &x.rgb)?.last().expect("stages"));
        v.extend(global_avg_pool(self.branch_stages(Modality::Ndd, &x.ndd)?.last().expect("stages")));
        Ok(v)
    }

    /// Class scores for one patch.
    pub fn forward(&self, x: &ModelInput<T>) -> Result<Vec<T>, ModelError> {
        let p = self.store.data();
        match &self.arch {
            Arch::Single { modality, net } => {
                let input = match modality {
                    Modality::Rgb => &x.rgb,
                    Modality::Ndd => &x.ndd,
                };
                Ok(net.forward_stages(p, input)?.logits)
            }
            Arch::Early { net } => Ok(net.forward_stages(p, &self.early_input(x)?)?.logits),
            Arch::Middle { .. } => {
                let r = self.branch_stages(Modality::Rgb, &x.rgb)?;
                let n = self.branch_stages(Modality::Ndd, &x.ndd)?;
                let (r, n) = (r.last().expect("stages"), n.last().expect("stages"));
                let fused = r
                    .concat(n)
                    .ok_or(ModelError::ConcatMismatch((r.height, r.width), (n.height, n.width)))?;
                self.forward_head(&fused)
            }
            Arch::Late { fc, .. } => Ok(fc.forward(p, &self.late_features(x)?)),
        }
    }

    /// Scores for each input.
    pub fn forward_batch(&self, xs: &[ModelInput<T>]) -> Result<Vec<Vec<T>>, ModelError> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    /// Forward pass, loss from `loss_fn(scores) -> (loss, dloss/dscores)`, and
    /// backward pass accumulating into `grad`. Frozen branches are skipped.
    pub fn forward_backward(
        &self,
        x: &ModelInput<T>,
        grad: &mut [T],
        loss_fn: impl FnOnce(&[T]) -> (T, Vec<T>),
    ) -> Result<(T, Vec<T>), ModelError> {
        assert_eq!(grad.len(), self.store.len(), "gradient buffer size");
        let p = self.store.data();
        let train_branches = self.descriptor.fine_tune;
        let run_chain = |chain: &Chain, input: &FMap<T>| -> (Vec<FMap<T>>, ChainTape<T>) {
            let (stages, tape) = chain.forward(p, input, true);
            (stages, tape.expect("recorded"))
        };
        match &self.arch {
            Arch::Single { .. } | Arch::Early { .. } => {
                let (net, input) = match &self.arch {
                    Arch::Single { modality, net } => {
                        let input = match modality {
                            Modality::Rgb => x.rgb.clone(),
                            Modality::Ndd => x.ndd.clone(),
                        };
                        net.check_input(&input)?;
                        (net, input)
                    }
                    Arch::Early { net } => (net, self.early_input(x)?),
                    _ => unreachable!(),
                };
                let (stages, tape) = run_chain(&net.trunk, &input);
                let last = stages.last().expect("stages");
                let pooled = global_avg_pool(last);
                let scores = net.fc.forward(p, &pooled);
                let (loss, dscores) = loss_fn(&scores);
                let dpooled = net.fc.backward(p, &pooled, &dscores, grad, true).expect("dx");
                let dmap = global_avg_pool_backward(&dpooled, last.channels, last.height, last.width);
                net.trunk.backward(p, &tape, dmap, grad, false);
                Ok((loss, scores))
            }
            Arch::Middle { rgb, ndd, head, fc } => {
                self.check(&x.rgb, 3)?;
                self.check(&x.ndd, 3)?;
                let (rs, rtape) = run_chain(rgb, &x.rgb);
                let (ns, ntape) = run_chain(ndd, &x.ndd);
                let (r, n) = (rs.last().expect("stages"), ns.last().expect("stages"));
                let fused = r
                    .concat(n)
                    .ok_or(ModelError::ConcatMismatch((r.height, r.width), (n.height, n.width)))?;
                let (hs, htape) = run_chain(head, &fused);
                let last = hs.last().expect("stages");
                let pooled = global_avg_pool(last);
                let scores = fc.forward(p, &pooled);
                let (loss, dscores) = loss_fn(&scores);
                let dpooled = fc.backward(p, &pooled, &dscores, grad, true).expect("dx");
                let dmap = global_avg_pool_backward(&dpooled, last.channels, last.height, last.width);
                if let Some(dfused) = head.backward(p, &htape, dmap, grad, train_branches) {
                    let (dr, dn) = dfused.split_channels(r.channels);
                    rgb.backward(p, &rtape, dr, grad, false);
                    ndd.backward(p, &ntape, dn, grad, false);
                }
                Ok((loss, scores))
            }
            Arch::Late { rgb, ndd, fc } => {
                self.check(&x.rgb, 3)?;
                self.check(&x.ndd, 3)?;
                if !train_branches {
                    let features = self.late_features(x)?;
                    let scores = fc.forward(p, &features);
                    let (loss, dscores) = loss_fn(&scores);
                    fc.backward(p, &features, &dscores, grad, false);
                    return Ok((loss, scores));
                }
                let (rs, rtape) = run_chain(rgb, &x.rgb);
                let (ns, ntape) = run_chain(ndd, &x.ndd);
                let (r, n) = (rs.last().expect("stages"), ns.last().expect("stages"));
                let mut features = global_avg_pool(r);
                features.extend(global_avg_pool(n));
                let scores = fc.forward(p, &features);
                let (loss, dscores) = loss_fn(&scores);
                let dfeat = fc.backward(p, &features, &dscores, grad, true).expect("dx");
                let (dr, dn) = dfeat.split_at(r.channels);
                rgb.backward(p, &rtape, global_avg_pool_backward(dr, r.channels, r.height, r.width), grad, false);
                ndd.backward(p, &ntape, global_avg_pool_backward(dn, n.channels, n.height, n.width), grad, false);
                Ok((loss, scores))
            }
        }
    }
}

fn require_single<'a, T: Scalar>(
    ck: Option<&'a Model<T>>,
    modality: Modality,
    base: &BackboneConfig,
) -> Result<&'a Model<T>, ModelError> {
    let ck = ck.ok_or_else(|| ModelError::IncompatibleCheckpoint(format!("missing {modality} checkpoint")))?;
    match ck.kind() {
        ModelKind::Single { modality: m } if m == modality => {}
        other => {
            return Err(ModelError::IncompatibleCheckpoint(format!(
                "expected a single {modality} model, found {other}"
            )))
        }
    }
    let ck_base = ck.descriptor().base;
    let want = base.with_input_channels(3);
    if ck_base != want {
        return Err(ModelError::IncompatibleCheckpoint(format!(
            "{modality} checkpoint config {ck_base:?} differs from {want:?}"
        )));
    }
    Ok(ck)
}

/// Builds a fusion model. Middle and late fusion copy every branch parameter
/// from the single-modality models; early fusion ignores them.
pub fn build_fusion<T: Scalar>(
    strategy: FusionStrategy,
    base: &BackboneConfig,
    rgb: Option<&Model<T>>,
    ndd: Option<&Model<T>>,
    seed: u64,
) -> Result<Model<T>, ModelError> {
    let descriptor = ModelDescriptor {
        kind: ModelKind::Fusion { strategy },
        base: *base,
        channel_norm: ChannelNorm::default(),
        fine_tune: false,
    };
    let mut model = Model::from_descriptor(descriptor, seed)?;
    if strategy.inherits() {
        let rgb = require_single(rgb, Modality::Rgb, base)?;
        let ndd = require_single(ndd, Modality::Ndd, base)?;
        model.import_weights(rgb.store(), "rgb.", "")?;
        model.import_weights(ndd.store(), "ndd.", "")?;
    }
    Ok(model)
}
