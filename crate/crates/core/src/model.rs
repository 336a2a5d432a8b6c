//! The dual-stream segmentation network.
//!
//! A shared encoder feeds two U-Net decoders: one for segmentation, one for
//! super-resolution. Each stream ends in a task head (1x1 conv + upsampling
//! for segmentation, a two-conv sub-pixel stack for SR). The full variant
//! additionally fuses the two decoder features through a dilated-group
//! convolution block and sigmoid attention, re-weights each stream
//! residually, and pushes the fused features through the *same* head
//! parameters as the plain streams.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph};
use crate::rng::SplitMix64;
use crate::scalar::{sc, Scalar};
use crate::tensor::{NodeId, TensorND};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Hidden width of the SR head's first convolution.
pub const SR_HIDDEN: usize = 32;

/// Ablation rungs, ordered by capability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// Plain U-Net; segmentation logits stay at input resolution.
    Baseline,
    /// Adds the xN bilinear upsampling after the segmentation head.
    Interp,
    /// Adds the super-resolution decoder and head.
    InterpSr,
    /// Adds attention fusion between the streams.
    InterpSrMaf,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::Baseline, Variant::Interp, Variant::InterpSr, Variant::InterpSrMaf];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Interp => "interp",
            Variant::InterpSr => "interp_sr",
            Variant::InterpSrMaf => "interp_sr_maf",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "interp" => Ok(Variant::Interp),
            "interp_sr" => Ok(Variant::InterpSr),
            "interp_sr_maf" => Ok(Variant::InterpSrMaf),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant {other:?} (expected baseline, interp, interp_sr, interp_sr_maf)"
            ))),
        }
    }

    pub fn has_sr(self) -> bool {
        matches!(self, Variant::InterpSr | Variant::InterpSrMaf)
    }

    pub fn has_maf(self) -> bool {
        self == Variant::InterpSrMaf
    }

    /// Upsampling after the segmentation head is active.
    pub fn has_interp(self) -> bool {
        self != Variant::Baseline
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub upscale: usize,
    pub base_width: usize,
    pub depth: usize,
    pub fusion_dim: usize,
    pub ssc_groups: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 2,
            upscale: 2,
            base_width: 16,
            depth: 3,
            fusion_dim: 32,
            ssc_groups: 4,
            variant: Variant::InterpSrMaf,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be >= 2".into()));
        }
        if self.upscale == 0 {
            return Err(Error::InvalidArgument("upscale must be >= 1".into()));
        }
        if self.depth < 2 {
            return Err(Error::InvalidArgument("depth must be >= 2".into()));
        }
        if self.ssc_groups < 2 {
            return Err(Error::InvalidArgument("ssc_groups must be >= 2".into()));
        }
        if self.fusion_dim % self.ssc_groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "fusion_dim {} not divisible by ssc_groups {}",
                self.fusion_dim, self.ssc_groups
            )));
        }
        Ok(())
    }

    /// Encoder stage widths: base_width doubling per down-stage.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_width << i).collect()
    }

    /// Input spatial extents must be divisible by this.
    pub fn divisibility(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    /// Running statistics are carried state, not optimized parameters.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    /// Weight decay applies to convolution weights only.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub kind: ParamKind,
    pub tensor: TensorND<S>,
}

/// Named tensors of one model. Name order (the map order) is the canonical
/// iteration order everywhere: checkpoints, optimizer state, gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    map: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, tensor: TensorND<S>) {
        let prev = self.map.insert(name.to_string(), Param { kind, tensor });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.map.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.map
            .iter()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// Outputs of one training forward pass, as graph node handles.
///
/// `o_sr` is present exactly for the SR-bearing variants, `o_fuseg`/`o_fusr`
/// exactly for the fusion variant.
#[derive(Debug, Clone)]
pub struct ForwardBundle {
    pub o_seg: NodeId,
    pub o_sr: Option<NodeId>,
    pub o_fuseg: Option<NodeId>,
    pub o_fusr: Option<NodeId>,
    pub f_seg: NodeId,
    pub f_sr: Option<NodeId>,
}

/// Per-graph binding of parameter names to leaf nodes. One leaf per name, so
/// parameters applied in several places (the shared heads) accumulate
/// gradient from every use site.
pub type BoundParams = BTreeMap<String, NodeId>;

#[derive(Debug, Clone)]
pub struct Model<S> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
}

struct NetCtx<'a, S> {
    g: &'a mut Graph<S>,
    store: &'a mut ParamStore<S>,
    bound: BoundParams,
    mode: BnMode,
    with_grads: bool,
}

impl<'a, S: Scalar> NetCtx<'a, S> {
    fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        let rg = self.with_grads && p.kind.trainable();
        let id = self.g.leaf(&p.tensor, rg);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    fn conv(
        &mut self,
        prefix: &str,
        input: NodeId,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.g.conv2d(input, w, Some(b), stride, padding, dilation)
    }

    fn bn(&mut self, prefix: &str, input: NodeId) -> Result<NodeId> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let mut rm = self.store.get(&mean_name).unwrap().tensor.data().to_vec();
        let mut rv = self.store.get(&var_name).unwrap().tensor.data().to_vec();
        let out =
            self.g.batch_norm(input, gamma, beta, BN_EPS, BN_MOMENTUM, self.mode, &mut rm, &mut rv)?;
        if self.mode == BnMode::Train {
            self.store.get_mut(&mean_name).unwrap().tensor.data_mut().copy_from_slice(&rm);
            self.store.get_mut(&var_name).unwrap().tensor.data_mut().copy_from_slice(&rv);
        }
        Ok(out)
    }

    /// conv 3x3 (pad 1) + BN + ReLU, the building block of every stage.
    fn conv_bn_relu(&mut self, conv: &str, bn: &str, input: NodeId) -> Result<NodeId> {
        let c = self.conv(conv, input, 1, 1, 1)?;
        let n = self.bn(bn, c)?;
        Ok(self.g.relu(n))
    }
}

impl<S: Scalar> Model<S> {
    /// Deterministic construction: He fan-in normals for conv weights, zeros
    /// for biases, identity affine and unit variance for the normalizations.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Model<S>> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);

        let add_conv = |store: &mut ParamStore<S>,
                            rng: &mut SplitMix64,
                            prefix: &str,
                            c_out: usize,
                            c_in: usize,
                            k: usize| {
            let std = (2.0 / (c_in * k * k) as f64).sqrt();
            let n = c_out * c_in * k * k;
            let data: Vec<S> = (0..n).map(|_| sc::<S>(rng.normal() * std)).collect();
            let w = TensorND::new(vec![c_out, c_in, k, k], data).unwrap();
            store.insert(&format!("{prefix}.weight"), ParamKind::Weight, w);
            store.insert(
                &format!("{prefix}.bias"),
                ParamKind::Bias,
                TensorND::zeros(&[c_out]),
            );
        };
        let add_bn = |store: &mut ParamStore<S>, prefix: &str, c: usize| {
            store.insert(
                &format!("{prefix}.gamma"),
                ParamKind::BnGamma,
                TensorND::filled(&[c], S::one()),
            );
            store.insert(
                &format!("{prefix}.beta"),
                ParamKind::BnBeta,
                TensorND::zeros(&[c]),
            );
            store.insert(
                &format!("{prefix}.running_mean"),
                ParamKind::BnRunningMean,
                TensorND::zeros(&[c]),
            );
            store.insert(
                &format!("{prefix}.running_var"),
                ParamKind::BnRunningVar,
                TensorND::filled(&[c], S::one()),
            );
        };

        let widths = cfg.widths();
        for (i, &w) in widths.iter().enumerate() {
            let c_in = if i == 0 { cfg.in_channels } else { widths[i - 1] };
            for (j, cin_j) in [c_in, w].into_iter().enumerate() {
                add_conv(&mut store, &mut rng, &format!("enc.stage{i}.conv{j}"), w, cin_j, 3);
                add_bn(&mut store, &format!("enc.stage{i}.bn{j}"), w);
            }
        }

        let add_decoder = |store: &mut ParamStore<S>, rng: &mut SplitMix64, name: &str| {
            for j in 0..cfg.depth - 1 {
                let c_in = widths[cfg.depth - 1 - j];
                let c_out = widths[cfg.depth - 2 - j];
                let p = format!("{name}.stage{j}");
                add_conv(store, rng, &format!("{p}.up"), c_out, c_in, 3);
                add_bn(store, &format!("{p}.upbn"), c_out);
                add_conv(store, rng, &format!("{p}.mix"), c_out, 2 * c_out, 3);
                add_bn(store, &format!("{p}.mixbn"), c_out);
            }
        };
        add_decoder(&mut store, &mut rng, "dec_seg");
        if cfg.variant.has_sr() {
            add_decoder(&mut store, &mut rng, "dec_sr");
        }

        add_conv(&mut store, &mut rng, "head_seg", cfg.num_classes, cfg.base_width, 1);
        if cfg.variant.has_sr() {
            add_conv(&mut store, &mut rng, "head_sr.conv0", SR_HIDDEN, cfg.base_width, 3);
            let c_sr = 3 * cfg.upscale * cfg.upscale;
            add_conv(&mut store, &mut rng, "head_sr.conv1", c_sr, SR_HIDDEN, 3);
        }

        if cfg.variant.has_maf() {
            let d = cfg.fusion_dim;
            let gw = d / cfg.ssc_groups;
            add_conv(&mut store, &mut rng, "maf.reduce", d, 2 * cfg.base_width, 1);
            for gidx in 0..cfg.ssc_groups {
                let k = if gidx == 0 { 1 } else { 3 };
                add_conv(&mut store, &mut rng, &format!("maf.ssc.group{gidx}"), gw, gw, k);
            }
            add_bn(&mut store, "maf.ssc.bn", d);
            add_conv(&mut store, &mut rng, "maf.att_seg", cfg.base_width, d, 1);
            add_conv(&mut store, &mut rng, "maf.att_sr", cfg.base_width, d, 1);
        }

        Ok(Model { cfg, store })
    }

    fn check_input(&self, x: &TensorND<S>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected input [B,{},H,W], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let div = self.cfg.divisibility();
        if shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input extents {}x{} must be divisible by {div} for depth {}",
                shape[2], shape[3], self.cfg.depth
            )));
        }
        Ok(())
    }

    fn encode(ctx: &mut NetCtx<S>, depth: usize, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let mut skips = Vec::new();
        let mut cur = x;
        for i in 0..depth {
            cur = ctx.conv_bn_relu(
                &format!("enc.stage{i}.conv0"),
                &format!("enc.stage{i}.bn0"),
                cur,
            )?;
            cur = ctx.conv_bn_relu(
                &format!("enc.stage{i}.conv1"),
                &format!("enc.stage{i}.bn1"),
                cur,
            )?;
            if i < depth - 1 {
                skips.push(cur);
                cur = ctx.g.max_pool2(cur)?;
            }
        }
        Ok((cur, skips))
    }

    fn decode(
        ctx: &mut NetCtx<S>,
        depth: usize,
        name: &str,
        f_en: NodeId,
        skips: &[NodeId],
    ) -> Result<NodeId> {
        let mut cur = f_en;
        for j in 0..depth - 1 {
            let p = format!("{name}.stage{j}");
            cur = ctx.g.bilinear_up(cur, 2)?;
            cur = ctx.conv_bn_relu(&format!("{p}.up"), &format!("{p}.upbn"), cur)?;
            cur = ctx.g.concat_channels(&[cur, skips[depth - 2 - j]])?;
            cur = ctx.conv_bn_relu(&format!("{p}.mix"), &format!("{p}.mixbn"), cur)?;
        }
        Ok(cur)
    }

    fn seg_head(ctx: &mut NetCtx<S>, upscale: usize, interp: bool, f: NodeId) -> Result<NodeId> {
        let logits = ctx.conv("head_seg", f, 1, 0, 1)?;
        if interp && upscale > 1 {
            ctx.g.bilinear_up(logits, upscale)
        } else {
            Ok(logits)
        }
    }

    fn sr_head(ctx: &mut NetCtx<S>, upscale: usize, f: NodeId) -> Result<NodeId> {
        let h = ctx.conv("head_sr.conv0", f, 1, 1, 1)?;
        let h = ctx.g.relu(h);
        let h = ctx.conv("head_sr.conv1", h, 1, 1, 1)?;
        ctx.g.pixel_shuffle(h, upscale)
    }

    fn ssc(ctx: &mut NetCtx<S>, cfg: &ModelConfig, f: NodeId) -> Result<NodeId> {
        let gw = cfg.fusion_dim / cfg.ssc_groups;
        let mut parts = Vec::with_capacity(cfg.ssc_groups);
        for gidx in 0..cfg.ssc_groups {
            let slice = ctx.g.slice_channels(f, gidx * gw, gw)?;
            let name = format!("maf.ssc.group{gidx}");
            let out = if gidx == 0 {
                ctx.conv(&name, slice, 1, 0, 1)?
            } else {
                ctx.conv(&name, slice, 1, gidx, gidx)?
            };
            parts.push(out);
        }
        let cat = ctx.g.concat_channels(&parts)?;
        ctx.bn("maf.ssc.bn", cat)
    }

    fn maf(
        ctx: &mut NetCtx<S>,
        cfg: &ModelConfig,
        f_seg: NodeId,
        f_sr: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        if ctx.g.value(f_seg).shape() != ctx.g.value(f_sr).shape() {
            return Err(Error::ShapeMismatch(format!(
                "fusion inputs differ: {:?} vs {:?}",
                ctx.g.value(f_seg).shape(),
                ctx.g.value(f_sr).shape()
            )));
        }
        let cat = ctx.g.concat_channels(&[f_seg, f_sr])?;
        let reduced = ctx.conv("maf.reduce", cat, 1, 0, 1)?;
        let fusion = Self::ssc(ctx, cfg, reduced)?;
        let reweight = |ctx: &mut NetCtx<S>, att: &str, f: NodeId| -> Result<NodeId> {
            let logits = ctx.conv(att, fusion, 1, 0, 1)?;
            let w = ctx.g.sigmoid(logits);
            let scaled = ctx.g.mul(w, f)?;
            ctx.g.add(scaled, f)
        };
        let out_seg = reweight(ctx, "maf.att_seg", f_seg)?;
        let out_sr = reweight(ctx, "maf.att_sr", f_sr)?;
        Ok((out_seg, out_sr))
    }

    /// Record the full training-mode forward pass on `graph`.
    ///
    /// Returns the variant-appropriate output bundle and the name-to-leaf
    /// binding for gradient collection. `BnMode::Train` updates the stored
    /// running statistics as a side effect.
    pub fn forward_train(
        &mut self,
        graph: &mut Graph<S>,
        x: &TensorND<S>,
        mode: BnMode,
    ) -> Result<(ForwardBundle, BoundParams)> {
        self.check_input(x)?;
        let cfg = self.cfg.clone();
        let mut ctx = NetCtx {
            g: graph,
            store: &mut self.store,
            bound: BTreeMap::new(),
            mode,
            with_grads: true,
        };
        let xid = ctx.g.constant(x.clone());
        let (f_en, skips) = Self::encode(&mut ctx, cfg.depth, xid)?;
        let f_seg = Self::decode(&mut ctx, cfg.depth, "dec_seg", f_en, &skips)?;
        let o_seg = Self::seg_head(&mut ctx, cfg.upscale, cfg.variant.has_interp(), f_seg)?;

        let mut f_sr = None;
        let mut o_sr = None;
        if cfg.variant.has_sr() {
            let f = Self::decode(&mut ctx, cfg.depth, "dec_sr", f_en, &skips)?;
            o_sr = Some(Self::sr_head(&mut ctx, cfg.upscale, f)?);
            f_sr = Some(f);
        }

        let mut o_fuseg = None;
        let mut o_fusr = None;
        if cfg.variant.has_maf() {
            let (rw_seg, rw_sr) = Self::maf(&mut ctx, &cfg, f_seg, f_sr.unwrap())?;
            o_fuseg = Some(Self::seg_head(&mut ctx, cfg.upscale, true, rw_seg)?);
            o_fusr = Some(Self::sr_head(&mut ctx, cfg.upscale, rw_sr)?);
        }

        let bundle = ForwardBundle { o_seg, o_sr, o_fuseg, o_fusr, f_seg, f_sr };
        Ok((bundle, ctx.bound))
    }

    /// Segmentation-only inference: encoder, segmentation decoder, head,
    /// channel softmax. The SR stream and fusion block are never evaluated.
    /// Uses stored running statistics and never updates them.
    pub fn forward_infer(&mut self, x: &TensorND<S>) -> Result<TensorND<S>> {
        self.check_input(x)?;
        let cfg = self.cfg.clone();
        let mut graph = Graph::new();
        let mut ctx = NetCtx {
            g: &mut graph,
            store: &mut self.store,
            bound: BTreeMap::new(),
            mode: BnMode::Eval,
            with_grads: false,
        };
        let xid = ctx.g.constant(x.clone());
        let (f_en, skips) = Self::encode(&mut ctx, cfg.depth, xid)?;
        let f_seg = Self::decode(&mut ctx, cfg.depth, "dec_seg", f_en, &skips)?;
        let o_seg = Self::seg_head(&mut ctx, cfg.upscale, cfg.variant.has_interp(), f_seg)?;
        let probs = ctx.g.softmax_channels(o_seg)?;
        Ok(graph.value(probs).clone())
    }

    /// Standalone access to the dilated-group block, for contract tests.
    pub fn ssc_forward(&mut self, graph: &mut Graph<S>, f: NodeId) -> Result<NodeId> {
        if !self.cfg.variant.has_maf() {
            return Err(Error::InvalidArgument(
                "ssc_forward requires the fusion variant".into(),
            ));
        }
        let cfg = self.cfg.clone();
        let mut ctx = NetCtx {
            g: graph,
            store: &mut self.store,
            bound: BTreeMap::new(),
            mode: BnMode::Eval,
            with_grads: false,
        };
        Self::ssc(&mut ctx, &cfg, f)
    }

    /// Standalone access to attention fusion, for contract tests. Returns
    /// the residually re-weighted (segmentation, SR) features.
    pub fn maf_forward(
        &mut self,
        graph: &mut Graph<S>,
        f_seg: NodeId,
        f_sr: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        if !self.cfg.variant.has_maf() {
            return Err(Error::InvalidArgument(
                "maf_forward requires the fusion variant".into(),
            ));
        }
        let cfg = self.cfg.clone();
        let mut ctx = NetCtx {
            g: graph,
            store: &mut self.store,
            bound: BTreeMap::new(),
            mode: BnMode::Eval,
            with_grads: false,
        };
        Self::maf(&mut ctx, &cfg, f_seg, f_sr)
    }
}
