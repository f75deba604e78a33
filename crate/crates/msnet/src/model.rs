//! The segmentation backbone: a residual encoder-decoder with
//! summation skip connections, site-routed normalization in the shared
//! (universal) network, and one plain-BN decoder clone per site as an
//! auxiliary branch.
//!
//! Layer layout follows a pre-activation scheme: every convolution and
//! transposed convolution is preceded by normalization and a ReLU, except
//! the stem convolution which takes the raw input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::norm::{self, BatchStatsUpdate, BnState, DsbnState, Mode, SiteId};
use crate::rng::substream;

/// Width/resolution-scalable architecture configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Square spatial extent of the input.
    pub input_size: usize,
    /// Channel count of the first stage; stage `i` uses `base * 2^i`.
    pub base_channels: usize,
    /// Number of down/up-sampling stages.
    pub depth: usize,
    /// Residual blocks at the lowest resolution.
    pub bottleneck_blocks: usize,
    /// Output channels (background + foreground).
    pub num_classes: usize,
    /// Number of data sites S.
    pub num_sites: usize,
}

impl ArchConfig {
    /// Full-scale configuration: 384x384 input, 32 base channels.
    pub fn full_scale(num_sites: usize) -> Self {
        ArchConfig {
            input_size: 384,
            base_channels: 32,
            depth: 4,
            bottleneck_blocks: 2,
            num_classes: 2,
            num_sites,
        }
    }

    /// Desk-scale configuration: 64x64 input, 8 base channels.
    pub fn desk(num_sites: usize) -> Self {
        ArchConfig {
            input_size: 64,
            base_channels: 8,
            depth: 4,
            bottleneck_blocks: 2,
            num_classes: 2,
            num_sites,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Arch("depth must be at least 1".into()));
        }
        if self.bottleneck_blocks == 0 {
            return Err(Error::Arch("need at least one bottleneck block".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Arch("base_channels must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Arch("num_classes must be at least 2".into()));
        }
        if self.num_sites == 0 {
            return Err(Error::Arch("num_sites must be at least 1".into()));
        }
        let div = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::Arch(format!(
                "input_size {} not divisible by 2^depth = {}",
                self.input_size, div
            )));
        }
        if self.input_size / div < 2 {
            return Err(Error::Arch(format!(
                "input_size {} collapses below 2x2 at depth {}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    /// Channels of encoder stage `i` (0-based; 0 is the stem stage).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }
}

/// One row of the architecture audit table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// Feature-map sizes of every named layer, computed without allocating
/// any parameters. Also verifies that every summation skip joins equal
/// channel counts and extents.
pub fn shape_table(cfg: &ArchConfig) -> Result<Vec<LayerShape>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let s = cfg.input_size;
    let row = |name: String, h: usize, c: usize| LayerShape { name, h, w: h, c };
    rows.push(row("input".into(), s, 1));
    rows.push(row("conv1".into(), s, cfg.stage_channels(0)));
    let mut extent = s;
    let mut enc_shape = Vec::new();
    for i in 0..cfg.depth {
        rows.push(row(format!("enc_block{}", i + 1), extent, cfg.stage_channels(i)));
        enc_shape.push((extent, cfg.stage_channels(i)));
        extent /= 2;
        rows.push(row(format!("pool{}", i + 1), extent, cfg.stage_channels(i)));
    }
    for j in 0..cfg.bottleneck_blocks {
        rows.push(row(format!("bottleneck{}", j + 1), extent, cfg.stage_channels(cfg.depth)));
    }
    for i in 0..cfg.depth {
        extent *= 2;
        let c = cfg.stage_channels(cfg.depth - 1 - i);
        let (skip_extent, skip_c) = enc_shape[cfg.depth - 1 - i];
        if (extent, c) != (skip_extent, skip_c) {
            return Err(Error::Arch(format!(
                "skip connection mismatch at stage {}: decoder {}x{} vs encoder {}x{}",
                i + 1,
                extent,
                c,
                skip_extent,
                skip_c
            )));
        }
        rows.push(row(format!("up{}", i + 1), extent, c));
        rows.push(row(format!("dec_block{}", i + 1), extent, c));
    }
    rows.push(row("output".into(), s, cfg.num_classes));
    Ok(rows)
}

/// Convolution (or transposed convolution) parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A normalization layer: site-routed in the universal network, plain in
/// the auxiliary branches.
#[derive(Clone, Debug, PartialEq)]
pub enum Norm {
    Dsbn(DsbnState),
    Bn(BnState),
}

impl Norm {
    fn commit(&mut self, site: SiteId, stats: &crate::engine::BatchStats) -> Result<()> {
        match self {
            Norm::Dsbn(d) => d.site_mut(site)?.commit(stats),
            Norm::Bn(b) => b.commit(stats),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: ConvParams,
    pub norm2: Norm,
    pub conv2: ConvParams,
    /// 1x1 entry projection, present when the block changes channels.
    pub proj: Option<ConvParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub stem: ConvParams,
    pub blocks: Vec<ResBlock>,
    pub bottleneck: Vec<ResBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpBlock {
    pub norm: Norm,
    /// Transposed convolution kernel, layout `[c_in, c_out, k, k]`.
    pub deconv: ConvParams,
    pub block: ResBlock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub ups: Vec<UpBlock>,
    pub head_norm: Norm,
    pub head: ConvParams,
}

/// The three parameter groups: universal encoder, universal decoder, and
/// one decoder-shaped auxiliary branch per site (empty after stripping).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ArchConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub aux: Vec<Decoder>,
}

/// Selects one of the parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Decoder,
    /// 1-based auxiliary branch (matches its site id).
    Aux(usize),
}

impl Group {
    pub fn prefix(&self) -> String {
        match self {
            Group::Encoder => "encoder".into(),
            Group::Decoder => "decoder".into(),
            Group::Aux(s) => format!("aux{s}"),
        }
    }
}

/// A read-only view of one named state slot.
pub enum Slot<'a> {
    Param(&'a Tensor),
    Buffer(&'a Vec<f64>),
    Counter(&'a u64),
}

/// A mutable view of one named state slot.
pub enum SlotMut<'a> {
    Param(&'a mut Tensor),
    Buffer(&'a mut Vec<f64>),
    Counter(&'a mut u64),
}

// ── construction ────────────────────────────────────────────────────

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv(&mut self, c_out: usize, c_in: usize, k: usize) -> ConvParams {
        self.kernel(&[c_out, c_in, k, k], c_in * k * k, c_out)
    }

    fn deconv(&mut self, c_in: usize, c_out: usize, k: usize) -> ConvParams {
        self.kernel(&[c_in, c_out, k, k], c_in * k * k, c_out)
    }

    fn kernel(&mut self, shape: &[usize], fan_in: usize, bias_len: usize) -> ConvParams {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        ConvParams {
            weight: Tensor::from_vec(shape, data).expect("shape"),
            bias: Tensor::zeros(&[bias_len]),
        }
    }
}

fn make_norm(num_sites: Option<usize>, channels: usize) -> Norm {
    match num_sites {
        Some(s) => Norm::Dsbn(DsbnState::new(s, channels)),
        None => Norm::Bn(BnState::new(channels)),
    }
}

fn build_res_block(init: &mut Init, sites: Option<usize>, c_in: usize, c_out: usize) -> ResBlock {
    ResBlock {
        norm1: make_norm(sites, c_in),
        conv1: init.conv(c_out, c_in, 3),
        norm2: make_norm(sites, c_out),
        conv2: init.conv(c_out, c_out, 3),
        proj: (c_in != c_out).then(|| init.conv(c_out, c_in, 1)),
    }
}

fn build_decoder(init: &mut Init, cfg: &ArchConfig, sites: Option<usize>) -> Decoder {
    let mut ups = Vec::new();
    for i in 0..cfg.depth {
        let c_in = cfg.stage_channels(cfg.depth - i);
        let c_out = cfg.stage_channels(cfg.depth - 1 - i);
        ups.push(UpBlock {
            norm: make_norm(sites, c_in),
            deconv: init.deconv(c_in, c_out, 3),
            block: build_res_block(init, sites, c_out, c_out),
        });
    }
    let c0 = cfg.stage_channels(0);
    Decoder {
        ups,
        head_norm: make_norm(sites, c0),
        head: init.conv(cfg.num_classes, c0, 1),
    }
}

/// Build and deterministically initialize a model: He-normal kernels
/// (`std = sqrt(2/fan_in)`), zero biases, identity normalization for
/// every site.
pub fn build_model(cfg: &ArchConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    shape_table(cfg)?; // skip-connection audit
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(substream(seed, "init")) };
    let sites = Some(cfg.num_sites);

    let stem = init.conv(cfg.stage_channels(0), 1, 3);
    let mut blocks = Vec::new();
    for i in 0..cfg.depth {
        let c_in = if i == 0 { cfg.stage_channels(0) } else { cfg.stage_channels(i - 1) };
        blocks.push(build_res_block(&mut init, sites, c_in, cfg.stage_channels(i)));
    }
    let cb = cfg.stage_channels(cfg.depth);
    let mut bottleneck = Vec::new();
    for j in 0..cfg.bottleneck_blocks {
        let c_in = if j == 0 { cfg.stage_channels(cfg.depth - 1) } else { cb };
        bottleneck.push(build_res_block(&mut init, sites, c_in, cb));
    }
    let encoder = Encoder { stem, blocks, bottleneck };
    let decoder = build_decoder(&mut init, cfg, sites);
    let aux = (0..cfg.num_sites).map(|_| build_decoder(&mut init, cfg, None)).collect();
    Ok(ModelParams { config: *cfg, encoder, decoder, aux })
}

/// Drop the auxiliary branches, keeping only the universal network for
/// deployment. Universal inference is unaffected.
pub fn strip_aux(mut params: ModelParams) -> ModelParams {
    params.aux.clear();
    params
}

// ── state visitors ──────────────────────────────────────────────────

fn visit_norm<'a>(prefix: &str, n: &'a Norm, f: &mut dyn FnMut(String, Slot<'a>)) {
    let state = |p: String, st: &'a BnState, f: &mut dyn FnMut(String, Slot<'a>)| {
        f(format!("{p}.gamma"), Slot::Param(&st.gamma));
        f(format!("{p}.beta"), Slot::Param(&st.beta));
        f(format!("{p}.running_mean"), Slot::Buffer(&st.running_mean));
        f(format!("{p}.running_var"), Slot::Buffer(&st.running_var));
        f(format!("{p}.updates"), Slot::Counter(&st.updates));
    };
    match n {
        Norm::Dsbn(d) => {
            for (i, st) in d.states().iter().enumerate() {
                state(format!("{prefix}.site{}", i + 1), st, f);
            }
        }
        Norm::Bn(b) => state(prefix.to_string(), b, f),
    }
}

fn visit_norm_mut<'a>(prefix: &str, n: &'a mut Norm, f: &mut dyn FnMut(String, SlotMut<'a>)) {
    let state = |p: String, st: &'a mut BnState, f: &mut dyn FnMut(String, SlotMut<'a>)| {
        f(format!("{p}.gamma"), SlotMut::Param(&mut st.gamma));
        f(format!("{p}.beta"), SlotMut::Param(&mut st.beta));
        f(format!("{p}.running_mean"), SlotMut::Buffer(&mut st.running_mean));
        f(format!("{p}.running_var"), SlotMut::Buffer(&mut st.running_var));
        f(format!("{p}.updates"), SlotMut::Counter(&mut st.updates));
    };
    match n {
        Norm::Dsbn(d) => {
            for (i, st) in d.states_mut().iter_mut().enumerate() {
                state(format!("{prefix}.site{}", i + 1), st, f);
            }
        }
        Norm::Bn(b) => state(prefix.to_string(), b, f),
    }
}

fn visit_conv<'a>(prefix: &str, c: &'a ConvParams, f: &mut dyn FnMut(String, Slot<'a>)) {
    f(format!("{prefix}.weight"), Slot::Param(&c.weight));
    f(format!("{prefix}.bias"), Slot::Param(&c.bias));
}

fn visit_conv_mut<'a>(prefix: &str, c: &'a mut ConvParams, f: &mut dyn FnMut(String, SlotMut<'a>)) {
    f(format!("{prefix}.weight"), SlotMut::Param(&mut c.weight));
    f(format!("{prefix}.bias"), SlotMut::Param(&mut c.bias));
}

fn visit_block<'a>(prefix: &str, b: &'a ResBlock, f: &mut dyn FnMut(String, Slot<'a>)) {
    visit_norm(&format!("{prefix}.norm1"), &b.norm1, f);
    visit_conv(&format!("{prefix}.conv1"), &b.conv1, f);
    visit_norm(&format!("{prefix}.norm2"), &b.norm2, f);
    visit_conv(&format!("{prefix}.conv2"), &b.conv2, f);
    if let Some(p) = &b.proj {
        visit_conv(&format!("{prefix}.proj"), p, f);
    }
}

fn visit_block_mut<'a>(prefix: &str, b: &'a mut ResBlock, f: &mut dyn FnMut(String, SlotMut<'a>)) {
    visit_norm_mut(&format!("{prefix}.norm1"), &mut b.norm1, f);
    visit_conv_mut(&format!("{prefix}.conv1"), &mut b.conv1, f);
    visit_norm_mut(&format!("{prefix}.norm2"), &mut b.norm2, f);
    visit_conv_mut(&format!("{prefix}.conv2"), &mut b.conv2, f);
    if let Some(p) = &mut b.proj {
        visit_conv_mut(&format!("{prefix}.proj"), p, f);
    }
}

fn visit_decoder<'a>(prefix: &str, d: &'a Decoder, f: &mut dyn FnMut(String, Slot<'a>)) {
    for (i, up) in d.ups.iter().enumerate() {
        let p = format!("{prefix}.up{}", i + 1);
        visit_norm(&format!("{p}.norm"), &up.norm, f);
        visit_conv(&format!("{p}.deconv"), &up.deconv, f);
        visit_block(&format!("{p}.block"), &up.block, f);
    }
    visit_norm(&format!("{prefix}.head_norm"), &d.head_norm, f);
    visit_conv(&format!("{prefix}.head"), &d.head, f);
}

fn visit_decoder_mut<'a>(prefix: &str, d: &'a mut Decoder, f: &mut dyn FnMut(String, SlotMut<'a>)) {
    for (i, up) in d.ups.iter_mut().enumerate() {
        let p = format!("{prefix}.up{}", i + 1);
        visit_norm_mut(&format!("{p}.norm"), &mut up.norm, f);
        visit_conv_mut(&format!("{p}.deconv"), &mut up.deconv, f);
        visit_block_mut(&format!("{p}.block"), &mut up.block, f);
    }
    visit_norm_mut(&format!("{prefix}.head_norm"), &mut d.head_norm, f);
    visit_conv_mut(&format!("{prefix}.head"), &mut d.head, f);
}

impl ModelParams {
    /// Walk every named state slot (parameters, running-statistics
    /// buffers, update counters) in canonical order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, Slot<'a>)) {
        visit_conv("encoder.stem", &self.encoder.stem, f);
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            visit_block(&format!("encoder.block{}", i + 1), b, f);
        }
        for (j, b) in self.encoder.bottleneck.iter().enumerate() {
            visit_block(&format!("encoder.bottleneck{}", j + 1), b, f);
        }
        visit_decoder("decoder", &self.decoder, f);
        for (s, d) in self.aux.iter().enumerate() {
            visit_decoder(&format!("aux{}", s + 1), d, f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, SlotMut<'a>)) {
        visit_conv_mut("encoder.stem", &mut self.encoder.stem, f);
        for (i, b) in self.encoder.blocks.iter_mut().enumerate() {
            visit_block_mut(&format!("encoder.block{}", i + 1), b, f);
        }
        for (j, b) in self.encoder.bottleneck.iter_mut().enumerate() {
            visit_block_mut(&format!("encoder.bottleneck{}", j + 1), b, f);
        }
        visit_decoder_mut("decoder", &mut self.decoder, f);
        for (s, d) in self.aux.iter_mut().enumerate() {
            visit_decoder_mut(&format!("aux{}", s + 1), d, f);
        }
    }

    /// Trainable parameters of the given groups, canonical order.
    pub fn params_of(&self, groups: &[Group]) -> Vec<(String, &Tensor)> {
        let prefixes: Vec<String> = groups.iter().map(|g| format!("{}.", g.prefix())).collect();
        let mut out = Vec::new();
        self.visit(&mut |name, slot| {
            if let Slot::Param(t) = slot {
                if prefixes.iter().any(|p| name.starts_with(p.as_str())) {
                    out.push((name, t));
                }
            }
        });
        out
    }

    /// Convolution kernels of the given groups (biases and normalization
    /// affines excluded): the tensors the L2 penalty applies to.
    pub fn kernels_of(&self, groups: &[Group]) -> Vec<(String, &Tensor)> {
        self.params_of(groups).into_iter().filter(|(n, _)| n.ends_with(".weight")).collect()
    }

    /// Total number of trainable parameter scalars.
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, slot| {
            if let Slot::Param(t) = slot {
                n += t.numel();
            }
        });
        n
    }

    /// Apply collected batch statistics to the owning normalization
    /// layers, in canonical layer order and ascending site order.
    pub fn commit_stats(&mut self, updates: &[BatchStatsUpdate]) -> Result<()> {
        use std::collections::HashMap;
        let mut by_layer: HashMap<&str, Vec<&BatchStatsUpdate>> = HashMap::new();
        for u in updates {
            by_layer.entry(u.layer.as_str()).or_default().push(u);
        }
        for list in by_layer.values_mut() {
            list.sort_by_key(|u| u.site);
        }
        let mut result = Ok(());
        self.visit_norms_mut(&mut |name, norm| {
            if let Some(list) = by_layer.get(name) {
                for u in list.iter() {
                    if let Err(e) = norm.commit(u.site, &u.stats) {
                        if result.is_ok() {
                            result = Err(e);
                        }
                    }
                }
            }
        });
        result
    }

    fn visit_norms_mut(&mut self, f: &mut dyn FnMut(&str, &mut Norm)) {
        fn block(prefix: &str, b: &mut ResBlock, f: &mut dyn FnMut(&str, &mut Norm)) {
            f(&format!("{prefix}.norm1"), &mut b.norm1);
            f(&format!("{prefix}.norm2"), &mut b.norm2);
        }
        fn decoder(prefix: &str, d: &mut Decoder, f: &mut dyn FnMut(&str, &mut Norm)) {
            for (i, up) in d.ups.iter_mut().enumerate() {
                let p = format!("{prefix}.up{}", i + 1);
                f(&format!("{p}.norm"), &mut up.norm);
                block(&format!("{p}.block"), &mut up.block, f);
            }
            f(&format!("{prefix}.head_norm"), &mut d.head_norm);
        }
        for (i, b) in self.encoder.blocks.iter_mut().enumerate() {
            block(&format!("encoder.block{}", i + 1), b, f);
        }
        for (j, b) in self.encoder.bottleneck.iter_mut().enumerate() {
            block(&format!("encoder.bottleneck{}", j + 1), b, f);
        }
        decoder("decoder", &mut self.decoder, f);
        for (s, d) in self.aux.iter_mut().enumerate() {
            decoder(&format!("aux{}", s + 1), d, f);
        }
    }

    pub fn has_aux(&self) -> bool {
        !self.aux.is_empty()
    }
}

// ── forward passes ──────────────────────────────────────────────────

/// How a forward pass treats normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardCtx {
    pub mode: Mode,
    /// In training mode, whether batch statistics are collected for a
    /// running-statistics update. Target-producing forwards keep the
    /// batch-statistics math but leave the running values untouched.
    pub collect_stats: bool,
}

impl ForwardCtx {
    pub fn train() -> Self {
        ForwardCtx { mode: Mode::Train, collect_stats: true }
    }

    pub fn train_frozen() -> Self {
        ForwardCtx { mode: Mode::Train, collect_stats: false }
    }

    pub fn eval() -> Self {
        ForwardCtx { mode: Mode::Eval, collect_stats: false }
    }
}

/// Builds one forward pass on a graph, remembering which graph leaf holds
/// which named parameter (for gradient extraction) and which batch
/// statistics were produced (for the deferred running-stat commit).
pub struct Session<'g> {
    pub graph: &'g mut Graph,
    ctx: ForwardCtx,
    bindings: Vec<(String, NodeId)>,
    updates: Vec<BatchStatsUpdate>,
}

impl<'g> Session<'g> {
    pub fn new(graph: &'g mut Graph, ctx: ForwardCtx) -> Self {
        Session { graph, ctx, bindings: Vec::new(), updates: Vec::new() }
    }

    pub fn ctx(&self) -> ForwardCtx {
        self.ctx
    }

    /// Insert a named parameter as a graph leaf.
    pub fn param(&mut self, name: String, value: &Tensor) -> NodeId {
        let id = self.graph.leaf(value.clone());
        self.bindings.push((name, id));
        id
    }

    pub fn bindings(&self) -> &[(String, NodeId)] {
        &self.bindings
    }

    pub fn stat_updates(&self) -> &[BatchStatsUpdate] {
        &self.updates
    }

    pub fn into_parts(self) -> (Vec<(String, NodeId)>, Vec<BatchStatsUpdate>) {
        (self.bindings, self.updates)
    }

    fn norm_forward(&mut self, prefix: &str, n: &Norm, x: NodeId, site: SiteId) -> Result<NodeId> {
        let (state, param_prefix) = match n {
            Norm::Dsbn(d) => (d.site(site)?, format!("{prefix}.site{site}")),
            Norm::Bn(b) => (b, prefix.to_string()),
        };
        let fwd = match self.ctx.mode {
            Mode::Train => {
                let fwd = norm::bn_forward_batch(self.graph, x, state)?;
                if self.ctx.collect_stats {
                    self.updates.push(BatchStatsUpdate {
                        layer: prefix.to_string(),
                        site,
                        stats: fwd.stats.clone().expect("batch stats"),
                    });
                }
                fwd
            }
            Mode::Eval => norm::bn_forward_eval(self.graph, x, state)?,
        };
        self.bindings.push((format!("{param_prefix}.gamma"), fwd.gamma));
        self.bindings.push((format!("{param_prefix}.beta"), fwd.beta));
        Ok(fwd.out)
    }

    fn conv(&mut self, prefix: &str, c: &ConvParams, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let w = self.param(format!("{prefix}.weight"), &c.weight);
        let b = self.param(format!("{prefix}.bias"), &c.bias);
        self.graph.conv2d(x, w, b, stride, pad)
    }

    fn deconv(&mut self, prefix: &str, c: &ConvParams, x: NodeId, stride: usize) -> Result<NodeId> {
        let w = self.param(format!("{prefix}.weight"), &c.weight);
        let b = self.param(format!("{prefix}.bias"), &c.bias);
        self.graph.transposed_conv2d(x, w, b, stride)
    }

    fn res_block(&mut self, prefix: &str, blk: &ResBlock, x: NodeId, site: SiteId) -> Result<NodeId> {
        let n1 = self.norm_forward(&format!("{prefix}.norm1"), &blk.norm1, x, site)?;
        let a1 = self.graph.relu(n1);
        let pad = (blk.conv1.weight.shape()[2] - 1) / 2;
        let h1 = self.conv(&format!("{prefix}.conv1"), &blk.conv1, a1, 1, pad)?;
        let n2 = self.norm_forward(&format!("{prefix}.norm2"), &blk.norm2, h1, site)?;
        let a2 = self.graph.relu(n2);
        let h2 = self.conv(&format!("{prefix}.conv2"), &blk.conv2, a2, 1, pad)?;
        let shortcut = match &blk.proj {
            Some(p) => self.conv(&format!("{prefix}.proj"), p, x, 1, 0)?,
            None => x,
        };
        self.graph.add(h2, shortcut)
    }
}

/// Encoder activations shared by the universal decoder and the auxiliary
/// branches: per-stage skip outputs plus the bottleneck trunk.
#[derive(Clone, Debug)]
pub struct EncoderOut {
    pub skips: Vec<NodeId>,
    pub trunk: NodeId,
}

pub fn forward_encoder(
    sess: &mut Session,
    params: &ModelParams,
    images: NodeId,
    site: SiteId,
) -> Result<EncoderOut> {
    let cfg = &params.config;
    let (_, c, h, w) = sess.graph.value(images).dims4("forward_encoder")?;
    if c != 1 || h != cfg.input_size || w != cfg.input_size {
        return Err(Error::Shape {
            op: "forward_encoder",
            detail: format!(
                "expected [b,1,{},{}] images, got channel {} spatial {}x{}",
                cfg.input_size, cfg.input_size, c, h, w
            ),
        });
    }
    if site.0 == 0 || site.0 > cfg.num_sites {
        return Err(Error::UnknownSite { site: site.0, num_sites: cfg.num_sites });
    }
    let mut cur = sess.conv("encoder.stem", &params.encoder.stem, images, 1, 1)?;
    let mut skips = Vec::with_capacity(cfg.depth);
    for (i, blk) in params.encoder.blocks.iter().enumerate() {
        if i > 0 {
            cur = sess.graph.maxpool2d(cur)?;
        }
        cur = sess.res_block(&format!("encoder.block{}", i + 1), blk, cur, site)?;
        skips.push(cur);
    }
    cur = sess.graph.maxpool2d(cur)?;
    for (j, blk) in params.encoder.bottleneck.iter().enumerate() {
        cur = sess.res_block(&format!("encoder.bottleneck{}", j + 1), blk, cur, site)?;
    }
    Ok(EncoderOut { skips, trunk: cur })
}

fn forward_decoder(
    sess: &mut Session,
    prefix: &str,
    dec: &Decoder,
    enc: &EncoderOut,
    site: SiteId,
) -> Result<NodeId> {
    let depth = dec.ups.len();
    if enc.skips.len() != depth {
        return Err(Error::Shape {
            op: "forward_decoder",
            detail: format!("{} skip features for {} up-stages", enc.skips.len(), depth),
        });
    }
    let mut cur = enc.trunk;
    for (i, up) in dec.ups.iter().enumerate() {
        let p = format!("{prefix}.up{}", i + 1);
        let n = sess.norm_forward(&format!("{p}.norm"), &up.norm, cur, site)?;
        let a = sess.graph.relu(n);
        cur = sess.deconv(&format!("{p}.deconv"), &up.deconv, a, 2)?;
        cur = sess.graph.add(cur, enc.skips[depth - 1 - i])?;
        cur = sess.res_block(&format!("{p}.block"), &up.block, cur, site)?;
    }
    let n = sess.norm_forward(&format!("{prefix}.head_norm"), &dec.head_norm, cur, site)?;
    let a = sess.graph.relu(n);
    let logits = sess.conv(&format!("{prefix}.head"), &dec.head, a, 1, 0)?;
    sess.graph.softmax_channel(logits)
}

/// Run the universal network (encoder + site-routed decoder). Returns the
/// per-pixel class probabilities and the encoder features, which the
/// auxiliary branches consume.
pub fn forward_universal(
    sess: &mut Session,
    params: &ModelParams,
    images: NodeId,
    site: SiteId,
) -> Result<(NodeId, EncoderOut)> {
    let enc = forward_encoder(sess, params, images, site)?;
    let probs = forward_decoder(sess, "decoder", &params.decoder, &enc, site)?;
    Ok((probs, enc))
}

/// Run auxiliary branch `site` on already-computed encoder features.
pub fn forward_aux(
    sess: &mut Session,
    params: &ModelParams,
    enc: &EncoderOut,
    site: SiteId,
) -> Result<NodeId> {
    if params.aux.is_empty() {
        return Err(Error::NoAuxBranches);
    }
    if site.0 == 0 || site.0 > params.aux.len() {
        return Err(Error::UnknownSite { site: site.0, num_sites: params.aux.len() });
    }
    let dec = &params.aux[site.index()];
    forward_decoder(sess, &format!("aux{site}"), dec, enc, site)
}
