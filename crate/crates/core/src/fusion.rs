//! Three-stage RGB/IR fusion: per-modality neighborhood attention,
//! bidirectional cross-deformable attention, then pointwise-conv fusion of
//! the concatenated maps. `Concat` and `Add` are kept as baseline modes.

use std::fmt;
use std::str::FromStr;

use crate::attention::deformable::{cda_forward_graph, CDAConfig, CdaNodes};
use crate::attention::neighborhood::{na_forward_graph, NAConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Init, ParamStore};
use crate::tensor::FeatureMap;

/// How the two modalities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// Full pipeline: NA → bidirectional CDA → concat + 1×1 conv.
    #[default]
    Cda,
    /// 1×1 conv over the channel concatenation of the raw maps.
    Concat,
    /// Elementwise sum of the raw maps.
    Add,
    /// Placeholder for cross-modality interaction fusion; always errors.
    CmiStub,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cda" => Ok(FusionMode::Cda),
            "concat" => Ok(FusionMode::Concat),
            "add" => Ok(FusionMode::Add),
            "cmi-stub" | "cmi" => Ok(FusionMode::CmiStub),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Cda => "cda",
            FusionMode::Concat => "concat",
            FusionMode::Add => "add",
            FusionMode::CmiStub => "cmi-stub",
        })
    }
}

/// Configuration of the whole fusion stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub channels: usize,
    pub mode: FusionMode,
    pub na_rgb: NAConfig,
    pub na_ir: NAConfig,
    /// Updates RGB: queries from RGB, keys/values sampled from IR.
    pub cda_rgb: CDAConfig,
    /// Updates IR: queries from IR, keys/values sampled from RGB.
    pub cda_ir: CDAConfig,
}

impl FusionConfig {
    pub fn new(
        channels: usize,
        mode: FusionMode,
        window: usize,
        stride: usize,
        offset_scale: f64,
        offset_kernel: usize,
    ) -> Result<Self> {
        Ok(Self {
            channels,
            mode,
            na_rgb: NAConfig::new("na.rgb", channels, window)?,
            na_ir: NAConfig::new("na.ir", channels, window)?,
            cda_rgb: CDAConfig::new("cda.rgb", channels, stride, offset_scale, offset_kernel)?,
            cda_ir: CDAConfig::new("cda.ir", channels, stride, offset_scale, offset_kernel)?,
        })
    }

    /// Registers the parameters the configured mode uses.
    pub fn init_params(&self, store: &mut ParamStore) -> Result<()> {
        let d = self.channels;
        match self.mode {
            FusionMode::Cda => {
                self.na_rgb.init_params(store)?;
                self.na_ir.init_params(store)?;
                self.cda_rgb.init_params(store)?;
                self.cda_ir.init_params(store)?;
                init_fuse_conv(store, d)
            }
            FusionMode::Concat => init_fuse_conv(store, d),
            FusionMode::Add => Ok(()),
            FusionMode::CmiStub => Err(Error::NotImplemented("cmi-stub fusion")),
        }
    }
}

fn init_fuse_conv(store: &mut ParamStore, d: usize) -> Result<()> {
    store.init(
        "fuse.w",
        &[d, 2 * d],
        Init::XavierUniform {
            fan_in: 2 * d,
            fan_out: d,
        },
    )?;
    store.init("fuse.b", &[d], Init::Zeros)
}

/// Combines `f_a` and `f_b` with a non-attention mode. `Concat` stacks
/// `f_a` first, so selector weights `[I | 0]` return `f_a`.
pub fn fuse_graph(g: &mut Graph, f_a: NodeId, f_b: NodeId, mode: FusionMode, store: &ParamStore) -> Result<NodeId> {
    if g.shape(f_a) != g.shape(f_b) {
        return Err(Error::shape("fuse", g.shape(f_a), g.shape(f_b)));
    }
    match mode {
        FusionMode::Add => g.add(f_a, f_b),
        FusionMode::Concat => {
            let cat = g.concat(&[f_a, f_b])?;
            let w = g.param(store, "fuse.w")?;
            let b = g.param(store, "fuse.b")?;
            g.conv1x1(cat, w, Some(b))
        }
        FusionMode::CmiStub => Err(Error::NotImplemented("cmi-stub fusion")),
        FusionMode::Cda => Err(Error::pre(
            "fuse",
            "cda mode needs the per-modality configuration; use fuse_modalities",
        )),
    }
}

/// Intermediate maps of the full pipeline.
#[derive(Debug, Clone, Copy)]
pub struct FusionNodes {
    pub rgb_refined: NodeId,
    pub ir_refined: NodeId,
    pub rgb_updated: CdaNodes,
    pub ir_updated: CdaNodes,
    pub fused: NodeId,
}

/// The full NA → CDA → concat-conv pipeline.
pub fn fusion_forward_graph(
    g: &mut Graph,
    rgb: NodeId,
    ir: NodeId,
    cfg: &FusionConfig,
    store: &ParamStore,
) -> Result<FusionNodes> {
    if g.shape(rgb) != g.shape(ir) {
        return Err(Error::shape("fusion_forward", g.shape(rgb), g.shape(ir)));
    }
    let (rgb_refined, _) = na_forward_graph(g, rgb, &cfg.na_rgb, store)?;
    let (ir_refined, _) = na_forward_graph(g, ir, &cfg.na_ir, store)?;
    let rgb_updated = cda_forward_graph(g, rgb, rgb_refined, ir_refined, &cfg.cda_rgb, store)?;
    let ir_updated = cda_forward_graph(g, ir, ir_refined, rgb_refined, &cfg.cda_ir, store)?;
    let fused = fuse_graph(g, ir_updated.output, rgb_updated.output, FusionMode::Concat, store)?;
    Ok(FusionNodes {
        rgb_refined,
        ir_refined,
        rgb_updated,
        ir_updated,
        fused,
    })
}

/// Fuses an RGB/IR pair under `cfg.mode`.
pub fn fuse_modalities(g: &mut Graph, rgb: NodeId, ir: NodeId, cfg: &FusionConfig, store: &ParamStore) -> Result<NodeId> {
    match cfg.mode {
        FusionMode::Cda => Ok(fusion_forward_graph(g, rgb, ir, cfg, store)?.fused),
        mode => fuse_graph(g, ir, rgb, mode, store),
    }
}

/// Value-level [`fuse_graph`].
pub fn fuse(f_a: &FeatureMap, f_b: &FeatureMap, mode: FusionMode, store: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let a = g.input(f_a.clone());
    let b = g.input(f_b.clone());
    let out = fuse_graph(&mut g, a, b, mode, store)?;
    g.map(out)
}

/// Value-level [`fuse_modalities`].
pub fn fuse_pair(rgb: &FeatureMap, ir: &FeatureMap, cfg: &FusionConfig, store: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let r = g.input(rgb.clone());
    let i = g.input(ir.clone());
    let out = fuse_modalities(&mut g, r, i, cfg, store)?;
    g.map(out)
}

/// Value-level [`fusion_forward_graph`]; returns the fused map `F_q`.
pub fn fusion_forward(rgb: &FeatureMap, ir: &FeatureMap, cfg: &FusionConfig, store: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let r = g.input(rgb.clone());
    let i = g.input(ir.clone());
    let nodes = fusion_forward_graph(&mut g, r, i, cfg, store)?;
    g.map(nodes.fused)
}
