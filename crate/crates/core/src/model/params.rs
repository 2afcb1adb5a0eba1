//! Parameter tree of the network.
//!
//! Every learnable tensor is the weight or bias of some convolution, so the
//! tree is made of [`ConvSpec`]s. The handle type `P` is `Tensor<T>` for
//! stored parameters, [`Var`] once bound to a tape, and `()` when only the
//! layout matters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::config::NetConfig;
use crate::nn::{ConvGeometry, ConvSpec, GruParams};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// One inner-scale connection block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    /// Grouped 3×3 conv per resolution; index `i` works at `1 / 2^i`.
    pub branches: Vec<ConvSpec<P>>,
    /// 1×1 fusions feeding branch `i + 1` into branch `i`. Empty when the
    /// inner connection is disabled.
    pub links: Vec<ConvSpec<P>>,
    /// 1×1 fusion of all upsampled branch outputs.
    pub fuse: ConvSpec<P>,
}

/// A dense fusion followed by a block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<P> {
    pub fuse: ConvSpec<P>,
    pub block: BlockParams<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubnetParams<P> {
    pub entry: ConvSpec<P>,
    pub encoder: Vec<LayerParams<P>>,
    pub decoder: Vec<LayerParams<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P> {
    pub fuse: ConvSpec<P>,
    pub out: ConvSpec<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcsfnParams<P> {
    pub config: NetConfig,
    /// One sub-network per scale, finest first.
    pub subnets: Vec<SubnetParams<P>>,
    /// Shared across scales.
    pub gru: GruParams<P>,
    pub head: HeadParams<P>,
}

/// Structural constructors and traversal. `convs` and `convs_mut` visit the
/// same convolutions in the same order as `build` creates them.
impl<P> BlockParams<P> {
    fn build(
        cfg: &NetConfig,
        prefix: &str,
        f: &mut impl FnMut(&str, ConvGeometry) -> ConvSpec<P>,
    ) -> Result<Self> {
        let c = cfg.channels;
        let k = cfg.block_scales;
        let mut branches = Vec::with_capacity(k);
        for i in 0..k {
            branches.push(f(&format!("{prefix}.branch{i}"), ConvGeometry::same(c, c, 3, cfg.groups)?));
        }
        let mut links = Vec::new();
        if cfg.inner_connection {
            for i in 0..k - 1 {
                links.push(f(&format!("{prefix}.link{i}"), ConvGeometry::pointwise(2 * c, c)?));
            }
        }
        let fuse = f(&format!("{prefix}.fuse"), ConvGeometry::pointwise(k * c, c)?);
        Ok(BlockParams {
            branches,
            links,
            fuse,
        })
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> BlockParams<Q> {
        BlockParams {
            branches: self.branches.iter().map(|s| s.map(f)).collect(),
            links: self.links.iter().map(|s| s.map(f)).collect(),
            fuse: self.fuse.map(f),
        }
    }

    fn convs<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvSpec<P>)>) {
        for (i, s) in self.branches.iter().enumerate() {
            out.push((format!("{prefix}.branch{i}"), s));
        }
        for (i, s) in self.links.iter().enumerate() {
            out.push((format!("{prefix}.link{i}"), s));
        }
        out.push((format!("{prefix}.fuse"), &self.fuse));
    }

    fn convs_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvSpec<P>>) {
        out.extend(self.branches.iter_mut());
        out.extend(self.links.iter_mut());
        out.push(&mut self.fuse);
    }
}

impl<P> LayerParams<P> {
    fn build(
        cfg: &NetConfig,
        prefix: &str,
        width: usize,
        f: &mut impl FnMut(&str, ConvGeometry) -> ConvSpec<P>,
    ) -> Result<Self> {
        let fuse = f(&format!("{prefix}.fuse"), ConvGeometry::pointwise(width, cfg.channels)?);
        let block = BlockParams::build(cfg, &format!("{prefix}.block"), f)?;
        Ok(LayerParams { fuse, block })
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LayerParams<Q> {
        LayerParams {
            fuse: self.fuse.map(f),
            block: self.block.map(f),
        }
    }

    fn convs<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvSpec<P>)>) {
        out.push((format!("{prefix}.fuse"), &self.fuse));
        self.block.convs(&format!("{prefix}.block"), out);
    }

    fn convs_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvSpec<P>>) {
        out.push(&mut self.fuse);
        self.block.convs_mut(out);
    }
}

impl<P> DcsfnParams<P> {
    /// Builds the tree for `cfg`, calling `f(name, geometry)` for every
    /// convolution in traversal order.
    pub fn build(
        cfg: &NetConfig,
        mut f: impl FnMut(&str, ConvGeometry) -> ConvSpec<P>,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut subnets = Vec::with_capacity(cfg.scales);
        for s in 0..cfg.scales {
            let entry = f(&format!("s{s}.entry"), ConvGeometry::same(cfg.image_channels, c, 3, 1)?);
            let mut encoder = Vec::with_capacity(cfg.depth);
            for l in 1..=cfg.depth {
                encoder.push(LayerParams::build(
                    cfg,
                    &format!("s{s}.enc{l}"),
                    cfg.encoder_fusion_width(l),
                    &mut f,
                )?);
            }
            let mut decoder = Vec::with_capacity(cfg.depth);
            for l in 1..=cfg.depth {
                decoder.push(LayerParams::build(
                    cfg,
                    &format!("s{s}.dec{l}"),
                    cfg.decoder_fusion_width(l),
                    &mut f,
                )?);
            }
            subnets.push(SubnetParams {
                entry,
                encoder,
                decoder,
            });
        }
        let g = GruParams::<()>::geometry(c, c)?;
        let gru = GruParams {
            update: f("gru.update", g),
            reset: f("gru.reset", g),
            candidate: f("gru.candidate", g),
        };
        let head = HeadParams {
            fuse: f("head.fuse", ConvGeometry::pointwise(cfg.scales * c, c)?),
            out: f("head.out", ConvGeometry::same(c, cfg.image_channels, 3, 1)?),
        };
        Ok(DcsfnParams {
            config: cfg.clone(),
            subnets,
            gru,
            head,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> DcsfnParams<Q> {
        let f = &mut f;
        DcsfnParams {
            config: self.config.clone(),
            subnets: self
                .subnets
                .iter()
                .map(|s| SubnetParams {
                    entry: s.entry.map(f),
                    encoder: s.encoder.iter().map(|l| l.map(f)).collect(),
                    decoder: s.decoder.iter().map(|l| l.map(f)).collect(),
                })
                .collect(),
            gru: self.gru.map(f),
            head: HeadParams {
                fuse: self.head.fuse.map(f),
                out: self.head.out.map(f),
            },
        }
    }

    /// Every convolution with its dotted name, in traversal order.
    pub fn convs(&self) -> Vec<(String, &ConvSpec<P>)> {
        let mut out = Vec::new();
        for (s, sub) in self.subnets.iter().enumerate() {
            out.push((format!("s{s}.entry"), &sub.entry));
            for (l, layer) in sub.encoder.iter().enumerate() {
                layer.convs(&format!("s{s}.enc{}", l + 1), &mut out);
            }
            for (l, layer) in sub.decoder.iter().enumerate() {
                layer.convs(&format!("s{s}.dec{}", l + 1), &mut out);
            }
        }
        out.push(("gru.update".into(), &self.gru.update));
        out.push(("gru.reset".into(), &self.gru.reset));
        out.push(("gru.candidate".into(), &self.gru.candidate));
        out.push(("head.fuse".into(), &self.head.fuse));
        out.push(("head.out".into(), &self.head.out));
        out
    }

    pub fn convs_mut(&mut self) -> Vec<&mut ConvSpec<P>> {
        let mut out = Vec::new();
        for sub in &mut self.subnets {
            out.push(&mut sub.entry);
            for layer in &mut sub.encoder {
                layer.convs_mut(&mut out);
            }
            for layer in &mut sub.decoder {
                layer.convs_mut(&mut out);
            }
        }
        out.push(&mut self.gru.update);
        out.push(&mut self.gru.reset);
        out.push(&mut self.gru.candidate);
        out.push(&mut self.head.fuse);
        out.push(&mut self.head.out);
        out
    }

    /// `(name, tensor)` for every parameter: `<conv>.weight` then `<conv>.bias`.
    pub fn named(&self) -> Vec<(String, &P)> {
        self.convs()
            .into_iter()
            .flat_map(|(name, spec)| {
                [
                    (format!("{name}.weight"), &spec.weight),
                    (format!("{name}.bias"), &spec.bias),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut P> {
        self.convs_mut()
            .into_iter()
            .flat_map(|spec| [&mut spec.weight, &mut spec.bias])
            .collect()
    }
}

impl DcsfnParams<()> {
    pub fn layout(cfg: &NetConfig) -> Result<Self> {
        Self::build(cfg, |_, geometry| ConvSpec {
            geometry,
            weight: (),
            bias: (),
        })
    }
}

/// Number of learnable scalars for `cfg`.
pub fn param_count(cfg: &NetConfig) -> Result<usize> {
    Ok(DcsfnParams::layout(cfg)?
        .convs()
        .iter()
        .map(|(_, s)| s.geometry.param_count())
        .sum())
}

impl<T: Element> DcsfnParams<Tensor<T>> {
    pub fn zeros(cfg: &NetConfig) -> Result<Self> {
        Self::build(cfg, |_, g| ConvSpec::zeros(g))
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero. Deterministic in `seed`.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(cfg, |_, g| {
            let bound = 1.0 / (g.fan_in() as f64).sqrt();
            let weight = Tensor::from_fn(g.weight_shape(), |_, _, _, _| {
                T::of(rng.gen_range(-bound..bound))
            });
            ConvSpec {
                geometry: g,
                weight,
                bias: Tensor::zeros(g.bias_shape()),
            }
        })
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every tensor on `tape`, as trainable parameters or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> DcsfnParams<Var> {
        self.map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    pub fn cast<U: Element>(&self) -> DcsfnParams<Tensor<U>> {
        self.map(|t| t.cast())
    }
}
