//! Conditioning networks: map the passive partition of a coupling (plus
//! any context channels) to elementwise transform parameters.
//!
//! The network is an input 3×3 convolution into `filters` channels, a
//! stack of gated residual blocks, and a final 1×1 projection to the
//! requested output channels. Two block kinds exist:
//!
//! - Conv block: nonlinearity, 3×3 convolution, nonlinearity, gate,
//!   residual add, layer norm.
//! - Attn block: 1×1 convolution, multi-head self-attention, gate,
//!   residual add, layer norm.
//!
//! The gate is a 1×1 convolution that doubles the channel count
//! followed by a gated linear unit `h₁·σ(h₂)`. The final projection is
//! zero-initialized so a fresh network outputs zeros, which makes every
//! fresh coupling the identity map.

use crate::ad::{attention_params, layer_norm, multi_head_self_attention};
use crate::params::ParamStore;
use crate::rng::normal_tensor;
use crate::{Expr, Tensor};
use rand::Rng;

const LN_2: f64 = std::f64::consts::LN_2;

/// Smooth activation: `softplus(x) − ln 2`. Zero at zero, slope ½ at
/// zero, smooth everywhere (relevant for finite-difference checks).
pub fn nonlinearity(x: &Expr) -> Expr {
    x.softplus().add_scalar(-LN_2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Conv,
    Attn,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Head count for Attn blocks; ignored by Conv blocks.
    pub heads: usize,
}

impl BlockSpec {
    pub fn conv() -> Self {
        BlockSpec {
            kind: BlockKind::Conv,
            heads: 0,
        }
    }

    pub fn attn(heads: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Attn,
            heads,
        }
    }
}

/// How one parameter tensor is initialized.
enum Init {
    /// Normal with the fan-balanced std `sqrt(2 / (fan_in + fan_out))`.
    Conv { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// One conditioning network: architecture plus parameter naming. The
/// parameter values live in a `ParamStore` under this network's prefix.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub filters: usize,
    pub blocks: Vec<BlockSpec>,
    /// Width multiplier of the gate's pre-activation convolution. The
    /// gated linear unit needs 2 (split into value and gate halves);
    /// 1 degrades to `h·σ(h)` and exists so structural checks can
    /// demonstrate they catch the degradation.
    pub gate_mult: usize,
}

impl Conditioner {
    pub fn new(
        prefix: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        filters: usize,
        blocks: Vec<BlockSpec>,
    ) -> Self {
        assert!(in_channels > 0 && out_channels > 0 && filters > 0);
        for b in &blocks {
            if b.kind == BlockKind::Attn {
                assert!(b.heads > 0, "attention block needs at least one head");
                assert_eq!(
                    filters % b.heads,
                    0,
                    "filters {filters} not divisible by {} heads",
                    b.heads
                );
            }
        }
        Conditioner {
            prefix: prefix.into(),
            in_channels,
            out_channels,
            filters,
            blocks,
            gate_mult: 2,
        }
    }

    fn name(&self, tail: &str) -> String {
        format!("{}.{tail}", self.prefix)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let f = self.filters;
        let mut specs = Vec::new();
        let conv = |name: String, cout: usize, cin: usize, k: usize| ParamSpec {
            shape: vec![cout, cin, k, k],
            init: Init::Conv {
                fan_in: cin * k * k,
                fan_out: cout * k * k,
            },
            name,
        };
        let bias = |name: String, c: usize| ParamSpec {
            name,
            shape: vec![c],
            init: Init::Zeros,
        };

        specs.push(conv(self.name("in.w"), f, self.in_channels, 3));
        specs.push(bias(self.name("in.b"), f));
        for (i, block) in self.blocks.iter().enumerate() {
            let b = |tail: &str| self.name(&format!("b{i}.{tail}"));
            match block.kind {
                BlockKind::Conv => {
                    specs.push(conv(b("conv.w"), f, f, 3));
                    specs.push(bias(b("conv.b"), f));
                }
                BlockKind::Attn => {
                    specs.push(conv(b("proj.w"), f, f, 1));
                    specs.push(bias(b("proj.b"), f));
                    for tag in ["wq", "wk", "wv", "wo"] {
                        specs.push(conv(b(&format!("attn.{tag}")), f, f, 1));
                    }
                    for tag in ["bq", "bk", "bv", "bo"] {
                        specs.push(bias(b(&format!("attn.{tag}")), f));
                    }
                }
            }
            specs.push(conv(b("gate.w"), self.gate_mult * f, f, 1));
            specs.push(bias(b("gate.b"), self.gate_mult * f));
            specs.push(ParamSpec {
                name: b("ln.g"),
                shape: vec![f],
                init: Init::Ones,
            });
            specs.push(bias(b("ln.b"), f));
        }
        specs.push(ParamSpec {
            name: self.name("out.w"),
            shape: vec![self.out_channels, f, 1, 1],
            init: Init::Zeros,
        });
        specs.push(bias(self.name("out.b"), self.out_channels));
        specs
    }

    /// Register this network's parameters with their initial values.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for spec in self.param_specs() {
            let t = match spec.init {
                Init::Conv { fan_in, fan_out } => {
                    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                    normal_tensor::<f64>(&spec.shape, rng).map(|v| v * std)
                }
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
            };
            store.insert(spec.name, t);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_specs().into_iter().map(|s| s.name).collect()
    }

    /// Total scalar parameters this network contributes.
    pub fn scalar_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// The gate subgraph for block `i`: 1×1 convolution widening by
    /// `gate_mult`, then a gated linear unit.
    pub fn gate_expr(&self, block: usize, h: &Expr) -> Expr {
        let f = self.filters;
        let w = Expr::leaf(
            self.name(&format!("b{block}.gate.w")),
            &[self.gate_mult * f, f, 1, 1],
        );
        let b = Expr::leaf(self.name(&format!("b{block}.gate.b")), &[self.gate_mult * f]);
        let pre = h.conv2d(&w, Some(&b));
        if self.gate_mult == 2 {
            let (h1, h2) = pre.split2(1, f);
            h1.mul(&h2.sigmoid())
        } else {
            pre.mul(&pre.sigmoid())
        }
    }

    /// Build the network's graph on `x` (shape `[N, in_channels, H, W]`),
    /// returning the `[N, out_channels, H, W]` parameter map.
    pub fn apply_expr(&self, x: &Expr) -> Expr {
        assert_eq!(x.ndim(), 4, "conditioner input must be [N,C,H,W]");
        assert_eq!(
            x.shape()[1],
            self.in_channels,
            "conditioner {} expects {} input channels, got {}",
            self.prefix,
            self.in_channels,
            x.shape()[1]
        );
        let f = self.filters;
        let leaf4 = |name: String, cout: usize, cin: usize, k: usize| {
            Expr::leaf(name, &[cout, cin, k, k])
        };
        let leaf1 = |name: String, c: usize| Expr::leaf(name, &[c]);

        let w_in = leaf4(self.name("in.w"), f, self.in_channels, 3);
        let b_in = leaf1(self.name("in.b"), f);
        let mut h = x.conv2d(&w_in, Some(&b_in));

        for (i, block) in self.blocks.iter().enumerate() {
            let b = |tail: &str| self.name(&format!("b{i}.{tail}"));
            let branch = match block.kind {
                BlockKind::Conv => {
                    let w = leaf4(b("conv.w"), f, f, 3);
                    let bb = leaf1(b("conv.b"), f);
                    let a = nonlinearity(&h).conv2d(&w, Some(&bb));
                    let a = nonlinearity(&a);
                    self.gate_expr(i, &a)
                }
                BlockKind::Attn => {
                    let w = leaf4(b("proj.w"), f, f, 1);
                    let bb = leaf1(b("proj.b"), f);
                    let a = h.conv2d(&w, Some(&bb));
                    let attn = attention_params(&b("attn"), f);
                    let a = multi_head_self_attention(&a, &attn, block.heads);
                    self.gate_expr(i, &a)
                }
            };
            let ln_g = leaf1(b("ln.g"), f);
            let ln_b = leaf1(b("ln.b"), f);
            h = layer_norm(&h.add(&branch), &ln_g, &ln_b);
        }

        let w_out = leaf4(self.name("out.w"), self.out_channels, f, 1);
        let b_out = leaf1(self.name("out.b"), self.out_channels);
        h.conv2d(&w_out, Some(&b_out))
    }
}
