//! Architecture descriptors: serializable specs for the flow stack and
//! the dequantizer, builders that turn them into runnable objects, and
//! the ablation variants with matched parameter counts.

use serde::{Deserialize, Serialize};

use crate::conditioning::BlockSpec;
use crate::dequant::{Dequantizer, VariationalDequantizer};
use crate::error::{Error, Result};
use crate::flows::split::SplitPattern;
use crate::flows::{ActNorm, Coupling, FlowLayer, FlowStack, Inv1x1};

fn default_k() -> usize {
    4
}
fn default_filters() -> usize {
    8
}
fn default_blocks() -> usize {
    2
}
fn default_heads() -> usize {
    2
}
fn default_true() -> bool {
    true
}

/// One layer of the flow stack, as written in a config file. Shapes are
/// derived while walking the stack, so only the choices that cannot be
/// inferred appear here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Actnorm,
    Inv1x1,
    AffineCoupling { pattern: SplitPattern },
    MixlogCoupling { pattern: SplitPattern },
    Squeeze,
    Unsqueeze,
    Sigmoid,
    Logit,
}

/// Architecture descriptor for the density model: the layer list plus
/// the knobs shared by every coupling's conditioning network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct ModelSpec {
    /// Logistic mixture components per coupling element.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Channel width of every conditioning network.
    #[serde(default = "default_filters")]
    pub filters: usize,
    /// Gated residual blocks per conditioning network.
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Attention heads; must divide `filters` when attention is on.
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// When true, every second block is a self-attention block;
    /// otherwise all blocks are convolutional.
    #[serde(default = "default_true")]
    pub attention: bool,
    /// Explicit layer list; `None` selects the default stack for the
    /// dataset's shape.
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            k: default_k(),
            filters: default_filters(),
            blocks: default_blocks(),
            heads: default_heads(),
            attention: default_true(),
            layers: None,
        }
    }
}

fn default_deq_k() -> usize {
    4
}
fn default_deq_filters() -> usize {
    5
}
fn default_ctx_channels() -> usize {
    4
}

/// Dequantizer descriptor: uniform noise or a conditional noise flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DequantSpec {
    Uniform,
    Variational {
        #[serde(default = "default_deq_k")]
        k: usize,
        #[serde(default = "default_deq_filters")]
        filters: usize,
        #[serde(default = "default_ctx_channels")]
        ctx_channels: usize,
    },
}

impl Default for DequantSpec {
    fn default() -> Self {
        DequantSpec::Variational {
            k: default_deq_k(),
            filters: default_deq_filters(),
            ctx_channels: default_ctx_channels(),
        }
    }
}

/// Default stack for a dataset shape: alternating-parity mixture
/// couplings in pairs, each pair preceded by an actnorm. Checkerboard
/// splits need a spatial extent of at least 2 to put anything on both
/// sides; degenerate 1x1 grids fall back to channel splits.
pub fn default_layers(shape: &[usize]) -> Vec<LayerSpec> {
    let spatial = shape[1] * shape[2];
    let pattern = |parity: u8| {
        if spatial > 1 {
            SplitPattern::Checkerboard { parity }
        } else {
            SplitPattern::Channel { parity }
        }
    };
    vec![
        LayerSpec::Actnorm,
        LayerSpec::MixlogCoupling {
            pattern: pattern(0),
        },
        LayerSpec::MixlogCoupling {
            pattern: pattern(1),
        },
        LayerSpec::Actnorm,
        LayerSpec::MixlogCoupling {
            pattern: pattern(0),
        },
        LayerSpec::MixlogCoupling {
            pattern: pattern(1),
        },
    ]
}

fn conditioner_blocks(spec: &ModelSpec) -> Vec<BlockSpec> {
    (0..spec.blocks)
        .map(|i| {
            if spec.attention && i % 2 == 1 {
                BlockSpec::attn(spec.heads)
            } else {
                BlockSpec::conv()
            }
        })
        .collect()
}

/// Reject descriptors that cannot build: zero-sized knobs, or an
/// attention head count that does not divide the filter width.
pub fn validate(spec: &ModelSpec) -> Result<()> {
    if spec.k == 0 || spec.filters == 0 {
        return Err(Error::InvalidArgument(
            "model k and filters must be at least 1".into(),
        ));
    }
    if spec.attention {
        if spec.heads == 0 {
            return Err(Error::InvalidArgument(
                "attention needs at least one head".into(),
            ));
        }
        if spec.filters % spec.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "filters {} not divisible by {} heads",
                spec.filters, spec.heads
            )));
        }
    }
    Ok(())
}

/// Build the flow stack a descriptor describes, for data of example
/// shape `[C, H, W]`. Layer shapes are walked in order; a squeeze on an
/// odd extent or an unsqueeze on a channel count not divisible by four
/// is a config error.
pub fn build_model(spec: &ModelSpec, shape: &[usize]) -> Result<FlowStack> {
    assert_eq!(shape.len(), 3, "data shape must be [C,H,W]");
    validate(spec)?;
    let layer_specs = match &spec.layers {
        Some(l) => l.clone(),
        None => default_layers(shape),
    };
    let blocks = conditioner_blocks(spec);
    let mut layers = Vec::with_capacity(layer_specs.len());
    let mut cur = shape.to_vec();
    for (i, ls) in layer_specs.iter().enumerate() {
        let prefix = format!("flow.{i}");
        let layer = match ls {
            LayerSpec::Actnorm => ActNorm::new(prefix, &cur),
            LayerSpec::Inv1x1 => Inv1x1::new(prefix, cur[0]),
            LayerSpec::AffineCoupling { pattern } => {
                Coupling::affine(prefix, &cur, pattern.clone(), 0, spec.filters, blocks.clone())
            }
            LayerSpec::MixlogCoupling { pattern } => Coupling::mixlog(
                prefix,
                &cur,
                pattern.clone(),
                spec.k,
                0,
                spec.filters,
                blocks.clone(),
            ),
            LayerSpec::Squeeze => {
                if cur[1] % 2 != 0 || cur[2] % 2 != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "layer {i}: squeeze needs even spatial extents, got {cur:?}"
                    )));
                }
                FlowLayer::Squeeze
            }
            LayerSpec::Unsqueeze => {
                if cur[0] % 4 != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "layer {i}: unsqueeze needs channels divisible by 4, got {cur:?}"
                    )));
                }
                FlowLayer::Unsqueeze
            }
            LayerSpec::Sigmoid => FlowLayer::Sigmoid,
            LayerSpec::Logit => FlowLayer::Logit,
        };
        cur = layer.out_shape(&cur);
        layers.push(layer);
    }
    Ok(FlowStack::new(shape, layers))
}

/// Build the dequantizer a descriptor describes.
pub fn build_dequantizer(spec: &DequantSpec, shape: &[usize]) -> Result<Dequantizer> {
    match spec {
        DequantSpec::Uniform => Ok(Dequantizer::Uniform),
        DequantSpec::Variational {
            k,
            filters,
            ctx_channels,
        } => {
            if *k == 0 || *filters == 0 || *ctx_channels == 0 {
                return Err(Error::InvalidArgument(
                    "dequantizer k, filters and ctx_channels must be at least 1".into(),
                ));
            }
            Ok(Dequantizer::Variational(VariationalDequantizer::new(
                "deq",
                shape,
                *k,
                *filters,
                *ctx_channels,
            )))
        }
    }
}

/// Total trainable scalars of a (model, dequantizer) pair.
pub fn total_params(model: &ModelSpec, deq: &DequantSpec, shape: &[usize]) -> Result<usize> {
    Ok(build_model(model, shape)?.scalar_count() + build_dequantizer(deq, shape)?.scalar_count())
}

/// One row of the ablation protocol: a named (model, dequantizer) pair.
#[derive(Clone, Debug)]
pub struct AblationVariant {
    pub name: String,
    pub model: ModelSpec,
    pub deq: DequantSpec,
}

fn filter_candidates(template: &ModelSpec) -> Vec<usize> {
    let step = if template.attention {
        template.heads.max(1)
    } else {
        1
    };
    (1..=128).map(|i| i * step).collect()
}

fn deq_candidates(deq: &DequantSpec) -> Vec<DequantSpec> {
    match deq {
        DequantSpec::Uniform => vec![DequantSpec::Uniform],
        DequantSpec::Variational { k, .. } => {
            let mut out = Vec::new();
            for filters in 1..=24 {
                for ctx_channels in 1..=8 {
                    out.push(DequantSpec::Variational {
                        k: *k,
                        filters,
                        ctx_channels,
                    });
                }
            }
            out
        }
    }
}

/// Search the conditioning-network width of the model (and, when the
/// variant keeps a variational dequantizer, the dequantizer's width and
/// context channels) for the candidate whose total count is closest to
/// `target`. The model width is the coarse knob; the dequantizer knobs
/// fill the gaps between its steps.
fn matched_variant(
    template: &ModelSpec,
    deq: &DequantSpec,
    shape: &[usize],
    target: usize,
) -> Result<(ModelSpec, DequantSpec)> {
    let mut best: Option<(usize, ModelSpec, DequantSpec)> = None;
    for f in filter_candidates(template) {
        let mut candidate = template.clone();
        candidate.filters = f;
        let model_count = build_model(&candidate, shape)?.scalar_count();
        if model_count > target + target / 2 {
            break;
        }
        for dq in deq_candidates(deq) {
            let count = model_count + build_dequantizer(&dq, shape)?.scalar_count();
            let err = count.abs_diff(target);
            if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
                best = Some((err, candidate.clone(), dq));
            }
        }
    }
    let (_, model, dq) = best.expect("candidate range is nonempty");
    Ok((model, dq))
}

fn with_affine_couplings(spec: &ModelSpec, shape: &[usize]) -> ModelSpec {
    let layers = spec.layers.clone().unwrap_or_else(|| default_layers(shape));
    let swapped = layers
        .into_iter()
        .map(|l| match l {
            LayerSpec::MixlogCoupling { pattern } => LayerSpec::AffineCoupling { pattern },
            other => other,
        })
        .collect();
    let mut out = spec.clone();
    out.layers = Some(swapped);
    out
}

/// The four rows of the ablation protocol, in reporting order. Every
/// altered variant has its conditioning-network width re-searched so
/// the total parameter count matches the full model's within the
/// granularity the width allows.
pub fn ablation_variants(
    model: &ModelSpec,
    deq: &DequantSpec,
    shape: &[usize],
) -> Result<Vec<AblationVariant>> {
    let target = total_params(model, deq, shape)?;
    let (uniform, _) = matched_variant(model, &DequantSpec::Uniform, shape, target)?;
    let affine_template = with_affine_couplings(model, shape);
    let (affine, affine_deq) = matched_variant(&affine_template, deq, shape, target)?;
    let mut conv_template = model.clone();
    conv_template.attention = false;
    let (conv_only, conv_deq) = matched_variant(&conv_template, deq, shape, target)?;
    Ok(vec![
        AblationVariant {
            name: "uniform dequantization".into(),
            model: uniform,
            deq: DequantSpec::Uniform,
        },
        AblationVariant {
            name: "affine coupling".into(),
            model: affine,
            deq: affine_deq,
        },
        AblationVariant {
            name: "no self-attention".into(),
            model: conv_only,
            deq: conv_deq,
        },
        AblationVariant {
            name: "full".into(),
            model: model.clone(),
            deq: deq.clone(),
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::{stream_rng, STREAM_INIT};

    #[test]
    fn descriptor_round_trips_through_json() {
        let spec = ModelSpec {
            layers: Some(vec![
                LayerSpec::Actnorm,
                LayerSpec::Inv1x1,
                LayerSpec::MixlogCoupling {
                    pattern: SplitPattern::Checkerboard { parity: 1 },
                },
                LayerSpec::Squeeze,
            ]),
            ..ModelSpec::default()
        };
        let text = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);

        let deq = DequantSpec::default();
        let text = serde_json::to_string(&deq).unwrap();
        let back: DequantSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(deq, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ModelSpec>(r#"{"k": 4, "mystery": 1}"#).is_err());
        assert!(serde_json::from_str::<DequantSpec>(r#""uniform""#).is_ok());
        assert!(
            serde_json::from_str::<DequantSpec>(r#"{"variational": {"k": 3, "mystery": 1}}"#)
                .is_err()
        );
        assert!(serde_json::from_str::<LayerSpec>(
            r#"{"mixlog_coupling": {"pattern": {"checkerboard": {"parity": 0, "junk": 1}}}}"#
        )
        .is_err());
    }

    #[test]
    fn default_stack_builds_and_is_sized_for_the_data() {
        let spec = ModelSpec::default();
        let model = build_model(&spec, &[1, 2, 1]).unwrap();
        assert_eq!(model.out_shape(), vec![1, 2, 1]);
        assert_eq!(model.dim(), 2);
        assert_eq!(model.layers.len(), 6);

        let mut ps = ParamStore::new();
        let mut rng = stream_rng(0, STREAM_INIT, 0);
        model.init_params(&mut ps, &mut rng);
        assert_eq!(
            model.scalar_count(),
            model
                .param_names()
                .iter()
                .map(|n| ps.get(n).len())
                .sum::<usize>()
        );
    }

    #[test]
    fn bad_geometry_is_a_config_error() {
        let squeeze_odd = ModelSpec {
            layers: Some(vec![LayerSpec::Squeeze]),
            ..ModelSpec::default()
        };
        assert!(matches!(
            build_model(&squeeze_odd, &[1, 3, 3]),
            Err(Error::InvalidArgument(_))
        ));

        let unsqueeze_thin = ModelSpec {
            layers: Some(vec![LayerSpec::Unsqueeze]),
            ..ModelSpec::default()
        };
        assert!(matches!(
            build_model(&unsqueeze_thin, &[2, 2, 2]),
            Err(Error::InvalidArgument(_))
        ));

        let indivisible_heads = ModelSpec {
            filters: 6,
            heads: 4,
            ..ModelSpec::default()
        };
        assert!(matches!(
            build_model(&indivisible_heads, &[1, 2, 1]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn ablation_variants_match_parameter_counts_within_five_percent() {
        let spec = ModelSpec::default();
        let deq = DequantSpec::default();
        let shape = [1usize, 2, 1];
        let variants = ablation_variants(&spec, &deq, &shape).unwrap();
        assert_eq!(variants.len(), 4);
        let names: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "uniform dequantization",
                "affine coupling",
                "no self-attention",
                "full"
            ]
        );
        let target = total_params(&spec, &deq, &shape).unwrap() as f64;
        for v in &variants {
            let count = total_params(&v.model, &v.deq, &shape).unwrap() as f64;
            let rel = (count - target).abs() / target;
            assert!(
                rel <= 0.05,
                "{}: {count} params vs target {target} ({rel:.3} off)",
                v.name
            );
        }
    }

    #[test]
    fn affine_variant_swaps_every_mixture_coupling() {
        let spec = ModelSpec::default();
        let swapped = with_affine_couplings(&spec, &[1, 2, 1]);
        let layers = swapped.layers.unwrap();
        assert!(layers
            .iter()
            .all(|l| !matches!(l, LayerSpec::MixlogCoupling { .. })));
        assert_eq!(
            layers
                .iter()
                .filter(|l| matches!(l, LayerSpec::AffineCoupling { .. }))
                .count(),
            4
        );
    }

    #[test]
    fn attention_alternates_with_convolutions() {
        let spec = ModelSpec {
            blocks: 4,
            ..ModelSpec::default()
        };
        let blocks = conditioner_blocks(&spec);
        let kinds: Vec<bool> = blocks
            .iter()
            .map(|b| b.kind == crate::conditioning::BlockKind::Attn)
            .collect();
        assert_eq!(kinds, [false, true, false, true]);

        let conv_only = ModelSpec {
            attention: false,
            blocks: 4,
            ..ModelSpec::default()
        };
        assert!(conditioner_blocks(&conv_only)
            .iter()
            .all(|b| b.kind == crate::conditioning::BlockKind::Conv));
    }
}
