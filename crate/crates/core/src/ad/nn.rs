//! Network-level composites built from the primitive catalog: softmax,
//! layer normalization, and multi-head self-attention. Because they are
//! compositions, their adjoints come from the primitives' rules.

use super::ExprBase;
use crate::scalar::Scalar;

/// Numerically stable softmax along one axis:
/// `exp(x − broadcast(logsumexp(x)))`.
pub fn softmax<S: Scalar>(x: &ExprBase<S>, axis: usize) -> ExprBase<S> {
    let lse = x.logsumexp(axis);
    let mut with_one = x.shape().to_vec();
    with_one[axis] = 1;
    let centered = x.sub(&lse.reshape(&with_one).broadcast_to(x.shape()));
    centered.exp()
}

/// Layer normalization over the channel axis at each spatial position.
/// Input `[N,C,H,W]`; `gain` and `bias` are `[C]`. The variance gets an
/// ε=1e-6 floor inside the square root.
pub fn layer_norm<S: Scalar>(
    x: &ExprBase<S>,
    gain: &ExprBase<S>,
    bias: &ExprBase<S>,
) -> ExprBase<S> {
    assert_eq!(x.ndim(), 4, "layer_norm input must be [N,C,H,W]");
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert_eq!(gain.shape(), &[c], "layer_norm gain must be [C]");
    assert_eq!(bias.shape(), &[c], "layer_norm bias must be [C]");
    let expand = |e: &ExprBase<S>| e.reshape(&[n, 1, h, w]).broadcast_to(x.shape());
    let mean = x.mean_axes(&[1]);
    let centered = x.sub(&expand(&mean));
    let var = centered.square().mean_axes(&[1]);
    let denom = expand(&var.add_scalar(1e-6).pow_const(0.5));
    let norm = centered.div(&denom);
    let pack = |p: &ExprBase<S>| p.reshape(&[c, 1, 1]).broadcast_to(x.shape());
    norm.mul(&pack(gain)).add(&pack(bias))
}

/// Leaf handles for one attention layer's learned 1×1 projections.
pub struct AttentionParams<S: Scalar> {
    pub wq: ExprBase<S>,
    pub bq: ExprBase<S>,
    pub wk: ExprBase<S>,
    pub bk: ExprBase<S>,
    pub wv: ExprBase<S>,
    pub bv: ExprBase<S>,
    pub wo: ExprBase<S>,
    pub bo: ExprBase<S>,
}

/// Parameter names under `prefix`: `wq/bq/wk/bk/wv/bv/wo/bo`, each a
/// 1×1 convolution over `channels`.
pub fn attention_params<S: Scalar>(prefix: &str, channels: usize) -> AttentionParams<S> {
    let kernel = |tag: &str| ExprBase::leaf(format!("{prefix}.{tag}"), &[channels, channels, 1, 1]);
    let bias = |tag: &str| ExprBase::leaf(format!("{prefix}.{tag}"), &[channels]);
    AttentionParams {
        wq: kernel("wq"),
        bq: bias("bq"),
        wk: kernel("wk"),
        bk: bias("bk"),
        wv: kernel("wv"),
        bv: bias("bv"),
        wo: kernel("wo"),
        bo: bias("bo"),
    }
}

/// Multi-head self-attention over the H·W positions of `[N,C,H,W]`
/// input. Q, K, V, and the output are learned 1×1 convolutions; scores
/// are scaled by 1/√(C/heads); no positional encoding (spatial
/// structure reaches the scores only through the surrounding
/// convolutions).
pub fn multi_head_self_attention<S: Scalar>(
    x: &ExprBase<S>,
    params: &AttentionParams<S>,
    heads: usize,
) -> ExprBase<S> {
    assert_eq!(x.ndim(), 4, "attention input must be [N,C,H,W]");
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(heads >= 1, "attention needs at least one head");
    assert_eq!(
        c % heads,
        0,
        "channel count {c} not divisible by {heads} heads"
    );
    let d = c / heads;
    let s = h * w;

    let q = x.conv2d(&params.wq, Some(&params.bq));
    let k = x.conv2d(&params.wk, Some(&params.bk));
    let v = x.conv2d(&params.wv, Some(&params.bv));

    // [N,C,H,W] -> [N·heads, d, S]
    let split = |e: &ExprBase<S>| e.reshape(&[n * heads, d, s]);
    let (q, k, v) = (split(&q), split(&k), split(&v));

    let scores = q
        .permute(&[0, 2, 1])
        .matmul(&k)
        .mul_scalar(1.0 / (d as f64).sqrt());
    let weights = softmax(&scores, 2);

    // out[b, d, sq] = Σ_sk v[b, d, sk] · weights[b, sq, sk]
    let mixed = v.matmul(&weights.permute(&[0, 2, 1]));
    let merged = mixed.reshape(&[n, c, h, w]);
    merged.conv2d(&params.wo, Some(&params.bo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{forward_eval, Bindings};
    use crate::tensor::TensorBase;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type E = ExprBase<f64>;
    type T = TensorBase<f64>;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = E::constant(T::from_fn(&[3, 5, 7], |i| {
            ((i[0] * 35 + i[1] * 7 + i[2]) as f64).sin() * 5.0
        }));
        let sm = softmax(&x, 2);
        let sums = sm.sum_axes(&[2]);
        let v = forward_eval(&sums, &Bindings::new()).unwrap();
        for &s in v.data() {
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = E::constant(T::new(vec![1, 1, 2], vec![700.0, 700.0]));
        let v = forward_eval(&softmax(&x, 2), &Bindings::new()).unwrap();
        assert!((v.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zeroes_constant_input_and_ignores_shifts() {
        let c = 4;
        let gain = E::constant(T::ones(&[c]));
        let bias = E::constant(T::zeros(&[c]));

        let constant = E::constant(T::full(&[2, c, 2, 2], 3.7));
        let v = forward_eval(&layer_norm(&constant, &gain, &bias), &Bindings::new()).unwrap();
        assert!(v.data().iter().all(|&x| x.abs() < 1e-9));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = T::from_fn(&[1, c, 3, 3], |_| rng.gen_range(-2.0..2.0));
        let shifted = base.map(|x| x + 11.0);
        let a = forward_eval(
            &layer_norm(&E::constant(base), &gain, &bias),
            &Bindings::new(),
        )
        .unwrap();
        let b = forward_eval(
            &layer_norm(&E::constant(shifted), &gain, &bias),
            &Bindings::new(),
        )
        .unwrap();
        assert!(a.max_abs_diff(&b) < 1e-8);
    }

    #[test]
    fn layer_norm_mean_equals_bias() {
        let c = 3;
        let gain = E::constant(T::ones(&[c]));
        let bias = E::constant(T::full(&[c], 0.25));
        let x = E::constant(T::from_fn(&[2, c, 2, 2], |i| {
            (i[1] as f64 + 1.0) * ((i[0] + i[2] + i[3]) as f64 - 1.5)
        }));
        let out = layer_norm(&x, &gain, &bias).mean_axes(&[1]);
        let v = forward_eval(&out, &Bindings::new()).unwrap();
        for &m in v.data() {
            assert!((m - 0.25).abs() < 1e-9, "per-position mean {m}");
        }
    }

    fn random_attention_bindings(
        rng: &mut ChaCha8Rng,
        c: usize,
        scale: f64,
    ) -> Bindings<f64> {
        let mut b = Bindings::new();
        for tag in ["wq", "wk", "wv", "wo"] {
            b.insert(
                format!("attn.{tag}"),
                T::from_fn(&[c, c, 1, 1], |_| rng.gen_range(-scale..scale)),
            );
        }
        for tag in ["bq", "bk", "bv", "bo"] {
            b.insert(
                format!("attn.{tag}"),
                T::from_fn(&[c], |_| rng.gen_range(-scale..scale)),
            );
        }
        b
    }

    #[test]
    fn single_position_attention_is_value_then_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 4;
        let x = E::leaf("x", &[2, c, 1, 1]);
        let params = attention_params("attn", c);
        let attn = multi_head_self_attention(&x, &params, 2);

        let mut b = random_attention_bindings(&mut rng, c, 0.8);
        b.insert(
            "x".to_string(),
            T::from_fn(&[2, c, 1, 1], |_| rng.gen_range(-1.0..1.0)),
        );

        let direct = {
            let v = x.conv2d(&params.wv, Some(&params.bv));
            v.conv2d(&params.wo, Some(&params.bo))
        };
        let got = forward_eval(&attn, &b).unwrap();
        let want = forward_eval(&direct, &b).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn identical_tokens_give_identical_outputs_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = 8;
        let x = E::leaf("x", &[1, c, 2, 3]);
        let params = attention_params("attn", c);
        let attn = multi_head_self_attention(&x, &params, 4);

        let mut b = random_attention_bindings(&mut rng, c, 0.5);
        let token: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        b.insert(
            "x".to_string(),
            T::from_fn(&[1, c, 2, 3], |i| token[i[1]]),
        );
        let out = forward_eval(&attn, &b).unwrap();
        for ch in 0..c {
            let first = out.at(&[0, ch, 0, 0]);
            for hh in 0..2 {
                for ww in 0..3 {
                    assert!((out.at(&[0, ch, hh, ww]) - first).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_preserves_shape_with_four_heads() {
        let c = 8;
        let x = E::leaf("x", &[2, c, 3, 2]);
        let params = attention_params("attn", c);
        let attn = multi_head_self_attention(&x, &params, 4);
        assert_eq!(attn.shape(), &[2, c, 3, 2]);
    }
}
