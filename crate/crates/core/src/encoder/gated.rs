//! The encoder forward pass recorded on a [`GradTape`], with each head's
//! suppression factor supplied as a tape node.

use super::EncoderWeights;
use crate::numerics::{GradTape, NodeId, Tensor2, LN_EPS};

/// Gate leaves `alpha` and their derived `beta = sigmoid(tau * alpha)` nodes,
/// row-major by layer.
#[derive(Debug, Clone)]
pub struct GateNodes {
    pub alphas: Vec<NodeId>,
    pub betas: Vec<NodeId>,
}

impl GateNodes {
    pub fn new(tape: &mut GradTape<'_>, alphas: &[f64], tau: f64) -> Self {
        let alphas: Vec<NodeId> = alphas.iter().map(|&a| tape.leaf(a)).collect();
        let betas = alphas.iter().map(|&a| tape.scaled_sigmoid(a, tau)).collect();
        Self { alphas, betas }
    }
}

/// Records one image's forward pass and returns the `1 × embed_dim` unit-norm
/// embedding node. `betas` holds one scalar node per head.
pub fn gated_embedding<'w>(
    tape: &mut GradTape<'w>,
    weights: &'w EncoderWeights,
    tokens: &Tensor2,
    betas: &[NodeId],
) -> NodeId {
    let spec = &weights.spec;
    assert_eq!(betas.len(), spec.num_heads(), "one beta node per head");
    assert_eq!(tokens.shape(), (spec.num_tokens, spec.token_dim), "token grid shape");
    let eps = f64::from(LN_EPS);
    let inv_sqrt_dk = 1.0 / f64::from(spec.head_dim as f32).sqrt();

    let mut x = tape.constant_tensor(tokens);
    for (l, layer) in weights.layers.iter().enumerate() {
        let h = tape.layer_norm(x, &layer.ln1_gain, &layer.ln1_bias, eps);
        let mut outs = Vec::with_capacity(layer.heads.len());
        for (hi, head) in layer.heads.iter().enumerate() {
            let q = tape.affine(h, &head.wq, Some(&head.bq));
            let k = tape.affine(h, &head.wk, Some(&head.bk));
            let v = tape.affine(h, &head.wv, Some(&head.bv));
            let s = tape.matmul_t(q, k);
            let s = tape.scale(s, inv_sqrt_dk);
            let a = tape.softmax_rows(s);
            let a = tape.manipulate(a, betas[l * spec.heads_per_layer + hi]);
            outs.push(tape.matmul(a, v));
        }
        let merged = tape.concat_cols(&outs);
        let merged = tape.affine(merged, &layer.wo, Some(&layer.bo));
        x = tape.add(x, merged);
        let h2 = tape.layer_norm(x, &layer.ln2_gain, &layer.ln2_bias, eps);
        let f = tape.affine(h2, &layer.w1, Some(&layer.b1));
        let f = tape.gelu(f);
        let f = tape.affine(f, &layer.w2, Some(&layer.b2));
        x = tape.add(x, f);
    }
    let cls = tape.row(x, 0);
    let e = tape.affine(cls, &weights.proj, None);
    tape.l2_normalize_rows(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode_image, AblationConfig, EncoderSpec};
    use rand::Rng;

    #[test]
    fn taped_forward_agrees_with_f32_encoder() {
        let spec = EncoderSpec::default();
        let w = EncoderWeights::random(spec, 21, 1.0).unwrap();
        let mut rng = crate::rng::substream(0, "gated-test");
        let alphas: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let betas: Vec<f64> = alphas.iter().map(|a| 1.0 / (1.0 + (-5.0 * a).exp())).collect();
        let cfg = AblationConfig::from_betas(4, 4, betas).unwrap();
        for s in 0..5 {
            let t = Tensor2::from_fn(9, 32, |_, _| rng.random_range(-1.0f32..1.0));
            let mut tape = GradTape::new();
            let gates = GateNodes::new(&mut tape, &alphas, 5.0);
            let e = gated_embedding(&mut tape, &w, &t, &gates.betas);
            let f32_e = encode_image(&t, &w, &cfg).unwrap();
            for (a, b) in tape.value(e).data.iter().zip(&f32_e) {
                assert!((a - f64::from(*b)).abs() < 1e-4, "sample {s}: {a} vs {b}");
            }
        }
    }
}
