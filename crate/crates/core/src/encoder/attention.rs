use super::HeadWeights;
use crate::error::{AatError, Result};
use crate::numerics::{softmax_rows, Tensor2, DEGENERATE_ROW_SUM};

/// A manipulated attention matrix and the rows that had to be snapped to
/// one-hot class attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Manipulated {
    pub matrix: Tensor2,
    pub degenerate_rows: Vec<usize>,
}

/// Scales the image-token columns `1..N` of a row-stochastic matrix by `beta`
/// in every row, then renormalizes each row to sum to one.
///
/// `beta == 1` returns the input bit for bit. A row left with (numerically)
/// no mass becomes one-hot on the class token and is listed in
/// `degenerate_rows`.
pub fn manipulate_attention(a: &Tensor2, beta: f64) -> Result<Manipulated> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(AatError::InvalidParameter(format!("beta {beta} outside [0, 1]")));
    }
    if a.rows() != a.cols() || a.cols() < 2 {
        return Err(AatError::InvalidAttention(format!(
            "attention must be square with at least 2 tokens, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    for r in 0..a.rows() {
        let row = a.row(r);
        let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
        if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-4 {
            return Err(AatError::InvalidAttention(format!(
                "row {r} is not stochastic (sum {sum})"
            )));
        }
    }
    let mut matrix = a.clone();
    let degenerate_rows = manipulate_in_place(&mut matrix, beta);
    Ok(Manipulated {
        matrix,
        degenerate_rows,
    })
}

pub(crate) fn manipulate_in_place(a: &mut Tensor2, beta: f64) -> Vec<usize> {
    let mut degenerate = Vec::new();
    if beta == 1.0 {
        return degenerate;
    }
    for r in 0..a.rows() {
        let row = a.row_mut(r);
        let mut sum = f64::from(row[0]);
        let mut scaled = Vec::with_capacity(row.len());
        scaled.push(f64::from(row[0]));
        for &v in &row[1..] {
            let s = f64::from(v) * beta;
            sum += s;
            scaled.push(s);
        }
        if sum < DEGENERATE_ROW_SUM {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[0] = 1.0;
            degenerate.push(r);
        } else {
            for (o, s) in row.iter_mut().zip(scaled) {
                *o = (s / sum) as f32;
            }
        }
    }
    degenerate
}

pub(crate) struct HeadProjections {
    pub q: Tensor2,
    pub k: Tensor2,
    pub v: Tensor2,
}

pub(crate) fn project(x_norm: &Tensor2, head: &HeadWeights) -> HeadProjections {
    HeadProjections {
        q: x_norm.affine(&head.wq, &head.bq),
        k: x_norm.affine(&head.wk, &head.bk),
        v: x_norm.affine(&head.wv, &head.bv),
    }
}

pub(crate) fn attention_weights(p: &HeadProjections) -> Result<Tensor2> {
    let scale = 1.0 / (p.q.cols() as f32).sqrt();
    softmax_rows(&p.q.matmul_t(&p.k).scale(scale))
}

/// One head of multi-head attention on an already layer-normalized input:
/// `manipulate(softmax(q kᵀ / √d_k), beta) · v`.
pub fn head_attention(x_norm: &Tensor2, head: &HeadWeights, beta: f64) -> Result<Tensor2> {
    if x_norm.cols() != head.wq.rows() {
        return Err(AatError::dims("head_attention", head.wq.rows(), x_norm.cols()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(AatError::InvalidParameter(format!("beta {beta} outside [0, 1]")));
    }
    let p = project(x_norm, head);
    let mut a = attention_weights(&p)?;
    manipulate_in_place(&mut a, beta);
    Ok(a.matmul(&p.v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderSpec, EncoderWeights};
    use crate::numerics::layer_norm;
    use proptest::prelude::*;

    fn row(v: &[f32]) -> Tensor2 {
        Tensor2::from_rows(&[v.to_vec()]).unwrap()
    }

    /// Pads a single row into a square matrix by repeating it.
    fn square(v: &[f32]) -> Tensor2 {
        Tensor2::from_rows(&vec![v.to_vec(); v.len()]).unwrap()
    }

    #[test]
    fn worked_example_beta_point_one() {
        let m = manipulate_attention(&square(&[0.5, 0.3, 0.2]), 0.1).unwrap();
        // [0.5, 0.03, 0.02] / 0.55
        let expected = [0.5 / 0.55, 0.03 / 0.55, 0.02 / 0.55];
        for (got, want) in m.matrix.row(0).iter().zip(expected) {
            assert!((f64::from(*got) - want).abs() < 1e-6);
        }
        assert!((expected[0] - 0.909091).abs() < 1e-6);
        assert!(m.degenerate_rows.is_empty());
    }

    #[test]
    fn beta_one_is_bitwise_identity() {
        let a = square(&[0.123, 0.456, 0.421]);
        let m = manipulate_attention(&a, 1.0).unwrap();
        assert_eq!(m.matrix, a);
    }

    #[test]
    fn beta_zero_removes_image_mass() {
        let m = manipulate_attention(&square(&[0.4, 0.6, 0.0]), 0.0).unwrap();
        assert_eq!(m.matrix.row(0), &[1.0, 0.0, 0.0]);
        assert!(m.degenerate_rows.is_empty());
    }

    #[test]
    fn zero_class_weight_at_beta_zero_is_flagged() {
        let m = manipulate_attention(&square(&[0.0, 0.5, 0.5]), 0.0).unwrap();
        assert_eq!(m.matrix.row(1), &[1.0, 0.0, 0.0]);
        assert_eq!(m.degenerate_rows, vec![0, 1, 2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(manipulate_attention(&square(&[0.5, 0.3, 0.2]), 1.5).is_err());
        assert!(manipulate_attention(&square(&[0.5, 0.3, 0.3]), 0.1).is_err());
        assert!(manipulate_attention(&row(&[0.5, 0.5]), 0.1).is_err());
    }

    fn random_head(seed: u64) -> (Tensor2, crate::encoder::HeadWeights) {
        let spec = EncoderSpec::default();
        let w = EncoderWeights::random(spec, seed, 1.5).unwrap();
        let x = Tensor2::from_fn(spec.num_tokens, spec.token_dim, |r, c| {
            ((r * 31 + c * 7 + seed as usize) as f32 * 0.37).sin()
        });
        let xn = layer_norm(&x, &vec![1.0; 32], &vec![0.0; 32], 1e-5).unwrap();
        (xn, w.layers[0].heads[1].clone())
    }

    /// Three-step dense oracle with `f64` loops, written independently of the
    /// production path.
    fn oracle_head(x: &Tensor2, h: &crate::encoder::HeadWeights, beta: f64) -> Vec<Vec<f64>> {
        let n = x.rows();
        let d = h.wq.cols();
        let proj = |w: &Tensor2, b: &[f32]| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| {
                    (0..d)
                        .map(|j| {
                            (0..x.cols()).map(|k| f64::from(x.get(i, k)) * f64::from(w.get(k, j))).sum::<f64>()
                                + f64::from(b[j])
                        })
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (proj(&h.wq, &h.bq), proj(&h.wk, &h.bk), proj(&h.wv, &h.bv));
        let mut out = vec![vec![0.0; d]; n];
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|t| q[i][t] * k[j][t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let mut a: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
            for aj in a.iter_mut().skip(1) {
                *aj *= beta;
            }
            let s: f64 = a.iter().sum();
            for aj in a.iter_mut() {
                *aj /= s;
            }
            for t in 0..d {
                out[i][t] = (0..n).map(|j| a[j] * v[j][t]).sum();
            }
        }
        out
    }

    #[test]
    fn head_matches_dense_oracle() {
        for seed in 0..5 {
            let (x, h) = random_head(seed);
            let y = head_attention(&x, &h, 0.1).unwrap();
            let o = oracle_head(&x, &h, 0.1);
            for i in 0..x.rows() {
                for t in 0..y.cols() {
                    assert!((f64::from(y.get(i, t)) - o[i][t]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn head_beta_limits() {
        let (x, h) = random_head(3);
        let vanilla = oracle_head(&x, &h, 1.0);
        let y = head_attention(&x, &h, 1.0).unwrap();
        for i in 0..x.rows() {
            for t in 0..y.cols() {
                assert!((f64::from(y.get(i, t)) - vanilla[i][t]).abs() < 1e-6);
            }
        }
        // beta = 0: every row is the class token's value row.
        let v = x.affine(&h.wv, &h.bv);
        let y0 = head_attention(&x, &h, 0.0).unwrap();
        for i in 0..x.rows() {
            assert_eq!(y0.row(i), v.row(0));
        }
    }

    #[test]
    fn head_dimension_mismatch() {
        let (_, h) = random_head(0);
        assert!(matches!(
            head_attention(&Tensor2::zeros(3, 5), &h, 0.5),
            Err(AatError::DimensionMismatch { .. })
        ));
    }

    fn stochastic_rows(n: usize, raw: &[f32]) -> Tensor2 {
        let mut m = Tensor2::from_fn(n, n, |r, c| raw[(r * n + c) % raw.len()]);
        for r in 0..n {
            let s: f32 = m.row(r).iter().sum();
            m.row_mut(r).iter_mut().for_each(|v| *v /= s);
        }
        m
    }

    proptest! {
        #[test]
        fn class_weight_closed_form_and_monotone(n in 2usize..10,
                                                 raw in prop::collection::vec(0.01f32..1.0, 100),
                                                 b1 in 0.0f64..1.0, b2 in 0.0f64..1.0) {
            let a = stochastic_rows(n, &raw);
            let (lo, hi) = if b1 < b2 { (b1, b2) } else { (b2, b1) };
            let m_lo = manipulate_attention(&a, lo).unwrap().matrix;
            let m_hi = manipulate_attention(&a, hi).unwrap().matrix;
            for r in 0..n {
                let c = f64::from(a.get(r, 0));
                let want = c / (c + lo * (1.0 - c));
                prop_assert!((f64::from(m_lo.get(r, 0)) - want).abs() < 1e-6);
                prop_assert!(m_lo.get(r, 0) >= m_hi.get(r, 0));
                if lo < 1.0 {
                    prop_assert!(f64::from(m_lo.get(r, 0)) >= c - 1e-7);
                }
                let s: f64 = m_lo.row(r).iter().map(|&v| f64::from(v)).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
