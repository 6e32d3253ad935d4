use serde::{Deserialize, Serialize};

use crate::error::{AatError, Result};

/// Row-major dense matrix of `f32`. Dot products, norms and row statistics
/// accumulate in `f64`; matrix products accumulate in `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AatError::dims(
                "Tensor2::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(AatError::dims("Tensor2::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor2 {
        Tensor2::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · other`. Panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Vec::with_capacity(self.rows * other.cols);
        let mut acc = vec![0.0f32; other.cols];
        for r in 0..self.rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (k, &x) in self.row(r).iter().enumerate() {
                for (a, &w) in acc.iter_mut().zip(other.row(k)) {
                    *a += x * w;
                }
            }
            out.extend_from_slice(&acc);
        }
        Tensor2 {
            rows: self.rows,
            cols: other.cols,
            data: out,
        }
    }

    /// `self · otherᵀ`. Panics on column mismatch.
    pub fn matmul_t(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        Tensor2::from_fn(self.rows, other.rows, |r, c| dot(self.row(r), other.row(c)) as f32)
    }

    /// `self · w + b` with `b` broadcast over rows.
    pub fn affine(&self, w: &Tensor2, b: &[f32]) -> Tensor2 {
        assert_eq!(b.len(), w.cols, "affine bias length");
        let mut y = self.matmul(w);
        for r in 0..y.rows {
            for (v, &bb) in y.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    }

    pub fn add(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(self.shape(), other.shape(), "add shape");
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&self, s: f32) -> Tensor2 {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Horizontal concatenation of equally tall blocks.
    pub fn concat_cols(blocks: &[Tensor2]) -> Tensor2 {
        let rows = blocks.first().map_or(0, |b| b.rows);
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                assert_eq!(b.rows, rows, "concat_cols row count");
                data.extend_from_slice(b.row(r));
            }
        }
        Tensor2 { rows, cols, data }
    }

    /// Each row divided by its L2 norm. Zero rows stay zero.
    pub fn l2_normalize_rows(&self) -> Tensor2 {
        let mut out = self.clone();
        for r in 0..out.rows {
            normalize_in_place(out.row_mut(r));
        }
        out
    }

    /// Largest singular value by power iteration on `AᵀA`.
    pub fn spectral_norm(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let mut v = vec![1.0f64 / (self.cols as f64).sqrt(); self.cols];
        let mut sigma = 0.0;
        for _ in 0..200 {
            let av: Vec<f64> = (0..self.rows)
                .map(|r| {
                    self.row(r)
                        .iter()
                        .zip(&v)
                        .map(|(&a, &x)| f64::from(a) * x)
                        .sum()
                })
                .collect();
            let mut atav = vec![0.0f64; self.cols];
            for (r, &s) in av.iter().enumerate() {
                for (o, &a) in atav.iter_mut().zip(self.row(r)) {
                    *o += f64::from(a) * s;
                }
            }
            let norm = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let next = norm.sqrt();
            v = atav.into_iter().map(|x| x / norm).collect();
            if (next - sigma).abs() <= 1e-12 * next {
                return next;
            }
            sigma = next;
        }
        sigma
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn normalize_in_place(v: &mut [f32]) {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
}

pub(crate) fn ensure_finite(name: &str, values: &[f32]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AatError::NonFinite(name.to_string()))
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Tensor2) -> Result<Tensor2> {
    ensure_finite("softmax_rows input", m.data())?;
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - f64::from(max)).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for (o, e) in row.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

/// Per-row LayerNorm with affine gain and bias.
pub fn layer_norm(x: &Tensor2, gain: &[f32], bias: &[f32], eps: f32) -> Result<Tensor2> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(AatError::dims(
            "layer_norm",
            format!("gain/bias of length {}", x.cols()),
            format!("{}/{}", gain.len(), bias.len()),
        ));
    }
    if eps < 0.0 || !eps.is_finite() {
        return Err(AatError::InvalidParameter(format!("layer_norm eps {eps}")));
    }
    let mut out = x.clone();
    for r in 0..out.rows {
        layer_norm_in_place(out.row_mut(r), gain, bias, eps);
    }
    Ok(out)
}

pub(crate) fn layer_norm_in_place(row: &mut [f32], gain: &[f32], bias: &[f32], eps: f32) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + f64::from(eps)).sqrt();
    for ((v, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
        let xhat = (f64::from(*v) - mean) * rstd;
        *v = (xhat * f64::from(g) + f64::from(b)) as f32;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximate GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

/// Single-precision [`gelu`], using `0.5 (1 + tanh u) = 1 / (1 + e^(-2u))`.
#[inline]
pub fn gelu_f32(x: f32) -> f32 {
    const C2: f32 = (2.0 * GELU_C) as f32;
    x / (1.0 + (-C2 * (x + 0.044715 * x * x * x)).exp())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let m = Tensor2::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax_rows(&Tensor2::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        // e^2 / (e^2 + 1)
        let expected = 2f64.exp() / (2f64.exp() + 1.0);
        let s = softmax_rows(&Tensor2::from_rows(&[vec![2.0, 0.0]]).unwrap()).unwrap();
        assert!((f64::from(s.get(0, 0)) - expected).abs() < 1e-6);
        assert!((f64::from(s.get(0, 1)) - (1.0 - expected)).abs() < 1e-6);
        assert!((expected - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let m = Tensor2::from_rows(&[vec![0.0, f32::NAN]]).unwrap();
        assert!(matches!(softmax_rows(&m), Err(AatError::NonFinite(_))));
        let m = Tensor2::from_rows(&[vec![f32::INFINITY, 0.0]]).unwrap();
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor2::from_rows(&[vec![3.0, 3.0, 3.0]]).unwrap();
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor2::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);

        let x = Tensor2::from_rows(&[vec![0.3, -2.0, 5.0]]).unwrap();
        let y = layer_norm(&x, &[0.0; 3], &[0.5, -1.0, 2.0], 1e-5).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn layer_norm_dimension_mismatch() {
        let x = Tensor2::zeros(2, 3);
        assert!(matches!(
            layer_norm(&x, &[1.0; 2], &[0.0; 3], 1e-5),
            Err(AatError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = Tensor2::from_rows(&[vec![3.0, 0.0], vec![0.0, -5.0], vec![0.0, 0.0]]).unwrap();
        assert!((m.spectral_norm() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn gelu_known_values_and_single_precision() {
        assert_eq!(gelu(0.0), 0.0);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        assert!((gelu(1.0) - 0.841192).abs() < 1e-6);
        for i in -400..=400 {
            let x = i as f32 * 0.025;
            assert!((f64::from(gelu_f32(x)) - gelu(f64::from(x))).abs() < 1e-6, "{x}");
        }
        assert_eq!(gelu_f32(-200.0), 0.0);
        assert_eq!(gelu_f32(200.0), 200.0);
    }

    proptest! {
        #[test]
        fn softmax_is_row_stochastic(rows in 1usize..6, cols in 1usize..10,
                                     raw in prop::collection::vec(-50.0f32..50.0, 60)) {
            let m = Tensor2::from_fn(rows, cols, |r, c| raw[(r * cols + c) % raw.len()]);
            let s = softmax_rows(&m).unwrap();
            for r in 0..rows {
                let sum: f64 = s.row(r).iter().map(|&v| f64::from(v)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-5);
                prop_assert!(s.row(r).iter().all(|&v| v > 0.0));
                let max_in = m.row(r).iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let out_best = s.row(r).iter().enumerate()
                    .fold(0, |best, (i, &v)| if v > s.get(r, best) { i } else { best });
                prop_assert_eq!(m.get(r, out_best), max_in);
            }
        }

        #[test]
        fn layer_norm_standardizes(raw in prop::collection::vec(-10.0f32..10.0, 8)) {
            let x = Tensor2::new(1, 8, raw.clone()).unwrap();
            let mean = raw.iter().map(|&v| f64::from(v)).sum::<f64>() / 8.0;
            let var = raw.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assume!(var > 0.5);
            let y = layer_norm(&x, &[1.0; 8], &[0.0; 8], 1e-5).unwrap();
            let ym = y.data().iter().map(|&v| f64::from(v)).sum::<f64>() / 8.0;
            let yv = y.data().iter().map(|&v| (f64::from(v) - ym).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(ym.abs() < 1e-4);
            prop_assert!((yv - 1.0).abs() < 1e-4);
        }
    }
}
