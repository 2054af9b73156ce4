//! Dense n-dimensional tensors, row-major, f64.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// A dense tensor of 64-bit floats in row-major layout.
///
/// Tensors are immutable values: every operation returns a fresh tensor
/// and never mutates its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(CoreError::Dimension("zero extent in shape".to_string()));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(CoreError::Dimension(
                "data length does not match shape product".to_string(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            increment_index(&mut idx, shape);
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// True when the tensor holds exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(index, &self.shape)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = flat_index(index, &self.shape);
        self.data[i] = value;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CoreError::Dimension(
                "shape mismatch in elementwise op".to_string(),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    /// Reinterprets the tensor with a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(CoreError::Dimension(
                "reshape changes element count".to_string(),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn flat_index(index: &[usize], shape: &[usize]) -> usize {
    debug_assert_eq!(index.len(), shape.len());
    let mut flat = 0usize;
    for (i, (&ix, &ext)) in index.iter().zip(shape.iter()).enumerate() {
        debug_assert!(ix < ext, "index {ix} out of range at mode {i}");
        flat = flat * ext + ix;
    }
    flat
}

/// Advances `idx` to the next multi-index in row-major order.
pub(crate) fn increment_index(idx: &mut [usize], shape: &[usize]) {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < shape[i] {
            return;
        }
        idx[i] = 0;
    }
}

/// Double contraction: sums over two paired modes of `a` and `b`.
///
/// `modes_a` and `modes_b` are 0-based mode indices. The result carries the
/// non-contracted modes of `a` (in order) followed by those of `b`.
pub fn contract_double(
    a: &Tensor,
    b: &Tensor,
    modes_a: (usize, usize),
    modes_b: (usize, usize),
) -> Result<Tensor> {
    let (a0, a1) = modes_a;
    let (b0, b1) = modes_b;
    if a0 == a1 || b0 == b1 {
        return Err(CoreError::Dimension(
            "contracted modes must be distinct".to_string(),
        ));
    }
    if a0 >= a.rank() || a1 >= a.rank() || b0 >= b.rank() || b1 >= b.rank() {
        return Err(CoreError::Dimension(
            "contraction mode out of range".to_string(),
        ));
    }
    if a.shape()[a0] != b.shape()[b0] || a.shape()[a1] != b.shape()[b1] {
        return Err(CoreError::Dimension(
            "extent mismatch at contracted modes".to_string(),
        ));
    }

    let a_keep: Vec<usize> = (0..a.rank()).filter(|&m| m != a0 && m != a1).collect();
    let b_keep: Vec<usize> = (0..b.rank()).filter(|&m| m != b0 && m != b1).collect();
    let mut out_shape: Vec<usize> = a_keep.iter().map(|&m| a.shape()[m]).collect();
    out_shape.extend(b_keep.iter().map(|&m| b.shape()[m]));
    if out_shape.is_empty() {
        out_shape.push(1);
    }

    let sa = a.strides();
    let sb = b.strides();
    let e0 = a.shape()[a0];
    let e1 = a.shape()[a1];

    let out_len: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(out_len);
    let mut out_idx = vec![0usize; a_keep.len() + b_keep.len()];
    let keep_shape: Vec<usize> = a_keep
        .iter()
        .map(|&m| a.shape()[m])
        .chain(b_keep.iter().map(|&m| b.shape()[m]))
        .collect();
    for _ in 0..out_len {
        let mut base_a = 0usize;
        for (pos, &m) in a_keep.iter().enumerate() {
            base_a += out_idx[pos] * sa[m];
        }
        let mut base_b = 0usize;
        for (pos, &m) in b_keep.iter().enumerate() {
            base_b += out_idx[a_keep.len() + pos] * sb[m];
        }
        let mut acc = 0.0;
        for s in 0..e0 {
            for t in 0..e1 {
                let ia = base_a + s * sa[a0] + t * sa[a1];
                let ib = base_b + s * sb[b0] + t * sb[b1];
                acc += a.data()[ia] * b.data()[ib];
            }
        }
        data.push(acc);
        if !keep_shape.is_empty() {
            increment_index(&mut out_idx, &keep_shape);
        }
    }
    Tensor::new(out_shape, data)
}

/// Multilinear interpolation of `a` onto `target_shape`.
///
/// Coordinates are aligned at the corners and edge-clamped; a tensor whose
/// shape already matches the target is returned unchanged.
pub fn rescale_nd(a: &Tensor, target_shape: &[usize]) -> Result<Tensor> {
    if target_shape.len() != a.rank() {
        return Err(CoreError::Dimension(
            "rescale rank mismatch".to_string(),
        ));
    }
    if target_shape.iter().any(|&e| e == 0) {
        return Err(CoreError::Dimension("zero extent in target shape".to_string()));
    }
    if target_shape == a.shape() {
        return Ok(a.clone());
    }

    let rank = a.rank();
    let src_shape = a.shape();
    let strides = a.strides();

    // Per output index and mode: source cell floor, ceil, and fractional weight.
    let mut lo = vec![0usize; rank];
    let mut hi = vec![0usize; rank];
    let mut frac = vec![0.0f64; rank];

    let out = Tensor::from_fn(target_shape, |idx| {
        for m in 0..rank {
            let (s, t) = (src_shape[m], target_shape[m]);
            let coord = if t <= 1 || s <= 1 {
                0.0
            } else {
                idx[m] as f64 * (s - 1) as f64 / (t - 1) as f64
            };
            let f = libm::floor(coord);
            let l = (f as usize).min(s - 1);
            lo[m] = l;
            hi[m] = (l + 1).min(s - 1);
            frac[m] = coord - f;
        }
        // Accumulate the 2^rank corner contributions.
        let mut acc = 0.0;
        for corner in 0u32..(1 << rank) {
            let mut w = 1.0;
            let mut off = 0usize;
            for m in 0..rank {
                if corner >> m & 1 == 1 {
                    w *= frac[m];
                    off += hi[m] * strides[m];
                } else {
                    w *= 1.0 - frac[m];
                    off += lo[m] * strides[m];
                }
            }
            if w != 0.0 {
                acc += w * a.data()[off];
            }
        }
        acc
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn new_rejects_mismatched_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn contract_ones_counts_terms() {
        let a = Tensor::ones(&[2, 2, 2, 2]);
        let b = Tensor::ones(&[2, 2]);
        let c = contract_double(&a, &b, (2, 3), (0, 1)).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert!(c.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn contract_full_grid_shape() {
        let a = Tensor::ones(&[14, 14, 14, 14]);
        let b = Tensor::ones(&[14, 14]);
        let p = contract_double(&a, &b, (2, 3), (0, 1)).unwrap();
        assert_eq!(p.shape(), &[14, 14]);
        assert!(p.data().iter().all(|&v| v == 196.0));
    }

    #[test]
    fn contract_matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&mut rng, &[3, 2, 3, 2]);
        let b = Tensor::ones(&[3, 2]);
        let c = contract_double(&a, &b, (2, 3), (0, 1)).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    for l in 0..2 {
                        acc += a.at(&[i, j, k, l]);
                    }
                }
                assert!((c.at(&[i, j]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contract_rejects_extent_mismatch() {
        let a = Tensor::ones(&[2, 3]);
        let b = Tensor::ones(&[3, 2]);
        assert!(contract_double(&a, &b, (0, 1), (0, 1)).is_err());
    }

    #[test]
    fn contract_over_last_two_equals_mode_sum_small_shapes() {
        // contract against ones == summing over the last two modes, for every
        // 4D shape with extents up to 5.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d0 in 1..=5usize {
            for d1 in 1..=5usize {
                for d2 in 1..=5usize {
                    for d3 in 1..=5usize {
                        let a = random_tensor(&mut rng, &[d0, d1, d2, d3]);
                        let ones = Tensor::ones(&[d2, d3]);
                        let c = contract_double(&a, &ones, (2, 3), (0, 1)).unwrap();
                        for i in 0..d0 {
                            for j in 0..d1 {
                                let mut acc = 0.0;
                                for k in 0..d2 {
                                    for l in 0..d3 {
                                        acc += a.at(&[i, j, k, l]);
                                    }
                                }
                                let got = c.at(&[i, j]);
                                assert!((got - acc).abs() <= 1e-12 * acc.abs().max(1.0));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn hadamard_identity_and_annihilator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, &[4, 4]);
        let ones = Tensor::ones(&[4, 4]);
        let zeros = Tensor::zeros(&[4, 4]);
        assert_eq!(a.hadamard(&ones).unwrap(), a);
        assert_eq!(a.hadamard(&zeros).unwrap(), zeros);
    }

    #[test]
    fn hadamard_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_tensor(&mut rng, &[4, 4]);
        let b = random_tensor(&mut rng, &[4, 4]);
        let c = a.hadamard(&b).unwrap();
        for i in 0..16 {
            assert_eq!(c.data()[i], a.data()[i] * b.data()[i]);
        }
        assert!(a.hadamard(&Tensor::ones(&[2, 8])).is_err());
    }

    #[test]
    fn rescale_identity_shape_is_exact_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_tensor(&mut rng, &[7, 7, 7, 7]);
        let b = rescale_nd(&a, &[7, 7, 7, 7]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rescale_preserves_constants() {
        let a = Tensor::filled(&[4, 4, 4, 4], 2.5);
        let b = rescale_nd(&a, &[8, 8, 8, 8]).unwrap();
        for &v in b.data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rescale_linear_ramp_is_exact() {
        // Ramp along mode 1, upsampled 4 -> 8: multilinear interpolation of a
        // linear function reproduces it exactly.
        let a = Tensor::from_fn(&[2, 4], |idx| idx[1] as f64);
        let b = rescale_nd(&a, &[2, 8]).unwrap();
        for j in 0..8 {
            let expect = j as f64 * 3.0 / 7.0;
            assert!((b.at(&[0, j]) - expect).abs() < 1e-12);
            assert!((b.at(&[1, j]) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rescale_rejects_rank_mismatch() {
        let a = Tensor::ones(&[2, 2]);
        assert!(rescale_nd(&a, &[2, 2, 2]).is_err());
    }
}
