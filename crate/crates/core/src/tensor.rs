//! Dense row-major numeric arrays and the small op set the attention
//! kernels are built from: batched matmul, scaled softmax, circular
//! sequence shifts, chunk reshaping, and gather/scatter along the
//! sequence axis.
//!
//! Rank-4 tensors follow the fixed `[batch, heads, seq, dim]` layout;
//! the sequence axis is always second-to-last. Precision is a type
//! parameter, so a computation graph cannot silently mix `f32` and
//! `f64`.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Logit value standing in for "not attendable". Finite rather than
/// `-inf` so fully masked rows never produce `inf - inf = NaN`.
pub const MASK_SENTINEL: f64 = -1.0e30;

/// Any logit at or below this is treated as masked out. Real score
/// magnitudes are tens at most, so the gap is enormous.
pub const MASK_THRESHOLD: f64 = -1.0e29;

/// Floating-point width of a tensor's elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Single => write!(f, "single"),
            Precision::Double => write!(f, "double"),
        }
    }
}

/// Scalar types tensors can hold.
pub trait Element:
    num_traits::Float + fmt::Debug + fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn mask_sentinel() -> Self {
        Self::from_f64(MASK_SENTINEL)
    }

    /// Whether a logit counts as masked out.
    fn is_masked_logit(self) -> bool {
        self <= Self::from_f64(MASK_THRESHOLD)
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::Double;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Element for f32 {
    const PRECISION: Precision = Precision::Single;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

pub mod alloc_track {
    //! Accounting hook for buffer allocations, used by tests that pin
    //! memory contracts (sparse kernels must never materialize an
    //! `h*N*N` score buffer).
    //!
    //! Counters are global atomics so allocations made on worker
    //! threads are visible; sessions serialize on a lock.

    use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
    use std::sync::Mutex;

    static ENABLED: AtomicBool = AtomicBool::new(false);
    static TOTAL_BYTES: AtomicU64 = AtomicU64::new(0);
    static MAX_SINGLE_BYTES: AtomicU64 = AtomicU64::new(0);
    static SESSION: Mutex<()> = Mutex::new(());

    /// Byte totals observed during a [`session`].
    #[derive(Debug, Clone, Copy)]
    pub struct AllocStats {
        pub total_bytes: u64,
        pub max_single_bytes: u64,
    }

    pub(crate) fn record(bytes: usize) {
        if ENABLED.load(Ordering::Relaxed) {
            TOTAL_BYTES.fetch_add(bytes as u64, Ordering::Relaxed);
            MAX_SINGLE_BYTES.fetch_max(bytes as u64, Ordering::Relaxed);
        }
    }

    /// Run `f` with accounting enabled and return its result plus the
    /// observed allocation statistics.
    pub fn session<R>(f: impl FnOnce() -> R) -> (R, AllocStats) {
        let _guard = SESSION.lock().unwrap_or_else(|e| e.into_inner());
        TOTAL_BYTES.store(0, Ordering::SeqCst);
        MAX_SINGLE_BYTES.store(0, Ordering::SeqCst);
        ENABLED.store(true, Ordering::SeqCst);
        let out = f();
        ENABLED.store(false, Ordering::SeqCst);
        let stats = AllocStats {
            total_bytes: TOTAL_BYTES.load(Ordering::SeqCst),
            max_single_bytes: MAX_SINGLE_BYTES.load(Ordering::SeqCst),
        };
        (out, stats)
    }
}

/// Dense row-major array with explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Zero-filled tensor. Panics on an empty shape or a zero dimension;
    /// those are programming errors, not data errors.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d >= 1),
            "invalid tensor shape {shape:?}"
        );
        let numel: usize = shape.iter().product();
        alloc_track::record(numel * std::mem::size_of::<T>());
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Build a tensor from owned data, validating the element count.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!(
                "tensor shape must be non-empty with all dims >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        alloc_track::record(numel * std::mem::size_of::<T>());
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for x in t.data.iter_mut() {
            *x = T::sample_standard_normal(rng);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    /// Flat offset of a multi-index (row-major).
    pub fn offset_of(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            off = off * d + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset_of(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let off = self.offset_of(idx);
        self.data[off] = value;
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0_f64, |acc, x| acc.max(x.as_f64().abs()))
    }

    /// Largest absolute elementwise difference between two same-shaped tensors.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |acc, (a, b)| {
                acc.max((a.as_f64() - b.as_f64()).abs())
            }))
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn check_rank4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0, 0, 0],
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "add")?;
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(&other.data) {
            *o = *o + *b;
        }
        Ok(out)
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "sub")?;
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(&other.data) {
            *o = *o - *b;
        }
        Ok(out)
    }

    /// Multiply every element by a scalar.
    pub fn scale(&self, factor: T) -> Tensor<T> {
        let mut out = self.clone();
        for o in out.data.iter_mut() {
            *o = *o * factor;
        }
        out
    }

    /// Batched matrix product: `[.., M, P] x [.., P, R] -> [.., M, R]`.
    /// Leading batch dimensions must match exactly.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, m, p) = self.split_matrix_dims(rhs, "matmul")?;
        let p2 = rhs.shape[rhs.shape.len() - 2];
        let r = rhs.shape[rhs.shape.len() - 1];
        if p != p2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out_shape = self.shape[..self.shape.len() - 2].to_vec();
        out_shape.extend_from_slice(&[m, r]);
        let mut out = Tensor::zeros(&out_shape);
        for b in 0..batch {
            let a_blk = &self.data[b * m * p..(b + 1) * m * p];
            let b_blk = &rhs.data[b * p * r..(b + 1) * p * r];
            let c_blk = &mut out.data[b * m * r..(b + 1) * m * r];
            for i in 0..m {
                for kk in 0..p {
                    let a_ik = a_blk[i * p + kk];
                    let b_row = &b_blk[kk * r..(kk + 1) * r];
                    let c_row = &mut c_blk[i * r..(i + 1) * r];
                    for j in 0..r {
                        c_row[j] = c_row[j] + a_ik * b_row[j];
                    }
                }
            }
        }
        Ok(out)
    }

    /// `[.., M, P] x [.., R, P] -> [.., M, R]` (right operand used transposed).
    pub fn matmul_nt(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, m, p) = self.split_matrix_dims(rhs, "matmul_nt")?;
        let r = rhs.shape[rhs.shape.len() - 2];
        let p2 = rhs.shape[rhs.shape.len() - 1];
        if p != p2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out_shape = self.shape[..self.shape.len() - 2].to_vec();
        out_shape.extend_from_slice(&[m, r]);
        let mut out = Tensor::zeros(&out_shape);
        for b in 0..batch {
            let a_blk = &self.data[b * m * p..(b + 1) * m * p];
            let b_blk = &rhs.data[b * r * p..(b + 1) * r * p];
            let c_blk = &mut out.data[b * m * r..(b + 1) * m * r];
            for i in 0..m {
                let a_row = &a_blk[i * p..(i + 1) * p];
                for j in 0..r {
                    let b_row = &b_blk[j * p..(j + 1) * p];
                    let mut acc = T::zero();
                    for kk in 0..p {
                        acc = acc + a_row[kk] * b_row[kk];
                    }
                    c_blk[i * r + j] = acc;
                }
            }
        }
        Ok(out)
    }

    /// `[.., P, M] x [.., P, R] -> [.., M, R]` (left operand used transposed).
    pub fn matmul_tn(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, p, m) = self.split_matrix_dims(rhs, "matmul_tn")?;
        let p2 = rhs.shape[rhs.shape.len() - 2];
        let r = rhs.shape[rhs.shape.len() - 1];
        if p != p2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out_shape = self.shape[..self.shape.len() - 2].to_vec();
        out_shape.extend_from_slice(&[m, r]);
        let mut out = Tensor::zeros(&out_shape);
        for b in 0..batch {
            let a_blk = &self.data[b * p * m..(b + 1) * p * m];
            let b_blk = &rhs.data[b * p * r..(b + 1) * p * r];
            let c_blk = &mut out.data[b * m * r..(b + 1) * m * r];
            for kk in 0..p {
                let a_row = &a_blk[kk * m..(kk + 1) * m];
                let b_row = &b_blk[kk * r..(kk + 1) * r];
                for i in 0..m {
                    let a_ki = a_row[i];
                    let c_row = &mut c_blk[i * r..(i + 1) * r];
                    for j in 0..r {
                        c_row[j] = c_row[j] + a_ki * b_row[j];
                    }
                }
            }
        }
        Ok(out)
    }

    fn split_matrix_dims(&self, rhs: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.ndim() < 2 || rhs.ndim() != self.ndim() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let lead = &self.shape[..self.ndim() - 2];
        if lead != &rhs.shape[..rhs.ndim() - 2] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let batch = lead.iter().product::<usize>().max(1);
        Ok((
            batch,
            self.shape[self.ndim() - 2],
            self.shape[self.ndim() - 1],
        ))
    }

    /// Numerically stable softmax of `scale * self` along the last axis.
    ///
    /// Entries at or below [`MASK_THRESHOLD`] are treated as masked:
    /// they get weight exactly zero, and a slice where everything is
    /// masked comes back all-zero instead of uniform.
    pub fn softmax_lastdim(&self, scale: T) -> Result<Tensor<T>> {
        if !scale.is_finite() {
            return Err(Error::Numeric(format!("softmax scale {scale} is not finite")));
        }
        let width = *self.shape.last().expect("tensor has at least one dim");
        let mut out = self.clone();
        for row in out.data.chunks_mut(width) {
            if row.iter().any(|x| x.is_nan()) {
                return Err(Error::Numeric("NaN in softmax input".into()));
            }
            softmax_row_in_place(row, scale);
        }
        Ok(out)
    }

    /// Circular right shift along the sequence axis of a `[B,H,N,D]`
    /// tensor: `out[b,h,j,:] = in[b,h,(j - shift) mod N,:]`.
    pub fn roll_seq(&self, shift: usize) -> Result<Tensor<T>> {
        let (b, h, n, d) = self.check_rank4("roll_seq")?;
        if shift >= n {
            return Err(Error::config(format!(
                "roll shift {shift} must be < seq_len {n} (reduce modulo N first)"
            )));
        }
        let mut out = Tensor::zeros(&self.shape);
        for bh in 0..b * h {
            let src = &self.data[bh * n * d..(bh + 1) * n * d];
            let dst = &mut out.data[bh * n * d..(bh + 1) * n * d];
            for j in 0..n {
                let from = (j + n - shift) % n;
                dst[j * d..(j + 1) * d].copy_from_slice(&src[from * d..(from + 1) * d]);
            }
        }
        Ok(out)
    }

    /// Reshape `[B,H,N,D]` into chunks of `w` tokens: `[B,H,N/w,w,D]`.
    /// Chunk `c` holds original positions `[c*w, (c+1)*w)`; the flat
    /// data is unchanged.
    pub fn chunk_reshape(&self, w: usize) -> Result<Tensor<T>> {
        let (b, h, n, d) = self.check_rank4("chunk_reshape")?;
        if w == 0 || n % w != 0 {
            return Err(Error::config(format!(
                "window {w} does not divide seq_len {n}"
            )));
        }
        Ok(Tensor {
            shape: vec![b, h, n / w, w, d],
            data: self.data.clone(),
        })
    }

    /// Inverse of [`chunk_reshape`](Self::chunk_reshape).
    pub fn unchunk_reshape(&self) -> Result<Tensor<T>> {
        if self.shape.len() != 5 {
            return Err(Error::ShapeMismatch {
                op: "unchunk_reshape",
                lhs: self.shape.clone(),
                rhs: vec![0, 0, 0, 0, 0],
            });
        }
        Ok(Tensor {
            shape: vec![
                self.shape[0],
                self.shape[1],
                self.shape[2] * self.shape[3],
                self.shape[4],
            ],
            data: self.data.clone(),
        })
    }

    /// Select sequence rows of a `[B,H,N,D]` tensor at strictly
    /// increasing indices.
    pub fn gather_seq(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let (b, h, n, d) = self.check_rank4("gather_seq")?;
        validate_index_list(idx, n)?;
        let mut out = Tensor::zeros(&[b, h, idx.len(), d]);
        for bh in 0..b * h {
            let src = &self.data[bh * n * d..(bh + 1) * n * d];
            let dst = &mut out.data[bh * idx.len() * d..(bh + 1) * idx.len() * d];
            for (row, &j) in idx.iter().enumerate() {
                dst[row * d..(row + 1) * d].copy_from_slice(&src[j * d..(j + 1) * d]);
            }
        }
        Ok(out)
    }

    /// Write rows of a `[B,H,len,D]` tensor back into an otherwise-zero
    /// `[B,H,n,D]` tensor at the given indices. Inverse of
    /// [`gather_seq`](Self::gather_seq) on the selected rows.
    pub fn scatter_seq(&self, idx: &[usize], n: usize) -> Result<Tensor<T>> {
        let (b, h, len, d) = self.check_rank4("scatter_seq")?;
        if len != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_seq",
                lhs: self.shape.clone(),
                rhs: vec![b, h, idx.len(), d],
            });
        }
        validate_index_list(idx, n)?;
        let mut out = Tensor::zeros(&[b, h, n, d]);
        for bh in 0..b * h {
            let src = &self.data[bh * len * d..(bh + 1) * len * d];
            let dst = &mut out.data[bh * n * d..(bh + 1) * n * d];
            for (row, &j) in idx.iter().enumerate() {
                dst[j * d..(j + 1) * d].copy_from_slice(&src[row * d..(row + 1) * d]);
            }
        }
        Ok(out)
    }
}

fn validate_index_list(idx: &[usize], n: usize) -> Result<()> {
    for (pos, &j) in idx.iter().enumerate() {
        if j >= n {
            return Err(Error::IndexOutOfRange { index: j, len: n });
        }
        if pos > 0 && idx[pos - 1] >= j {
            return Err(Error::config(format!(
                "index list must be strictly increasing, got {} before {}",
                idx[pos - 1],
                j
            )));
        }
    }
    Ok(())
}

/// In-place masked softmax of one logit row. Shared by the tensor op
/// and the kernels so masking semantics cannot drift apart.
pub(crate) fn softmax_row_in_place<T: Element>(row: &mut [T], scale: T) {
    let mut max = T::neg_infinity();
    let mut any_live = false;
    for &x in row.iter() {
        if !x.is_masked_logit() {
            any_live = true;
            let v = scale * x;
            if v > max {
                max = v;
            }
        }
    }
    if !any_live {
        row.fill(T::zero());
        return;
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        if x.is_masked_logit() {
            *x = T::zero();
        } else {
            let e = (scale * *x - max).exp();
            *x = e;
            sum = sum + e;
        }
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Scratch buffer routed through the allocation accounting hook.
pub(crate) fn scratch_buf<T: Element>(len: usize) -> Vec<T> {
    alloc_track::record(len * std::mem::size_of::<T>());
    vec![T::zero(); len]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Position-tagged [1,1,N,2] tensor: row j = [j, 10+j].
    fn tagged(n: usize) -> Tensor<f64> {
        let mut data = Vec::with_capacity(n * 2);
        for j in 0..n {
            data.push(j as f64);
            data.push(10.0 + j as f64);
        }
        Tensor::from_vec(&[1, 1, n, 2], data).unwrap()
    }

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let ident = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 2.5, 7.0]).unwrap();
        let out = ident.matmul(&a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    /// Independent triple-loop product used as the matmul oracle.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, p) = (a.shape()[0], a.shape()[1]);
        let r = b.shape()[1];
        let mut out = Tensor::zeros(&[m, r]);
        for i in 0..m {
            for j in 0..r {
                let mut acc = 0.0;
                for kk in 0..p {
                    acc += a.at(&[i, kk]) * b.at(&[kk, j]);
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut r = rng(11);
        let a = Tensor::<f64>::randn(&[3, 4], &mut r);
        let b = Tensor::<f64>::randn(&[4, 5], &mut r);
        let got = a.matmul(&b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 5]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn matmul_nt_tn_agree_with_explicit_transpose() {
        let mut r = rng(12);
        let a = Tensor::<f64>::randn(&[2, 3, 4], &mut r);
        let b = Tensor::<f64>::randn(&[2, 5, 4], &mut r);
        let nt = a.matmul_nt(&b).unwrap();
        // transpose b by hand
        let mut bt = Tensor::<f64>::zeros(&[2, 4, 5]);
        for batch in 0..2 {
            for i in 0..5 {
                for j in 0..4 {
                    bt.set(&[batch, j, i], b.at(&[batch, i, j]));
                }
            }
        }
        let want = a.matmul(&bt).unwrap();
        assert!(nt.max_abs_diff(&want).unwrap() < 1e-12);

        let c = Tensor::<f64>::randn(&[2, 4, 3], &mut r);
        let d = Tensor::<f64>::randn(&[2, 4, 6], &mut r);
        let tn = c.matmul_tn(&d).unwrap();
        let mut ct = Tensor::<f64>::zeros(&[2, 3, 4]);
        for batch in 0..2 {
            for i in 0..4 {
                for j in 0..3 {
                    ct.set(&[batch, j, i], c.at(&[batch, i, j]));
                }
            }
        }
        let want_tn = ct.matmul(&d).unwrap();
        assert!(tn.max_abs_diff(&want_tn).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_uniform_row() {
        let t = Tensor::<f64>::from_vec(&[1, 4], vec![0.0; 4]).unwrap();
        let s = t.softmax_lastdim(1.0).unwrap();
        for &x in s.data() {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_element_row() {
        let t = Tensor::from_vec(&[1, 1], vec![-3.7]).unwrap();
        let s = t.softmax_lastdim(2.0).unwrap();
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn softmax_matches_plain_exp_sum_oracle() {
        let mut r = rng(13);
        let t = Tensor::<f64>::randn(&[1, 8], &mut r);
        let s = t.softmax_lastdim(0.7).unwrap();
        // Oracle: unstabilized exp/sum, safe at these magnitudes.
        let exps: Vec<f64> = t.data().iter().map(|&x| (0.7 * x).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (got, e) in s.data().iter().zip(&exps) {
            assert!((got - e / total).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let t = Tensor::from_vec(&[2, 3], vec![MASK_SENTINEL; 6]).unwrap();
        let s = t.softmax_lastdim(1.0).unwrap();
        assert!(s.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn softmax_partially_masked_row() {
        let t =
            Tensor::from_vec(&[1, 4], vec![0.0, MASK_SENTINEL, 0.0, MASK_SENTINEL]).unwrap();
        let s = t.softmax_lastdim(1.0).unwrap();
        assert_eq!(s.data()[1], 0.0);
        assert_eq!(s.data()[3], 0.0);
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        let t = Tensor::from_vec(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(t.softmax_lastdim(1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn roll_zero_is_identity() {
        let t = tagged(8);
        assert_eq!(t.roll_seq(0).unwrap(), t);
    }

    #[test]
    fn roll_two_moves_tail_to_front() {
        let t = tagged(8);
        let r = t.roll_seq(2).unwrap();
        let order: Vec<f64> = (0..8).map(|j| r.at(&[0, 0, j, 0])).collect();
        assert_eq!(order, vec![6.0, 7.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn roll_rejects_shift_ge_n() {
        let t = tagged(4);
        assert!(t.roll_seq(4).is_err());
    }

    #[test]
    fn chunk_reshape_degenerate_and_tagged() {
        let t = tagged(8);
        let single = t.chunk_reshape(8).unwrap();
        assert_eq!(single.shape(), &[1, 1, 1, 8, 2]);
        assert_eq!(single.data(), t.data());

        let chunks = t.chunk_reshape(4).unwrap();
        assert_eq!(chunks.shape(), &[1, 1, 2, 4, 2]);
        assert_eq!(chunks.at(&[0, 0, 0, 3, 0]), 3.0);
        assert_eq!(chunks.at(&[0, 0, 1, 0, 0]), 4.0);
    }

    #[test]
    fn chunk_reshape_rejects_nondivisor() {
        let t = tagged(8);
        assert!(matches!(t.chunk_reshape(3), Err(Error::Config(_))));
    }

    #[test]
    fn gather_identity_and_odd_rows() {
        let t = tagged(8);
        let all: Vec<usize> = (0..8).collect();
        assert_eq!(t.gather_seq(&all).unwrap().data(), t.data());

        let odd = t.gather_seq(&[1, 3, 5, 7]).unwrap();
        let rows: Vec<f64> = (0..4).map(|r| odd.at(&[0, 0, r, 0])).collect();
        assert_eq!(rows, vec![1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn gather_rejects_bad_indices() {
        let t = tagged(8);
        assert!(matches!(
            t.gather_seq(&[1, 9]),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(t.gather_seq(&[3, 3]).is_err());
        assert!(t.gather_seq(&[5, 2]).is_err());
    }

    #[test]
    fn scatter_gather_zero_off_indices() {
        let mut r = rng(14);
        let t = Tensor::<f64>::randn(&[1, 2, 8, 3], &mut r);
        let idx = [0, 2, 5];
        let g = t.gather_seq(&idx).unwrap();
        let s = g.scatter_seq(&idx, 8).unwrap();
        for h in 0..2 {
            for j in 0..8 {
                for d in 0..3 {
                    let want = if idx.contains(&j) { t.at(&[0, h, j, d]) } else { 0.0 };
                    assert_eq!(s.at(&[0, h, j, d]), want);
                }
            }
        }
    }

    #[test]
    fn alloc_session_reports_tensor_buffers() {
        let ((), stats) = alloc_track::session(|| {
            let _t = Tensor::<f64>::zeros(&[4, 8]);
        });
        assert!(stats.max_single_bytes >= 32 * 8);
    }

    proptest! {
        #[test]
        fn roll_then_inverse_roll_is_identity(seed in 0u64..1000, n in 1usize..16, shift_raw in 0usize..64) {
            let shift = shift_raw % n;
            let mut r = rng(seed);
            let t = Tensor::<f64>::randn(&[1, 2, n, 3], &mut r);
            let back = t.roll_seq(shift).unwrap().roll_seq((n - shift) % n).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000, width in 1usize..12) {
            let mut r = rng(seed);
            let t = Tensor::<f64>::randn(&[3, width], &mut r);
            let s = t.softmax_lastdim(1.0).unwrap();
            for row in s.data().chunks(width) {
                let total: f64 = row.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
            }
        }

        #[test]
        fn chunk_roundtrip_is_bit_exact(seed in 0u64..1000, m in 1usize..5, w in 1usize..5) {
            let mut r = rng(seed);
            let t = Tensor::<f64>::randn(&[2, 1, m * w, 2], &mut r);
            let back = t.chunk_reshape(w).unwrap().unchunk_reshape().unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
