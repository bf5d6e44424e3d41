//! Dense rank-4 tensors and the handful of primitives everything else is
//! built from: seeded random fills, permute+reshape, and batched matrix
//! multiplication.
//!
//! Layout is always row-major `(n, c, h, w)`: `w` is the fastest-varying
//! axis. There are no strides and no views — every operation produces a
//! freshly owned buffer. That costs some copies but keeps every kernel in
//! this crate a plain loop over a contiguous `&[T]`, which is what makes
//! the arithmetic auditable and the results independent of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Tensor dimensions `(n, c, h, w)` as a fixed array.
pub type Dims = [usize; 4];

/// Name of the RNG family used for every random draw in this crate.
///
/// Recorded in weight-file headers so a reader can tell how a checkpoint's
/// initialization was produced. All draws go through [`Prng`], which wraps
/// this one algorithm; changing it would change every seeded result.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Scalar element type: the crate is generic over `f32` and `f64` only.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    /// Tag describing this scalar in headers and error messages.
    const DTYPE: Dtype;

    /// Lossy conversion from `f64` (identity for `f64`, rounding for `f32`).
    fn from_f64(v: f64) -> Self;

    /// Widening conversion to `f64`.
    fn to_f64(self) -> f64;

    /// Read one scalar from little-endian bytes.
    fn from_le_bytes(bytes: &[u8]) -> Self;

    /// Append this scalar's little-endian bytes to a buffer.
    fn write_le_bytes(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_le_bytes(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes per f32"))
    }

    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn from_le_bytes(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes per f64"))
    }

    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Scalar type tag, stored in weight-file headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    /// Bytes per scalar.
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// Canonical lowercase name (`"f32"` / `"f64"`).
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Owned, contiguous, row-major `(n, c, h, w)` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T> std::fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // The data is deliberately elided: tensors are large and their
        // contents are never what a debug trace is after.
        write!(f, "Tensor4{:?}", self.dims)
    }
}

impl<T: Scalar> Tensor4<T> {
    /// All-zero tensor.
    pub fn zeros(dims: Dims) -> Self {
        Tensor4 {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    /// Tensor filled with one value.
    pub fn filled(dims: Dims, value: T) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// Wrap an existing buffer. Fails if the length does not match the dims.
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::BufferLen {
                len: data.len(),
                dims,
            });
        }
        Ok(Tensor4 { dims, data })
    }

    /// Dimensions `(n, c, h, w)`.
    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Leading (batch) dimension.
    pub fn n(&self) -> usize {
        self.dims[0]
    }

    /// Channel dimension.
    pub fn c(&self) -> usize {
        self.dims[1]
    }

    /// Height.
    pub fn h(&self) -> usize {
        self.dims[2]
    }

    /// Width.
    pub fn w(&self) -> usize {
        self.dims[3]
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor has zero elements.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Read-only view of the flat buffer.
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable view of the flat buffer.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Consume into the flat buffer.
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Flat index of `(n, c, h, w)`.
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    /// Element at `(n, c, h, w)`.
    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// Overwrite the element at `(n, c, h, w)`.
    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = value;
    }

    /// Apply `f` elementwise, producing a new tensor.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                op: "add",
                expected: self.dims,
                got: other.dims,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor4 {
            dims: self.dims,
            data,
        })
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                expected: self.dims,
                got: other.dims,
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Largest absolute elementwise difference, as `f64`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                expected: self.dims,
                got: other.dims,
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Debug-build check that every element is finite. `what` names the
    /// producing operation in the panic message. Compiled out in release.
    pub fn debug_assert_finite(&self, what: &str) {
        if cfg!(debug_assertions) {
            for (i, v) in self.data.iter().enumerate() {
                debug_assert!(
                    v.is_finite(),
                    "non-finite value {v} at flat index {i} out of {what}"
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Seeded randomness
// ---------------------------------------------------------------------------

/// Deterministic random source. One algorithm (ChaCha8), one seed, one
/// stream: every draw in the crate flows through an instance of this, so a
/// fixed seed pins initialization, data synthesis, and patch sampling across
/// platforms.
pub struct Prng {
    rng: ChaCha8Rng,
    seed: u64,
}

impl Prng {
    /// Stream seeded from a single `u64`.
    pub fn new(seed: u64) -> Self {
        Prng {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    /// Seed this stream was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream. Advances this stream by one draw,
    /// so repeated splits yield distinct children.
    pub fn split(&mut self) -> Prng {
        let child_seed: u64 = self.rng.gen();
        Prng::new(child_seed)
    }

    /// Uniform draw from `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "Prng::index needs a nonempty range");
        self.rng.gen_range(0..n)
    }

    /// One standard-uniform `f64` in `[0, 1)`.
    pub fn uniform_f64(&mut self) -> f64 {
        self.rng.gen()
    }

    /// One normal draw with the given mean and standard deviation.
    ///
    /// Draws are always performed in `f64` and rounded to the target type
    /// afterwards, so an `f32` and an `f64` tensor filled from the same seed
    /// agree to `f32` rounding.
    pub fn normal_f64(&mut self, mean: f64, stddev: f64) -> f64 {
        let dist = Normal::new(mean, stddev).expect("stddev must be finite and >= 0");
        dist.sample(&mut self.rng)
    }
}

/// Tensor filled with i.i.d. normal draws.
///
/// `stddev` must be finite and non-negative; `stddev == 0` produces a
/// constant tensor equal to `mean`.
pub fn seeded_normal<T: Scalar>(
    dims: Dims,
    mean: f64,
    stddev: f64,
    rng: &mut Prng,
) -> Result<Tensor4<T>> {
    if !(stddev.is_finite() && stddev >= 0.0 && mean.is_finite()) {
        return Err(Error::invalid(
            "seeded_normal",
            format!("mean {mean} / stddev {stddev} must be finite with stddev >= 0"),
        ));
    }
    let dist = Normal::new(mean, stddev).expect("validated above");
    let data = (0..dims.iter().product::<usize>())
        .map(|_| T::from_f64(dist.sample(&mut rng.rng)))
        .collect();
    Ok(Tensor4 { dims, data })
}

/// Tensor filled with i.i.d. uniform draws from `[lo, hi)`.
pub fn seeded_uniform<T: Scalar>(
    dims: Dims,
    lo: f64,
    hi: f64,
    rng: &mut Prng,
) -> Result<Tensor4<T>> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::invalid(
            "seeded_uniform",
            format!("bounds [{lo}, {hi}) must be finite with lo < hi"),
        ));
    }
    let dist = Uniform::new(lo, hi);
    let data = (0..dims.iter().product::<usize>())
        .map(|_| T::from_f64(dist.sample(&mut rng.rng)))
        .collect();
    Ok(Tensor4 { dims, data })
}

// ---------------------------------------------------------------------------
// Permute + reshape
// ---------------------------------------------------------------------------

/// Reorder axes by `perm`, then reinterpret the result as `new_dims`.
///
/// `perm[i]` names the source axis that becomes output axis `i` (so
/// `perm = [0, 2, 1, 3]` swaps channels and height). The permuted tensor is
/// materialized in row-major order before the reshape, which is a pure
/// relabeling and requires `new_dims` to preserve the element count.
pub fn permute_reshape<T: Scalar>(
    x: &Tensor4<T>,
    perm: [usize; 4],
    new_dims: Dims,
) -> Result<Tensor4<T>> {
    let mut seen = [false; 4];
    for &p in &perm {
        if p > 3 || seen[p] {
            return Err(Error::invalid(
                "permute_reshape",
                format!("{perm:?} is not a permutation of axes 0..4"),
            ));
        }
        seen[p] = true;
    }
    let new_len: usize = new_dims.iter().product();
    if new_len != x.len() {
        return Err(Error::BufferLen {
            len: x.len(),
            dims: new_dims,
        });
    }

    let src = x.dims();
    let out_dims = [src[perm[0]], src[perm[1]], src[perm[2]], src[perm[3]]];
    let mut data = Vec::with_capacity(x.len());
    // Walk the output in row-major order, gathering from the source. Index
    // arithmetic is written out longhand: o = (o0, o1, o2, o3) maps back to
    // source coordinate s[perm[k]] = o_k.
    let mut s = [0usize; 4];
    for o0 in 0..out_dims[0] {
        s[perm[0]] = o0;
        for o1 in 0..out_dims[1] {
            s[perm[1]] = o1;
            for o2 in 0..out_dims[2] {
                s[perm[2]] = o2;
                for o3 in 0..out_dims[3] {
                    s[perm[3]] = o3;
                    data.push(x.at(s[0], s[1], s[2], s[3]));
                }
            }
        }
    }
    Tensor4::from_vec(new_dims, data)
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

/// `c += a @ b` for row-major `a (p x q)`, `b (q x r)`, `c (p x r)`.
///
/// The i-k-j loop order keeps both `b` and the accumulator row contiguous
/// in the inner loop, which the compiler vectorizes well. Sums are carried
/// in f64 regardless of `T` and rounded into `c` once per output element:
/// every f32 product is exact in f64, so a single-precision network sees
/// one rounding per dot product instead of one per term — without this,
/// two algebraically equal arrangements of a deep network (say, a
/// multi-branch body and its collapsed form) drift apart by well over the
/// verification tolerance. Rows of `c` are independent, so parallelizing
/// over them cannot change any result: each output element is written by
/// exactly one task and its reduction order over `k` is fixed.
/// Bit-identical at every thread count.
pub(crate) fn gemm_accum<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(c.len(), p * r);
    // Widen `b` once up front so the inner loop is straight f64 multiply-add
    // (converting inside it defeats vectorization).
    let bf: Vec<f64> = b.iter().map(|&v| v.to_f64()).collect();
    let row = |i: usize, acc: &mut [f64], c_row: &mut [T]| {
        let a_row = &a[i * q..(i + 1) * q];
        acc.fill(0.0);
        for k in 0..q {
            let aik = a_row[k].to_f64();
            if aik == 0.0 {
                continue;
            }
            let b_row = &bf[k * r..(k + 1) * r];
            for j in 0..r {
                acc[j] += aik * b_row[j];
            }
        }
        for j in 0..r {
            c_row[j] = c_row[j] + T::from_f64(acc[j]);
        }
    };
    // Below ~64k output elements the work per row is too small to amortize
    // rayon's scheduling; run the plain loop.
    if p * r < 65_536 || rayon::current_num_threads() == 1 {
        let mut acc = vec![0.0f64; r];
        for i in 0..p {
            let c_row = &mut c[i * r..(i + 1) * r];
            row(i, &mut acc, c_row);
        }
    } else {
        c.par_chunks_mut(r).enumerate().for_each(|(i, c_row)| {
            let mut acc = vec![0.0f64; r];
            row(i, &mut acc, c_row);
        });
    }
}

/// `c += a @ b^T` for row-major `a (p x m)`, `b (r x m)`, `c (p x r)`.
///
/// Used by the convolution weight gradient, where both operands are laid
/// out with the contraction axis contiguous. Accumulates in f64 like
/// [`gemm_accum`], one rounding per output element.
pub(crate) fn gemm_abt_accum<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    p: usize,
    m: usize,
    r: usize,
) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), r * m);
    debug_assert_eq!(c.len(), p * r);
    let bf: Vec<f64> = b.iter().map(|&v| v.to_f64()).collect();
    let mut af = vec![0.0f64; m];
    for i in 0..p {
        for (dst, &src) in af.iter_mut().zip(&a[i * m..(i + 1) * m]) {
            *dst = src.to_f64();
        }
        let c_row = &mut c[i * r..(i + 1) * r];
        for j in 0..r {
            let b_row = &bf[j * m..(j + 1) * m];
            let mut acc = 0.0f64;
            for k in 0..m {
                acc += af[k] * b_row[k];
            }
            c_row[j] = c_row[j] + T::from_f64(acc);
        }
    }
}

/// Batched matrix multiplication on rank-4 tensors.
///
/// Operands are read as stacks of row-major matrices: `a` has dims
/// `(ba, p, q, 1)` and `b` has dims `(bb, q, r, 1)`. Batch sizes must match,
/// or either may be 1, in which case that operand is broadcast across the
/// other's batch. The result has dims `(max(ba, bb), p, r, 1)`.
pub fn batched_matmul<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [ba, p, qa, ta] = a.dims();
    let [bb, qb, r, tb] = b.dims();
    if ta != 1 || tb != 1 {
        return Err(Error::invalid(
            "batched_matmul",
            format!(
                "operands must have trailing dim 1 (matrix stacks), got {:?} and {:?}",
                a.dims(),
                b.dims()
            ),
        ));
    }
    if qa != qb {
        return Err(Error::ShapeMismatch {
            op: "batched_matmul",
            expected: [ba, p, qa, 1],
            got: [bb, qb, r, 1],
        });
    }
    if ba != bb && ba != 1 && bb != 1 {
        return Err(Error::invalid(
            "batched_matmul",
            format!("batch sizes {ba} and {bb} are incompatible (must match or be 1)"),
        ));
    }
    let q = qa;
    let batch = ba.max(bb);
    let mut out = Tensor4::zeros([batch, p, r, 1]);
    for g in 0..batch {
        let asl = if ba == 1 { 0 } else { g };
        let bsl = if bb == 1 { 0 } else { g };
        let a_mat = &a.data()[asl * p * q..(asl + 1) * p * q];
        let b_mat = &b.data()[bsl * q * r..(bsl + 1) * q * r];
        let c_mat = &mut out.data_mut()[g * p * r..(g + 1) * p * r];
        gemm_accum(a_mat, b_mat, c_mat, p, q, r);
    }
    Ok(out)
}
