//! Dense row-major matrices of `f64` and the handful of kernels the layers
//! are built from. Each differentiable kernel has a matching rule in
//! [`backward`].

pub mod backward;
mod rng;

pub use rng::Rng;

use std::borrow::Cow;
use std::cell::Cell;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this many multiply-adds a product runs on the calling thread.
const PARALLEL_GEMM_THRESHOLD: usize = 1 << 22;

#[derive(Clone, Debug)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// Single-precision copy of `data`, filled on request by
    /// [`Matrix::cache_single`] and dropped by every mutable access.
    single: OnceLock<Box<[f32]>>,
}

impl PartialEq for Matrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.data == other.data
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::raw(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Self::raw(rows, cols, data))
    }

    /// Builds a matrix from equally long rows. An empty slice gives a 0×0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", (1, cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self::raw(rows.len(), cols, data))
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self::raw(1, values.len(), values.to_vec())
    }

    fn raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix {
            rows,
            cols,
            data,
            single: OnceLock::new(),
        }
    }

    /// Keeps an `f32` copy of the values so single-precision products can
    /// use it without narrowing on every call. Mutation discards the copy.
    pub fn cache_single(&self) {
        self.single.get_or_init(|| narrow(&self.data).into());
    }

    fn as_single(&self) -> Cow<'_, [f32]> {
        match self.single.get() {
            Some(cached) => Cow::Borrowed(cached),
            None => Cow::Owned(narrow(&self.data)),
        }
    }

    fn touch(&mut self) -> &mut Vec<f64> {
        self.single.take();
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.touch()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.cols;
        self.touch()[r * cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.touch()[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        gemm(
            m,
            k,
            n,
            (self, k, 1),
            (other, n, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape("t_matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.cols, self.rows, other.cols);
        let mut out = Matrix::zeros(m, n);
        gemm(
            m,
            k,
            n,
            (self, 1, self.cols),
            (other, n, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_t", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Matrix::zeros(m, n);
        gemm(
            m,
            k,
            n,
            (self, k, 1),
            (other, 1, other.cols),
            &mut out.data,
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Self::raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(other, op)?;
        Ok(Self::raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.touch().iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a 1×cols row to every row.
    pub fn add_row_broadcast(&mut self, row: &Matrix) -> Result<()> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::shape("add_row_broadcast", self.shape(), row.shape()));
        }
        let cols = self.cols.max(1);
        for chunk in self.touch().chunks_exact_mut(cols) {
            for (a, b) in chunk.iter_mut().zip(&row.data) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Column sums as a 1×cols matrix.
    pub fn sum_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for chunk in self.data.chunks_exact(self.cols.max(1)) {
            for (a, b) in out.data.iter_mut().zip(chunk) {
                *a += b;
            }
        }
        out
    }

    /// Mean of all rows as a 1×cols matrix; zero rows give the zero vector.
    pub fn row_mean(&self) -> Matrix {
        let mut out = self.sum_rows();
        if self.rows > 0 {
            let inv = 1.0 / self.rows as f64;
            out.data.iter_mut().for_each(|v| *v *= inv);
        }
        out
    }

    pub fn sigmoid(&self) -> Matrix {
        self.map(sigmoid)
    }

    pub fn relu(&self) -> Matrix {
        self.map(|v| v.max(0.0))
    }

    /// Row-wise softmax with the row maximum subtracted first.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            softmax_in_place(out.row_mut(r));
        }
        out
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Writes row `i` of `src` into row `indices[i]` of `self`.
    pub fn scatter_rows(&mut self, indices: &[usize], src: &Matrix) -> Result<()> {
        if src.cols != self.cols || src.rows != indices.len() {
            return Err(Error::shape("scatter_rows", self.shape(), src.shape()));
        }
        for (i, &dst) in indices.iter().enumerate() {
            self.row_mut(dst).copy_from_slice(src.row(i));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Mean of a set of equally wide rows; an empty set gives the zero row of
/// width `cols`.
pub fn row_mean(rows: &[&[f64]], cols: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros(1, cols);
    for r in rows {
        if r.len() != cols {
            return Err(Error::shape("row_mean", (1, cols), (1, r.len())));
        }
        for (a, b) in out.data.iter_mut().zip(r.iter()) {
            *a += b;
        }
    }
    if !rows.is_empty() {
        let inv = 1.0 / rows.len() as f64;
        out.data.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    // Split on sign so exp never overflows.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Arithmetic used by matrix products. `F32` rounds both operands to single
/// precision, multiplies in single precision and widens the result; every
/// other kernel stays in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            _ => Err(Error::Config(format!("unknown precision `{s}` (expected f64 or f32)"))),
        }
    }
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
}

/// Product precision in effect on the current thread.
pub fn current_precision() -> Precision {
    PRECISION.with(Cell::get)
}

/// Runs `f` with matrix products on this thread using `precision`.
pub fn with_precision<T>(precision: Precision, f: impl FnOnce() -> T) -> T {
    struct Restore(Precision);
    impl Drop for Restore {
        fn drop(&mut self) {
            PRECISION.with(|p| p.set(self.0));
        }
    }
    let _restore = Restore(PRECISION.with(|p| p.replace(precision)));
    f()
}

#[derive(Clone, Copy)]
struct Operand<'a, T> {
    data: &'a [T],
    row_stride: usize,
    col_stride: usize,
}

impl<'a, T> Operand<'a, T> {
    fn new(data: &'a [T], row_stride: usize, col_stride: usize) -> Self {
        Operand {
            data,
            row_stride,
            col_stride,
        }
    }
}

trait GemmScalar: Copy + Default + Send + Sync + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> {
    /// # Safety
    /// Same contract as `matrixmultiply::dgemm` with alpha 1, beta 0.
    #[allow(clippy::too_many_arguments)]
    unsafe fn kernel(m: usize, k: usize, n: usize, a: *const Self, rsa: isize, csa: isize, b: *const Self, rsb: isize, csb: isize, c: *mut Self, rsc: isize);
}

impl GemmScalar for f64 {
    unsafe fn kernel(m: usize, k: usize, n: usize, a: *const f64, rsa: isize, csa: isize, b: *const f64, rsb: isize, csb: isize, c: *mut f64, rsc: isize) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, 1);
    }
}

impl GemmScalar for f32 {
    unsafe fn kernel(m: usize, k: usize, n: usize, a: *const f32, rsa: isize, csa: isize, b: *const f32, rsb: isize, csb: isize, c: *mut f32, rsc: isize) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, 1);
    }
}

fn narrow(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// `c = a · b` with `a` m×k and `b` k×n given as (matrix, row stride, column
/// stride); `c` is a dense m×n row-major buffer.
fn gemm(m: usize, k: usize, n: usize, a: (&Matrix, usize, usize), b: (&Matrix, usize, usize), c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    match current_precision() {
        Precision::F64 => gemm_split(m, k, n, Operand::new(&a.0.data, a.1, a.2), Operand::new(&b.0.data, b.1, b.2), c),
        Precision::F32 => {
            let (a32, b32) = (a.0.as_single(), b.0.as_single());
            let mut c32 = vec![0f32; m * n];
            gemm_split(m, k, n, Operand::new(&a32, a.1, a.2), Operand::new(&b32, b.1, b.2), &mut c32);
            c.iter_mut().zip(&c32).for_each(|(d, &s)| *d = f64::from(s));
        }
    }
}

/// Large products are split across the rayon pool, by row panels when there
/// are enough rows and by column panels otherwise (so short products do not
/// repack all of `b` per panel). Every output element is computed by exactly
/// one panel with the same inner blocking, so results do not depend on the
/// thread count.
fn gemm_split<T: GemmScalar>(m: usize, k: usize, n: usize, a: Operand<'_, T>, b: Operand<'_, T>, c: &mut [T]) {
    let threads = rayon::current_num_threads();
    if threads <= 1 || m * k * n < PARALLEL_GEMM_THRESHOLD {
        gemm_block(0..m, 0..n, k, a, b, c);
    } else if m >= 2 * threads {
        let panel = m.div_ceil(threads * 2).max(8);
        c.par_chunks_mut(panel * n).enumerate().for_each(|(i, chunk)| {
            let start = i * panel;
            gemm_block(start..start + chunk.len() / n, 0..n, k, a, b, chunk);
        });
    } else {
        gemm_columns(m, k, n, n.div_ceil(threads).max(COLUMN_PANEL_MIN), a, b, c);
    }
}

const COLUMN_PANEL_MIN: usize = 64;

fn gemm_columns<T: GemmScalar>(m: usize, k: usize, n: usize, width: usize, a: Operand<'_, T>, b: Operand<'_, T>, c: &mut [T]) {
    let starts: Vec<usize> = (0..n).step_by(width).collect();
    let panels: Vec<Vec<T>> = starts
        .par_iter()
        .map(|&start| {
            let cols = start..(start + width).min(n);
            let mut out = vec![T::default(); m * cols.len()];
            gemm_block(0..m, cols, k, a, b, &mut out);
            out
        })
        .collect();
    for (&start, panel) in starts.iter().zip(&panels) {
        let w = panel.len() / m;
        for (dst, src) in c.chunks_exact_mut(n).zip(panel.chunks_exact(w)) {
            dst[start..start + w].copy_from_slice(src);
        }
    }
}

/// Rows `rows` × columns `cols` of `a · b` into the dense buffer `c`.
fn gemm_block<T: GemmScalar>(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    c: &mut [T],
) {
    let (m, n) = (rows.len(), cols.len());
    let a_offset = rows.start * a.row_stride;
    let b_offset = cols.start * b.col_stride;
    // Bounds: the last elements touched are a(rows.end - 1, k - 1) and b(k - 1, cols.end - 1).
    let a_last = (rows.end - 1) * a.row_stride + (k - 1) * a.col_stride;
    let b_last = (k - 1) * b.row_stride + (cols.end - 1) * b.col_stride;
    assert!(m > 0 && n > 0 && a_last < a.data.len() && b_last < b.data.len() && c.len() == m * n);
    if m == 1 {
        return row_times(&a.data[a_offset..], a.col_stride, k, &b.data[b_offset..], b, c);
    }
    // SAFETY: the assertions above keep every strided access inside the
    // borrowed slices, and `c` is exclusively borrowed.
    unsafe {
        T::kernel(
            m,
            k,
            n,
            a.data.as_ptr().add(a_offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b_offset),
            b.row_stride as isize,
            b.col_stride as isize,
            c.as_mut_ptr(),
            n as isize,
        );
    }
}

/// Single output row `c = x · b`; packing a matrix for one row costs more
/// than the product itself.
fn row_times<T: GemmScalar>(x: &[T], x_stride: usize, k: usize, b: &[T], strides: Operand<'_, T>, c: &mut [T]) {
    let (rs, cs) = (strides.row_stride, strides.col_stride);
    let n = c.len();
    if cs == 1 {
        c.iter_mut().for_each(|v| *v = T::default());
        for p in 0..k {
            let xp = x[p * x_stride];
            for (out, &w) in c.iter_mut().zip(&b[p * rs..p * rs + n]) {
                *out = *out + xp * w;
            }
        }
    } else {
        for (j, out) in c.iter_mut().enumerate() {
            let mut acc = T::default();
            for p in 0..k {
                acc = acc + x[p * x_stride] * b[p * rs + j * cs];
            }
            *out = acc;
        }
    }
}
