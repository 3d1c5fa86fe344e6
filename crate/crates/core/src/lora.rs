//! Low-rank adapters on frozen weight matrices.
//!
//! An adapter holds `A` (r×k) and `B` (d×r) and contributes
//! `(alpha / r) · B · A` on top of a frozen base `W0` (d×k). `B` starts at
//! zero, so a fresh adapter leaves the base map unchanged.

use std::io::{self, Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::scalar::Scalar;

/// Standard deviation of the Gaussian used for `A`.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("rank {r} out of range for a {d}x{k} matrix (need 1 <= r <= min(d,k)/2)")]
    Rank { d: usize, k: usize, r: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn shape_err(expected: impl Into<String>, got: impl Into<String>) -> LoraError {
    LoraError::Shape { expected: expected.into(), got: got.into() }
}

/// Base weight matrix `W0 ∈ R^{d×k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix<T> {
    pub weights: Array2<T>,
    pub frozen: bool,
}

impl<T: Scalar> WeightMatrix<T> {
    pub fn new(weights: Array2<T>) -> Self {
        Self { weights, frozen: true }
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn cols(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive FNV checksum of the raw bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.weights.iter() {
            for b in v.as_f64().to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Low-rank pair with its scale constant.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    /// r × k
    pub a: Array2<T>,
    /// d × r
    pub b: Array2<T>,
    pub alpha: T,
}

/// Gradients for one adapter, same shapes as `a` and `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad<T> {
    pub a: Array2<T>,
    pub b: Array2<T>,
}

impl<T: Scalar> AdapterGrad<T> {
    pub fn zeros_like(ad: &LoraAdapter<T>) -> Self {
        Self { a: Array2::zeros(ad.a.raw_dim()), b: Array2::zeros(ad.b.raw_dim()) }
    }
}

pub fn check_rank(d: usize, k: usize, r: usize) -> Result<(), LoraError> {
    if r == 0 || 2 * r > d.min(k) {
        return Err(LoraError::Rank { d, k, r });
    }
    Ok(())
}

/// `A ~ N(0, 0.02²)` elementwise, `B = 0`. Deterministic under `seed`.
pub fn init_adapter<T: Scalar>(
    d: usize,
    k: usize,
    r: usize,
    alpha: T,
    seed: u64,
) -> Result<LoraAdapter<T>, LoraError> {
    check_rank(d, k, r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let a = Array2::from_shape_fn((r, k), |_| T::lit(normal.sample(&mut rng)));
    Ok(LoraAdapter { a, b: Array2::zeros((d, r)), alpha })
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.nrows()
    }

    /// `alpha / r`.
    pub fn scale(&self) -> T {
        self.alpha / T::from_usize(self.rank()).unwrap()
    }

    /// `(alpha / r) · B · A`.
    pub fn delta(&self) -> Array2<T> {
        self.b.dot(&self.a) * self.scale()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|v| v.is_finite()) && self.alpha.is_finite()
    }

    fn check_base(&self, w0: &WeightMatrix<T>) -> Result<(), LoraError> {
        if w0.rows() != self.out_dim() || w0.cols() != self.in_dim() {
            return Err(shape_err(
                format!("{}x{}", self.out_dim(), self.in_dim()),
                format!("{}x{}", w0.rows(), w0.cols()),
            ));
        }
        if self.b.ncols() != self.rank() {
            return Err(shape_err(
                format!("B with {} columns", self.rank()),
                format!("{} columns", self.b.ncols()),
            ));
        }
        Ok(())
    }

    /// Row-batched forward: each row of `x` (n×k) maps to a row of the n×d result.
    pub fn forward_batch(&self, w0: &WeightMatrix<T>, x: ArrayView2<T>) -> Result<Array2<T>, LoraError> {
        self.check_base(w0)?;
        if x.ncols() != self.in_dim() {
            return Err(shape_err(format!("{} input columns", self.in_dim()), format!("{}", x.ncols())));
        }
        let base = x.dot(&w0.weights.t());
        let low = x.dot(&self.a.t()).dot(&self.b.t());
        Ok(base + low * self.scale())
    }

    /// Gradients of a loss w.r.t. `A` and `B`, given the batch inputs `x`
    /// (n×k) and the upstream gradient `g` (n×d) of the layer output.
    pub fn backward_batch(&self, x: ArrayView2<T>, g: ArrayView2<T>) -> AdapterGrad<T> {
        let s = self.scale();
        let ax = x.dot(&self.a.t()); // n×r
        let gb = g.dot(&self.b); // n×r
        AdapterGrad { a: gb.t().dot(&x) * s, b: g.t().dot(&ax) * s }
    }

    /// Plain gradient-descent update.
    pub fn apply_step(&mut self, grad: &AdapterGrad<T>, lr: T) {
        self.a.scaled_add(-lr, &grad.a);
        self.b.scaled_add(-lr, &grad.b);
    }

    /// Drops output rows (entries of `B`) at the given sorted indices.
    pub fn remove_outputs(&mut self, keep: &[usize]) {
        self.b = self.b.select(Axis(0), keep);
    }

    /// Drops input columns (entries of `A`) keeping only `keep`.
    pub fn remove_inputs(&mut self, keep: &[usize]) {
        self.a = self.a.select(Axis(1), keep);
    }

    /// Header `d, k, r` (u32 LE) and `alpha` (f32 LE), then `A` and `B`
    /// row-major as little-endian f32.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), LoraError> {
        for dim in [self.out_dim(), self.in_dim(), self.rank()] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&self.alpha.as_f32().to_le_bytes())?;
        for v in self.a.iter().chain(self.b.iter()) {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, LoraError> {
        let d = read_u32(&mut r)? as usize;
        let k = read_u32(&mut r)? as usize;
        let rank = read_u32(&mut r)? as usize;
        let alpha = T::from_f32(read_f32(&mut r)?).unwrap();
        if rank == 0 || rank > d.min(k) {
            return Err(LoraError::Corrupt(format!("rank {rank} for {d}x{k}")));
        }
        let a = read_matrix(&mut r, rank, k)?;
        let b = read_matrix(&mut r, d, rank)?;
        let ad = Self { a, b, alpha };
        if !ad.is_finite() {
            return Err(LoraError::NonFinite("adapter checkpoint"));
        }
        Ok(ad)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> io::Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

pub(crate) fn read_matrix<T: Scalar, R: Read>(r: &mut R, rows: usize, cols: usize) -> io::Result<Array2<T>> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(T::from_f32(read_f32(r)?).unwrap());
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches payload"))
}

/// `W0 · x + (alpha / r) · B · (A · x)`.
pub fn lora_forward<T: Scalar>(
    w0: &WeightMatrix<T>,
    ad: &LoraAdapter<T>,
    x: ArrayView1<T>,
) -> Result<Array1<T>, LoraError> {
    ad.check_base(w0)?;
    if x.len() != ad.in_dim() {
        return Err(shape_err(format!("input length {}", ad.in_dim()), format!("{}", x.len())));
    }
    let ax = ad.a.dot(&x);
    Ok(w0.weights.dot(&x) + ad.b.dot(&ax) * ad.scale())
}

/// `W0 + (alpha / r) · B · A`; the result keeps the base's frozen flag.
pub fn merge_adapter<T: Scalar>(
    w0: &WeightMatrix<T>,
    ad: &LoraAdapter<T>,
) -> Result<WeightMatrix<T>, LoraError> {
    ad.check_base(w0)?;
    Ok(WeightMatrix { weights: &w0.weights + &ad.delta(), frozen: w0.frozen })
}
