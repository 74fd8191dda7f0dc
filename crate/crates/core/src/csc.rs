//! Convolutional sparse coding with per-channel reweighted ℓ1 penalties.
//!
//! The dictionary is stored as an analysis bank with `c` output channels over
//! the `p` signal channels, so `Fᵀ r = conv2d(r, dict)` and the synthesis
//! `F z = Σ f_i ⊛ z_i` is its adjoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{conv2d, conv2d_adjoint, soft, KernelBank, Tensor};

/// Multiplier applied on top of the power-iteration estimate of `‖FᵀF‖`.
pub const LIPSCHITZ_SAFETY: f64 = 1.01;
pub const LIPSCHITZ_ITERS: usize = 100;
pub const LIPSCHITZ_TOL: f64 = 1e-6;
/// Column cap for [`build_dense_oracle`].
pub const ORACLE_MAX_COLUMNS: usize = 4096;

#[derive(Debug, Clone)]
pub struct CscProblem {
    pub signal: Tensor,
    pub dict: KernelBank,
    pub lambda: f64,
    pub lipschitz: f64,
    pub weights: Vec<f64>,
}

impl CscProblem {
    pub fn new(
        signal: Tensor,
        dict: KernelBank,
        lambda: f64,
        lipschitz: f64,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::Param(format!("lambda must be positive, got {lambda}")));
        }
        if !(lipschitz > 0.0) {
            return Err(Error::Param(format!(
                "Lipschitz constant must be positive, got {lipschitz}"
            )));
        }
        if dict.in_channels() != signal.channels() {
            return shape_err(format!(
                "dictionary spans {} channels, signal has {}",
                dict.in_channels(),
                signal.channels()
            ));
        }
        if weights.len() != dict.out_channels() {
            return shape_err(format!(
                "{} weights for {} atoms",
                weights.len(),
                dict.out_channels()
            ));
        }
        check_weights(&weights)?;
        Ok(Self {
            signal,
            dict,
            lambda,
            lipschitz,
            weights,
        })
    }

    /// Unweighted problem with `L` from power iteration times [`LIPSCHITZ_SAFETY`].
    pub fn with_estimated_lipschitz(signal: Tensor, dict: KernelBank, lambda: f64) -> Result<Self> {
        let est = estimate_lipschitz(
            &dict,
            signal.height(),
            signal.width(),
            LIPSCHITZ_ITERS,
            LIPSCHITZ_TOL,
        )?;
        let c = dict.out_channels();
        Self::new(signal, dict, lambda, est.value * LIPSCHITZ_SAFETY, vec![1.0; c])
    }

    pub fn atoms(&self) -> usize {
        self.dict.out_channels()
    }

    pub fn zero_code(&self) -> Tensor {
        Tensor::zeros(self.atoms(), self.signal.height(), self.signal.width())
    }

    fn check_code(&self, z: &Tensor) -> Result<()> {
        if z.shape() != (self.atoms(), self.signal.height(), self.signal.width()) {
            return shape_err(format!(
                "code shape {:?} does not match problem ({}, {}, {})",
                z.shape(),
                self.atoms(),
                self.signal.height(),
                self.signal.width()
            ));
        }
        Ok(())
    }

    /// `F z`
    pub fn synthesize(&self, z: &Tensor) -> Result<Tensor> {
        conv2d_adjoint(z, &self.dict)
    }

    /// `Fᵀ r`
    pub fn analyze(&self, r: &Tensor) -> Result<Tensor> {
        conv2d(r, &self.dict)
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    match w.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
        Some(v) => Err(Error::Param(format!("weight {v} outside (0, 1]"))),
        None => Ok(()),
    }
}

fn data_term(z: &Tensor, prob: &CscProblem) -> Result<f64> {
    prob.check_code(z)?;
    let resid = prob.signal.sub(&prob.synthesize(z)?)?;
    Ok(0.5 * resid.norm_sq())
}

/// `½‖r − Σ f_i ⊛ z_i‖² + λ Σ ‖z_i‖₁`
pub fn objective(z: &Tensor, prob: &CscProblem) -> Result<f64> {
    Ok(data_term(z, prob)? + prob.lambda * z.norm_l1())
}

/// As [`objective`] with channel `i`'s ℓ1 norm scaled by `w_i`.
pub fn weighted_objective(z: &Tensor, prob: &CscProblem) -> Result<f64> {
    let penalty: f64 = prob
        .weights
        .iter()
        .enumerate()
        .map(|(i, w)| w * z.channel(i).iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    Ok(data_term(z, prob)? + prob.lambda * penalty)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub iterations: usize,
    /// False when `iters` ran out before the relative change fell below `tol`.
    pub converged: bool,
}

/// Largest eigenvalue of `FᵀF` on `h × w` codes by power iteration.
pub fn estimate_lipschitz(
    dict: &KernelBank,
    h: usize,
    w: usize,
    iters: usize,
    tol: f64,
) -> Result<LipschitzEstimate> {
    if iters == 0 {
        return Err(Error::Param("power iteration needs at least one step".into()));
    }
    let c = dict.out_channels();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut v = Tensor::from_vec(c, h, w, data)?;
    let n = v.norm_sq().sqrt();
    v = v.scale(1.0 / n);

    let mut value = 0.0;
    for it in 1..=iters {
        let u = conv2d(&conv2d_adjoint(&v, dict)?, dict)?;
        // Rayleigh quotient; v has unit norm.
        let next = v.dot(&u)?;
        let norm = u.norm_sq().sqrt();
        if norm == 0.0 {
            return Ok(LipschitzEstimate {
                value: 0.0,
                iterations: it,
                converged: true,
            });
        }
        v = u.scale(1.0 / norm);
        let change = (next - value).abs() / next.abs().max(f64::MIN_POSITIVE);
        value = next;
        if change < tol {
            return Ok(LipschitzEstimate {
                value,
                iterations: it,
                converged: true,
            });
        }
    }
    log::warn!("power iteration did not reach tol {tol} in {iters} steps");
    Ok(LipschitzEstimate {
        value,
        iterations: iters,
        converged: false,
    })
}

/// One reweighted ISTA step: `Γ_{wλ/L}(z + (1/L) Fᵀ(r − F z))`.
pub fn ista_step(z: &Tensor, prob: &CscProblem) -> Result<Tensor> {
    prob.check_code(z)?;
    let resid = prob.signal.sub(&prob.synthesize(z)?)?;
    let mut v = prob.analyze(&resid)?;
    let step = 1.0 / prob.lipschitz;
    for (a, b) in v.data_mut().iter_mut().zip(z.data()) {
        *a = b + step * *a;
    }
    let base = prob.lambda / prob.lipschitz;
    for (c, w) in prob.weights.iter().enumerate() {
        let t = w * base;
        v.channel_mut(c).iter_mut().for_each(|x| *x = soft(*x, t));
    }
    Ok(v)
}

/// `w ⊙ Γ_θ(w̃ ⊙ v)` with `w̃ = 1 / w`, which equals `Γ_{wθ}(v)`.
pub fn factored_threshold(v: &Tensor, w: &[f64], theta: &[f64]) -> Result<Tensor> {
    if w.len() != v.channels() || theta.len() != v.channels() {
        return shape_err("weight/threshold length differs from channel count");
    }
    check_weights(w)?;
    if let Some(t) = theta.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::Param(format!("negative threshold {t}")));
    }
    let mut out = v.clone();
    for c in 0..v.channels() {
        let (wc, inv, t) = (w[c], 1.0 / w[c], theta[c]);
        out.channel_mut(c)
            .iter_mut()
            .for_each(|x| *x = wc * soft(inv * *x, t));
    }
    Ok(out)
}

/// Runs `iterations` ISTA steps from `z = 0`.
pub fn run_csc(prob: &CscProblem, iterations: usize) -> Result<Tensor> {
    run_csc_with(prob, iterations, |_, _| {})
}

/// [`run_csc`] calling `observe(t, z_t)` after every step.
pub fn run_csc_with(
    prob: &CscProblem,
    iterations: usize,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let mut z = prob.zero_code();
    for t in 1..=iterations {
        z = ista_step(&z, prob)?;
        observe(t, &z);
    }
    Ok(z)
}

/// Explicit synthesis matrix `F` for small instances.
#[derive(Debug, Clone)]
pub struct DenseOracle {
    rows: usize,
    cols: usize,
    /// Row-major `rows × cols`.
    matrix: Vec<f64>,
    pub code_shape: (usize, usize, usize),
    pub signal_shape: (usize, usize, usize),
}

impl DenseOracle {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    #[inline]
    pub fn entry(&self, r: usize, c: usize) -> f64 {
        self.matrix[r * self.cols + c]
    }

    /// `M · z`
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.cols);
        self.matrix
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Mᵀ · r`
    pub fn apply_transpose(&self, r: &[f64]) -> Vec<f64> {
        assert_eq!(r.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &rv) in self.matrix.chunks_exact(self.cols).zip(r) {
            for (o, m) in out.iter_mut().zip(row) {
                *o += m * rv;
            }
        }
        out
    }
}

/// Materializes `F` column by column from the filter taps: column `(i, y, x)`
/// holds the impulse response of atom `i` placed at `(y, x)`.
pub fn build_dense_oracle(dict: &KernelBank, h: usize, w: usize) -> Result<DenseOracle> {
    build_dense_oracle_capped(dict, h, w, ORACLE_MAX_COLUMNS)
}

pub fn build_dense_oracle_capped(
    dict: &KernelBank,
    h: usize,
    w: usize,
    max_columns: usize,
) -> Result<DenseOracle> {
    let c = dict.out_channels();
    let p = dict.in_channels();
    let cols = c * h * w;
    if cols > max_columns {
        return Err(Error::Size(format!(
            "dense oracle needs {cols} columns, cap is {max_columns}"
        )));
    }
    let rows = p * h * w;
    let s = dict.size();
    let r = (s / 2) as isize;
    let mut matrix = vec![0.0; rows * cols];
    for i in 0..c {
        for y in 0..h {
            for x in 0..w {
                let col = (i * h + y) * w + x;
                for ch in 0..p {
                    for a in 0..s {
                        for b in 0..s {
                            let ty = y as isize + a as isize - r;
                            let tx = x as isize + b as isize - r;
                            if ty < 0 || tx < 0 || ty >= h as isize || tx >= w as isize {
                                continue;
                            }
                            let row = (ch * h + ty as usize) * w + tx as usize;
                            matrix[row * cols + col] += dict.at(i, ch, a, b);
                        }
                    }
                }
            }
        }
    }
    Ok(DenseOracle {
        rows,
        cols,
        matrix,
        code_shape: (c, h, w),
        signal_shape: (p, h, w),
    })
}
