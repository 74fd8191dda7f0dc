//! Learning weight block (channel attention gate) and the rain density
//! estimate derived from its weights.

use crate::error::{shape_err, Result};
use crate::tensor::{global_avg_pool, relu, sigmoid, Tensor};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!("matrix data {} for {rows}x{cols}", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &yv) in self.data.chunks_exact(self.cols).zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yv;
            }
        }
        out
    }

    /// `self += u vᵀ`
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        for (row, &uv) in self.data.chunks_exact_mut(self.cols).zip(u) {
            for (o, b) in row.iter_mut().zip(v) {
                *o += uv * b;
            }
        }
    }
}

/// Parameters of one learning weight block. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct LwbParams {
    /// `(c / ρ) × c`
    pub fc1: Matrix,
    /// `c × (c / ρ)`
    pub fc2: Matrix,
}

impl LwbParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(Self {
            fc1: Matrix::zeros(hidden, channels),
            fc2: Matrix::zeros(channels, hidden),
        })
    }

    pub fn new(fc1: Matrix, fc2: Matrix) -> Result<Self> {
        if fc1.rows != fc2.cols || fc1.cols != fc2.rows {
            return shape_err(format!(
                "fc1 {}x{} incompatible with fc2 {}x{}",
                fc1.rows, fc1.cols, fc2.rows, fc2.cols
            ));
        }
        Ok(Self { fc1, fc2 })
    }

    pub fn channels(&self) -> usize {
        self.fc1.cols
    }

    pub fn hidden(&self) -> usize {
        self.fc1.rows
    }
}

pub fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 || channels < reduction {
        return shape_err(format!(
            "reduction {reduction} must divide channel count {channels}"
        ));
    }
    Ok(channels / reduction)
}

/// Per-channel gate values in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Intermediate values of a gate evaluation, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub pooled: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub weights: Vec<f64>,
}

const W_MIN: f64 = f64::MIN_POSITIVE;
const W_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// `δ(Fc2(ReLU(Fc1(AvgPool(α)))))`, kept strictly inside `(0, 1)`.
pub fn gate(alpha: &Tensor, p: &LwbParams) -> Result<GateTrace> {
    if alpha.channels() != p.channels() {
        return shape_err(format!(
            "gate over {} channels fed {} channels",
            p.channels(),
            alpha.channels()
        ));
    }
    let pooled = global_avg_pool(alpha);
    let hidden_pre = p.fc1.matvec(&pooled);
    let hidden: Vec<f64> = hidden_pre.iter().map(|&v| relu(v)).collect();
    let weights = p
        .fc2
        .matvec(&hidden)
        .into_iter()
        .map(|g| sigmoid(g).clamp(W_MIN, W_MAX))
        .collect();
    Ok(GateTrace {
        pooled,
        hidden_pre,
        weights,
    })
}

/// `LWB(α) = α ⊙ weight`; returns the scaled tensor and the weight vector.
pub fn lwb_forward(alpha: &Tensor, p: &LwbParams) -> Result<(Tensor, WeightVector)> {
    let trace = gate(alpha, p)?;
    let out = alpha.scale_channels(&trace.weights)?;
    Ok((out, WeightVector(trace.weights)))
}

/// Gradient of a scalar loss through [`lwb_forward`].
///
/// Accumulates into `grad` and returns the gradient with respect to `α`.
pub fn lwb_backward(
    alpha: &Tensor,
    trace: &GateTrace,
    d_out: &Tensor,
    p: &LwbParams,
    grad: &mut LwbParams,
) -> Result<Tensor> {
    alpha.check_same_shape(d_out, "lwb backward")?;
    let c = alpha.channels();
    let n = alpha.plane() as f64;
    let mut d_alpha = d_out.scale_channels(&trace.weights)?;

    let d_g: Vec<f64> = (0..c)
        .map(|ch| {
            let dw: f64 = d_out
                .channel(ch)
                .iter()
                .zip(alpha.channel(ch))
                .map(|(a, b)| a * b)
                .sum();
            let w = trace.weights[ch];
            dw * w * (1.0 - w)
        })
        .collect();
    let hidden: Vec<f64> = trace.hidden_pre.iter().map(|&v| relu(v)).collect();
    grad.fc2.add_outer(&d_g, &hidden);
    let d_hidden: Vec<f64> = p
        .fc2
        .matvec_t(&d_g)
        .into_iter()
        .zip(&trace.hidden_pre)
        .map(|(d, &h)| if h > 0.0 { d } else { 0.0 })
        .collect();
    grad.fc1.add_outer(&d_hidden, &trace.pooled);
    let d_pooled = p.fc1.matvec_t(&d_hidden);
    for (ch, dp) in d_pooled.iter().enumerate() {
        let add = dp / n;
        d_alpha.channel_mut(ch).iter_mut().for_each(|v| *v += add);
    }
    Ok(d_alpha)
}

/// Rain density estimate: the channel mean of `w̃`.
pub fn rde(weights: &WeightVector) -> f64 {
    let v = weights.values();
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}
