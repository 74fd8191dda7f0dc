//! Unfolded reweighted-ISTA deraining networks.
//!
//! Both architectures share the same skeleton: a two-layer extractor produces
//! a noisy rain feature map, a fixed number of weight-shared sparse coding
//! iterations denoise it, a reconstruction head maps the codes back to an RGB
//! rain layer and (with the global residual on) the rain is subtracted from
//! the input.

mod multi;
mod single;

pub use multi::{derain_multiscale, mlwista, mlwista_step, MsHyper, MsModelParams};
pub use single::{
    derain, extract_rain, lwista, lwista_step, reconstruct_rain, CodeHyper, ModelParams,
};

pub(crate) use multi::ms_forward_trace;
pub(crate) use single::forward_trace;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::density::{gate, GateTrace, LwbParams, Matrix, WeightVector};
use crate::error::Result;
use crate::tensor::{KernelBank, Tensor};

pub const MAX_ITERATIONS: usize = 64;

/// Ablation switches. All on is the full network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    /// Global residual: `x = y - r`. Off: the head predicts `x` directly.
    pub grl: bool,
    /// Local residual: re-inject the rain features every iteration. Off: only
    /// at the first iteration.
    pub lrl: bool,
    /// Pre-activation: the thresholding block runs on the sum before the next
    /// `S`. Off: it runs on the `S` output and the skip is added afterwards.
    pub pa: bool,
    /// Reweighting: learning weight blocks around the threshold. Off: plain
    /// `ReLU(v - θ)`.
    pub rw: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            grl: true,
            lrl: true,
            pa: true,
            rw: true,
        }
    }
}

impl Toggles {
    pub fn plain() -> Self {
        Self {
            rw: false,
            ..Self::default()
        }
    }
}

/// Output of a deraining pass.
#[derive(Debug, Clone)]
pub struct DerainResult {
    pub x: Tensor,
    pub r: Tensor,
    /// Final-iteration `w̃` of every scale; empty when reweighting is off.
    pub wtilde: Vec<WeightVector>,
    pub rde: Option<f64>,
}

/// A named view of one parameter tensor.
pub struct NamedParam<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Either architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Code(ModelParams),
    MultiScale(MsModelParams),
}

impl Model {
    pub fn arch_name(&self) -> &'static str {
        match self {
            Model::Code(_) => "code",
            Model::MultiScale(_) => "mcode",
        }
    }

    pub fn toggles(&self) -> Toggles {
        match self {
            Model::Code(m) => m.toggles,
            Model::MultiScale(m) => m.toggles,
        }
    }

    pub fn toggles_mut(&mut self) -> &mut Toggles {
        match self {
            Model::Code(m) => &mut m.toggles,
            Model::MultiScale(m) => &mut m.toggles,
        }
    }

    pub fn iterations(&self) -> usize {
        match self {
            Model::Code(m) => m.hyper.t,
            Model::MultiScale(m) => m.hyper.t,
        }
    }

    pub fn derain(&self, y: &Tensor) -> Result<DerainResult> {
        self.derain_with(y, self.iterations())
    }

    /// Runs with an iteration count other than the trained one.
    pub fn derain_with(&self, y: &Tensor, iterations: usize) -> Result<DerainResult> {
        match self {
            Model::Code(m) => single::derain_iters(y, m, iterations),
            Model::MultiScale(m) => multi::derain_ms_iters(y, m, iterations),
        }
    }

    pub fn params(&self) -> Vec<NamedParam<'_>> {
        match self {
            Model::Code(m) => m.params(),
            Model::MultiScale(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        match self {
            Model::Code(m) => m.params_mut(),
            Model::MultiScale(m) => m.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Same architecture with every parameter zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Model {
        let mut z = self.clone();
        for (_, d) in z.params_mut() {
            d.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Turns reweighting on for fine-tuning a plain model.
    pub fn enable_reweighting(&mut self) {
        match self {
            Model::Code(m) => m.enable_reweighting(),
            Model::MultiScale(m) => m.toggles.rw = true,
        }
    }
}

pub(crate) fn he_bank<R: Rng>(rng: &mut R, out: usize, inp: usize, size: usize) -> KernelBank {
    let std = (2.0 / (inp * size * size) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..out * inp * size * size)
        .map(|_| normal.sample(rng))
        .collect();
    KernelBank::new(out, inp, size, data).expect("consistent bank shape")
}

pub(crate) fn init_lwb<R: Rng>(rng: &mut R, channels: usize, reduction: usize) -> Result<LwbParams> {
    let mut p = LwbParams::zeros(channels, reduction)?;
    let b1 = 1.0 / (channels as f64).sqrt();
    let b2 = 1.0 / (p.hidden() as f64).sqrt();
    p.fc1.data.iter_mut().for_each(|v| *v = rng.gen_range(-b1..b1));
    p.fc2.data.iter_mut().for_each(|v| *v = rng.gen_range(-b2..b2));
    Ok(p)
}

pub(crate) const THETA_INIT: f64 = 0.01;

/// The output head starts at a tenth of its He scale so the first rain
/// estimate is small and the recurrence has room to learn.
pub(crate) const HEAD_INIT_SCALE: f64 = 0.1;

pub(crate) fn head_bank<R: Rng>(rng: &mut R, inp: usize, size: usize) -> KernelBank {
    he_bank(rng, 3, inp, size).scale(HEAD_INIT_SCALE)
}

/// Values kept by the thresholding block `LWB_w(ReLU(LWB_w̃(v) − θ))`.
#[derive(Debug, Clone)]
pub(crate) struct ActTrace {
    pub v: Tensor,
    pub gate_wt: Option<GateTrace>,
    /// Input to the ReLU before subtracting θ.
    pub pre: Tensor,
    /// `ReLU(pre − θ)`
    pub b: Tensor,
    pub gate_w: Option<GateTrace>,
}

pub(crate) fn act_forward(
    v: Tensor,
    lwb_wt: &LwbParams,
    lwb_w: &LwbParams,
    theta: &[f64],
    rw: bool,
) -> Result<(Tensor, ActTrace)> {
    let (pre, gate_wt) = if rw {
        let g = gate(&v, lwb_wt)?;
        (v.scale_channels(&g.weights)?, Some(g))
    } else {
        (v.clone(), None)
    };
    let mut b = pre.clone();
    for (c, &t) in theta.iter().enumerate() {
        b.channel_mut(c)
            .iter_mut()
            .for_each(|x| *x = if *x - t > 0.0 { *x - t } else { 0.0 });
    }
    let (out, gate_w) = if rw {
        let g = gate(&b, lwb_w)?;
        (b.scale_channels(&g.weights)?, Some(g))
    } else {
        (b.clone(), None)
    };
    Ok((
        out,
        ActTrace {
            v,
            gate_wt,
            pre,
            b,
            gate_w,
        },
    ))
}

impl ActTrace {
    pub fn wtilde(&self) -> Option<WeightVector> {
        self.gate_wt.as_ref().map(|g| WeightVector(g.weights.clone()))
    }
}

pub(crate) fn relu_t(x: &Tensor) -> Tensor {
    x.map(crate::tensor::relu)
}

pub(crate) fn bank_param(name: impl Into<String>, k: &KernelBank) -> NamedParam<'_> {
    NamedParam {
        name: name.into(),
        shape: k.shape().to_vec(),
        data: k.data(),
    }
}

pub(crate) fn matrix_param(name: impl Into<String>, m: &Matrix) -> NamedParam<'_> {
    NamedParam {
        name: name.into(),
        shape: vec![m.rows, m.cols],
        data: &m.data,
    }
}

pub(crate) fn mean_rde(w: &[WeightVector]) -> Option<f64> {
    if w.is_empty() {
        None
    } else {
        Some(w.iter().map(crate::density::rde).sum::<f64>() / w.len() as f64)
    }
}

pub(crate) fn check_rgb(y: &Tensor) -> Result<()> {
    if y.channels() != 3 {
        return crate::error::shape_err(format!("expected RGB input, got {} channels", y.channels()));
    }
    Ok(())
}

pub(crate) fn check_iterations(t: usize) -> Result<()> {
    if t == 0 || t > MAX_ITERATIONS {
        return Err(crate::Error::Param(format!(
            "iteration count {t} outside 1..={MAX_ITERATIONS}"
        )));
    }
    Ok(())
}
