use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    act_forward, bank_param, check_iterations, check_rgb, he_bank, head_bank, init_lwb, matrix_param,
    mean_rde, relu_t, single::split_output, ActTrace, DerainResult, NamedParam, Toggles,
    THETA_INIT,
};
use crate::density::{hidden_width, LwbParams, WeightVector};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{conv2d, conv2d_adjoint, KernelBank, Tensor};

pub const SCALES: usize = 3;

/// Hyperparameters of the three-dictionary network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsHyper {
    pub p: usize,
    pub c: usize,
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub rho: usize,
}

impl MsHyper {
    /// Full-size configuration.
    pub fn full_size() -> Self {
        Self {
            p: 48,
            c: 96,
            s1: 3,
            s2: 5,
            s3: 7,
            t: 25,
            rho: 16,
        }
    }

    pub fn desk() -> Self {
        Self {
            p: 6,
            c: 12,
            s1: 3,
            s2: 5,
            s3: 7,
            t: 6,
            rho: 4,
        }
    }

    pub fn sizes(&self) -> [usize; SCALES] {
        [self.s1, self.s2, self.s3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.c == 0 {
            return shape_err("p and c must be positive");
        }
        let s = self.sizes();
        if s.iter().any(|k| k % 2 == 0) {
            return Err(Error::Param(format!("scale kernel sizes {s:?} must be odd")));
        }
        if !(s[0] < s[1] && s[1] < s[2]) {
            return Err(Error::Param(format!(
                "scale kernel sizes {s:?} must be strictly increasing"
            )));
        }
        check_iterations(self.t)?;
        hidden_width(self.c, self.rho)?;
        Ok(())
    }
}

/// Learnable state of the multiscale network. Extractor and output head use
/// the smallest kernel size.
#[derive(Debug, Clone, PartialEq)]
pub struct MsModelParams {
    pub hyper: MsHyper,
    pub toggles: Toggles,
    pub e1: KernelBank,
    pub e2: KernelBank,
    /// Per scale, `c × p × s_j × s_j`.
    pub g: Vec<KernelBank>,
    /// Per scale, `p × c × s_j × s_j`.
    pub s: Vec<KernelBank>,
    pub e4: KernelBank,
    pub lwb_w: Vec<LwbParams>,
    pub lwb_wtilde: Vec<LwbParams>,
    /// `theta[j][t]`: threshold of scale `j` at iteration `t`.
    pub theta: Vec<Vec<Vec<f64>>>,
}

/// Power-iteration estimate of `||z -> sum_j S_j z_j||^2` on a 32x32 grid,
/// with a 5% margin for larger images.
fn synthesis_norm_sq<R: Rng>(s: &[KernelBank], rng: &mut R) -> Result<f64> {
    let n = 32;
    let mut z: Vec<Tensor> = s
        .iter()
        .map(|k| {
            let c = k.in_channels();
            Tensor::from_vec(c, n, n, (0..c * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        })
        .collect::<Result<_>>()?;
    let mut value = 0.0;
    for _ in 0..50 {
        let norm = z.iter().map(|t| t.norm_sq()).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let mut y = Tensor::zeros(s[0].out_channels(), n, n);
        for (zj, k) in z.iter().zip(s) {
            y.axpy(1.0 / norm, &conv2d(zj, k)?)?;
        }
        z = s.iter().map(|k| conv2d_adjoint(&y, k)).collect::<Result<_>>()?;
        value = z.iter().map(|t| t.norm_sq()).sum::<f64>().sqrt();
    }
    Ok(value.max(f64::MIN_POSITIVE) * 1.05)
}

impl MsModelParams {
    pub fn init<R: Rng>(hyper: MsHyper, toggles: Toggles, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let MsHyper { p, c, s1, t, rho, .. } = hyper;
        let e1 = he_bank(rng, p, 3, s1);
        let e2 = he_bank(rng, p, p, s1);
        let s: Vec<KernelBank> = hyper.sizes().into_iter().map(|size| he_bank(rng, p, c, size)).collect();
        // Unrolled-ISTA start: G_j = S_j^T / L makes every iteration a
        // proximal gradient step on the stacked dictionary. He-initialized
        // G_j made the recurrence grow about 3.5x per iteration.
        let step = 1.0 / synthesis_norm_sq(&s, rng)?;
        let g = s.iter().map(|k| k.adjoint().scale(step)).collect();
        let e4 = head_bank(rng, p, s1);
        let mut lwb_w = Vec::new();
        let mut lwb_wtilde = Vec::new();
        for _ in 0..SCALES {
            lwb_w.push(init_lwb(rng, c, rho)?);
            lwb_wtilde.push(init_lwb(rng, c, rho)?);
        }
        Ok(Self {
            hyper,
            toggles,
            e1,
            e2,
            g,
            s,
            e4,
            lwb_w,
            lwb_wtilde,
            theta: vec![vec![vec![THETA_INIT; c]; t]; SCALES],
        })
    }

    pub fn zeros(hyper: MsHyper, toggles: Toggles) -> Result<Self> {
        hyper.validate()?;
        let MsHyper { p, c, s1, t, rho, .. } = hyper;
        let mut g = Vec::new();
        let mut s = Vec::new();
        for size in hyper.sizes() {
            g.push(KernelBank::zeros(c, p, size)?);
            s.push(KernelBank::zeros(p, c, size)?);
        }
        Ok(Self {
            hyper,
            toggles,
            e1: KernelBank::zeros(p, 3, s1)?,
            e2: KernelBank::zeros(p, p, s1)?,
            g,
            s,
            e4: KernelBank::zeros(3, p, s1)?,
            lwb_w: (0..SCALES)
                .map(|_| LwbParams::zeros(c, rho))
                .collect::<Result<_>>()?,
            lwb_wtilde: (0..SCALES)
                .map(|_| LwbParams::zeros(c, rho))
                .collect::<Result<_>>()?,
            theta: vec![vec![vec![0.0; c]; t]; SCALES],
        })
    }

    /// Threshold of scale `j` at iteration `t`; iterations past the trained
    /// count reuse the last one.
    pub fn theta_at(&self, j: usize, t: usize) -> &[f64] {
        let per = &self.theta[j];
        &per[t.min(per.len() - 1)]
    }

    pub fn params(&self) -> Vec<NamedParam<'_>> {
        let mut out = vec![bank_param("e1", &self.e1), bank_param("e2", &self.e2)];
        for (j, k) in self.g.iter().enumerate() {
            out.push(bank_param(format!("g.{}", j + 1), k));
        }
        for (j, k) in self.s.iter().enumerate() {
            out.push(bank_param(format!("s.{}", j + 1), k));
        }
        out.push(bank_param("e4", &self.e4));
        for (prefix, blocks) in [("lwb_w", &self.lwb_w), ("lwb_wtilde", &self.lwb_wtilde)] {
            for (j, b) in blocks.iter().enumerate() {
                out.push(matrix_param(format!("{prefix}.{}.fc1", j + 1), &b.fc1));
                out.push(matrix_param(format!("{prefix}.{}.fc2", j + 1), &b.fc2));
            }
        }
        for (j, per) in self.theta.iter().enumerate() {
            for (t, th) in per.iter().enumerate() {
                out.push(NamedParam {
                    name: format!("theta.{}.{t}", j + 1),
                    shape: vec![th.len()],
                    data: th,
                });
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("e1".into(), self.e1.data_mut()),
            ("e2".into(), self.e2.data_mut()),
        ];
        for (j, k) in self.g.iter_mut().enumerate() {
            out.push((format!("g.{}", j + 1), k.data_mut()));
        }
        for (j, k) in self.s.iter_mut().enumerate() {
            out.push((format!("s.{}", j + 1), k.data_mut()));
        }
        out.push(("e4".into(), self.e4.data_mut()));
        for (prefix, blocks) in [("lwb_w", &mut self.lwb_w), ("lwb_wtilde", &mut self.lwb_wtilde)] {
            for (j, b) in blocks.iter_mut().enumerate() {
                out.push((format!("{prefix}.{}.fc1", j + 1), &mut b.fc1.data[..]));
                out.push((format!("{prefix}.{}.fc2", j + 1), &mut b.fc2.data[..]));
            }
        }
        for (j, per) in self.theta.iter_mut().enumerate() {
            for (t, th) in per.iter_mut().enumerate() {
                out.push((format!("theta.{}.{t}", j + 1), &mut th[..]));
            }
        }
        out
    }

    fn check_codes(&self, z: &[Tensor]) -> Result<()> {
        if z.len() != SCALES || z.iter().any(|t| t.channels() != self.hyper.c) {
            return shape_err(format!(
                "expected {SCALES} codes with {} channels",
                self.hyper.c
            ));
        }
        Ok(())
    }
}

fn extract(y: &Tensor, m: &MsModelParams) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    check_rgb(y)?;
    let a1 = conv2d(y, &m.e1)?;
    let h1 = relu_t(&a1);
    let a2 = conv2d(&h1, &m.e2)?;
    let r_eps = relu_t(&a2);
    Ok((a1, h1, a2, r_eps))
}

/// `Σ_m S_m ⊗ z_m`
fn synthesis(z: &[Tensor], m: &MsModelParams, h: usize, w: usize) -> Result<Tensor> {
    let mut acc = Tensor::zeros(m.hyper.p, h, w);
    for (zj, sj) in z.iter().zip(&m.s) {
        if zj.data().iter().any(|v| *v != 0.0) {
            acc.add_assign(&conv2d(zj, sj)?)?;
        }
    }
    Ok(acc)
}

pub(crate) struct MsIterTrace {
    pub z_in: Vec<Tensor>,
    /// Pre-activation: `[skip]·r_ε − Σ S z`. Otherwise `Σ S z`.
    pub mix: Tensor,
    pub acts: Vec<ActTrace>,
}

fn ms_step(
    z: &[Tensor],
    r_eps: &Tensor,
    gr: &[Tensor],
    m: &MsModelParams,
    t: usize,
) -> Result<(Vec<Tensor>, MsIterTrace)> {
    let (h, w) = (r_eps.height(), r_eps.width());
    let skip = m.toggles.lrl || t == 0;
    let sigma = synthesis(z, m, h, w)?;
    let mut next = Vec::with_capacity(SCALES);
    let mut acts = Vec::with_capacity(SCALES);
    let mix = if m.toggles.pa {
        let rho = if skip {
            r_eps.sub(&sigma)?
        } else {
            sigma.scale(-1.0)
        };
        for j in 0..SCALES {
            let mut v = conv2d(&rho, &m.g[j])?;
            v.add_assign(&z[j])?;
            let (zj, tr) = act_forward(
                v,
                &m.lwb_wtilde[j],
                &m.lwb_w[j],
                m.theta_at(j, t),
                m.toggles.rw,
            )?;
            next.push(zj);
            acts.push(tr);
        }
        rho
    } else {
        for j in 0..SCALES {
            let mut u = z[j].clone();
            u.axpy(-1.0, &conv2d(&sigma, &m.g[j])?)?;
            let (mut zj, tr) = act_forward(
                u,
                &m.lwb_wtilde[j],
                &m.lwb_w[j],
                m.theta_at(j, t),
                m.toggles.rw,
            )?;
            if skip {
                zj.add_assign(&gr[j])?;
            }
            next.push(zj);
            acts.push(tr);
        }
        sigma
    };
    Ok((
        next,
        MsIterTrace {
            z_in: z.to_vec(),
            mix,
            acts,
        },
    ))
}

fn skip_features(r_eps: &Tensor, m: &MsModelParams) -> Result<Vec<Tensor>> {
    if m.toggles.pa {
        Ok(Vec::new())
    } else {
        m.g.iter().map(|g| conv2d(r_eps, g)).collect()
    }
}

/// One joint iteration over all scales from arbitrary codes.
pub fn mlwista_step(
    z: &[Tensor],
    r_eps: &Tensor,
    m: &MsModelParams,
    t: usize,
) -> Result<(Vec<Tensor>, Vec<WeightVector>)> {
    m.check_codes(z)?;
    let gr = skip_features(r_eps, m)?;
    let (next, tr) = ms_step(z, r_eps, &gr, m, t)?;
    Ok((next, tr.acts.iter().filter_map(|a| a.wtilde()).collect()))
}

pub(crate) struct MsRun {
    pub z: Vec<Tensor>,
    pub wtilde: Vec<WeightVector>,
    pub iters: Vec<MsIterTrace>,
}

fn run_mlwista(r_eps: &Tensor, m: &MsModelParams, iterations: usize, record: bool) -> Result<MsRun> {
    if r_eps.channels() != m.hyper.p {
        return shape_err(format!(
            "rain features have {} channels, model expects {}",
            r_eps.channels(),
            m.hyper.p
        ));
    }
    check_iterations(iterations)?;
    let (h, w) = (r_eps.height(), r_eps.width());
    let gr = skip_features(r_eps, m)?;
    let mut z = vec![Tensor::zeros(m.hyper.c, h, w); SCALES];
    let mut iters = Vec::new();
    let mut wtilde = Vec::new();
    for t in 0..iterations {
        let (next, tr) = ms_step(&z, r_eps, &gr, m, t)?;
        if t + 1 == iterations {
            wtilde = tr.acts.iter().filter_map(|a| a.wtilde()).collect();
        }
        if record {
            iters.push(tr);
        }
        z = next;
    }
    Ok(MsRun { z, wtilde, iters })
}

/// Joint unfolded sparse coding over the three dictionaries from zero codes.
pub fn mlwista(r_eps: &Tensor, m: &MsModelParams) -> Result<(Vec<Tensor>, Vec<WeightVector>)> {
    let run = run_mlwista(r_eps, m, m.hyper.t, false)?;
    Ok((run.z, run.wtilde))
}

pub fn derain_multiscale(y: &Tensor, m: &MsModelParams) -> Result<DerainResult> {
    derain_ms_iters(y, m, m.hyper.t)
}

pub(crate) fn derain_ms_iters(y: &Tensor, m: &MsModelParams, iterations: usize) -> Result<DerainResult> {
    let (_, _, _, r_eps) = extract(y, m)?;
    let run = run_mlwista(&r_eps, m, iterations, false)?;
    let q = synthesis(&run.z, m, y.height(), y.width())?;
    let head = conv2d(&relu_t(&q), &m.e4)?;
    let (x, r) = split_output(y, head, m.toggles.grl)?;
    Ok(DerainResult {
        x,
        r,
        rde: mean_rde(&run.wtilde),
        wtilde: run.wtilde,
    })
}

pub(crate) struct MsTrace {
    pub y: Tensor,
    pub a1: Tensor,
    pub h1: Tensor,
    pub a2: Tensor,
    pub r_eps: Tensor,
    pub iters: Vec<MsIterTrace>,
    pub z: Vec<Tensor>,
    pub q: Tensor,
    pub hq: Tensor,
    pub head: Tensor,
}

impl MsTrace {
    pub fn prediction(&self, grl: bool) -> Result<Tensor> {
        if grl {
            self.y.sub(&self.head)
        } else {
            Ok(self.head.clone())
        }
    }
}

pub(crate) fn ms_forward_trace(y: &Tensor, m: &MsModelParams) -> Result<MsTrace> {
    let (a1, h1, a2, r_eps) = extract(y, m)?;
    let run = run_mlwista(&r_eps, m, m.hyper.t, true)?;
    let q = synthesis(&run.z, m, y.height(), y.width())?;
    let hq = relu_t(&q);
    let head = conv2d(&hq, &m.e4)?;
    Ok(MsTrace {
        y: y.clone(),
        a1,
        h1,
        a2,
        r_eps,
        iters: run.iters,
        z: run.z,
        q,
        hq,
        head,
    })
}
