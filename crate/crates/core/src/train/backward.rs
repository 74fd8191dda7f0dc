//! Hand-written reverse pass over the fixed forward graph.

use crate::density::{lwb_backward, LwbParams};
use crate::error::{shape_err, Error, Result};
use crate::net::{
    forward_trace, ms_forward_trace, ActTrace, Model, ModelParams, MsModelParams, NamedParam,
};
use crate::tensor::{conv2d_adjoint, conv2d_kernel_grad_acc, KernelBank, Tensor};

/// One gradient tensor per model parameter, same names and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(Model);

impl GradientSet {
    pub fn zeros_for(m: &Model) -> Self {
        GradientSet(m.zeros_like())
    }

    pub fn entries(&self) -> Vec<NamedParam<'_>> {
        self.0.params()
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.0.params_mut()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.params().into_iter().find(|p| p.name == name).map(|p| p.data)
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        let src = other.entries();
        let mut dst = self.entries_mut();
        if src.len() != dst.len() {
            return shape_err("gradient sets of different architectures");
        }
        for ((_, d), s) in dst.iter_mut().zip(&src) {
            if d.len() != s.data.len() {
                return shape_err(format!("gradient {} has mismatched length", s.name));
            }
            d.iter_mut().zip(s.data).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, d) in self.entries_mut() {
            d.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.entries()
            .into_iter()
            .find(|p| p.data.iter().any(|v| !v.is_finite()))
            .map(|p| p.name)
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries()
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|v| v * v)
            .sum()
    }
}

/// Per-iteration contributions to the gradient of the shared `S` banks,
/// indexed `[iteration][scale]`.
#[derive(Debug, Clone, Default)]
pub struct STrace {
    pub per_iteration: Vec<Vec<KernelBank>>,
    /// Multiscale only: the reconstruction also reads `S`.
    pub reconstruction: Vec<KernelBank>,
}

/// Mean absolute error over every element.
pub fn loss_l1(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    pred.check_same_shape(gt, "loss")?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn loss_grad(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    let loss = loss_l1(pred, gt)?;
    let n = pred.len() as f64;
    let d = pred.zip_map(gt, |a, b| sign(a - b) / n)?;
    Ok((loss, d))
}

fn relu_mask(d: &Tensor, pre: &Tensor) -> Result<Tensor> {
    d.zip_map(pre, |g, x| if x > 0.0 { g } else { 0.0 })
}

fn finite(t: &Tensor, name: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            tensor: name.to_string(),
        })
    }
}

fn is_zero(t: &Tensor) -> bool {
    t.data().iter().all(|v| *v == 0.0)
}

/// Reverse of `LWB_w(ReLU(LWB_w̃(v) − θ))`; returns the gradient for `v`.
#[allow(clippy::too_many_arguments)]
fn act_backward(
    d_out: &Tensor,
    tr: &ActTrace,
    theta: &[f64],
    lwb_wt: &LwbParams,
    lwb_w: &LwbParams,
    g_wt: &mut LwbParams,
    g_w: &mut LwbParams,
    g_theta: &mut [f64],
) -> Result<Tensor> {
    let d_b = match &tr.gate_w {
        Some(gate) => lwb_backward(&tr.b, gate, d_out, lwb_w, g_w)?,
        None => d_out.clone(),
    };
    let mut d_pre = d_b;
    for (ch, &th) in theta.iter().enumerate() {
        let mut acc = 0.0;
        for (d, &x) in d_pre.channel_mut(ch).iter_mut().zip(tr.pre.channel(ch)) {
            if x - th > 0.0 {
                acc += *d;
            } else {
                *d = 0.0;
            }
        }
        g_theta[ch] -= acc;
    }
    match &tr.gate_wt {
        Some(gate) => lwb_backward(&tr.v, gate, &d_pre, lwb_wt, g_wt),
        None => Ok(d_pre),
    }
}

fn extractor_backward(
    d_reps: &Tensor,
    y: &Tensor,
    a1: &Tensor,
    h1: &Tensor,
    a2: &Tensor,
    e2: &KernelBank,
    g_e1: &mut KernelBank,
    g_e2: &mut KernelBank,
) -> Result<()> {
    let da2 = relu_mask(d_reps, a2)?;
    conv2d_kernel_grad_acc(h1, &da2, g_e2)?;
    let da1 = relu_mask(&conv2d_adjoint(&da2, e2)?, a1)?;
    conv2d_kernel_grad_acc(y, &da1, g_e1)
}

fn backward_code(
    m: &ModelParams,
    y: &Tensor,
    gt: &Tensor,
    g: &mut ModelParams,
    strace: Option<&mut STrace>,
) -> Result<f64> {
    finite(y, "input")?;
    let tr = forward_trace(y, m)?;
    finite(&tr.r_eps, "r_eps")?;
    finite(&tr.z, "z")?;
    finite(&tr.head, "head")?;
    let grl = m.toggles.grl;
    let pred = tr.prediction(grl)?;
    let (loss, d_pred) = loss_grad(&pred, gt)?;
    let d_head = if grl { d_pred.scale(-1.0) } else { d_pred };

    conv2d_kernel_grad_acc(&tr.hq, &d_head, &mut g.e4)?;
    let dq = relu_mask(&conv2d_adjoint(&d_head, &m.e4)?, &tr.q)?;
    conv2d_kernel_grad_acc(&tr.z, &dq, &mut g.e3)?;
    let mut dz = conv2d_adjoint(&dq, &m.e3)?;

    let mut dgr = Tensor::zeros_like(&tr.z);
    let mut per_iter: Vec<Vec<KernelBank>> = Vec::new();
    for (t, it) in tr.iters.iter().enumerate().rev() {
        let skip = m.toggles.lrl || t == 0;
        let dv = if m.toggles.pa {
            let dv = act_backward(
                &dz,
                &it.act,
                &m.theta,
                &m.lwb_wtilde,
                &m.lwb_w,
                &mut g.lwb_wtilde,
                &mut g.lwb_w,
                &mut g.theta,
            )?;
            if skip {
                dgr.add_assign(&dv)?;
            }
            dv
        } else {
            if skip {
                dgr.add_assign(&dz)?;
            }
            act_backward(
                &dz,
                &it.act,
                &m.theta,
                &m.lwb_wtilde,
                &m.lwb_w,
                &mut g.lwb_wtilde,
                &mut g.lwb_w,
                &mut g.theta,
            )?
        };
        if strace.is_some() {
            let mut contrib = KernelBank::zeros_like(&m.s);
            conv2d_kernel_grad_acc(&it.z_in, &dv, &mut contrib)?;
            add_bank(&mut g.s, &contrib);
            per_iter.push(vec![contrib]);
        } else if !is_zero(&it.z_in) {
            conv2d_kernel_grad_acc(&it.z_in, &dv, &mut g.s)?;
        }
        dz = if t > 0 {
            conv2d_adjoint(&dv, &m.s)?
        } else {
            Tensor::zeros_like(&dz)
        };
    }
    if let Some(st) = strace {
        per_iter.reverse();
        st.per_iteration = per_iter;
        st.reconstruction.clear();
    }

    conv2d_kernel_grad_acc(&tr.r_eps, &dgr, &mut g.g)?;
    let d_reps = conv2d_adjoint(&dgr, &m.g)?;
    extractor_backward(
        &d_reps, &tr.y, &tr.a1, &tr.h1, &tr.a2, &m.e2, &mut g.e1, &mut g.e2,
    )?;
    Ok(loss)
}

fn backward_ms(
    m: &MsModelParams,
    y: &Tensor,
    gt: &Tensor,
    g: &mut MsModelParams,
    mut strace: Option<&mut STrace>,
) -> Result<f64> {
    finite(y, "input")?;
    let tr = ms_forward_trace(y, m)?;
    finite(&tr.r_eps, "r_eps")?;
    for (j, z) in tr.z.iter().enumerate() {
        finite(z, &format!("z.{}", j + 1))?;
    }
    finite(&tr.head, "head")?;
    let grl = m.toggles.grl;
    let scales = m.s.len();
    let pred = tr.prediction(grl)?;
    let (loss, d_pred) = loss_grad(&pred, gt)?;
    let d_head = if grl { d_pred.scale(-1.0) } else { d_pred };

    conv2d_kernel_grad_acc(&tr.hq, &d_head, &mut g.e4)?;
    let dq = relu_mask(&conv2d_adjoint(&d_head, &m.e4)?, &tr.q)?;
    let mut recon = Vec::new();
    let mut dz = Vec::with_capacity(scales);
    for j in 0..scales {
        if strace.is_some() {
            let mut c = KernelBank::zeros_like(&m.s[j]);
            conv2d_kernel_grad_acc(&tr.z[j], &dq, &mut c)?;
            add_bank(&mut g.s[j], &c);
            recon.push(c);
        } else {
            conv2d_kernel_grad_acc(&tr.z[j], &dq, &mut g.s[j])?;
        }
        dz.push(conv2d_adjoint(&dq, &m.s[j])?);
    }

    let mut d_reps = Tensor::zeros_like(&tr.r_eps);
    let mut dgr: Vec<Tensor> = (0..scales).map(|_| Tensor::zeros_like(&tr.z[0])).collect();
    let mut per_iter: Vec<Vec<KernelBank>> = Vec::new();
    for (t, it) in tr.iters.iter().enumerate().rev() {
        let skip = m.toggles.lrl || t == 0;
        let mut contrib: Vec<KernelBank> = m.s.iter().map(KernelBank::zeros_like).collect();
        let mut dz_in = Vec::with_capacity(scales);
        // gradient for the shared mix term
        let mut d_mix = Tensor::zeros_like(&it.mix);
        for j in 0..scales {
            if !m.toggles.pa && skip {
                dgr[j].add_assign(&dz[j])?;
            }
            let th = t.min(m.theta[j].len() - 1);
            let du = act_backward(
                &dz[j],
                &it.acts[j],
                &m.theta[j][th],
                &m.lwb_wtilde[j],
                &m.lwb_w[j],
                &mut g.lwb_wtilde[j],
                &mut g.lwb_w[j],
                &mut g.theta[j][th],
            )?;
            if m.toggles.pa {
                // v_j = z_j + G_j ρ
                conv2d_kernel_grad_acc(&it.mix, &du, &mut g.g[j])?;
                d_mix.add_assign(&conv2d_adjoint(&du, &m.g[j])?)?;
            } else {
                // u_j = z_j − G_j σ
                let neg = du.scale(-1.0);
                conv2d_kernel_grad_acc(&it.mix, &neg, &mut g.g[j])?;
                d_mix.add_assign(&conv2d_adjoint(&neg, &m.g[j])?)?;
            }
            dz_in.push(du);
        }
        // ρ = [skip] r − Σ S z, σ = Σ S z
        let d_sz = if m.toggles.pa {
            if skip {
                d_reps.add_assign(&d_mix)?;
            }
            d_mix.scale(-1.0)
        } else {
            d_mix
        };
        if t > 0 {
            for j in 0..scales {
                conv2d_kernel_grad_acc(&it.z_in[j], &d_sz, &mut contrib[j])?;
                dz_in[j].add_assign(&conv2d_adjoint(&d_sz, &m.s[j])?)?;
            }
        }
        for j in 0..scales {
            add_bank(&mut g.s[j], &contrib[j]);
        }
        if strace.is_some() {
            per_iter.push(contrib);
        }
        dz = dz_in;
    }
    if let Some(st) = strace.as_deref_mut() {
        per_iter.reverse();
        st.per_iteration = per_iter;
        st.reconstruction = recon;
    }
    if !m.toggles.pa {
        for j in 0..scales {
            conv2d_kernel_grad_acc(&tr.r_eps, &dgr[j], &mut g.g[j])?;
            d_reps.add_assign(&conv2d_adjoint(&dgr[j], &m.g[j])?)?;
        }
    }
    extractor_backward(
        &d_reps, &tr.y, &tr.a1, &tr.h1, &tr.a2, &m.e2, &mut g.e1, &mut g.e2,
    )?;
    Ok(loss)
}

fn add_bank(dst: &mut KernelBank, src: &KernelBank) {
    dst.data_mut()
        .iter_mut()
        .zip(src.data())
        .for_each(|(a, b)| *a += b);
}

fn backward_into(
    m: &Model,
    y: &Tensor,
    gt: &Tensor,
    g: &mut GradientSet,
    strace: Option<&mut STrace>,
) -> Result<f64> {
    let loss = match (m, &mut g.0) {
        (Model::Code(m), Model::Code(g)) => backward_code(m, y, gt, g, strace)?,
        (Model::MultiScale(m), Model::MultiScale(g)) => backward_ms(m, y, gt, g, strace)?,
        _ => return shape_err("gradient buffer does not match the model architecture"),
    };
    if let Some(name) = g.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: format!("gradient of {name}"),
        });
    }
    Ok(loss)
}

/// Loss and its exact gradient with respect to every parameter.
pub fn backward(m: &Model, y: &Tensor, gt: &Tensor) -> Result<(f64, GradientSet)> {
    let mut g = GradientSet::zeros_for(m);
    let loss = backward_into(m, y, gt, &mut g, None)?;
    Ok((loss, g))
}

/// [`backward`] that also reports each iteration's contribution to the
/// shared `S` gradients.
pub fn backward_traced(m: &Model, y: &Tensor, gt: &Tensor) -> Result<(f64, GradientSet, STrace)> {
    let mut g = GradientSet::zeros_for(m);
    let mut st = STrace::default();
    let loss = backward_into(m, y, gt, &mut g, Some(&mut st))?;
    Ok((loss, g, st))
}

/// Loss of a forward pass without gradients.
pub fn forward_loss(m: &Model, y: &Tensor, gt: &Tensor) -> Result<f64> {
    let pred = match m {
        Model::Code(p) => forward_trace(y, p)?.prediction(p.toggles.grl)?,
        Model::MultiScale(p) => ms_forward_trace(y, p)?.prediction(p.toggles.grl)?,
    };
    loss_l1(&pred, gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{CodeHyper, MsHyper, Toggles};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn tiny_code(rng: &mut ChaCha8Rng, toggles: Toggles, t: usize) -> ModelParams {
        let h = CodeHyper {
            p: 2,
            c: 4,
            s: 3,
            t,
            rho: 2,
        };
        ModelParams::init(h, toggles, rng).unwrap()
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = image(&mut rng, 4, 5);
        assert_eq!(loss_l1(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((loss_l1(&b, &a).unwrap() - 0.1).abs() < 1e-12);
        let c = image(&mut rng, 4, 5);
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a.data()[i] - c.data()[i]).abs();
        }
        assert!((loss_l1(&a, &c).unwrap() - s / 60.0).abs() < 1e-12);
        assert!(loss_l1(&a, &image(&mut rng, 4, 4)).is_err());
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = tiny_code(&mut rng, Toggles::default(), 3);
        m.e4 = KernelBank::zeros_like(&m.e4);
        let y = image(&mut rng, 8, 8);
        let (loss, g) = backward(&Model::Code(m), &y, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.norm_sq(), 0.0);
    }

    #[test]
    fn inactive_second_iteration_adds_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = image(&mut rng, 8, 8);
        let gt = image(&mut rng, 8, 8);
        let mut one = tiny_code(&mut rng, Toggles::plain(), 1);
        one.toggles.lrl = false;
        let mut two = one.clone();
        two.hyper.t = 2;
        // the second iteration only sees S z¹, which a huge S-side scale-down
        // leaves below θ: its output and S contribution vanish.
        two.s = two.s.scale(1e-12);
        let (_, _, s1) = backward_traced(&Model::Code(one), &y, &gt).unwrap();
        let (_, _, s2) = backward_traced(&Model::Code(two), &y, &gt).unwrap();
        assert_eq!(s1.per_iteration.len(), 1);
        assert_eq!(s2.per_iteration.len(), 2);
        // zero start: the first iteration never reads S
        assert!(s1.per_iteration[0][0].data().iter().all(|v| *v == 0.0));
        assert!(s2.per_iteration[0][0].data().iter().all(|v| *v == 0.0));
        assert!(s2.per_iteration[1][0].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn s_gradient_is_sum_of_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = image(&mut rng, 8, 8);
        let gt = image(&mut rng, 8, 8);
        for pa in [true, false] {
            let toggles = Toggles {
                pa,
                ..Toggles::default()
            };
            let m = Model::Code(tiny_code(&mut rng, toggles, 4));
            let (_, g, st) = backward_traced(&m, &y, &gt).unwrap();
            let (_, g_plain) = backward(&m, &y, &gt).unwrap();
            let one = g_plain.get("s").unwrap();
            let mut sum = vec![0.0; one.len()];
            for it in &st.per_iteration {
                sum.iter_mut().zip(it[0].data()).for_each(|(a, b)| *a += b);
            }
            for (a, b) in one.iter().zip(&sum) {
                assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
            }
            assert_eq!(g.get("s").unwrap(), one);
        }

        let h = MsHyper {
            p: 2,
            c: 4,
            s1: 3,
            s2: 5,
            s3: 7,
            t: 3,
            rho: 2,
        };
        let m = Model::MultiScale(MsModelParams::init(h, Toggles::default(), &mut rng).unwrap());
        let (_, _, st) = backward_traced(&m, &y, &gt).unwrap();
        let (_, g) = backward(&m, &y, &gt).unwrap();
        for j in 0..3 {
            let one = g.get(&format!("s.{}", j + 1)).unwrap();
            let mut sum = st.reconstruction[j].data().to_vec();
            for it in &st.per_iteration {
                sum.iter_mut().zip(it[j].data()).for_each(|(a, b)| *a += b);
            }
            for (a, b) in one.iter().zip(&sum) {
                assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn non_finite_input_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = tiny_code(&mut rng, Toggles::default(), 2);
        let mut y = image(&mut rng, 8, 8);
        let gt = image(&mut rng, 8, 8);
        let named = |m: &ModelParams, y: &Tensor| match backward(&Model::Code(m.clone()), y, &gt) {
            Err(Error::NonFinite { tensor }) => tensor,
            other => panic!("unexpected {other:?}"),
        };
        p.e4.data_mut()[0] = f64::INFINITY;
        assert_eq!(named(&p, &y), "head");
        y.set(0, 3, 3, f64::NAN);
        assert_eq!(named(&p, &y), "input");
    }
}
