use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    act_forward, bank_param, check_iterations, check_rgb, he_bank, head_bank, init_lwb, matrix_param,
    mean_rde, relu_t, ActTrace, DerainResult, NamedParam, Toggles, THETA_INIT,
};
use crate::density::{hidden_width, LwbParams, WeightVector};
use crate::error::{shape_err, Result};
use crate::tensor::{conv2d, KernelBank, Tensor};

/// Architecture hyperparameters of the single-scale network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeHyper {
    /// Extractor / reconstruction feature width.
    pub p: usize,
    /// Number of sparse code channels.
    pub c: usize,
    /// Kernel size of every convolution.
    pub s: usize,
    /// Unfolded iterations.
    #[serde(rename = "T")]
    pub t: usize,
    /// Channel reduction of the weight blocks.
    pub rho: usize,
}

impl CodeHyper {
    /// Full-size configuration.
    pub fn full_size() -> Self {
        Self {
            p: 128,
            c: 256,
            s: 3,
            t: 25,
            rho: 16,
        }
    }

    /// CPU-sized configuration used for desk training.
    pub fn desk() -> Self {
        Self {
            p: 8,
            c: 16,
            s: 3,
            t: 8,
            rho: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.c == 0 {
            return shape_err("p and c must be positive");
        }
        if self.s % 2 == 0 {
            return Err(crate::Error::Param(format!("kernel size {} is not odd", self.s)));
        }
        check_iterations(self.t)?;
        hidden_width(self.c, self.rho)?;
        Ok(())
    }
}

/// Learnable state of the single-scale network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: CodeHyper,
    pub toggles: Toggles,
    /// `p × 3`
    pub e1: KernelBank,
    /// `p × p`
    pub e2: KernelBank,
    /// `c × p`
    pub g: KernelBank,
    /// `c × c`, shared by every iteration.
    pub s: KernelBank,
    /// `p × c`
    pub e3: KernelBank,
    /// `3 × p`
    pub e4: KernelBank,
    pub lwb_w: LwbParams,
    pub lwb_wtilde: LwbParams,
    /// Per-channel threshold, shared by every iteration.
    pub theta: Vec<f64>,
}

impl ModelParams {
    /// He-initialized banks, small uniform weight blocks, `θ = 0.01`.
    pub fn init<R: Rng>(hyper: CodeHyper, toggles: Toggles, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let CodeHyper { p, c, s, .. } = hyper;
        Ok(Self {
            hyper,
            toggles,
            e1: he_bank(rng, p, 3, s),
            e2: he_bank(rng, p, p, s),
            g: he_bank(rng, c, p, s),
            s: he_bank(rng, c, c, s),
            e3: he_bank(rng, p, c, s),
            e4: head_bank(rng, p, s),
            lwb_w: init_lwb(rng, c, hyper.rho)?,
            lwb_wtilde: init_lwb(rng, c, hyper.rho)?,
            theta: vec![THETA_INIT; c],
        })
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(hyper: CodeHyper, toggles: Toggles) -> Result<Self> {
        hyper.validate()?;
        let CodeHyper { p, c, s, .. } = hyper;
        Ok(Self {
            hyper,
            toggles,
            e1: KernelBank::zeros(p, 3, s)?,
            e2: KernelBank::zeros(p, p, s)?,
            g: KernelBank::zeros(c, p, s)?,
            s: KernelBank::zeros(c, c, s)?,
            e3: KernelBank::zeros(p, c, s)?,
            e4: KernelBank::zeros(3, p, s)?,
            lwb_w: LwbParams::zeros(c, hyper.rho)?,
            lwb_wtilde: LwbParams::zeros(c, hyper.rho)?,
            theta: vec![0.0; c],
        })
    }

    pub fn params(&self) -> Vec<NamedParam<'_>> {
        vec![
            bank_param("e1", &self.e1),
            bank_param("e2", &self.e2),
            bank_param("g", &self.g),
            bank_param("s", &self.s),
            bank_param("e3", &self.e3),
            bank_param("e4", &self.e4),
            matrix_param("lwb_w.fc1", &self.lwb_w.fc1),
            matrix_param("lwb_w.fc2", &self.lwb_w.fc2),
            matrix_param("lwb_wtilde.fc1", &self.lwb_wtilde.fc1),
            matrix_param("lwb_wtilde.fc2", &self.lwb_wtilde.fc2),
            NamedParam {
                name: "theta".into(),
                shape: vec![self.theta.len()],
                data: &self.theta,
            },
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("e1".into(), self.e1.data_mut()),
            ("e2".into(), self.e2.data_mut()),
            ("g".into(), self.g.data_mut()),
            ("s".into(), self.s.data_mut()),
            ("e3".into(), self.e3.data_mut()),
            ("e4".into(), self.e4.data_mut()),
            ("lwb_w.fc1".into(), &mut self.lwb_w.fc1.data[..]),
            ("lwb_w.fc2".into(), &mut self.lwb_w.fc2.data[..]),
            ("lwb_wtilde.fc1".into(), &mut self.lwb_wtilde.fc1.data[..]),
            ("lwb_wtilde.fc2".into(), &mut self.lwb_wtilde.fc2.data[..]),
            ("theta".into(), &mut self.theta[..]),
        ]
    }

    /// Switches on the weight blocks and rescales `θ`, `S`, `E3` (and `G`
    /// with pre-activation off) so that the network is unchanged when both
    /// gates sit at 0.5, i.e. for weight blocks with negligible `fc` weights.
    pub fn enable_reweighting(&mut self) {
        if self.toggles.rw {
            return;
        }
        self.toggles.rw = true;
        self.theta.iter_mut().for_each(|t| *t *= 0.5);
        self.s = self.s.scale(4.0);
        self.e3 = self.e3.scale(4.0);
        if !self.toggles.pa {
            self.g = self.g.scale(0.25);
        }
    }
}

/// `r_ε = ReLU(E2 ⊗ ReLU(E1 ⊗ y))`
pub fn extract_rain(y: &Tensor, m: &ModelParams) -> Result<Tensor> {
    check_rgb(y)?;
    let h1 = relu_t(&conv2d(y, &m.e1)?);
    Ok(relu_t(&conv2d(&h1, &m.e2)?))
}

fn is_zero(t: &Tensor) -> bool {
    t.data().iter().all(|v| *v == 0.0)
}

/// One unfolded iteration. `gr` is `G ⊗ r_ε`; `t` is the zero-based
/// iteration index (the skip is always taken at `t = 0`).
fn step(z: &Tensor, gr: &Tensor, m: &ModelParams, t: usize) -> Result<(Tensor, ActTrace)> {
    let skip = m.toggles.lrl || t == 0;
    let sz = if is_zero(z) {
        Tensor::zeros_like(gr)
    } else {
        conv2d(z, &m.s)?
    };
    if m.toggles.pa {
        let mut v = sz;
        if skip {
            v.add_assign(gr)?;
        }
        act_forward(v, &m.lwb_wtilde, &m.lwb_w, &m.theta, m.toggles.rw)
    } else {
        let (mut out, tr) = act_forward(sz, &m.lwb_wtilde, &m.lwb_w, &m.theta, m.toggles.rw)?;
        if skip {
            out.add_assign(gr)?;
        }
        Ok((out, tr))
    }
}

/// A single iteration from an arbitrary code `z`; returns `z⁺` and the `w̃`
/// emitted by this iteration.
pub fn lwista_step(
    z: &Tensor,
    r_eps: &Tensor,
    m: &ModelParams,
    t: usize,
) -> Result<(Tensor, Option<WeightVector>)> {
    let gr = conv2d(r_eps, &m.g)?;
    if z.shape() != gr.shape() {
        return shape_err(format!("code shape {:?}, expected {:?}", z.shape(), gr.shape()));
    }
    let (z, tr) = step(z, &gr, m, t)?;
    Ok((z, tr.wtilde()))
}

pub(crate) struct IterTrace {
    pub z_in: Tensor,
    pub act: ActTrace,
}

pub(crate) struct LwistaRun {
    pub z: Tensor,
    pub wtilde: Option<WeightVector>,
    pub iters: Vec<IterTrace>,
}

fn run_lwista(r_eps: &Tensor, m: &ModelParams, iterations: usize, record: bool) -> Result<LwistaRun> {
    if r_eps.channels() != m.hyper.p {
        return shape_err(format!(
            "rain features have {} channels, model expects {}",
            r_eps.channels(),
            m.hyper.p
        ));
    }
    check_iterations(iterations)?;
    let gr = conv2d(r_eps, &m.g)?;
    let mut z = Tensor::zeros_like(&gr);
    let mut iters = Vec::new();
    let mut wtilde = None;
    for t in 0..iterations {
        let (next, tr) = step(&z, &gr, m, t)?;
        if t + 1 == iterations {
            wtilde = tr.wtilde();
        }
        if record {
            iters.push(IterTrace { z_in: z, act: tr });
        }
        z = next;
    }
    Ok(LwistaRun {
        z,
        wtilde,
        iters,
    })
}

/// Unfolded sparse coding from `z⁽⁰⁾ = 0` for the model's `T` iterations.
/// Returns the final code and the final iteration's `w̃` (none when
/// reweighting is off).
pub fn lwista(r_eps: &Tensor, m: &ModelParams) -> Result<(Tensor, Option<WeightVector>)> {
    let run = run_lwista(r_eps, m, m.hyper.t, false)?;
    Ok((run.z, run.wtilde))
}

/// `E4 ⊗ ReLU(E3 ⊗ z)`
pub fn reconstruct_rain(z: &Tensor, m: &ModelParams) -> Result<Tensor> {
    if z.channels() != m.hyper.c {
        return shape_err(format!(
            "code has {} channels, model expects {}",
            z.channels(),
            m.hyper.c
        ));
    }
    conv2d(&relu_t(&conv2d(z, &m.e3)?), &m.e4)
}

/// `floor(log2 |v|)` for finite nonzero `v`.
fn exponent(v: f64) -> i32 {
    let e = ((v.to_bits() >> 52) & 0x7ff) as i32;
    if e == 0 {
        // subnormal
        -1011 - (v.to_bits() & ((1 << 52) - 1)).leading_zeros() as i32
    } else {
        e - 1023
    }
}

/// Exponent of the lowest set bit of `v`, so `v` is a multiple of `2^k`.
fn trailing_exponent(v: f64) -> i32 {
    let bits = v.to_bits();
    let e = ((bits >> 52) & 0x7ff) as i32;
    let man = bits & ((1 << 52) - 1);
    let (man, base) = if e == 0 { (man, -1074) } else { (man | 1 << 52, e - 1075) };
    base + man.trailing_zeros() as i32
}

/// Rounds the rain value `h` onto a power-of-two grid that divides `y` and
/// is coarse enough for `y - r` to be exact. Then `(y - r) + r == y` in
/// floating point. The grid is at most 32-bit precision relative to `h`,
/// and exactness holds whenever `y` has no more than 24 significant bits
/// and `|h| < 2^28 |y|`.
pub(crate) fn exact_rain(y: f64, h: f64) -> f64 {
    if y == 0.0 || h == 0.0 || !h.is_finite() || !y.is_finite() {
        return h;
    }
    let eh = exponent(h);
    let es = exponent(y.abs() + h.abs());
    let qe = trailing_exponent(y).min((eh - 23).max(es - 51));
    if qe <= eh - 53 {
        return h;
    }
    let q = 2f64.powi(qe);
    (h / q).round() * q
}

pub(crate) fn split_output(y: &Tensor, head: Tensor, grl: bool) -> Result<(Tensor, Tensor)> {
    if grl {
        let r = y.zip_map(&head, exact_rain)?;
        let x = y.sub(&r)?;
        Ok((x, r))
    } else {
        let r = y.sub(&head)?;
        Ok((head, r))
    }
}

pub fn derain(y: &Tensor, m: &ModelParams) -> Result<DerainResult> {
    derain_iters(y, m, m.hyper.t)
}

pub(crate) fn derain_iters(y: &Tensor, m: &ModelParams, iterations: usize) -> Result<DerainResult> {
    let r_eps = extract_rain(y, m)?;
    let run = run_lwista(&r_eps, m, iterations, false)?;
    let head = reconstruct_rain(&run.z, m)?;
    let (x, r) = split_output(y, head, m.toggles.grl)?;
    let wtilde: Vec<WeightVector> = run.wtilde.into_iter().collect();
    Ok(DerainResult {
        x,
        r,
        rde: mean_rde(&wtilde),
        wtilde,
    })
}

/// Every intermediate of a forward pass, for the reverse pass.
pub(crate) struct CodeTrace {
    pub y: Tensor,
    pub a1: Tensor,
    pub h1: Tensor,
    pub a2: Tensor,
    pub r_eps: Tensor,
    pub iters: Vec<IterTrace>,
    pub z: Tensor,
    pub q: Tensor,
    pub hq: Tensor,
    /// Output of `E4`: the rain layer with the global residual on, else `x`.
    pub head: Tensor,
}

impl CodeTrace {
    pub fn prediction(&self, grl: bool) -> Result<Tensor> {
        if grl {
            self.y.sub(&self.head)
        } else {
            Ok(self.head.clone())
        }
    }
}

pub(crate) fn forward_trace(y: &Tensor, m: &ModelParams) -> Result<CodeTrace> {
    check_rgb(y)?;
    let a1 = conv2d(y, &m.e1)?;
    let h1 = relu_t(&a1);
    let a2 = conv2d(&h1, &m.e2)?;
    let r_eps = relu_t(&a2);
    let run = run_lwista(&r_eps, m, m.hyper.t, true)?;
    let q = conv2d(&run.z, &m.e3)?;
    let hq = relu_t(&q);
    let head = conv2d(&hq, &m.e4)?;
    Ok(CodeTrace {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::lwb_forward;
    use crate::tensor::relu;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> CodeHyper {
        CodeHyper {
            p: 2,
            c: 4,
            s: 3,
            t: 3,
            rho: 2,
        }
    }

    fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.gen_range(0.0f32..1.0) as f64).collect()).unwrap()
    }

    #[test]
    fn zero_e2_kills_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelParams::init(tiny(), Toggles::default(), &mut rng).unwrap();
        let y = image(&mut rng, 6, 6);
        assert!(extract_rain(&y, &m).unwrap().data().iter().all(|v| *v >= 0.0));
        assert_eq!(extract_rain(&Tensor::zeros(3, 6, 6), &m).unwrap().count_nonzero(), 0);
        m.e2 = KernelBank::zeros_like(&m.e2);
        assert_eq!(extract_rain(&y, &m).unwrap().count_nonzero(), 0);
        assert!(extract_rain(&Tensor::zeros(2, 6, 6), &m).is_err());
    }

    #[test]
    fn first_iteration_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = ModelParams::init(tiny(), Toggles::default(), &mut rng).unwrap();
        m.hyper.t = 1;
        let y = image(&mut rng, 5, 7);
        let r = extract_rain(&y, &m).unwrap();
        let (z, _) = lwista(&r, &m).unwrap();
        let gr = conv2d(&r, &m.g).unwrap();
        let (a, _) = lwb_forward(&gr, &m.lwb_wtilde).unwrap();
        let mut b = a.clone();
        for c in 0..4 {
            let t = m.theta[c];
            b.channel_mut(c).iter_mut().for_each(|v| *v = relu(*v - t));
        }
        let (expect, _) = lwb_forward(&b, &m.lwb_w).unwrap();
        for (p, q) in z.data().iter().zip(expect.data()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn dead_zone_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = ModelParams::init(tiny(), Toggles::default(), &mut rng).unwrap();
        m.theta = vec![1e6; 4];
        let y = image(&mut rng, 6, 6);
        let r = extract_rain(&y, &m).unwrap();
        for t in [1, 4, 9] {
            m.hyper.t = t;
            assert_eq!(lwista(&r, &m).unwrap().0.count_nonzero(), 0);
        }
    }

    #[test]
    fn codes_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for rw in [true, false] {
            let m = ModelParams::init(tiny(), Toggles { rw, ..Toggles::default() }, &mut rng).unwrap();
            let y = image(&mut rng, 6, 6);
            let r = extract_rain(&y, &m).unwrap();
            let mut z = Tensor::zeros(4, 6, 6);
            for t in 0..5 {
                z = lwista_step(&z, &r, &m, t).unwrap().0;
                assert!(z.data().iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn reconstruction_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = ModelParams::init(tiny(), Toggles::default(), &mut rng).unwrap();
        assert_eq!(reconstruct_rain(&Tensor::zeros(4, 5, 5), &m).unwrap().count_nonzero(), 0);
        assert!(reconstruct_rain(&Tensor::zeros(3, 5, 5), &m).is_err());
        m.e4 = KernelBank::zeros_like(&m.e4);
        let z = Tensor::filled(4, 5, 5, 0.3);
        assert_eq!(reconstruct_rain(&z, &m).unwrap().count_nonzero(), 0);
        let y = image(&mut rng, 5, 5);
        let res = derain(&y, &m).unwrap();
        assert_eq!(res.x, y);
        assert_eq!(res.r.count_nonzero(), 0);
        assert!(res.rde.is_some());
    }

    #[test]
    fn two_iterations_equal_chained_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (lrl, pa) in [(true, true), (false, true), (true, false), (false, false)] {
            let toggles = Toggles { lrl, pa, ..Toggles::default() };
            let mut m = ModelParams::init(tiny(), toggles, &mut rng).unwrap();
            m.hyper.t = 2;
            let y = image(&mut rng, 6, 5);
            let r = extract_rain(&y, &m).unwrap();
            let (z2, w2) = lwista(&r, &m).unwrap();
            let z = Tensor::zeros(4, 6, 5);
            let (z1, _) = lwista_step(&z, &r, &m, 0).unwrap();
            let (z2b, w2b) = lwista_step(&z1, &r, &m, 1).unwrap();
            assert_eq!(z2, z2b);
            assert_eq!(w2, w2b);
            // mutating the shared S changes the second step only
            let mut m2 = m.clone();
            m2.s.data_mut()[0] += 0.5;
            let (z1c, _) = lwista_step(&z, &r, &m2, 0).unwrap();
            assert_eq!(z1c, z1);
            let (z2c, _) = lwista(&r, &m2).unwrap();
            assert_ne!(z2c, z2);
        }
    }

    #[test]
    fn reweighting_transfer_preserves_output_with_half_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for pa in [true, false] {
            let mut m = ModelParams::init(tiny(), Toggles { pa, ..Toggles::plain() }, &mut rng).unwrap();
            m.lwb_w = LwbParams::zeros(4, 2).unwrap();
            m.lwb_wtilde = LwbParams::zeros(4, 2).unwrap();
            let y = image(&mut rng, 6, 6);
            let before = derain(&y, &m).unwrap();
            m.enable_reweighting();
            let after = derain(&y, &m).unwrap();
            for (a, b) in before.x.data().iter().zip(after.x.data()) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!(before.rde.is_none());
            assert_eq!(after.rde, Some(0.5));
        }
    }

    #[test]
    fn exact_rain_edge_cases() {
        // crossing into the next binade used to lose the round trip
        for (y, h) in [
            (1.0, -9.32089628e-10),
            (1.0, -1.5e-11),
            (0.5, -0.5000001),
            (0.0, 0.3),
            (0.25, 1e-30),
            ((1.0f32 / 255.0) as f64, 0.7),
        ] {
            let r = exact_rain(y, h);
            assert_eq!((y - r) + r, y, "{y} {h}");
            assert!((r - h).abs() <= h.abs() * 2f64.powi(-23) + (y + h.abs()) * 2f64.powi(-50));
        }
        assert_eq!(exponent(1.0), 0);
        assert_eq!(exponent(0.75), -1);
        assert_eq!(exponent(f64::MIN_POSITIVE / 4.0), -1024);
        assert_eq!(trailing_exponent(0.75), -2);
        assert_eq!(trailing_exponent(6.0), 1);
    }

    #[test]
    fn global_residual_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = ModelParams::init(tiny(), Toggles::default(), &mut rng).unwrap();
        let y = image(&mut rng, 7, 6);
        let res = derain(&y, &m).unwrap();
        assert_eq!(res.x.add(&res.r).unwrap(), y);
    }
}
