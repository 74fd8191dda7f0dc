//! Desk-scale training: Adam, the two-stage schedule, augmentation.

mod backward;
mod check;

pub use backward::{backward, backward_traced, forward_loss, loss_l1, GradientSet, STrace};
pub use check::{finite_diff_check, finite_diff_report, FdReport, FD_NOISE_FLOOR};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Reweighting off, trained from initialization.
    Plain,
    /// Reweighting on, warm-started from a plain model.
    Finetune,
}

impl Stage {
    pub fn index(self) -> u32 {
        match self {
            Stage::Plain => 1,
            Stage::Finetune => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch_size: usize,
    /// Stage-one learning rate.
    pub lr: f64,
    /// Step counts at which the learning rate halves; restart every stage.
    pub lr_milestones: Vec<usize>,
    /// Stage-two learning rate as a fraction of `lr`.
    pub finetune_lr_scale: f64,
    /// Extra factor on the learning rate of the weight blocks, which enter
    /// stage two freshly initialized.
    pub gate_lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub plain_steps: usize,
    pub finetune_steps: usize,
    /// Worker threads for per-sample gradients. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            patch_size: 32,
            lr: 8e-4,
            lr_milestones: vec![500, 1000, 1500, 2000],
            finetune_lr_scale: 0.1,
            gate_lr_scale: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            plain_steps: 2000,
            finetune_steps: 2000,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Param(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patch_size == 0 {
            return bad("patch_size must be at least 1");
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_milestones must be strictly increasing");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("adam eps must be positive");
        }
        if !(self.finetune_lr_scale > 0.0) {
            return bad("finetune_lr_scale must be positive");
        }
        if !(self.gate_lr_scale > 0.0) {
            return bad("gate_lr_scale must be positive");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        Ok(())
    }

    /// Base rate of a stage before milestone halving.
    pub fn stage_lr(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Plain => self.lr,
            Stage::Finetune => self.lr * self.finetune_lr_scale,
        }
    }

    /// Rate at zero-based step `step` within a stage.
    pub fn lr_at(&self, stage: Stage, step: usize) -> f64 {
        let halvings = self.lr_milestones.iter().filter(|&&m| step >= m).count();
        self.stage_lr(stage) * 0.5f64.powi(halvings as i32)
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

fn is_threshold(name: &str) -> bool {
    name == "theta" || name.starts_with("theta.")
}

/// Bias-corrected Adam update at learning rate `lr`. Thresholds are kept
/// nonnegative. Non-finite gradients leave model and state untouched.
pub fn adam_step(
    model: &mut Model,
    g: &GradientSet,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if let Some(name) = g.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: format!("gradient of {name}"),
        });
    }
    let grads = g.entries();
    let mut params = model.params_mut();
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match the model".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (name, p)) in params.iter_mut().enumerate() {
        let gd = grads[i].data;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let lr = if name.starts_with("lwb_") { lr * cfg.gate_lr_scale } else { lr };
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gd[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gd[k] * gd[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        if is_threshold(name) {
            p.iter_mut().for_each(|x| *x = x.max(0.0));
        }
    }
    Ok(())
}

/// A rainy input and its clean target.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub rainy: Tensor,
    pub clean: Tensor,
}

fn flip_h(t: &Tensor) -> Tensor {
    let (c, h, w) = t.shape();
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ch, y, x, t.at(ch, y, w - 1 - x));
            }
        }
    }
    out
}

/// Counter-clockwise quarter turn.
fn rot90(t: &Tensor) -> Tensor {
    let (c, h, w) = t.shape();
    let mut out = Tensor::zeros(c, w, h);
    for ch in 0..c {
        for y in 0..w {
            for x in 0..h {
                out.set(ch, y, x, t.at(ch, x, w - 1 - y));
            }
        }
    }
    out
}

fn crop(t: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let c = t.channels();
    let mut out = Tensor::zeros(c, size, size);
    for ch in 0..c {
        for y in 0..size {
            for x in 0..size {
                out.set(ch, y, x, t.at(ch, y0 + y, x0 + x));
            }
        }
    }
    out
}

/// One of the eight flip/rotation variants, index in `0..8`.
pub fn dihedral(t: &Tensor, variant: u8) -> Tensor {
    let mut out = if variant & 4 != 0 { flip_h(t) } else { t.clone() };
    for _ in 0..(variant & 3) {
        out = rot90(&out);
    }
    out
}

/// Random crop of side `patch` plus a random flip and quarter-turn, applied
/// identically to both images.
pub fn augment<R: Rng>(pair: &Pair, patch: usize, rng: &mut R) -> Result<Pair> {
    let (_, h, w) = pair.rainy.shape();
    pair.rainy.check_same_shape(&pair.clean, "training pair")?;
    if h < patch || w < patch {
        return Err(Error::Size(format!(
            "image {h}x{w} smaller than patch {patch}"
        )));
    }
    let y0 = rng.gen_range(0..=h - patch);
    let x0 = rng.gen_range(0..=w - patch);
    let variant = rng.gen_range(0..8u8);
    Ok(Pair {
        rainy: dihedral(&crop(&pair.rainy, y0, x0, patch), variant),
        clean: dihedral(&crop(&pair.clean, y0, x0, patch), variant),
    })
}

/// Mean loss and mean gradient over a batch. The per-sample reduction runs
/// in input order whatever the thread count.
pub fn batch_gradient(model: &Model, batch: &[Pair], threads: usize) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::Train("empty batch".into()));
    }
    let results: Vec<Result<(f64, GradientSet)>> = if threads <= 1 || batch.len() == 1 {
        batch
            .iter()
            .map(|p| backward(model, &p.rainy, &p.clean))
            .collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|p| backward(model, &p.rainy, &p.clean))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let mut total = GradientSet::zeros_for(model);
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g)?;
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// Mean loss over a set of pairs without gradients.
pub fn evaluate_loss(model: &Model, pairs: &[Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Train("empty evaluation set".into()));
    }
    let mut s = 0.0;
    for p in pairs {
        s += forward_loss(model, &p.rainy, &p.clean)?;
    }
    Ok(s / pairs.len() as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: u32,
    pub lr: f64,
    pub loss: f64,
}

/// Trains one stage in place. `on_step` sees every log record as it is made.
pub fn train_stage(
    model: &mut Model,
    corpus: &[Pair],
    cfg: &TrainConfig,
    stage: Stage,
    steps: usize,
    on_step: &mut dyn FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Train("empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (stage.index() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut state = AdamState::new(model);
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..corpus.len());
            batch.push(augment(&corpus[idx], cfg.patch_size, &mut rng)?);
        }
        let (loss, g) = batch_gradient(model, &batch, cfg.threads)?;
        if !loss.is_finite() {
            return Err(Error::Train(format!("non-finite loss at step {step}")));
        }
        let lr = cfg.lr_at(stage, step);
        adam_step(model, &g, &mut state, cfg, lr)?;
        let rec = LogRecord {
            step,
            stage: stage.index(),
            lr,
            loss,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Output of [`train_two_stage`].
#[derive(Debug, Clone)]
pub struct TwoStage {
    pub plain: Model,
    pub finetuned: Model,
    pub log: Vec<LogRecord>,
}

/// Trains `init` with reweighting off, then switches reweighting on and
/// fine-tunes at the reduced rate.
pub fn train_two_stage(
    init: Model,
    corpus: &[Pair],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&LogRecord),
) -> Result<TwoStage> {
    let mut plain = init;
    plain.toggles_mut().rw = false;
    let mut log = train_stage(&mut plain, corpus, cfg, Stage::Plain, cfg.plain_steps, on_step)?;
    let mut finetuned = plain.clone();
    finetuned.enable_reweighting();
    log.extend(train_stage(
        &mut finetuned,
        corpus,
        cfg,
        Stage::Finetune,
        cfg.finetune_steps,
        on_step,
    )?);
    Ok(TwoStage {
        plain,
        finetuned,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{CodeHyper, ModelParams, Toggles};

    fn tiny(seed: u64) -> Model {
        let h = CodeHyper {
            p: 2,
            c: 4,
            s: 3,
            t: 2,
            rho: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::Code(ModelParams::init(h, Toggles::plain(), &mut rng).unwrap())
    }

    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn corpus(seed: u64, n: usize) -> Vec<Pair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let clean = random(&mut rng, 10, 10);
                let rainy = clean.map(|v| v + 0.2 * (v > 0.7) as u8 as f64);
                Pair { rainy, clean }
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lr_milestones = vec![5, 5];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedule_halves_and_restarts() {
        let c = TrainConfig {
            lr: 1.0,
            lr_milestones: vec![2, 4],
            finetune_lr_scale: 0.1,
            ..TrainConfig::default()
        };
        let got: Vec<f64> = (0..6).map(|s| c.lr_at(Stage::Plain, s)).collect();
        assert_eq!(got, vec![1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
        assert!((c.lr_at(Stage::Finetune, 0) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(Stage::Finetune, 4) - 0.025).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let cfg = TrainConfig::default();
        let mut m = tiny(1);
        let before = m.clone();
        let mut st = AdamState::new(&m);
        let g = GradientSet::zeros_for(&m);
        adam_step(&mut m, &g, &mut st, &cfg, 1e-3).unwrap();
        assert_eq!(m, before);

        let mut g = GradientSet::zeros_for(&m);
        g.entries_mut()[0].1[0] = -0.37;
        let mut st = AdamState::new(&m);
        adam_step(&mut m, &g, &mut st, &cfg, 1e-3).unwrap();
        let d = m.params()[0].data[0] - before.params()[0].data[0];
        assert!((d - 1e-3).abs() < 1e-6, "{d}");
    }

    #[test]
    fn adam_moments_decay_under_zero_gradient() {
        let cfg = TrainConfig::default();
        let mut m = tiny(1);
        let mut st = AdamState::new(&m);
        let mut g = GradientSet::zeros_for(&m);
        g.entries_mut()[0].1[0] = 1.0;
        adam_step(&mut m, &g, &mut st, &cfg, 1e-3).unwrap();
        let (m1, v1) = (st.m[0][0], st.v[0][0]);
        let zero = GradientSet::zeros_for(&m);
        adam_step(&mut m, &zero, &mut st, &cfg, 1e-3).unwrap();
        assert!((st.m[0][0] - 0.9 * m1).abs() < 1e-15);
        assert!((st.v[0][0] - 0.999 * v1).abs() < 1e-15);
    }

    #[test]
    fn adam_two_steps_by_hand() {
        let cfg = TrainConfig::default();
        let mut m = tiny(2);
        let x0 = m.params()[0].data[0];
        let mut st = AdamState::new(&m);
        let (g1, g2, lr) = (0.5, -0.2, 0.01);
        for gv in [g1, g2] {
            let mut g = GradientSet::zeros_for(&m);
            g.entries_mut()[0].1[0] = gv;
            adam_step(&mut m, &g, &mut st, &cfg, lr).unwrap();
        }
        let m1 = 0.1 * g1;
        let v1 = 0.001 * g1 * g1;
        let x1 = x0 - lr * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
        let m2 = 0.9 * m1 + 0.1 * g2;
        let v2 = 0.999 * v1 + 0.001 * g2 * g2;
        let x2 = x1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
        assert!((m.params()[0].data[0] - x2).abs() < 1e-10);
    }

    #[test]
    fn adam_refuses_non_finite_and_clamps_theta() {
        let cfg = TrainConfig::default();
        let mut m = tiny(3);
        let mut st = AdamState::new(&m);
        let mut g = GradientSet::zeros_for(&m);
        g.entries_mut()[1].1[0] = f64::NAN;
        let before = m.clone();
        assert!(matches!(
            adam_step(&mut m, &g, &mut st, &cfg, 1e-3),
            Err(Error::NonFinite { .. })
        ));
        assert_eq!(m, before);
        assert_eq!(st.step, 0);

        let mut g = GradientSet::zeros_for(&m);
        for (name, d) in g.entries_mut() {
            if name == "theta" {
                d.iter_mut().for_each(|v| *v = 1.0);
            }
        }
        adam_step(&mut m, &g, &mut st, &cfg, 1.0).unwrap();
        let th = m.params().into_iter().find(|p| p.name == "theta").unwrap();
        assert!(th.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dihedral_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random(&mut rng, 3, 5);
        assert_eq!(rot90(&rot90(&rot90(&rot90(&t)))), t);
        assert_eq!(flip_h(&flip_h(&t)), t);
        assert_eq!(rot90(&t).shape(), (3, 5, 3));
        let mut seen = Vec::new();
        let sq = random(&mut rng, 3, 3);
        for v in 0..8 {
            let d = dihedral(&sq, v);
            assert!(!seen.contains(&d));
            seen.push(d);
        }
    }

    #[test]
    fn augmentation_keeps_pairs_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clean = random(&mut rng, 9, 11);
        let rainy = clean.map(|v| 2.0 * v + 1.0);
        let p = augment(&Pair { rainy, clean }, 4, &mut rng).unwrap();
        assert_eq!(p.rainy.shape(), (3, 4, 4));
        assert_eq!(p.rainy, p.clean.map(|v| 2.0 * v + 1.0));
    }

    #[test]
    fn batch_reduction_is_thread_independent() {
        let m = tiny(6);
        let c = corpus(7, 5);
        let a = batch_gradient(&m, &c, 1).unwrap();
        let b = batch_gradient(&m, &c, 3).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn tiny_learning_rate_descends() {
        let mut m = tiny(8);
        let c = corpus(9, 3);
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(&m);
        let mut prev = evaluate_loss(&m, &c).unwrap();
        for _ in 0..10 {
            let (_, g) = batch_gradient(&m, &c, 1).unwrap();
            adam_step(&mut m, &g, &mut st, &cfg, 1e-6).unwrap();
            let now = evaluate_loss(&m, &c).unwrap();
            assert!(now <= prev + 1e-6);
            prev = now;
        }
    }

    #[test]
    fn training_is_deterministic() {
        let c = corpus(10, 6);
        let cfg = TrainConfig {
            batch_size: 2,
            patch_size: 8,
            plain_steps: 4,
            finetune_steps: 3,
            lr_milestones: vec![2],
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train_two_stage(tiny(12), &c, &cfg, &mut |_| {}).unwrap();
        let b = train_two_stage(tiny(12), &c, &cfg, &mut |_| {}).unwrap();
        assert_eq!(a.log.len(), 7);
        assert_eq!(a.log, b.log);
        assert_eq!(a.finetuned, b.finetuned);
        assert!(!a.plain.toggles().rw);
        assert!(a.finetuned.toggles().rw);
        assert_eq!(a.log[4].stage, 2);
        assert_eq!(a.log[4].step, 0);
        assert!(train_two_stage(tiny(12), &[], &cfg, &mut |_| {}).is_err());
    }
}
