//! Synthetic rain: sparse spikes smeared by oriented streak kernels and added
//! to a procedural background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, KernelBank, Tensor};

/// Rain layers are snapped to this grid so that `compose` adds exactly on
/// 8-bit images.
const RAIN_GRID: f64 = 4294967296.0; // 2^32

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RainSpec {
    /// Per-pixel spike probability.
    pub density: f64,
    /// Brightness scale of one streak.
    pub intensity: f64,
    /// Streak orientation in degrees, counter-clockwise from the x axis.
    pub angle: f64,
    /// One streak kernel per length.
    pub lengths: Vec<usize>,
    pub width: f64,
    pub seed: u64,
}

impl RainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.density) {
            return Err(Error::Param(format!("density {} outside [0, 1]", self.density)));
        }
        if !(self.intensity > 0.0 && self.intensity.is_finite()) {
            return Err(Error::Param("intensity must be positive".into()));
        }
        if !self.angle.is_finite() {
            return Err(Error::Param("angle must be finite".into()));
        }
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(Error::Param("streak lengths must be at least 1".into()));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::Param("streak width must be positive".into()));
        }
        Ok(())
    }
}

/// Named density presets used for the desk corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Clean,
    Light,
    Medium,
    Heavy,
}

impl Level {
    pub const RAINY: [Level; 3] = [Level::Light, Level::Medium, Level::Heavy];

    pub fn density(self) -> f64 {
        match self {
            Level::Clean => 0.0,
            Level::Light => 0.002,
            Level::Medium => 0.01,
            Level::Heavy => 0.05,
        }
    }

    /// 0 for clean up to 3 for heavy.
    pub fn rank(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Clean => "clean",
            Level::Light => "light",
            Level::Medium => "medium",
            Level::Heavy => "heavy",
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        [Level::Clean, Level::Light, Level::Medium, Level::Heavy]
            .into_iter()
            .find(|l| l.name() == s)
    }
}

pub const PRESET_INTENSITY: f64 = 0.6;
pub const PRESET_LENGTHS: [usize; 3] = [3, 5, 7];

/// Spec of a preset level with the given angle and seed.
pub fn preset(level: Level, angle: f64, seed: u64) -> RainSpec {
    RainSpec {
        density: level.density(),
        intensity: PRESET_INTENSITY,
        angle,
        lengths: PRESET_LENGTHS.to_vec(),
        width: 1.0,
        seed,
    }
}

/// Distance from `(x, y)` to the segment from `-a` to `a`.
fn segment_distance(x: f64, y: f64, ax: f64, ay: f64) -> f64 {
    let len2 = ax * ax + ay * ay;
    if len2 == 0.0 {
        return x.hypot(y);
    }
    // project onto the segment, clamped to its ends
    let t = ((x * ax + y * ay) / len2).clamp(-1.0, 1.0);
    (x - t * ax).hypot(y - t * ay)
}

/// One-channel filter holding an anti-aliased line of the given length,
/// angle and width, scaled to unit ℓ1 mass.
pub fn make_streak_kernel(length: usize, angle: f64, width: f64) -> Result<KernelBank> {
    if length == 0 {
        return Err(Error::Param("streak length must be at least 1".into()));
    }
    if !(width > 0.0 && width.is_finite()) || !angle.is_finite() {
        return Err(Error::Param(format!("degenerate streak width {width} or angle {angle}")));
    }
    let half = (length as f64 - 1.0) / 2.0;
    let radius = (half + width / 2.0 - 0.5).ceil().max(0.0) as usize;
    let size = 2 * radius + 1;
    let rad = angle.to_radians();
    // image rows grow downwards
    let (ax, ay) = (half * rad.cos(), -half * rad.sin());
    let mut data = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let d = segment_distance(c as f64 - radius as f64, r as f64 - radius as f64, ax, ay);
            data[r * size + c] = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    let mass: f64 = data.iter().sum();
    if mass <= 0.0 {
        return Err(Error::Param("streak kernel has no mass".into()));
    }
    data.iter_mut().for_each(|v| *v /= mass);
    KernelBank::new(1, 1, size, data)
}

/// Bernoulli spike map with probability `density`, as a one-channel tensor.
pub fn spike_map<R: Rng>(h: usize, w: usize, density: f64, rng: &mut R) -> Tensor {
    let data = (0..h * w)
        .map(|_| if rng.gen::<f64>() < density { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(1, h, w, data).expect("spike map shape")
}

/// `intensity · Σ_j spikes_j ⊛ k_j`, broadcast to three channels. Every
/// length draws its own spike map from the spec's seed.
pub fn generate_rain(h: usize, w: usize, spec: &RainSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut acc = Tensor::zeros(1, h, w);
    for &len in &spec.lengths {
        let spikes = spike_map(h, w, spec.density, &mut rng);
        if spikes.count_nonzero() == 0 {
            continue;
        }
        let k = make_streak_kernel(len, spec.angle, spec.width)?;
        acc.add_assign(&conv2d(&spikes, &k)?)?;
    }
    let one = acc.map(|v| ((spec.intensity * v).max(0.0) * RAIN_GRID).round() / RAIN_GRID);
    Tensor::concat_channels(&[&one, &one, &one])
}

/// `clamp(x + r, 0, 1)`.
pub fn compose(x: &Tensor, r: &Tensor) -> Result<Tensor> {
    x.zip_map(r, |a, b| (a + b).clamp(0.0, 1.0))
}

/// Rounds to the nearest 8-bit level, stored as `(k as f32 / 255) as f64`.
pub fn quantize8(x: &Tensor) -> Tensor {
    x.map(|v| level_value((v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

/// The value an 8-bit sample `k` decodes to.
pub fn level_value(k: u8) -> f64 {
    (k as f32 / 255.0) as f64
}

/// Smooth procedural RGB background in roughly `[0.1, 0.9]`, quantized to
/// 8 bits.
pub fn background(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let fx = rng.gen_range(0.5..4.0) * std::f64::consts::TAU / w.max(1) as f64;
            let fy = rng.gen_range(0.5..4.0) * std::f64::consts::TAU / h.max(1) as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = [
                rng.gen_range(-0.12..0.12),
                rng.gen_range(-0.12..0.12),
                rng.gen_range(-0.12..0.12),
            ];
            (fx, fy, phase, amp)
        })
        .collect();
    let base: [f64; 3] = [
        rng.gen_range(0.3..0.6),
        rng.gen_range(0.3..0.6),
        rng.gen_range(0.3..0.6),
    ];
    // a few flat rectangles give edges
    let rects: Vec<(usize, usize, usize, usize, [f64; 3])> = (0..3)
        .map(|_| {
            let y0 = rng.gen_range(0..h.max(1));
            let x0 = rng.gen_range(0..w.max(1));
            let rh = rng.gen_range(1..=h.max(2) / 2);
            let rw = rng.gen_range(1..=w.max(2) / 2);
            let shift = [
                rng.gen_range(-0.15..0.15),
                rng.gen_range(-0.15..0.15),
                rng.gen_range(-0.15..0.15),
            ];
            (y0, x0, rh, rw, shift)
        })
        .collect();
    let mut out = Tensor::zeros(3, h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut v = base[c];
                for (fx, fy, ph, amp) in &waves {
                    v += amp[c] * (fx * x as f64 + fy * y as f64 + ph).sin();
                }
                for (y0, x0, rh, rw, shift) in &rects {
                    if (*y0..y0 + rh).contains(&y) && (*x0..x0 + rw).contains(&x) {
                        v += shift[c];
                    }
                }
                out.set(c, y, x, v.clamp(0.1, 0.9));
            }
        }
    }
    quantize8(&out)
}

/// One generated rainy/clean pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub level: Level,
    pub seed: u64,
    pub spec: RainSpec,
    pub clean: Tensor,
    pub rainy: Tensor,
}

/// Manifest row for a generated pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub level: Level,
    pub seed: u64,
    pub spec: RainSpec,
}

impl CorpusItem {
    pub fn manifest(&self) -> ManifestEntry {
        ManifestEntry {
            id: self.id.clone(),
            level: self.level,
            seed: self.seed,
            spec: self.spec.clone(),
        }
    }
}

/// A rainy/clean pair for one level. `seed` drives the background, angle and
/// rain draw. The rainy image is quantized to 8 bits like a PNG.
pub fn make_pair(id: impl Into<String>, level: Level, size: usize, seed: u64) -> Result<CorpusItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_seed = rng.gen();
    let angle = rng.gen_range(60.0..120.0);
    let spec = preset(level, angle, rng.gen());
    let clean = background(size, size, bg_seed);
    let rainy = if level == Level::Clean {
        clean.clone()
    } else {
        quantize8(&compose(&clean, &generate_rain(size, size, &spec)?)?)
    };
    Ok(CorpusItem {
        id: id.into(),
        level,
        seed,
        spec,
        clean,
        rainy,
    })
}

/// `n` pairs cycling through light, medium and heavy.
pub fn make_corpus(n: usize, size: usize, seed: u64) -> Result<Vec<CorpusItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let level = Level::RAINY[i % 3];
            make_pair(format!("{i:05}"), level, size, rng.gen())
        })
        .collect()
}
