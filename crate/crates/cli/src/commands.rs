//! The subcommands, callable without going through argument parsing.

use codenet::metrics::{psnr, ssim};
use codenet::net::{CodeHyper, Model, ModelParams, MsHyper, MsModelParams, Toggles};
use codenet::synth::{make_pair, ManifestEntry};
use codenet::train::{train_two_stage, LogRecord, Pair, TrainConfig};
use codenet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{Arch, BenchSection, SynthSection, TrainSection};
use crate::container::save_model;
use crate::imageio::{load_png, save_png, RainMap};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

/// One report line of `derain` or `rde`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ImageReport {
    pub file: String,
    pub rde: Option<f64>,
    pub ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rain_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rain_max: Option<f64>,
}

/// Expands directories to their PNG files (sorted by name); files pass
/// through in the given order.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("no input images".into()));
    }
    Ok(out)
}

/// Runs `f` over `items` on `jobs` workers and returns results in input order.
pub fn ordered_map<T: Sync, U: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> U + Sync,
) -> Vec<U> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let f = &f;
    let mut tagged: Vec<(usize, U)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                s.spawn(move || {
                    (w..items.len())
                        .step_by(jobs)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    tagged.sort_by_key(|(i, _)| *i);
    tagged.into_iter().map(|(_, u)| u).collect()
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

pub struct DerainOptions<'a> {
    pub iterations: usize,
    pub out: Option<&'a Path>,
    pub jobs: usize,
    pub emit_rain_layer: bool,
}

/// Derains every input; writes `{name}` and optionally `{stem}_rain.png`
/// into `out`, and one JSON report line per image to `report`.
pub fn derain(
    model: &Model,
    inputs: &[PathBuf],
    opts: &DerainOptions,
    report: &mut dyn Write,
) -> Result<Vec<ImageReport>, CliError> {
    let files = expand_inputs(inputs)?;
    if let Some(out) = opts.out {
        let mut names: Vec<String> = files.iter().map(|f| file_name(f)).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(CliError::Config(format!("two inputs share the name {}", w[0])));
        }
        std::fs::create_dir_all(out)?;
    }
    let results = ordered_map(&files, opts.jobs, |f| -> Result<ImageReport, CliError> {
        let y = load_png(f)?;
        let start = Instant::now();
        let res = model.derain_with(&y, opts.iterations)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let mut rep = ImageReport {
            file: f.display().to_string(),
            rde: res.rde,
            ms,
            rain_min: None,
            rain_max: None,
        };
        if let Some(out) = opts.out {
            save_png(&out.join(file_name(f)), &res.x)?;
            if opts.emit_rain_layer {
                let map = RainMap::of(&res.r);
                let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                save_png(&out.join(format!("{stem}_rain.png")), &map.apply(&res.r))?;
                rep.rain_min = Some(map.min);
                rep.rain_max = Some(map.max);
            }
        }
        Ok(rep)
    });
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        let r = r?;
        writeln!(report, "{}", serde_json::to_string(&r).expect("report serializes"))?;
        reports.push(r);
    }
    Ok(reports)
}

/// RDE of every input; no images are written.
pub fn rde(
    model: &Model,
    inputs: &[PathBuf],
    iterations: usize,
    jobs: usize,
    report: &mut dyn Write,
) -> Result<Vec<ImageReport>, CliError> {
    if !model.toggles().rw {
        return Err(CliError::Config("model has reweighting off and produces no RDE".into()));
    }
    let opts = DerainOptions {
        iterations,
        out: None,
        jobs,
        emit_rain_layer: false,
    };
    derain(model, inputs, &opts, report)
}

/// Writes `count` pairs and the manifest into `out`.
pub fn synth(out: &Path, seed: u64, section: &SynthSection) -> Result<Vec<ManifestEntry>, CliError> {
    if section.levels.is_empty() {
        return Err(CliError::Config("synth.levels is empty".into()));
    }
    if section.size == 0 {
        return Err(CliError::Config("synth.size must be positive".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Vec::with_capacity(section.count);
    for i in 0..section.count {
        let level = section.levels[i % section.levels.len()];
        let item = make_pair(format!("{i:05}"), level, section.size, rng.gen())?;
        save_png(&out.join(format!("{}_rain.png", item.id)), &item.rainy)?;
        save_png(&out.join(format!("{}_clean.png", item.id)), &item.clean)?;
        manifest.push(item.manifest());
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out.join(MANIFEST), text + "\n")?;
    Ok(manifest)
}

/// A corpus pair read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub entry: ManifestEntry,
    pub rainy: Tensor,
    pub clean: Tensor,
}

pub fn load_corpus(dir: &Path) -> Result<Vec<LoadedPair>, CliError> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if entries.is_empty() {
        return Err(CliError::Config(format!("{} lists no pairs", path.display())));
    }
    entries
        .into_iter()
        .map(|entry| {
            let rainy = load_png(&dir.join(format!("{}_rain.png", entry.id)))?;
            let clean = load_png(&dir.join(format!("{}_clean.png", entry.id)))?;
            Ok(LoadedPair { entry, rainy, clean })
        })
        .collect()
}

/// Paths written by [`train`].
pub struct TrainOutputs {
    pub stage1: PathBuf,
    pub stage2: PathBuf,
    pub log: PathBuf,
    pub final_loss: f64,
}

pub fn initial_model(section: &TrainSection, seed: u64) -> Result<Model, CliError> {
    let toggles = section.toggles.unwrap_or_else(Toggles::plain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match section.arch {
        Arch::Code => Model::Code(ModelParams::init(
            section.code.unwrap_or_else(CodeHyper::desk),
            toggles,
            &mut rng,
        )?),
        Arch::Mcode => Model::MultiScale(MsModelParams::init(
            section.mcode.unwrap_or_else(MsHyper::desk),
            toggles,
            &mut rng,
        )?),
    })
}

/// Two-stage training on a `synth` corpus. Writes `stage1.cmdl`,
/// `stage2.cmdl` and `train_log.jsonl` into `out`.
pub fn train(section: &TrainSection, out: &Path) -> Result<TrainOutputs, CliError> {
    let Some(corpus_dir) = &section.corpus else {
        return Err(CliError::Config("train.corpus is not set".into()));
    };
    if !corpus_dir.is_dir() {
        return Err(CliError::Config(format!("corpus {} is not a directory", corpus_dir.display())));
    }
    let cfg: &TrainConfig = &section.schedule;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let pairs: Vec<Pair> = load_corpus(corpus_dir)?
        .into_iter()
        .map(|p| Pair {
            rainy: p.rainy,
            clean: p.clean,
        })
        .collect();
    let init = initial_model(section, cfg.seed)?;
    std::fs::create_dir_all(out)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let mut io_err = None;
    let mut on_step = |r: &LogRecord| {
        if io_err.is_none() {
            if let Err(e) = writeln!(log, "{}", serde_json::to_string(r).expect("record serializes")) {
                io_err = Some(e);
            }
        }
    };
    let res = train_two_stage(init, &pairs, cfg, &mut on_step)?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    let stage1 = out.join("stage1.cmdl");
    let stage2 = out.join("stage2.cmdl");
    save_model(&res.plain, &stage1)?;
    save_model(&res.finetuned, &stage2)?;
    Ok(TrainOutputs {
        stage1,
        stage2,
        log: log_path,
        final_loss: res.log.last().map_or(f64::NAN, |r| r.loss),
    })
}

/// One row of the evaluation table.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub level: String,
    pub psnr_rainy: f64,
    pub ssim_rainy: f64,
    pub psnr_derained: f64,
    pub ssim_derained: f64,
    pub rde: Option<f64>,
}

/// PSNR/SSIM on luma before and after deraining, one row per pair plus a
/// final `mean` row.
pub fn eval(
    model: &Model,
    corpus: &[LoadedPair],
    iterations: usize,
    jobs: usize,
    table: &mut dyn Write,
) -> Result<Vec<EvalRow>, CliError> {
    if corpus.is_empty() {
        return Err(CliError::Config("no pairs to evaluate".into()));
    }
    let rows = ordered_map(corpus, jobs, |p| -> Result<EvalRow, CliError> {
        let res = model.derain_with(&p.rainy, iterations)?;
        let x = codenet::synth::quantize8(&res.x);
        Ok(EvalRow {
            id: p.entry.id.clone(),
            level: p.entry.level.name().to_string(),
            psnr_rainy: psnr(&p.rainy, &p.clean, true)?,
            ssim_rainy: ssim(&p.rainy, &p.clean)?,
            psnr_derained: psnr(&x, &p.clean, true)?,
            ssim_derained: ssim(&x, &p.clean)?,
            rde: res.rde,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let rdes: Option<Vec<f64>> = rows.iter().map(|r| r.rde).collect();
    let summary = EvalRow {
        id: "mean".into(),
        level: "all".into(),
        psnr_rainy: mean(|r| r.psnr_rainy),
        ssim_rainy: mean(|r| r.ssim_rainy),
        psnr_derained: mean(|r| r.psnr_derained),
        ssim_derained: mean(|r| r.ssim_derained),
        rde: rdes.map(|v| v.iter().sum::<f64>() / n),
    };
    let mut w = csv::Writer::from_writer(table);
    for r in rows.iter().chain(std::iter::once(&summary)) {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut rows = rows;
    rows.push(summary);
    Ok(rows)
}

/// One row of the runtime sweep.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BenchRow {
    #[serde(rename = "T")]
    pub t: usize,
    pub psnr: f64,
    pub ms_per_image: f64,
    /// Whether `T` exceeds the trained count; such rows are report-only.
    pub beyond_trained: bool,
}

/// Mean luma PSNR and median-of-repeats runtime per image for each `T`.
pub fn bench(
    model: &Model,
    corpus: &[LoadedPair],
    section: &BenchSection,
    table: &mut dyn Write,
) -> Result<Vec<BenchRow>, CliError> {
    if corpus.is_empty() {
        return Err(CliError::Config("no pairs to benchmark".into()));
    }
    if section.t_values.is_empty() || section.t_values.contains(&0) {
        return Err(CliError::Config("T values must be a non-empty list of positive counts".into()));
    }
    if section.repeats == 0 {
        return Err(CliError::Config("bench.repeats must be positive".into()));
    }
    let n = corpus.len() as f64;
    let mut rows = Vec::new();
    for &t in &section.t_values {
        let mut psnr_sum = 0.0;
        let mut times = Vec::with_capacity(section.repeats);
        for rep in 0..section.repeats {
            let start = Instant::now();
            for p in corpus {
                let res = model.derain_with(&p.rainy, t)?;
                if rep == 0 {
                    psnr_sum += psnr(&codenet::synth::quantize8(&res.x), &p.clean, true)?;
                }
            }
            times.push(start.elapsed().as_secs_f64() * 1e3 / n);
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            t,
            psnr: psnr_sum / n,
            ms_per_image: times[times.len() / 2],
            beyond_trained: t > model.iterations(),
        });
    }
    let mut w = csv::Writer::from_writer(table);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

