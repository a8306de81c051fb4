use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use camo_core::dataset::{self, io as dio, LabelMode, LabeledImage, SynthConfig};
use camo_core::detector::{self, io as wio, DetectParams, DetectorConfig, TrainHyper};
use camo_core::evaluator::{self, EvalParams, SweepEntry, SweepOptions};
use camo_core::kv::KeyValues;
use camo_core::patch_trainer::{self, PatchConfig};
use camo_core::patcher::{apply_patches_with, ApplyConfig, Patch};
use camo_core::ClassMap;

use crate::manifest::Recorder;
use crate::{Command, DataArg};

pub const PATCH_PNG: &str = "patch.png";
pub const PATCH_CFG: &str = "config.cfg";

fn write(path: &Path, text: &str, rec: &mut Recorder) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    rec.output(path);
    Ok(())
}

fn load(data: &DataArg, rec: &mut Recorder) -> Result<(ClassMap, Vec<LabeledImage>)> {
    rec.input(&data.data);
    dio::load_split(&data.data, data.split.as_deref())
        .with_context(|| format!("loading dataset {}", data.data.display()))
}

fn history_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

/// Trained patches under `dir`: either `dir` itself or each subdirectory
/// holding `config.cfg` and `patch.png`, in name order.
pub fn load_library(dir: &Path) -> Result<Vec<(PatchConfig, Patch)>> {
    let read_one = |d: &Path| -> Result<(PatchConfig, Patch)> {
        let cfg = PatchConfig::read(&d.join(PATCH_CFG))?;
        let mut patch = Patch::load_png(&d.join(PATCH_PNG))?;
        patch.name = cfg.name.clone();
        Ok((cfg, patch))
    };
    if dir.join(PATCH_CFG).exists() {
        return Ok(vec![read_one(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading patch library {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(PATCH_CFG).exists())
        .collect();
    subdirs.sort();
    ensure!(!subdirs.is_empty(), "no patches found under {}", dir.display());
    subdirs.iter().map(|d| read_one(d)).collect()
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { n, seed, out, split, config } => {
            let mut rec = Recorder::new("synth", Some(seed));
            let cfg = match &config {
                Some(p) => {
                    rec.input(p);
                    SynthConfig::from_kv(&KeyValues::read(p)?)
                        .with_context(|| format!("synthesis config {}", p.display()))?
                }
                None => SynthConfig::default(),
            };
            rec.config(cfg.to_kv().to_text());
            let data = dataset::synth_dataset(n, seed, &cfg)?;
            dio::save_split(&out, &cfg.classes, &split, &data)?;
            rec.output(&out.join(dio::MANIFEST));
            info!("wrote {n} synthetic images to {}", out.display());
            rec.finish(&out)
        }
        Command::Tile { data, window, overlap, out } => {
            let mut rec = Recorder::new("tile", None);
            rec.config(format!("window = {window}\noverlap = {overlap}\n"));
            let (classes, samples) = load(&data, &mut rec)?;
            let mut tiles = Vec::new();
            let mut padded = 0;
            for s in &samples {
                for t in dataset::tile(s, window, overlap)? {
                    padded += usize::from(t.padded);
                    tiles.push(t.sample);
                }
            }
            if padded > 0 {
                warn!("{padded} tiles were zero-padded (source smaller than the window)");
            }
            let split = data.split.as_deref().unwrap_or("all");
            dio::save_split(&out, &classes, split, &tiles)?;
            rec.output(&out.join(dio::MANIFEST));
            info!("{} images -> {} tiles", samples.len(), tiles.len());
            rec.finish(&out)
        }
        Command::Stats { data, out } => {
            let mut rec = Recorder::new("stats", None);
            let (classes, samples) = load(&data, &mut rec)?;
            let st = dataset::stats(&samples, classes.len());
            write(&out.join("stats.csv"), &st.to_csv(&classes), &mut rec)?;
            rec.finish(&out)
        }
        Command::TrainDetector { data, config, seed, epochs, lr, out } => {
            let mut rec = Recorder::new("train-detector", Some(seed));
            let (classes, samples) = load(&data, &mut rec)?;
            let cfg = match &config {
                Some(p) => {
                    rec.input(p);
                    DetectorConfig::from_kv(&KeyValues::read(p)?)
                        .with_context(|| format!("detector config {}", p.display()))?
                }
                None => DetectorConfig {
                    num_classes: classes.len(),
                    ..DetectorConfig::default()
                },
            };
            let hyper = TrainHyper { epochs, lr, seed, ..TrainHyper::default() };
            rec.config(format!("{}{hyper:?}\n", cfg.fingerprint()));
            let outcome = detector::train_detector(&samples, &cfg, &hyper)?;
            let wpath = out.join("weights.bin");
            wio::save_weights(&outcome.weights, &wpath)?;
            rec.output(&wpath);
            write(&out.join("loss.csv"), &history_csv(&outcome.history), &mut rec)?;
            rec.finish(&out)
        }
        Command::TrainPatch { config, weights, data, split, seed, smoke_epochs, max_images, out } => {
            let mut rec = Recorder::new("train-patch", Some(seed));
            rec.input(&config);
            let mut cfg = PatchConfig::read(&config)?;
            cfg.seed = seed;
            let wpath = weights
                .or_else(|| cfg.weights.clone())
                .with_context(|| format!("no detector weights given (flag or `weights` in {})", config.display()))?;
            let dpath = data
                .or_else(|| cfg.data.clone())
                .with_context(|| format!("no dataset given (flag or `data` in {})", config.display()))?;
            let w = wio::load_weights(&wpath)?;
            rec.input(&wpath);
            let (_, mut samples) = load(&DataArg { data: dpath, split }, &mut rec)?;
            if let Some(m) = max_images {
                samples.truncate(m);
            }
            let mut snapshot = cfg.to_kv();
            if let Some(e) = smoke_epochs {
                snapshot.set("smoke_epochs", e);
            }
            rec.config(snapshot.to_text());
            let before = w.clone();
            let outcome = match smoke_epochs {
                Some(e) => patch_trainer::train_patch_smoke(&w, &samples, &cfg, e)?,
                None => patch_trainer::train_patch(&w, &samples, &cfg)?,
            };
            ensure!(before == w, "detector weights changed during patch training");
            let ppath = out.join(PATCH_PNG);
            outcome.patch.save_png(&ppath)?;
            rec.output(&ppath);
            write(&out.join(PATCH_CFG), &cfg.to_kv().to_text(), &mut rec)?;
            write(&out.join("history.csv"), &patch_trainer::history_csv(&outcome.history), &mut rec)?;
            rec.finish(&out)
        }
        Command::TrainPatchDetector { data, patch_dir, label_mode, sizes, alpha, seed, epochs, out } => {
            let mut rec = Recorder::new("train-patch-detector", Some(seed));
            let mode: LabelMode = label_mode.parse()?;
            ensure!(!sizes.is_empty(), "--sizes must list at least one patch size");
            let (_, samples) = load(&data, &mut rec)?;
            rec.input(&patch_dir);
            let library = load_library(&patch_dir)?;
            let patches: Vec<Patch> = library.into_iter().map(|(_, p)| p).collect();
            let k = match mode {
                LabelMode::SingleClass => 1,
                LabelMode::PerPatchClass => patches.len(),
            };
            let mut overlaid = Vec::with_capacity(samples.len());
            for (j, &size) in sizes.iter().enumerate() {
                let part: Vec<LabeledImage> = samples.iter().skip(j).step_by(sizes.len()).cloned().collect();
                let apply = ApplyConfig {
                    size_fraction: size,
                    alpha,
                    seed: seed.wrapping_add(j as u64),
                    ..ApplyConfig::default()
                };
                overlaid.extend(dataset::overlay_patch_dataset(&part, &patches, &apply, mode)?);
            }
            let cfg = DetectorConfig::patch_detector(k);
            let hyper = TrainHyper { epochs, seed, ..TrainHyper::default() };
            rec.config(format!(
                "{}label_mode = {label_mode}\nsizes = {sizes:?}\nalpha = {alpha}\n{hyper:?}\n",
                cfg.fingerprint()
            ));
            let outcome = detector::train_detector(&overlaid, &cfg, &hyper)?;
            let wpath = out.join("weights.bin");
            wio::save_weights(&outcome.weights, &wpath)?;
            rec.output(&wpath);
            write(&out.join("loss.csv"), &history_csv(&outcome.history), &mut rec)?;
            info!("patch detector with {k} classes trained on {} images", overlaid.len());
            rec.finish(&out)
        }
        Command::Apply { data, patch, size, alpha, seed, out } => {
            let mut rec = Recorder::new("apply", Some(seed));
            let (classes, samples) = load(&data, &mut rec)?;
            rec.input(&patch);
            let p = Patch::load_png(&patch)?;
            let apply = ApplyConfig { size_fraction: size, alpha, seed, ..ApplyConfig::default() };
            rec.config(serde_json::to_string_pretty(&apply)?);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut patched = Vec::with_capacity(samples.len());
            for s in &samples {
                let targets: BTreeSet<usize> = s.boxes.iter().map(|b| b.class_id).collect();
                let (img, log) = apply_patches_with(&s.image, &s.boxes, &p, &apply, &targets, &mut rng)?;
                write(&out.join("jitter").join(format!("{}.json", s.source)), &log.to_json(), &mut rec)?;
                patched.push(LabeledImage { image: img, boxes: s.boxes.clone(), source: s.source.clone() });
            }
            let split = data.split.as_deref().unwrap_or("all");
            dio::save_split(&out, &classes, split, &patched)?;
            rec.output(&out.join(dio::MANIFEST));
            rec.finish(&out)
        }
        Command::Eval { data, weights, predictions, iou, n_boot, seed, out } => {
            let mut rec = Recorder::new("eval", Some(seed));
            let (classes, samples) = load(&data, &mut rec)?;
            let preds = match (&weights, &predictions) {
                (Some(w), None) => {
                    rec.input(w);
                    let w = wio::load_weights(w)?;
                    detector::predict(&w, &samples, DetectParams::default())?
                }
                (None, Some(dir)) => {
                    rec.input(dir);
                    samples
                        .iter()
                        .map(|s| {
                            let p = dir.join(format!("{}.txt", s.source));
                            Ok(evaluator::as_detections(&dio::read_labels(&p)?))
                        })
                        .collect::<Result<_>>()?
                }
                _ => bail!("pass exactly one of --weights or --predictions"),
            };
            let truths: Vec<_> = samples.iter().map(|s| s.boxes.clone()).collect();
            let params = EvalParams { iou_thresh: iou, n_boot, seed, ..EvalParams::new(classes.len()) };
            rec.config(format!("{params:?}"));
            let report = evaluator::f1_report(&preds, &truths, &params)?;
            info!("mF1 {:.4} ± {:.4}", report.mf1, report.mf1_sigma);
            write(&out.join("eval.csv"), &report.to_csv(classes.names()), &mut rec)?;
            rec.finish(&out)
        }
        Command::Sweep { data, detector, patch_detector, patch_dir, n_boot, seed, out } => {
            let mut rec = Recorder::new("sweep", Some(seed));
            let (classes, samples) = load(&data, &mut rec)?;
            rec.input(&detector);
            rec.input(&patch_detector);
            rec.input(&patch_dir);
            let det = wio::load_weights(&detector)?;
            let pdet = wio::load_weights(&patch_detector)?;
            let library: Vec<SweepEntry> = load_library(&patch_dir)?
                .into_iter()
                .enumerate()
                .map(|(i, (cfg, patch))| SweepEntry {
                    patch,
                    apply: ApplyConfig {
                        size_fraction: cfg.size_fraction,
                        alpha: cfg.alpha,
                        noise_amp: cfg.noise_amp,
                        seed: seed.wrapping_add(i as u64),
                        ..ApplyConfig::default()
                    },
                })
                .collect();
            let opts = SweepOptions { n_boot, seed, ..SweepOptions::default() };
            rec.config(format!("{opts:?}"));
            let res = evaluator::run_sweep(&det, &pdet, &library, &samples, &opts)?;
            write(&out.join("sweep.csv"), &evaluator::sweep_csv(&res.rows), &mut rec)?;
            write(&out.join("pearson.csv"), &res.summary.to_csv(), &mut rec)?;
            write(&out.join("baseline.csv"), &res.baseline.to_csv(classes.names()), &mut rec)?;
            let broken: Vec<&str> = res
                .rows
                .iter()
                .filter(|r| !r.score_invariant_holds())
                .map(|r| r.name.as_str())
                .collect();
            ensure!(broken.is_empty(), "detection_score is not the rowwise max for {broken:?}");
            info!("baseline mF1 {:.4}; {} patches scored", res.baseline.mf1, res.rows.len());
            rec.finish(&out)
        }
        Command::Report { sweep, baseline, out } => {
            let mut rec = Recorder::new("report", None);
            rec.input(&sweep);
            let text = std::fs::read_to_string(&sweep).with_context(|| format!("reading {}", sweep.display()))?;
            let rows = evaluator::parse_sweep_csv(&text).with_context(|| format!("parsing {}", sweep.display()))?;
            rec.config(format!("baseline = {baseline}\n"));
            write(&out.join("bars.svg"), &evaluator::bar_chart_svg(&rows, baseline), &mut rec)?;
            write(&out.join("size.svg"), &evaluator::scatter_svg(&rows, "size fraction", |r| r.size_fraction), &mut rec)?;
            write(&out.join("alpha.svg"), &evaluator::scatter_svg(&rows, "alpha", |r| r.alpha), &mut rec)?;
            rec.finish(&out)
        }
    }
}
