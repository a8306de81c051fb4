//! Optimizes patch pixels against a frozen detector.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BoundingBox;
use crate::dataset::LabeledImage;
use crate::detector::{forward_graph, DetectorWeights, CH_CLS, CH_OBJ};
use crate::diffcore::{Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::imageio;
use crate::kv::KeyValues;
use crate::patcher::{render_placements, sample_jitter, ApplyConfig, Patch, PATCH_SIZE};

/// Fewest epochs a configured run may request.
pub const MIN_EPOCHS: usize = 40;

/// Anchors at or below this objectness are ignored by the class loss.
pub const CLS_OBJ_GATE: f64 = 0.3;

const TV_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Obj,
    Cls,
    ObjXCls,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "obj" => Ok(Self::Obj),
            "cls" => Ok(Self::Cls),
            "obj_x_cls" | "obj*cls" | "obj * cls" => Ok(Self::ObjXCls),
            other => Err(Error::Parameter(format!(
                "unknown loss `{other}` (expected obj, cls or obj_x_cls)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Obj => "obj",
            Self::Cls => "cls",
            Self::ObjXCls => "obj_x_cls",
        })
    }
}

/// How per-anchor scores are reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Max,
    Mean,
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Parameter(format!("unknown reduction `{other}`"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Max => "max",
            Self::Mean => "mean",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PatchInit {
    Random,
    GrayFlat,
    Legacy(PathBuf),
}

impl FromStr for PatchInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random" => Ok(Self::Random),
            "gray_flat" | "gray" => Ok(Self::GrayFlat),
            other => match other.strip_prefix("legacy:") {
                Some(p) => Ok(Self::Legacy(PathBuf::from(p.trim()))),
                None => Err(Error::Parameter(format!(
                    "unknown init `{other}` (expected random, gray_flat or legacy:<png>)"
                ))),
            },
        }
    }
}

impl std::fmt::Display for PatchInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Random => f.write_str("random"),
            Self::GrayFlat => f.write_str("gray_flat"),
            Self::Legacy(p) => write!(f, "legacy:{}", p.display()),
        }
    }
}

/// One patch experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchConfig {
    pub name: String,
    pub loss_kind: LossKind,
    pub size_fraction: f64,
    pub alpha: f64,
    pub grayscale: bool,
    pub init: PatchInit,
    pub noise_amp: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Step size is multiplied by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub tv_weight: f64,
    pub nps_weight: f64,
    pub palette: Vec<[f64; 3]>,
    pub obj_reduction: Reduction,
    pub patch_size: usize,
    pub seed: u64,
    /// Detector weights and dataset used by the command-line runner.
    pub weights: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            name: "patch".into(),
            loss_kind: LossKind::Obj,
            size_fraction: 0.2,
            alpha: 1.0,
            grayscale: false,
            init: PatchInit::Random,
            noise_amp: 0.1,
            epochs: MIN_EPOCHS,
            batch_size: 4,
            lr: 10.0,
            lr_decay: 0.5,
            lr_decay_every: 20,
            tv_weight: 0.0,
            nps_weight: 0.0,
            palette: Vec::new(),
            obj_reduction: Reduction::Max,
            patch_size: PATCH_SIZE,
            seed: 0,
            weights: None,
            data: None,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < MIN_EPOCHS {
            return Err(Error::Parameter(format!(
                "epochs {} is below the minimum of {MIN_EPOCHS}",
                self.epochs
            )));
        }
        self.validate_budget_free()
    }

    /// Every check except the epoch floor.
    fn validate_budget_free(&self) -> Result<()> {
        if !(self.size_fraction > 0.0 && self.size_fraction <= 1.0) {
            return Err(Error::Parameter(format!(
                "size_fraction {} must be in (0, 1]",
                self.size_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha {} must be in [0, 1]", self.alpha)));
        }
        if self.batch_size == 0 || self.patch_size < 2 || self.lr_decay_every == 0 {
            return Err(Error::Parameter(
                "batch_size and lr_decay_every must be >= 1 and patch_size >= 2".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Parameter("lr and lr_decay must be positive".into()));
        }
        if self.tv_weight < 0.0 || self.nps_weight < 0.0 {
            return Err(Error::Parameter("regularizer weights must be >= 0".into()));
        }
        if self.nps_weight > 0.0 && self.palette.is_empty() {
            return Err(Error::Parameter("nps_weight > 0 needs a palette".into()));
        }
        Ok(())
    }

    /// Placement settings used while training.
    pub fn apply_config(&self) -> ApplyConfig {
        ApplyConfig {
            size_fraction: self.size_fraction,
            alpha: self.alpha,
            noise_amp: self.noise_amp,
            seed: self.seed,
            ..ApplyConfig::default()
        }
    }

    /// Missing keys take their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let palette = match kv.get_str("palette") {
            None => d.palette,
            Some(s) => parse_palette(s)?,
        };
        let cfg = Self {
            name: kv.get_str("name").map_or(d.name, str::to_string),
            loss_kind: kv.get("loss")?.unwrap_or(d.loss_kind),
            size_fraction: kv.get("size")?.unwrap_or(d.size_fraction),
            alpha: kv.get("alpha")?.unwrap_or(d.alpha),
            grayscale: kv.get("gray")?.unwrap_or(d.grayscale),
            init: kv.get("init")?.unwrap_or(d.init),
            noise_amp: kv.get("noise")?.unwrap_or(d.noise_amp),
            epochs: kv.get("epochs")?.unwrap_or(d.epochs),
            batch_size: kv.get("batch_size")?.unwrap_or(d.batch_size),
            lr: kv.get("lr")?.unwrap_or(d.lr),
            lr_decay: kv.get("lr_decay")?.unwrap_or(d.lr_decay),
            lr_decay_every: kv.get("lr_decay_every")?.unwrap_or(d.lr_decay_every),
            tv_weight: kv.get("tv_weight")?.unwrap_or(d.tv_weight),
            nps_weight: kv.get("nps_weight")?.unwrap_or(d.nps_weight),
            palette,
            obj_reduction: kv.get("obj_reduction")?.unwrap_or(d.obj_reduction),
            patch_size: kv.get("patch_size")?.unwrap_or(d.patch_size),
            seed: kv.get("seed")?.unwrap_or(d.seed),
            weights: kv.get_str("weights").map(PathBuf::from),
            data: kv.get_str("data").map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let kv = KeyValues::read(path)?;
        Self::from_kv(&kv).map_err(|e| Error::input(path, e))
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("name", &self.name);
        kv.set("loss", self.loss_kind);
        kv.set("size", self.size_fraction);
        kv.set("alpha", self.alpha);
        kv.set("gray", self.grayscale);
        kv.set("init", &self.init);
        kv.set("noise", self.noise_amp);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("lr_decay", self.lr_decay);
        kv.set("lr_decay_every", self.lr_decay_every);
        kv.set("tv_weight", self.tv_weight);
        kv.set("nps_weight", self.nps_weight);
        if !self.palette.is_empty() {
            let p: Vec<String> = self
                .palette
                .iter()
                .map(|c| format!("{},{},{}", c[0], c[1], c[2]))
                .collect();
            kv.set("palette", p.join(";"));
        }
        kv.set("obj_reduction", self.obj_reduction);
        kv.set("patch_size", self.patch_size);
        kv.set("seed", self.seed);
        if let Some(w) = &self.weights {
            kv.set("weights", w.display());
        }
        if let Some(d) = &self.data {
            kv.set("data", d.display());
        }
        kv
    }
}

/// `r,g,b;r,g,b;...` with components in `[0, 1]`.
fn parse_palette(s: &str) -> Result<Vec<[f64; 3]>> {
    s.split(';')
        .filter(|c| !c.trim().is_empty())
        .map(|c| {
            let v: Vec<f64> = c
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parameter(format!("palette color `{c}`: {e}")))?;
            match v[..] {
                [r, g, b] => Ok([r, g, b]),
                _ => Err(Error::Parameter(format!("palette color `{c}` needs 3 components"))),
            }
        })
        .collect()
}

pub fn init_patch(cfg: &PatchConfig) -> Result<Patch> {
    let p = cfg.patch_size;
    let pixels = match &cfg.init {
        PatchInit::GrayFlat => Tensor::full(vec![3, p, p], 0.5),
        PatchInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Tensor::from_fn(vec![3, p, p], |_| rng.gen::<f32>())
        }
        PatchInit::Legacy(path) => {
            let img = imageio::read_png(path)?;
            imageio::resize_bilinear(&img, p, p)
        }
    };
    let mut patch = Patch::new(cfg.name.clone(), pixels)?;
    if cfg.grayscale {
        patch.project_grayscale();
    }
    Ok(patch)
}

/// Index of the truth box whose region contains the center of grid cell
/// `(row, col)`; the first listed box wins.
fn covering_truth(truths: &[BoundingBox], row: usize, col: usize, s: usize) -> Option<&BoundingBox> {
    let cx = (col as f64 + 0.5) / s as f64;
    let cy = (row as f64 + 0.5) / s as f64;
    truths.iter().find(|b| {
        let (x0, y0, x1, y1) = b.corners();
        cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1
    })
}

/// Scalar attack objective on a `[S,S,B,5+K]` prediction node. The class
/// terms use the ground-truth class of the truth box covering each anchor's
/// cell; with no qualifying anchor they contribute a constant 0.
pub fn adversarial_loss<T: Real>(
    g: &mut Graph<T>,
    pred: NodeId,
    kind: LossKind,
    reduction: Reduction,
    truths: &[BoundingBox],
) -> Result<NodeId> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 4 || shape[3] <= CH_CLS {
        return Err(Error::dim("prediction", format!("expected [S,S,B,5+K], got {shape:?}")));
    }
    let (s, b, c) = (shape[0], shape[2], shape[3]);
    let k = c - CH_CLS;
    let reduce = |g: &mut Graph<T>, x: NodeId| match reduction {
        Reduction::Max => g.max(x),
        Reduction::Mean => Ok(g.mean(x)),
    };
    if kind == LossKind::Obj {
        let idx = (0..s * s * b).map(|a| a * c + CH_OBJ).collect();
        let logits = g.gather(pred, idx)?;
        let p = g.sigmoid(logits);
        return reduce(g, p);
    }
    let values = g.value(pred).data().to_vec();
    let mut anchors = Vec::new();
    let mut classes = Vec::new();
    for row in 0..s {
        for col in 0..s {
            let Some(t) = covering_truth(truths, row, col, s) else {
                continue;
            };
            if t.class_id >= k {
                return Err(Error::Usage(format!(
                    "truth class {} outside the detector's {k} classes",
                    t.class_id
                )));
            }
            for a in 0..b {
                let base = ((row * s + col) * b + a) * c;
                let obj = crate::diffcore::sigmoid(values[base + CH_OBJ].to_f64_lossy());
                if kind == LossKind::Cls && obj <= CLS_OBJ_GATE {
                    continue;
                }
                anchors.push(base);
                classes.push(t.class_id);
            }
        }
    }
    if anchors.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let n = anchors.len();
    let cls_idx = anchors
        .iter()
        .flat_map(|&base| (0..k).map(move |j| base + CH_CLS + j))
        .collect();
    let logits = g.gather(pred, cls_idx)?;
    let logits = g.reshape(logits, vec![n, k])?;
    let logp = g.log_softmax_last(logits)?;
    let pick = classes.iter().enumerate().map(|(i, &cl)| i * k + cl).collect();
    let logp_gt = g.gather(logp, pick)?;
    let p_gt = g.exp(logp_gt);
    match kind {
        LossKind::Cls => Ok(g.mean(p_gt)),
        _ => {
            let obj_logits = g.gather(pred, anchors.iter().map(|&a| a + CH_OBJ).collect())?;
            let obj = g.sigmoid(obj_logits);
            let prod = g.mul(obj, p_gt)?;
            reduce(g, prod)
        }
    }
}

/// Mean smoothed absolute difference over horizontally and vertically
/// adjacent pixel pairs of a `[3,P,P]` patch node.
pub fn total_variation<T: Real>(g: &mut Graph<T>, patch: NodeId) -> Result<NodeId> {
    let s = g.shape(patch).to_vec();
    if s.len() != 3 || s[1] < 2 || s[2] < 2 {
        return Err(Error::dim("patch", format!("expected [C,P,P] with P >= 2, got {s:?}")));
    }
    let (ch, h, w) = (s[0], s[1], s[2]);
    let mut left = Vec::new();
    let mut right = Vec::new();
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let i = (c * h + y) * w + x;
                if x + 1 < w {
                    left.push(i);
                    right.push(i + 1);
                }
                if y + 1 < h {
                    left.push(i);
                    right.push(i + w);
                }
            }
        }
    }
    let a = g.gather(patch, left)?;
    let b = g.gather(patch, right)?;
    let d = g.sub(a, b)?;
    let d = g.square(d);
    let d = g.add_scalar(d, T::from_f64_lossy(TV_EPS));
    let d = g.sqrt(d);
    Ok(g.mean(d))
}

/// Non-printability score: mean over pixels of the squared distance to the
/// nearest palette color.
pub fn nps<T: Real>(g: &mut Graph<T>, patch: NodeId, palette: &[[f64; 3]]) -> Result<NodeId> {
    if palette.is_empty() {
        return Err(Error::Parameter("palette must not be empty".into()));
    }
    let s = g.shape(patch).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("patch", format!("expected [3,P,P], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let m = palette.len();
    let mut dist = None;
    for c in 0..3 {
        let idx = (0..plane)
            .flat_map(|i| std::iter::repeat(c * plane + i).take(m))
            .collect();
        let x = g.gather(patch, idx)?;
        let target = Tensor::from_fn(vec![plane * m], |i| T::from_f64_lossy(palette[i % m][c]));
        let target = g.constant(target);
        let d = g.sub(x, target)?;
        let d = g.square(d);
        dist = Some(match dist {
            None => d,
            Some(acc) => g.add(acc, d)?,
        });
    }
    let dist = g.reshape(dist.expect("three channels"), vec![plane, m])?;
    let nearest = g.min_last_axis(dist)?;
    Ok(g.mean(nearest))
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean adversarial loss over the epoch's images.
    pub adv_loss: f64,
    pub tv: f64,
    pub nps: f64,
    /// Mean norm of the adversarial gradient on the patch per step.
    pub adv_grad_norm: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,adv_loss,tv,nps,adv_grad_norm\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.lr, r.adv_loss, r.tv, r.nps, r.adv_grad_norm
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct PatchOutcome {
    /// Patch from the epoch with the lowest mean adversarial loss.
    pub patch: Patch,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Adversarial loss and its gradient on the patch for one image.
pub fn patch_gradient(
    weights: &DetectorWeights,
    params_cache: &[Tensor<f32>],
    sample: &LabeledImage,
    patch: &Patch,
    apply: &ApplyConfig,
    cfg: &PatchConfig,
    rng: &mut impl Rng,
) -> Result<(f64, Tensor<f32>)> {
    let targets: BTreeSet<usize> = sample.boxes.iter().map(|b| b.class_id).collect();
    let log = sample_jitter(&sample.boxes, apply, &targets, sample.size(), rng);
    let mut g = Graph::<f32>::new();
    let params: Vec<NodeId> = params_cache.iter().map(|t| g.constant(t.clone())).collect();
    let p = g.param(patch.pixels.clone());
    let x = g.constant(sample.image.clone());
    let x = render_placements(&mut g, x, p, &log, apply.alpha)?;
    let pred = forward_graph(&weights.config, &mut g, &params, x)?;
    let loss = adversarial_loss(&mut g, pred, cfg.loss_kind, cfg.obj_reduction, &sample.boxes)?;
    let value = g.value(loss).item() as f64;
    g.backward(loss)?;
    let grad = g
        .grad(p)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(patch.pixels.shape().to_vec()));
    Ok((value, grad))
}

/// Regularizer value and gradient on the patch.
fn regularizer_gradient(patch: &Patch, cfg: &PatchConfig) -> Result<(f64, f64, Tensor<f32>)> {
    let mut g = Graph::<f32>::new();
    let p = g.param(patch.pixels.clone());
    let tv = total_variation(&mut g, p)?;
    let tv_v = g.value(tv).item() as f64;
    let mut nps_v = 0.0;
    let mut total = g.scale(tv, cfg.tv_weight as f32);
    if !cfg.palette.is_empty() {
        let n = nps(&mut g, p, &cfg.palette)?;
        nps_v = g.value(n).item() as f64;
        let n = g.scale(n, cfg.nps_weight as f32);
        total = g.add(total, n)?;
    }
    g.backward(total)?;
    let grad = g.grad(p).cloned().expect("patch is a parameter");
    Ok((tv_v, nps_v, grad))
}

/// Trains with the configured epoch count (at least [`MIN_EPOCHS`]).
pub fn train_patch(
    weights: &DetectorWeights,
    dataset: &[LabeledImage],
    cfg: &PatchConfig,
) -> Result<PatchOutcome> {
    cfg.validate()?;
    run(weights, dataset, cfg, cfg.epochs)
}

/// Reduced-budget run for smoke tests; skips the epoch floor.
pub fn train_patch_smoke(
    weights: &DetectorWeights,
    dataset: &[LabeledImage],
    cfg: &PatchConfig,
    epochs: usize,
) -> Result<PatchOutcome> {
    cfg.validate_budget_free()?;
    run(weights, dataset, cfg, epochs.max(1))
}

fn run(
    weights: &DetectorWeights,
    dataset: &[LabeledImage],
    cfg: &PatchConfig,
    epochs: usize,
) -> Result<PatchOutcome> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train a patch on an empty dataset".into()));
    }
    weights.check_shapes().map_err(|e| {
        Error::Usage(format!("detector weights are unusable: {e}"))
    })?;
    let frozen = weights.tensors.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>();
    let frozen_alpha = cfg.alpha == 0.0;
    if frozen_alpha {
        warn!("patch `{}` has alpha 0: it is invisible and receives no gradient", cfg.name);
    }
    let apply = cfg.apply_config();
    let mut patch = init_patch(cfg)?;
    let mut best = (f64::INFINITY, patch.clone(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9a7c_4e11);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = cfg.lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32);
        order.shuffle(&mut rng);
        let start = patch.clone();
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0usize);
        let (mut tv, mut nps_v) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = vec![0f32; patch.pixels.len()];
            for &i in batch {
                let (l, grad) =
                    patch_gradient(weights, &frozen, &dataset[i], &patch, &apply, cfg, &mut rng)?;
                loss_sum += l;
                acc.iter_mut().zip(grad.data()).for_each(|(a, g)| *a += g);
            }
            let inv = 1.0 / batch.len() as f32;
            acc.iter_mut().for_each(|a| *a *= inv);
            norm_sum += acc.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
            steps += 1;
            let (t, n, reg) = regularizer_gradient(&patch, cfg)?;
            (tv, nps_v) = (t, n);
            if frozen_alpha {
                continue;
            }
            let step = lr as f32;
            for ((p, a), r) in patch.pixels.data_mut().iter_mut().zip(&acc).zip(reg.data()) {
                *p -= step * (a + r);
            }
            patch.clamp_unit();
            if cfg.grayscale {
                patch.project_grayscale();
            }
        }
        let adv_loss = loss_sum / dataset.len() as f64;
        // The epoch mean is measured while the patch moves; credit it to the
        // patch the epoch started from.
        if adv_loss < best.0 {
            best = (adv_loss, start, epoch);
        }
        debug!("patch `{}` epoch {epoch}: adv loss {adv_loss:.5}", cfg.name);
        history.push(EpochRecord {
            epoch,
            lr,
            adv_loss,
            tv,
            nps: nps_v,
            adv_grad_norm: norm_sum / steps as f64,
        });
    }
    info!(
        "patch `{}`: best epoch {} with adv loss {:.5}",
        cfg.name, best.2, best.0
    );
    let mut out = best.1;
    out.name = cfg.name.clone();
    Ok(PatchOutcome {
        patch: out,
        best_epoch: best.2,
        history,
    })
}
