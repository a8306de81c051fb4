use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DetectorConfig;
use super::loss::detection_loss;
use super::model::{forward_graph, DetectorWeights};
use crate::dataset::LabeledImage;
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};

/// SGD hyperparameters. `epochs`, `lr` and `momentum` default to 80, 0.001
/// and 0.9.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Random horizontal/vertical flips (overhead imagery has no canonical up).
    pub flip: bool,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 80,
            lr: 0.001,
            momentum: 0.9,
            batch_size: 4,
            flip: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: DetectorWeights,
    /// Mean per-image loss of each epoch.
    pub history: Vec<f64>,
}

/// Mirrors an image and its labels.
pub fn flip_sample(sample: &LabeledImage, horizontal: bool, vertical: bool) -> LabeledImage {
    if !horizontal && !vertical {
        return sample.clone();
    }
    let s = sample.image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = sample.image.data();
    let image = Tensor::from_fn(vec![c, h, w], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = i / (w * h);
        let sx = if horizontal { w - 1 - x } else { x };
        let sy = if vertical { h - 1 - y } else { y };
        src[(ch * h + sy) * w + sx]
    });
    let boxes = sample
        .boxes
        .iter()
        .map(|b| {
            let mut b = *b;
            if horizontal {
                b.cx = 1.0 - b.cx;
            }
            if vertical {
                b.cy = 1.0 - b.cy;
            }
            b
        })
        .collect();
    LabeledImage {
        image,
        boxes,
        source: sample.source.clone(),
    }
}

/// Loss and parameter gradients for one image.
pub fn image_gradients(
    weights: &DetectorWeights,
    sample: &LabeledImage,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::<f32>::new();
    let params = weights.register(&mut g, true);
    let x = g.constant(sample.image.clone());
    let pred = forward_graph(&weights.config, &mut g, &params, x)?;
    let loss = detection_loss(&mut g, pred, &sample.boxes, &weights.config)?;
    g.backward(loss.total)?;
    let grads = params
        .iter()
        .zip(&weights.tensors)
        .map(|(&p, (_, t))| {
            g.grad(p)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    Ok((g.value(loss.total).item() as f64, grads))
}

/// Trains a detector from seeded initial weights with momentum SGD.
pub fn train_detector(
    dataset: &[LabeledImage],
    config: &DetectorConfig,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    let weights = DetectorWeights::init(config, hyper.seed)?;
    train_from(weights, dataset, hyper)
}

/// Continues training from the given weights.
pub fn train_from(
    mut weights: DetectorWeights,
    dataset: &[LabeledImage],
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train a detector on an empty dataset".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    let k = weights.config.num_classes;
    if let Some(bad) = dataset
        .iter()
        .find(|s| s.boxes.iter().any(|b| b.class_id >= k))
    {
        return Err(Error::Usage(format!(
            "{} has labels outside the {k} configured classes",
            bad.source
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_0f_d47a);
    let mut velocity: Vec<Vec<f32>> = weights
        .tensors
        .iter()
        .map(|(_, t)| vec![0.0; t.len()])
        .collect();
    let lr = hyper.lr as f32;
    let mu = hyper.momentum as f32;
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut acc: Vec<Vec<f32>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            for &i in batch {
                let (fh, fv) = if hyper.flip {
                    (rng.gen_bool(0.5), rng.gen_bool(0.5))
                } else {
                    (false, false)
                };
                let sample = flip_sample(&dataset[i], fh, fv);
                let (loss, grads) = image_gradients(&weights, &sample)?;
                epoch_loss += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for ((v, a), (_, w)) in velocity.iter_mut().zip(&acc).zip(weights.tensors.iter_mut()) {
                for ((vi, ai), wi) in v.iter_mut().zip(a).zip(w.data_mut()) {
                    *vi = mu * *vi + ai * inv;
                    *wi -= lr * *vi;
                }
            }
        }
        let mean = epoch_loss / dataset.len() as f64;
        debug!("detector epoch {epoch}: loss {mean:.4}");
        history.push(mean);
    }
    if let Some(last) = history.last() {
        info!("detector trained {} epochs, final loss {last:.4}", hyper.epochs);
    }
    Ok(TrainOutcome { weights, history })
}
