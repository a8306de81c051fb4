use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DetectorConfig;
use crate::diffcore::{Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors of a detector, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorWeights {
    pub config: DetectorConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Raw detector output for one image, laid out `[S, S, B, 5 + K]`
/// (row, column, anchor, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct GridPrediction {
    pub raw: Tensor<f32>,
}

pub const CH_TX: usize = 0;
pub const CH_TY: usize = 1;
pub const CH_TW: usize = 2;
pub const CH_TH: usize = 3;
pub const CH_OBJ: usize = 4;
pub const CH_CLS: usize = 5;

impl GridPrediction {
    pub fn grid_size(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn num_anchors(&self) -> usize {
        self.raw.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.raw.shape()[3]
    }

    /// Flat index of channel `ch` of anchor `b` in cell `(row, col)`.
    pub fn offset(&self, row: usize, col: usize, b: usize, ch: usize) -> usize {
        ((row * self.grid_size() + col) * self.num_anchors() + b) * self.channels() + ch
    }

    pub fn get(&self, row: usize, col: usize, b: usize, ch: usize) -> f32 {
        self.raw.data()[self.offset(row, col, b, ch)]
    }
}

fn layer_shapes(cfg: &DetectorConfig) -> Vec<(String, Vec<usize>)> {
    let mut shapes = Vec::new();
    let mut c_in = 3;
    for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
        shapes.push((format!("conv{i}.weight"), vec![c_out, c_in, 3, 3]));
        shapes.push((format!("conv{i}.bias"), vec![c_out]));
        c_in = c_out;
    }
    let head = cfg.num_anchors() * cfg.channels_per_anchor();
    shapes.push(("head.weight".into(), vec![head, c_in, 1, 1]));
    shapes.push(("head.bias".into(), vec![head]));
    shapes
}

impl DetectorWeights {
    /// Kernels drawn from `uniform(-a, a)` with `a = sqrt(1 / fan_in)`;
    /// biases start at zero.
    pub fn init(config: &DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layer_shapes(config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                    let a = (1.0 / fan_in).sqrt();
                    Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
                } else {
                    Tensor::zeros(shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// All-zero weights; the network then outputs zero logits everywhere.
    pub fn zeros(config: &DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            tensors: layer_shapes(config)
                .into_iter()
                .map(|(n, s)| (n, Tensor::zeros(s)))
                .collect(),
        })
    }

    pub fn check_shapes(&self) -> Result<()> {
        let expected = layer_shapes(&self.config);
        if expected.len() != self.tensors.len() {
            return Err(Error::dim(
                "weights",
                format!("expected {} tensors, found {}", expected.len(), self.tensors.len()),
            ));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&self.tensors) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::dim(
                    n.clone(),
                    format!("expected {en} with shape {es:?}, found {n} {:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every tensor on the graph, in order.
    pub fn register<T: Real>(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|(_, t)| g.leaf(t.cast(), requires_grad))
            .collect()
    }

    /// Forward pass without gradient tracking.
    pub fn forward(&self, image: &Tensor<f32>) -> Result<GridPrediction> {
        let mut g = Graph::<f32>::new();
        let params = self.register(&mut g, false);
        let x = g.constant(image.clone());
        let out = forward_graph(&self.config, &mut g, &params, x)?;
        Ok(GridPrediction {
            raw: g.value(out).clone(),
        })
    }
}

/// Records the detector on `g`. `image` is a `[3, H, W]` node; the result is a
/// `[S, S, B, 5 + K]` node of raw logits.
pub fn forward_graph<T: Real>(
    cfg: &DetectorConfig,
    g: &mut Graph<T>,
    params: &[NodeId],
    image: NodeId,
) -> Result<NodeId> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("channels", format!("expected [3,H,W] image, got {s:?}")));
    }
    if s[1] != cfg.input_size {
        return Err(Error::dim(
            "height",
            format!("expected {}, got {}", cfg.input_size, s[1]),
        ));
    }
    if s[2] != cfg.input_size {
        return Err(Error::dim(
            "width",
            format!("expected {}, got {}", cfg.input_size, s[2]),
        ));
    }
    let n_layers = cfg.conv_channels.len();
    if params.len() != 2 * (n_layers + 1) {
        return Err(Error::Usage(format!(
            "detector needs {} parameter nodes, got {}",
            2 * (n_layers + 1),
            params.len()
        )));
    }
    let mut x = g.reshape(image, vec![1, 3, s[1], s[2]])?;
    for i in 0..n_layers {
        let stride = if i < cfg.num_downsamples() { 2 } else { 1 };
        x = g.conv2d(x, params[2 * i], stride, 1)?;
        x = g.bias_add(x, params[2 * i + 1])?;
        x = g.leaky_relu(x);
    }
    x = g.conv2d(x, params[2 * n_layers], 1, 0)?;
    x = g.bias_add(x, params[2 * n_layers + 1])?;
    let sg = cfg.grid_size;
    let (b, c) = (cfg.num_anchors(), cfg.channels_per_anchor());
    let x = g.reshape(x, vec![b, c, sg, sg])?;
    g.permute(x, &[2, 3, 0, 1])
}
