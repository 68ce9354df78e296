//! Audio feature extractor: gated dilated convolutions over the raw
//! waveform, window averaging, and an LSTM summary, plus a song classifier
//! head used for pretraining.

use rand::Rng;
use thiserror::Error;

use crate::data::Waveform;
use crate::nn::{cross_entropy, Linear, Lstm};
use crate::tensor::{Graph, ParamId, ParamStore, Parameterized, Tensor, TensorError, Var};

pub const POOL_WINDOW: usize = 8000;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("clip of {len} samples is shorter than the {min}-sample pooling window")]
    TooShort { len: usize, min: usize },
    #[error("label {label} outside {songs} songs")]
    BadLabel { label: usize, songs: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Channel width of the convolution stack.
    pub channels: usize,
    /// Number of dilated layers; layer `i` uses dilation `2^i`.
    pub layers: usize,
    pub kernel: usize,
    /// Width of `e`.
    pub feature_dim: usize,
    pub pool_window: usize,
    pub songs: usize,
}

impl EncoderConfig {
    pub fn new(songs: usize) -> Self {
        Self {
            channels: 32,
            layers: 6,
            kernel: 3,
            feature_dim: 128,
            pool_window: POOL_WINDOW,
            songs,
        }
    }

    /// Pooled sequence length for a clip of `len` samples.
    pub fn pooled_len(&self, len: usize) -> usize {
        len / self.pool_window
    }
}

#[derive(Debug, Clone, Copy)]
struct GatedLayer {
    /// `k × C × 2C`: filter half then gate half.
    kernel: ParamId,
    bias: ParamId,
    dilation: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    store: ParamStore,
    input: Linear,
    layers: Vec<GatedLayer>,
    summary: Lstm,
    head: Linear,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Self {
        assert!(cfg.layers >= 1, "at least one dilated layer");
        assert!(cfg.kernel % 2 == 1, "kernel width must be odd");
        let c = cfg.channels;
        let mut store = ParamStore::new();
        let input = Linear::new(&mut store, "encoder.input", 1, c, rng);
        let layers = (0..cfg.layers)
            .map(|i| GatedLayer {
                kernel: store.add_glorot(
                    &format!("encoder.layer{i}.kernel"),
                    &[cfg.kernel, c, 2 * c],
                    cfg.kernel * c,
                    2 * c,
                    rng,
                ),
                bias: store.add_zeros(&format!("encoder.layer{i}.bias"), &[1, 2 * c]),
                dilation: 1 << i,
            })
            .collect();
        let summary = Lstm::new(&mut store, "encoder.lstm", c, cfg.feature_dim, rng);
        let head = Linear::new(&mut store, "encoder.head", cfg.feature_dim, cfg.songs, rng);
        Self {
            cfg,
            store,
            input,
            layers,
            summary,
            head,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Per-layer outputs `z_i` (each `l × C`). The residual stream feeds
    /// each layer with the sum of the input projection and earlier `z_i`.
    pub fn layer_outputs(&self, g: &mut Graph, x: &[f64]) -> Result<Vec<Var>> {
        if x.len() < self.cfg.pool_window {
            return Err(EncoderError::TooShort {
                len: x.len(),
                min: self.cfg.pool_window,
            });
        }
        let xs = g.constant(&Tensor::column(x));
        self.layer_outputs_from(g, xs)
    }

    /// [`Self::layer_outputs`] for an `l × 1` waveform node.
    pub fn layer_outputs_from(&self, g: &mut Graph, xs: Var) -> Result<Vec<Var>> {
        let c = self.cfg.channels;
        let mut h = self.input.forward(g, &self.store, xs);
        let mut zs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let k = g.param(&self.store, layer.kernel);
            let b = g.param(&self.store, layer.bias);
            let conv = g.conv1d_dilated(h, k, layer.dilation)?;
            let conv = g.add_row(conv, b);
            let filt = g.slice_cols(conv, 0, c);
            let gate = g.slice_cols(conv, c, c);
            let filt = g.tanh(filt);
            let gate = g.sigmoid(gate);
            let z = g.mul(filt, gate);
            h = g.add(h, z);
            zs.push(z);
        }
        Ok(zs)
    }

    /// `z = Σ z_i`.
    pub fn layer_sum(g: &mut Graph, zs: &[Var]) -> Var {
        zs[1..].iter().fold(zs[0], |acc, &z| g.add(acc, z))
    }

    /// Feature vector `e` as a `1 × feature_dim` node.
    pub fn features(&self, g: &mut Graph, x: &[f64]) -> Result<Var> {
        let zs = self.layer_outputs(g, x)?;
        self.summarise(g, &zs)
    }

    /// [`Self::features`] for an `l × 1` waveform node.
    pub fn features_from(&self, g: &mut Graph, xs: Var) -> Result<Var> {
        let len = g.value(xs).len();
        if len < self.cfg.pool_window {
            return Err(EncoderError::TooShort {
                len,
                min: self.cfg.pool_window,
            });
        }
        let zs = self.layer_outputs_from(g, xs)?;
        self.summarise(g, &zs)
    }

    fn summarise(&self, g: &mut Graph, zs: &[Var]) -> Result<Var> {
        let z = Self::layer_sum(g, zs);
        let pooled = g.avg_pool1d(z, self.cfg.pool_window, self.cfg.pool_window)?;
        Ok(self.summary.last_hidden(g, &self.store, pooled))
    }

    /// Forward pass without recording gradients.
    pub fn extract_features(&self, w: &Waveform) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let e = self.features(&mut g, w.samples())?;
        Ok(g.value(e).to_vec())
    }

    pub fn logits(&self, g: &mut Graph, e: Var) -> Var {
        self.head.forward(g, &self.store, e)
    }

    /// Song distribution `P(o | x)` for a feature vector.
    pub fn classify_song(&self, e: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let ev = g.constant(&Tensor::row(e));
        let l = self.logits(&mut g, ev);
        let p = g.softmax_rows(l);
        g.value(p).to_vec()
    }

    /// `-log P(label | x)`.
    pub fn loss(&self, g: &mut Graph, x: &[f64], label: usize) -> Result<Var> {
        if label >= self.cfg.songs {
            return Err(EncoderError::BadLabel {
                label,
                songs: self.cfg.songs,
            });
        }
        let e = self.features(g, x)?;
        let l = self.logits(g, e);
        Ok(cross_entropy(g, l, label))
    }
}

impl Parameterized for Encoder {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.store]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.store]
    }
}
