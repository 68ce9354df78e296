//! Sentence CNN shared by the discriminator and the evaluator.
//!
//! A sentence is an `L × vocab` matrix of simplex rows, padded with PAD
//! one-hots to `max_len`. It is embedded by `r` independent tables (matrix
//! product, so relaxed rows stay differentiable; the PAD row of every table
//! is held at zero), then passed through one shared bank of valid
//! convolutions with ReLU and max-over-time pooling.

use rand::Rng;
use thiserror::Error;

use crate::data::{TokenSequence, PAD};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum SentenceError {
    #[error("row {row} sums to {sum}, not a distribution")]
    NotSimplex { row: usize, sum: f64 },
    #[error("sentence of {len} rows exceeds the {max}-token cap")]
    TooLong { len: usize, max: usize },
    #[error("row width {found} does not match vocabulary {expected}")]
    Width { found: usize, expected: usize },
    #[error("empty sentence")]
    Empty,
    #[error("feature width {found}, expected {expected}")]
    FeatureWidth { found: usize, expected: usize },
    #[error("generated sentences cannot train the evaluator")]
    GeneratedInput,
    #[error("batch sizes differ: {0} vs {1}")]
    Batch(usize, usize),
}

const SIMPLEX_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Real,
    Generated,
}

/// A padded sentence matrix tagged with where it came from.
#[derive(Debug, Clone, Copy)]
pub struct Sentence {
    pub rows: Var,
    pub origin: Origin,
    /// Unpadded length.
    pub len: usize,
}

impl Sentence {
    /// One-hot rows of a real comment.
    pub fn real(g: &mut Graph, seq: &TokenSequence, vocab: usize, max_len: usize) -> Result<Self, SentenceError> {
        Self::from_ids(g, seq.ids(), vocab, max_len, Origin::Real)
    }

    /// One-hot rows of token ids with the given origin.
    pub fn from_ids(g: &mut Graph, ids: &[usize], vocab: usize, max_len: usize, origin: Origin) -> Result<Self, SentenceError> {
        if ids.is_empty() {
            return Err(SentenceError::Empty);
        }
        if ids.len() > max_len {
            return Err(SentenceError::TooLong {
                len: ids.len(),
                max: max_len,
            });
        }
        let mut data = vec![0.0; max_len * vocab];
        for (i, &t) in ids.iter().chain(std::iter::repeat(&PAD)).take(max_len).enumerate() {
            data[i * vocab + t] = 1.0;
        }
        let rows = g.constant(&Tensor::new(&[max_len, vocab], data).expect("shape"));
        Ok(Self {
            rows,
            origin,
            len: ids.len(),
        })
    }

    /// Relaxed rows from the generator, each `1 × vocab`.
    pub fn generated(g: &mut Graph, rows: &[Var], vocab: usize, max_len: usize) -> Result<Self, SentenceError> {
        if rows.is_empty() {
            return Err(SentenceError::Empty);
        }
        if rows.len() > max_len {
            return Err(SentenceError::TooLong {
                len: rows.len(),
                max: max_len,
            });
        }
        for (i, r) in rows.iter().enumerate() {
            let found = g.shape(*r)[1];
            if found != vocab {
                return Err(SentenceError::Width { found, expected: vocab });
            }
            let sum: f64 = g.value(*r).iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(SentenceError::NotSimplex { row: i, sum });
            }
        }
        let mut parts = rows.to_vec();
        if rows.len() < max_len {
            let pad = max_len - rows.len();
            let mut data = vec![0.0; pad * vocab];
            for i in 0..pad {
                data[i * vocab + PAD] = 1.0;
            }
            parts.push(g.constant(&Tensor::new(&[pad, vocab], data).expect("shape")));
        }
        let m = g.concat_rows(&parts);
        Ok(Self {
            rows: m,
            origin: Origin::Generated,
            len: rows.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextCnnConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    /// Number of independent embedding tables.
    pub reps: usize,
    pub widths: Vec<usize>,
    pub filters: usize,
    pub max_len: usize,
}

impl TextCnnConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            embed_dim: 128,
            reps: 3,
            widths: vec![2, 3, 4],
            filters: 64,
            max_len: 50,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.widths.len() * self.filters
    }
}

#[derive(Debug, Clone)]
struct ConvBank {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct TextCnn {
    cfg: TextCnnConfig,
    tables: Vec<ParamId>,
    convs: Vec<ConvBank>,
    pad_mask: Tensor,
}

impl TextCnn {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: TextCnnConfig, rng: &mut R) -> Self {
        assert!(cfg.reps >= 1, "at least one representation");
        let mut mask = vec![1.0; cfg.vocab * cfg.embed_dim];
        mask[PAD * cfg.embed_dim..(PAD + 1) * cfg.embed_dim].fill(0.0);
        let tables = (0..cfg.reps)
            .map(|i| {
                let id = store.add_normal(&format!("{prefix}.embedding{i}"), &[cfg.vocab, cfg.embed_dim], 0.1, rng);
                let t = store.tensor_mut(id);
                t.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                id
            })
            .collect();
        let convs = cfg
            .widths
            .iter()
            .map(|&w| ConvBank {
                kernel: store.add_glorot(
                    &format!("{prefix}.conv{w}.kernel"),
                    &[w, cfg.embed_dim, cfg.filters],
                    w * cfg.embed_dim,
                    cfg.filters,
                    rng,
                ),
                bias: store.add_zeros(&format!("{prefix}.conv{w}.bias"), &[1, cfg.filters]),
            })
            .collect();
        let pad_mask = Tensor::new(&[cfg.vocab, cfg.embed_dim], mask).expect("shape");
        Self {
            cfg,
            tables,
            convs,
            pad_mask,
        }
    }

    pub fn config(&self) -> &TextCnnConfig {
        &self.cfg
    }

    fn check(&self, g: &Graph, s: &Sentence) -> Result<(), SentenceError> {
        let shape = g.shape(s.rows);
        if shape[1] != self.cfg.vocab {
            return Err(SentenceError::Width {
                found: shape[1],
                expected: self.cfg.vocab,
            });
        }
        if shape[0] != self.cfg.max_len {
            return Err(SentenceError::TooLong {
                len: shape[0],
                max: self.cfg.max_len,
            });
        }
        Ok(())
    }

    fn masked_table(&self, g: &mut Graph, store: &ParamStore, rep: usize) -> Var {
        let t = g.param(store, self.tables[rep]);
        let m = g.constant(&self.pad_mask);
        g.mul(t, m)
    }

    fn pool(&self, g: &mut Graph, store: &ParamStore, emb: Var) -> Var {
        let feats: Vec<Var> = self
            .convs
            .iter()
            .map(|c| {
                let k = g.param(store, c.kernel);
                let b = g.param(store, c.bias);
                let y = g.conv1d(emb, k, 1, crate::tensor::Padding::Valid).expect("width below max_len");
                let y = g.add_row(y, b);
                let y = g.relu(y);
                g.max_rows(y)
            })
            .collect();
        g.concat_cols(&feats)
    }

    /// One `1 × feature_dim` vector per representation.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, s: &Sentence) -> Result<Vec<Var>, SentenceError> {
        self.check(g, s)?;
        Ok((0..self.cfg.reps)
            .map(|r| {
                let table = self.masked_table(g, store, r);
                let emb = g.matmul(s.rows, table);
                self.pool(g, store, emb)
            })
            .collect())
    }

    /// Same as [`TextCnn::features`] for hard token ids, via row lookup.
    pub fn features_ids(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Vec<Var>, SentenceError> {
        if ids.is_empty() {
            return Err(SentenceError::Empty);
        }
        if ids.len() > self.cfg.max_len {
            return Err(SentenceError::TooLong {
                len: ids.len(),
                max: self.cfg.max_len,
            });
        }
        let padded: Vec<usize> = ids
            .iter()
            .copied()
            .chain(std::iter::repeat(PAD))
            .take(self.cfg.max_len)
            .collect();
        Ok((0..self.cfg.reps)
            .map(|r| {
                let table = self.masked_table(g, store, r);
                let emb = g.embedding_lookup(table, &padded);
                self.pool(g, store, emb)
            })
            .collect())
    }
}

/// `log(max(x, 1e-7))`.
pub(crate) fn clamped_log(g: &mut Graph, x: Var) -> Var {
    g.log_clamped(x, LOG_FLOOR)
}

/// `log(max(1 - x, 1e-7))`.
pub(crate) fn clamped_log1m(g: &mut Graph, x: Var) -> Var {
    let y = g.affine(x, -1.0, 1.0);
    g.log_clamped(y, LOG_FLOOR)
}

pub const LOG_FLOOR: f64 = 1e-7;

/// Mean of scalar nodes.
pub(crate) fn mean_of(g: &mut Graph, xs: &[Var]) -> Var {
    let all = g.concat_rows(xs);
    g.mean(all)
}

/// Mean binary cross-entropy of scores against soft targets.
pub fn bce(g: &mut Graph, scores: &[Var], targets: &[f64]) -> Result<Var, SentenceError> {
    if scores.len() != targets.len() || scores.is_empty() {
        return Err(SentenceError::Batch(scores.len(), targets.len()));
    }
    let terms: Vec<Var> = scores
        .iter()
        .zip(targets)
        .map(|(&s, &t)| {
            let lp = clamped_log(g, s);
            let lq = clamped_log1m(g, s);
            let a = g.scale(lp, -t);
            let b = g.scale(lq, -(1.0 - t));
            g.add(a, b)
        })
        .collect();
    Ok(mean_of(g, &terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn cfg() -> TextCnnConfig {
        TextCnnConfig {
            vocab: 10,
            embed_dim: 3,
            reps: 2,
            widths: vec![2, 3],
            filters: 4,
            max_len: 8,
        }
    }

    #[test]
    fn one_hot_path_equals_lookup_path() {
        let mut store = ParamStore::new();
        let cnn = TextCnn::new(&mut store, "t", cfg(), &mut seeded(0));
        let ids = [6, 7, 9, 2];
        let mut g = Graph::new();
        let s = Sentence::from_ids(&mut g, &ids, 10, 8, Origin::Real).unwrap();
        let a = cnn.features(&mut g, &store, &s).unwrap();
        let b = cnn.features_ids(&mut g, &store, &ids).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(g.value(*x), g.value(*y));
        }
    }

    #[test]
    fn pad_rows_embed_to_zero() {
        let mut store = ParamStore::new();
        let cnn = TextCnn::new(&mut store, "t", cfg(), &mut seeded(1));
        let mut g = Graph::new();
        let t = cnn.masked_table(&mut g, &store, 0);
        assert!(g.value(t)[..3].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn generated_rows_checked() {
        let mut g = Graph::new();
        let good = g.constant(&Tensor::row(&[0.0, 0.5, 0.5]));
        let bad = g.constant(&Tensor::row(&[0.0, 0.5, 0.6]));
        assert!(Sentence::generated(&mut g, &[good], 3, 4).is_ok());
        assert!(matches!(
            Sentence::generated(&mut g, &[good, bad], 3, 4),
            Err(SentenceError::NotSimplex { row: 1, .. })
        ));
        assert!(matches!(
            Sentence::generated(&mut g, &[good; 5], 3, 4),
            Err(SentenceError::TooLong { .. })
        ));
        let s = Sentence::generated(&mut g, &[good], 3, 4).unwrap();
        assert_eq!(g.shape(s.rows), &[4, 3]);
        assert_eq!(&g.value(s.rows)[3..6], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn bce_floor_is_target_entropy() {
        let mut g = Graph::new();
        for t in [0.9, 0.95, 0.03] {
            let h = -(t * f64::ln(t) + (1.0 - t) * f64::ln(1.0 - t));
            let mut best = f64::INFINITY;
            for k in 1..1000 {
                let s = g.constant(&Tensor::scalar(k as f64 / 1000.0));
                let l = bce(&mut g, &[s], &[t]).unwrap();
                best = best.min(g.scalar(l));
                assert!(g.scalar(l) >= h - 1e-12);
            }
            assert!(best - h < 1e-5);
        }
    }
}
