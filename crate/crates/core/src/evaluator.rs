//! Topic-match scorer `V(s, e)`: sentence CNN, tanh projection to the
//! audio feature width, interaction with `e`, two-layer perceptron and
//! sigmoid, averaged over representations.

use rand::Rng;

use crate::nn::Linear;
use crate::tensor::{Graph, ParamStore, Parameterized, Var};
use crate::textcnn::{bce, clamped_log, clamped_log1m, mean_of, Origin, Sentence, SentenceError, TextCnn, TextCnnConfig};

/// How the text feature meets the audio feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interaction {
    /// Elementwise product.
    #[default]
    Product,
    /// `[text; audio]`.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluatorConfig {
    pub cnn: TextCnnConfig,
    pub feature_dim: usize,
    pub hidden: usize,
    pub interaction: Interaction,
}

impl EvaluatorConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            cnn: TextCnnConfig::new(vocab),
            feature_dim: 128,
            hidden: 128,
            interaction: Interaction::Product,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluator {
    cfg: EvaluatorConfig,
    store: ParamStore,
    cnn: TextCnn,
    project: Linear,
    mlp1: Linear,
    mlp2: Linear,
}

impl Evaluator {
    pub fn new<R: Rng>(cfg: EvaluatorConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let text_width = cfg.cnn.feature_dim();
        let cnn = TextCnn::new(&mut store, "evaluator", cfg.cnn.clone(), rng);
        let project = Linear::new(&mut store, "evaluator.project", text_width, cfg.feature_dim, rng);
        let joint = match cfg.interaction {
            Interaction::Product => cfg.feature_dim,
            Interaction::Concat => 2 * cfg.feature_dim,
        };
        let mlp1 = Linear::new(&mut store, "evaluator.mlp1", joint, cfg.hidden, rng);
        let mlp2 = Linear::new(&mut store, "evaluator.mlp2", cfg.hidden, 1, rng);
        Self {
            cfg,
            store,
            cnn,
            project,
            mlp1,
            mlp2,
        }
    }

    pub fn config(&self) -> &EvaluatorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_e(&self, g: &Graph, e: Var) -> Result<(), SentenceError> {
        let shape = g.shape(e);
        if shape != [1, self.cfg.feature_dim] {
            return Err(SentenceError::FeatureWidth {
                found: shape.iter().product(),
                expected: self.cfg.feature_dim,
            });
        }
        Ok(())
    }

    fn score(&self, g: &mut Graph, feats: Vec<Var>, e: Var) -> Var {
        let st = &self.store;
        let probs: Vec<Var> = feats
            .into_iter()
            .map(|f| {
                let t = self.project.forward(g, st, f);
                let t = g.tanh(t);
                let joint = match self.cfg.interaction {
                    Interaction::Product => g.mul(t, e),
                    Interaction::Concat => g.concat_cols(&[t, e]),
                };
                let h = self.mlp1.forward(g, st, joint);
                let h = g.relu(h);
                let o = self.mlp2.forward(g, st, h);
                g.sigmoid(o)
            })
            .collect();
        mean_of(g, &probs)
    }

    /// `V(s, e)` in (0, 1); `e` is `1 × feature_dim`.
    pub fn evaluate_match(&self, g: &mut Graph, s: &Sentence, e: Var) -> Result<Var, SentenceError> {
        self.check_e(g, e)?;
        let feats = self.cnn.features(g, &self.store, s)?;
        Ok(self.score(g, feats, e))
    }

    /// `V(s, e)` for hard token ids.
    pub fn evaluate_ids(&self, g: &mut Graph, ids: &[usize], e: Var) -> Result<Var, SentenceError> {
        self.check_e(g, e)?;
        let feats = self.cnn.features_ids(g, &self.store, ids)?;
        Ok(self.score(g, feats, e))
    }

    /// Inference-only score of token ids against a feature vector.
    pub fn score_ids(&self, ids: &[usize], e: &[f64]) -> Result<f64, SentenceError> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let ev = g.constant(&crate::tensor::Tensor::row(e));
        let v = self.evaluate_ids(&mut g, ids, ev)?;
        Ok(g.scalar(v))
    }
}

impl Parameterized for Evaluator {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.store]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.store]
    }
}

/// Uniform draw of a song other than `current`.
pub fn sample_negative_song<R: Rng>(songs: usize, current: usize, rng: &mut R) -> Result<usize, NegativeError> {
    if songs < 2 {
        return Err(NegativeError::SingleSong);
    }
    let k = rng.gen_range(0..songs - 1);
    Ok(if k >= current { k + 1 } else { k })
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NegativeError {
    #[error("negative sampling needs at least two songs")]
    SingleSong,
    #[error("song {0} has no clips")]
    NoClips(usize),
}

/// Per-song pools of audio features for drawing mismatched pairs.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    pools: Vec<Vec<Vec<f64>>>,
}

impl NegativeSampler {
    /// `features[song]` lists the feature vectors of that song's clips.
    pub fn new(features: Vec<Vec<Vec<f64>>>) -> Result<Self, NegativeError> {
        if features.len() < 2 {
            return Err(NegativeError::SingleSong);
        }
        if let Some(i) = features.iter().position(Vec::is_empty) {
            return Err(NegativeError::NoClips(i));
        }
        Ok(Self { pools: features })
    }

    /// Song drawn uniformly among the others, then one of its clips.
    pub fn sample<R: Rng>(&self, current: usize, rng: &mut R) -> (usize, &[f64]) {
        let song = sample_negative_song(self.pools.len(), current, rng).expect("two songs checked");
        let pool = &self.pools[song];
        (song, &pool[rng.gen_range(0..pool.len())])
    }
}

fn require_real(sents: &[Sentence]) -> Result<(), SentenceError> {
    if sents.iter().any(|s| s.origin != Origin::Real) {
        return Err(SentenceError::GeneratedInput);
    }
    Ok(())
}

/// `mean log(1 - V(s_r, e_p)) + mean log V(s_r, e_n)`, minimised by the
/// evaluator. Only real sentences are accepted.
pub fn v_loss(
    g: &mut Graph,
    v: &Evaluator,
    real: &[Sentence],
    e_pos: &[Var],
    e_neg: &[Var],
) -> Result<Var, SentenceError> {
    let (pos, neg) = v_scores(g, v, real, e_pos, e_neg)?;
    let a: Vec<Var> = pos.iter().map(|&x| clamped_log1m(g, x)).collect();
    let b: Vec<Var> = neg.iter().map(|&x| clamped_log(g, x)).collect();
    let a = mean_of(g, &a);
    let b = mean_of(g, &b);
    Ok(g.add(a, b))
}

/// Matched and mismatched scores for real sentences.
pub fn v_scores(
    g: &mut Graph,
    v: &Evaluator,
    real: &[Sentence],
    e_pos: &[Var],
    e_neg: &[Var],
) -> Result<(Vec<Var>, Vec<Var>), SentenceError> {
    require_real(real)?;
    if real.len() != e_pos.len() || real.len() != e_neg.len() || real.is_empty() {
        return Err(SentenceError::Batch(real.len(), e_pos.len().min(e_neg.len())));
    }
    let mut pos = Vec::with_capacity(real.len());
    let mut neg = Vec::with_capacity(real.len());
    for ((s, &ep), &en) in real.iter().zip(e_pos).zip(e_neg) {
        pos.push(v.evaluate_match(g, s, ep)?);
        neg.push(v.evaluate_match(g, s, en)?);
    }
    Ok((pos, neg))
}

/// Cross-entropy form of [`v_loss`] against smoothed targets.
pub fn v_loss_smoothed(
    g: &mut Graph,
    v: &Evaluator,
    real: &[Sentence],
    e_pos: &[Var],
    e_neg: &[Var],
    pos_targets: &[f64],
    neg_targets: &[f64],
) -> Result<Var, SentenceError> {
    let (pos, neg) = v_scores(g, v, real, e_pos, e_neg)?;
    let a = bce(g, &pos, pos_targets)?;
    let b = bce(g, &neg, neg_targets)?;
    Ok(g.add(a, b))
}

/// `mean log(1 - V(s_g, e_p))`, minimised by the generator.
pub fn g_loss_topic(g: &mut Graph, scores: &[Var]) -> Var {
    let a: Vec<Var> = scores.iter().map(|&x| clamped_log1m(g, x)).collect();
    mean_of(g, &a)
}
