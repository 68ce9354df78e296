//! Realness scorer: sentence CNN, a shared linear head per representation,
//! sigmoid, and the mean over representations.

use rand::Rng;

use crate::nn::Linear;
use crate::tensor::{Graph, ParamStore, Parameterized, Var};
use crate::textcnn::{bce, clamped_log, clamped_log1m, mean_of, Sentence, SentenceError, TextCnn, TextCnnConfig};

#[derive(Debug, Clone)]
pub struct Discriminator {
    store: ParamStore,
    cnn: TextCnn,
    head: Linear,
}

impl Discriminator {
    pub fn new<R: Rng>(cfg: TextCnnConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let width = cfg.feature_dim();
        let cnn = TextCnn::new(&mut store, "discriminator", cfg, rng);
        let head = Linear::new(&mut store, "discriminator.head", width, 1, rng);
        Self { store, cnn, head }
    }

    pub fn config(&self) -> &TextCnnConfig {
        self.cnn.config()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn score(&self, g: &mut Graph, feats: Vec<Var>) -> Var {
        let probs: Vec<Var> = feats
            .into_iter()
            .map(|f| {
                let l = self.head.forward(g, &self.store, f);
                g.sigmoid(l)
            })
            .collect();
        mean_of(g, &probs)
    }

    /// `D(s)` in (0, 1) as a `1 × 1` node.
    pub fn discriminate(&self, g: &mut Graph, s: &Sentence) -> Result<Var, SentenceError> {
        let feats = self.cnn.features(g, &self.store, s)?;
        Ok(self.score(g, feats))
    }

    /// `D(s)` for hard token ids.
    pub fn discriminate_ids(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, SentenceError> {
        let feats = self.cnn.features_ids(g, &self.store, ids)?;
        Ok(self.score(g, feats))
    }

    /// Per-representation probabilities, in table order.
    pub fn representation_scores(&self, g: &mut Graph, s: &Sentence) -> Result<Vec<f64>, SentenceError> {
        let feats = self.cnn.features(g, &self.store, s)?;
        Ok(feats
            .into_iter()
            .map(|f| {
                let l = self.head.forward(g, &self.store, f);
                let p = g.sigmoid(l);
                g.scalar(p)
            })
            .collect())
    }
}

impl Parameterized for Discriminator {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.store]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.store]
    }
}

/// `mean log(1 - D(s_r)) + mean log D(s_g)`, minimised by the discriminator.
pub fn d_loss(g: &mut Graph, real: &[Var], fake: &[Var]) -> Var {
    let a: Vec<Var> = real.iter().map(|&d| clamped_log1m(g, d)).collect();
    let b: Vec<Var> = fake.iter().map(|&d| clamped_log(g, d)).collect();
    let a = mean_of(g, &a);
    let b = mean_of(g, &b);
    g.add(a, b)
}

/// Cross-entropy of real and fake scores against smoothed targets.
pub fn d_loss_smoothed(
    g: &mut Graph,
    real: &[Var],
    real_targets: &[f64],
    fake: &[Var],
    fake_targets: &[f64],
) -> Result<Var, SentenceError> {
    let a = bce(g, real, real_targets)?;
    let b = bce(g, fake, fake_targets)?;
    Ok(g.add(a, b))
}

/// `mean log(1 - D(s_g))`, minimised by the generator.
pub fn g_loss_adv(g: &mut Graph, fake: &[Var]) -> Var {
    let a: Vec<Var> = fake.iter().map(|&d| clamped_log1m(g, d)).collect();
    mean_of(g, &a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;
    use crate::textcnn::Origin;

    fn cfg(reps: usize) -> TextCnnConfig {
        TextCnnConfig {
            vocab: 12,
            embed_dim: 4,
            reps,
            widths: vec![2, 3, 4],
            filters: 3,
            max_len: 10,
        }
    }

    #[test]
    fn loss_arithmetic() {
        let mut g = Graph::new();
        let half = g.constant(&Tensor::scalar(0.5));
        let l = d_loss(&mut g, &[half, half], &[half, half]);
        assert!((g.scalar(l) - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let l = g_loss_adv(&mut g, &[half]);
        assert!((g.scalar(l) - 0.5f64.ln()).abs() < 1e-12);
        let one = g.constant(&Tensor::scalar(1.0));
        let zero = g.constant(&Tensor::scalar(0.0));
        let l = d_loss(&mut g, &[one], &[zero]);
        assert!((g.scalar(l) - 2.0 * 1e-7f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn single_representation_is_plain_cnn() {
        let d = Discriminator::new(cfg(1), &mut seeded(3));
        let mut g = Graph::new();
        let s = Sentence::from_ids(&mut g, &[6, 7, 8], 12, 10, Origin::Real).unwrap();
        let score = d.discriminate(&mut g, &s).unwrap();
        let reps = d.representation_scores(&mut g, &s).unwrap();
        assert_eq!(reps.len(), 1);
        assert_eq!(g.scalar(score), reps[0]);
        assert!(reps[0] > 0.0 && reps[0] < 1.0);
    }

    #[test]
    fn permuting_tables_keeps_score() {
        let d = Discriminator::new(cfg(3), &mut seeded(4));
        let mut p = d.clone();
        let names: Vec<String> = (0..3).map(|i| format!("discriminator.embedding{i}")).collect();
        let vals: Vec<_> = names.iter().map(|n| d.store.get(d.store.find(n).unwrap()).clone()).collect();
        for (i, n) in names.iter().enumerate() {
            p.store.set_value(n, &vals[(i + 1) % 3]).unwrap();
        }
        let mut g = Graph::new();
        let a = d.discriminate_ids(&mut g, &[6, 9, 11, 2]).unwrap();
        let b = p.discriminate_ids(&mut g, &[6, 9, 11, 2]).unwrap();
        assert!((g.scalar(a) - g.scalar(b)).abs() < 1e-15);
    }
}
