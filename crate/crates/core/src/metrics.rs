//! Automatic scores: corpus BLEU, the geometric-mean BLEU column, V-Score,
//! H-Score and Pearson correlation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty candidate or reference set")]
    Empty,
    #[error("{0} candidates but {1} reference sets")]
    Mismatch(usize, usize),
    #[error("n-gram order must be at least 1")]
    Order,
    #[error("zero variance")]
    ZeroVariance,
    #[error("need at least two paired values, got {0}")]
    TooFew(usize),
    #[error("{0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Treatment of n-gram orders with no clipped matches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum Smoothing {
    /// A zero precision makes the score exactly zero.
    Exact,
    /// Zero match counts are replaced by `1e-9`.
    #[default]
    Epsilon,
}

pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    pub score: f64,
    /// Set when some order had no matches and smoothing supplied the count.
    pub smoothed: bool,
}

fn ngrams<T: std::hash::Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with uniform weights over orders `1..=n`. Each
/// candidate's counts are clipped by the maximum count over its
/// references; the brevity penalty uses the closest reference length
/// (shorter on ties).
pub fn bleu_n<T: std::hash::Hash + Eq>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    n: usize,
    smoothing: Smoothing,
) -> Result<Bleu> {
    if n == 0 {
        return Err(MetricError::Order);
    }
    if candidates.is_empty() || references.iter().any(Vec::is_empty) {
        return Err(MetricError::Empty);
    }
    if candidates.len() != references.len() {
        return Err(MetricError::Mismatch(candidates.len(), references.len()));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("nonempty references");
        for k in 1..=n {
            let counts = ngrams(cand, k);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &counts {
                matched[k - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }
    if cand_len == 0 {
        return Ok(Bleu {
            score: 0.0,
            smoothed: false,
        });
    }
    let mut smoothed = false;
    let mut log_sum = 0.0;
    for k in 0..n {
        if matched[k] == 0 {
            match smoothing {
                Smoothing::Exact => {
                    return Ok(Bleu {
                        score: 0.0,
                        smoothed: false,
                    })
                }
                Smoothing::Epsilon => {
                    smoothed = true;
                    log_sum += (BLEU_EPSILON / total[k].max(1) as f64).ln();
                }
            }
        } else {
            log_sum += (matched[k] as f64 / total[k] as f64).ln();
        }
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(Bleu {
        score: bp * (log_sum / n as f64).exp(),
        smoothed,
    })
}

/// Geometric mean of BLEU-3, BLEU-4 and BLEU-5.
pub fn geometric_bleu(b3: f64, b4: f64, b5: f64) -> f64 {
    (b3 * b4 * b5).cbrt()
}

/// Mean evaluator probability minus one half, pooled over all pairs.
pub fn v_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64 - 0.5)
}

/// Mean over audios of each audio's mean probability, minus one half.
pub fn v_score_per_audio(groups: &[Vec<f64>]) -> Result<f64> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(MetricError::Empty);
    }
    let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
    Ok(means.iter().sum::<f64>() / means.len() as f64 - 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HScore {
    pub score: f64,
    /// Set when a negative input forced the score to zero.
    pub clamped: bool,
}

/// Harmonic mean `2bv / (b + v)`; zero when `b + v = 0` or either input is
/// negative.
pub fn h_score(bleu: f64, v: f64) -> HScore {
    if bleu < 0.0 || v < 0.0 {
        log::warn!("h-score undefined for bleu {bleu}, v {v}; reporting 0");
        return HScore {
            score: 0.0,
            clamped: true,
        };
    }
    let s = bleu + v;
    HScore {
        score: if s == 0.0 { 0.0 } else { 2.0 * bleu * v / s },
        clamped: false,
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MetricError::Mismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooFew(x.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One row of the automatic-evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu3: f64,
    pub bleu4: f64,
    pub bleu5: f64,
    pub bleu: f64,
    pub v_score: Option<f64>,
    pub h_score: Option<f64>,
    pub bleu_smoothed: bool,
    pub h_score_clamped: bool,
}

/// BLEU-3/4/5, their geometric mean, and (with evaluator scores) V and H.
pub fn score_report<T: std::hash::Hash + Eq>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    evaluator_scores: Option<&[f64]>,
    smoothing: Smoothing,
) -> Result<ScoreReport> {
    let b: Vec<Bleu> = [3, 4, 5]
        .iter()
        .map(|&n| bleu_n(candidates, references, n, smoothing))
        .collect::<Result<_>>()?;
    let bleu = geometric_bleu(b[0].score, b[1].score, b[2].score);
    let v = evaluator_scores.map(v_score).transpose()?;
    let h = v.map(|v| h_score(bleu, v));
    Ok(ScoreReport {
        bleu3: b[0].score,
        bleu4: b[1].score,
        bleu5: b[2].score,
        bleu,
        v_score: v,
        h_score: h.map(|h| h.score),
        bleu_smoothed: b.iter().any(|x| x.smoothed),
        h_score_clamped: h.is_some_and(|h| h.clamped),
    })
}

#[derive(Debug, Deserialize)]
struct HumanRow {
    sample_id: String,
    #[allow(dead_code)]
    rater_id: String,
    fluency: f64,
    coherence: f64,
    meaning: f64,
    consistency: f64,
}

/// Per-sample mean human score (mean over raters of the four criteria).
pub fn read_human_scores(path: impl AsRef<Path>) -> Result<BTreeMap<String, f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| MetricError::Parse(e.to_string()))?;
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for row in rdr.deserialize::<HumanRow>() {
        let r = row.map_err(|e| MetricError::Parse(e.to_string()))?;
        let e = acc.entry(r.sample_id).or_insert((0.0, 0));
        e.0 += (r.fluency + r.coherence + r.meaning + r.consistency) / 4.0;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn perfect_and_disjoint() {
        let c = vec![toks("the cat sat on the mat")];
        let r = vec![vec![toks("the cat sat on the mat")]];
        assert_eq!(bleu_n(&c, &r, 4, Smoothing::Exact).unwrap().score, 1.0);
        let r = vec![vec![toks("a dog ran in a park")]];
        assert_eq!(bleu_n(&c, &r, 4, Smoothing::Exact).unwrap().score, 0.0);
        let s = bleu_n(&c, &r, 4, Smoothing::Epsilon).unwrap();
        assert!(s.smoothed && s.score < 1e-8);
    }

    #[test]
    fn hand_computed_bleu2() {
        // Candidate "a b c d" vs reference "a b x d e": unigram 3/4, bigram 1/3,
        // brevity penalty exp(1 - 5/4).
        let c = vec![toks("a b c d")];
        let r = vec![vec![toks("a b x d e")]];
        let expect = (1.0f64 - 5.0 / 4.0).exp() * (0.75f64 * (1.0 / 3.0)).sqrt();
        let got = bleu_n(&c, &r, 2, Smoothing::Exact).unwrap().score;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn clipping_limits_repeats() {
        let c = vec![toks("the the the the")];
        let r = vec![vec![toks("the cat is here"), toks("the the dog")]];
        // Unigram clipped count 2 of 4; closest reference length 4.
        let got = bleu_n(&c, &r, 1, Smoothing::Exact).unwrap().score;
        assert!((got - 0.5).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let e: Vec<Vec<String>> = vec![];
        assert_eq!(bleu_n(&e, &[], 3, Smoothing::Exact), Err(MetricError::Empty));
        assert_eq!(
            bleu_n(&[toks("a")], &[vec![toks("a")], vec![toks("b")]], 1, Smoothing::Exact),
            Err(MetricError::Mismatch(1, 2))
        );
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(MetricError::ZeroVariance));
        assert_eq!(v_score(&[]), Err(MetricError::Empty));
    }

    #[test]
    fn v_and_h_examples() {
        assert_eq!(v_score(&[0.5, 0.5]).unwrap(), 0.0);
        assert!((v_score(&[0.6, 0.8]).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(v_score(&[1.0; 4]).unwrap(), 0.5);
        assert!((v_score_per_audio(&[vec![0.6], vec![0.8, 1.0]]).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(h_score(0.3, 0.3).score, 0.3);
        assert_eq!(h_score(0.0, 0.0).score, 0.0);
        let h = h_score(0.3, -0.1);
        assert!(h.clamped && h.score == 0.0);
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.5, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn human_scores_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        std::fs::write(
            &p,
            "sample_id,rater_id,fluency,coherence,meaning,consistency\ns1,r1,4,4,4,4\ns1,r2,6,6,6,6\ns2,r1,1,2,3,4\n",
        )
        .unwrap();
        let m = read_human_scores(&p).unwrap();
        assert_eq!(m["s1"], 5.0);
        assert_eq!(m["s2"], 2.5);
    }

    proptest! {
        #[test]
        fn bleu_ignores_corpus_order(pairs in proptest::collection::vec(
            (proptest::collection::vec(0u8..5, 1..12), proptest::collection::vec(0u8..5, 1..12)), 1..8),
            rot in 0usize..8) {
            let c: Vec<Vec<u8>> = pairs.iter().map(|p| p.0.clone()).collect();
            let r: Vec<Vec<Vec<u8>>> = pairs.iter().map(|p| vec![p.1.clone()]).collect();
            let k = rot % c.len();
            let mut c2 = c.clone();
            let mut r2 = r.clone();
            c2.rotate_left(k);
            r2.rotate_left(k);
            let a = bleu_n(&c, &r, 3, Smoothing::Epsilon).unwrap().score;
            let b = bleu_n(&c2, &r2, 3, Smoothing::Epsilon).unwrap().score;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn h_score_is_symmetric_and_between(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
            let h = h_score(a, b).score;
            prop_assert!((h - h_score(b, a).score).abs() < 1e-15);
            prop_assert!(h >= a.min(b) - 1e-15 && h <= a.max(b) + 1e-15);
        }
    }
}
