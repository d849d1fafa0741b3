//! Deterministic stand-in for a content-moderation endpoint.
//!
//! Each category is a bag-of-tokens logistic scorer with its own decision
//! threshold. Scores live in (0, 1); a text is flagged when any category
//! score exceeds that category's threshold. Negative-weight ("benign")
//! tokens exist by construction so suffix-based evasion is possible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const MAX_MODERATION_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    /// One weight per token id (bag-of-tokens features).
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Flag threshold, strictly inside (0, 1) and independent per category.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModerationModel {
    pub categories: Vec<Category>,
    pub seed: u64,
}

/// Scores and flags for a single text, category order matching the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModerationScores {
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
}

impl ModerationScores {
    pub fn flagged(&self) -> bool {
        self.flags.iter().any(|&f| f)
    }

    pub fn score_sum(&self) -> f64 {
        self.scores.iter().sum()
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ModerationModel {
    /// Seeded random model over a vocabulary of `vocab_size` tokens. A few
    /// tokens per category get strongly positive ("toxic") or strongly
    /// negative ("benign") weights.
    pub fn seeded(seed: u64, vocab_size: u32, n_categories: usize) -> ModerationModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.6).expect("valid normal");
        let n = vocab_size as usize;
        let marked = (n / 8).clamp(2, 8);
        let mut categories = Vec::with_capacity(n_categories);
        for c in 0..n_categories {
            let mut weights: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            for _ in 0..marked {
                let t = rng.random_range(0..n);
                weights[t] = rng.random_range(2.0..3.0);
            }
            for _ in 0..marked {
                let t = rng.random_range(0..n);
                weights[t] = -rng.random_range(2.0..3.0);
            }
            categories.push(Category {
                name: format!("cat{c}"),
                weights,
                bias: -1.0,
                threshold: rng.random_range(0.35..0.7),
            });
        }
        ModerationModel { categories, seed }
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    /// Per-category scores and flags for one text.
    pub fn score(&self, vocab: &Vocabulary, text: &str) -> Result<ModerationScores> {
        let toks = vocab.tokenize(text)?;
        let mut bag = vec![0.0f64; vocab.size() as usize];
        for &t in toks.ids() {
            bag[t as usize] += 1.0;
        }
        let mut scores = Vec::with_capacity(self.categories.len());
        let mut flags = Vec::with_capacity(self.categories.len());
        for cat in &self.categories {
            let mut z = cat.bias;
            for (w, x) in cat.weights.iter().zip(&bag) {
                z += w * x;
            }
            let s = logistic(z);
            scores.push(s);
            flags.push(s > cat.threshold);
        }
        Ok(ModerationScores { scores, flags })
    }

    /// Batched scoring; one call per batch of at most 32 texts.
    pub fn moderate(&self, vocab: &Vocabulary, texts: &[String]) -> Result<Vec<ModerationScores>> {
        if texts.len() > MAX_MODERATION_BATCH {
            return Err(Error::BatchTooLarge(texts.len()));
        }
        texts.iter().map(|t| self.score(vocab, t)).collect()
    }

    /// Re-fit the thresholds so that the fraction of `corpus` that gets
    /// flagged matches the labeled fraction to within five percentage
    /// points. Thresholds move together along a common score quantile,
    /// which keeps the fit deterministic and monotone.
    pub fn calibrate(
        &self,
        vocab: &Vocabulary,
        corpus: &[(String, bool)],
    ) -> Result<ModerationModel> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("calibration corpus"));
        }
        let target = corpus.iter().filter(|(_, f)| *f).count() as f64 / corpus.len() as f64;

        let mut per_cat: Vec<Vec<f64>> =
            vec![Vec::with_capacity(corpus.len()); self.categories.len()];
        let mut all_scores: Vec<Vec<f64>> = Vec::with_capacity(corpus.len());
        for (text, _) in corpus {
            let s = self.score(vocab, text)?;
            for (c, &v) in s.scores.iter().enumerate() {
                per_cat[c].push(v);
            }
            all_scores.push(s.scores);
        }
        for col in &mut per_cat {
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        }

        let thresholds_at = |q: f64| -> Vec<f64> {
            per_cat
                .iter()
                .map(|col| {
                    if q >= 1.0 {
                        // Above every in-corpus score, still inside (0, 1).
                        (col[col.len() - 1] + 1e-9).min(1.0 - 1e-12)
                    } else {
                        col[(q * col.len() as f64).floor() as usize]
                    }
                })
                .collect()
        };
        let rate_at = |thr: &[f64]| -> f64 {
            let flagged = all_scores
                .iter()
                .filter(|s| s.iter().zip(thr).any(|(v, t)| v > t))
                .count();
            flagged as f64 / corpus.len() as f64
        };

        // Flag rate is non-increasing in q; bisect, then keep the best.
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut best = (f64::INFINITY, thresholds_at(1.0));
        for q in [0.0, 1.0] {
            let thr = thresholds_at(q);
            let err = (rate_at(&thr) - target).abs();
            if err < best.0 {
                best = (err, thr);
            }
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let thr = thresholds_at(mid);
            let rate = rate_at(&thr);
            let err = (rate - target).abs();
            if err < best.0 {
                best = (err, thr);
            }
            if rate > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if best.0 > 0.05 {
            return Err(Error::Calibration(format!(
                "could not reach flag rate {target:.3} within 5pp (best error {:.3})",
                best.0
            )));
        }

        let mut fitted = self.clone();
        for (cat, thr) in fitted.categories.iter_mut().zip(best.1) {
            cat.threshold = thr.clamp(1e-12, 1.0 - 1e-12);
        }
        Ok(fitted)
    }
}
