//! Synthetic trace corpora with controllable difficulty and guide quality.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnswerId, RoundRecord, Trace, TraceHeader, TraceSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_traces: usize,
    pub horizon: usize,
    pub answer_vocab_size: u32,
    /// Question difficulty is Beta(difficulty_alpha, difficulty_beta) on [0, 1].
    pub difficulty_alpha: f64,
    pub difficulty_beta: f64,
    /// Base correctness at round t is `sigmoid(intercept + round_slope*(t-1) - difficulty_slope*d)`.
    pub base_intercept: f64,
    pub base_round_slope: f64,
    pub base_difficulty_slope: f64,
    /// Probability the guide's replacement answer is correct when it rejects the base answer.
    pub guide_correct_prob: f64,
    /// Probability the yes/no judgment matches the base answer's actual correctness.
    pub judgment_accuracy: f64,
    /// Std-dev of Gaussian noise around the uncertainty centers below.
    pub uncertainty_noise: f64,
    pub uncertainty_if_correct: f64,
    pub uncertainty_if_wrong: f64,
    /// Probability a wrong base answer repeats the previous round's wrong answer.
    pub base_repeat_prob: f64,
    pub unsolvable_fraction: f64,
    pub base_prompt_tokens: f64,
    pub base_context_growth: f64,
    pub base_output_tokens: f64,
    pub guide_template_tokens: f64,
    pub guide_output_tokens: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_traces: 1000,
            horizon: 4,
            answer_vocab_size: 64,
            difficulty_alpha: 2.0,
            difficulty_beta: 2.0,
            base_intercept: 1.0,
            base_round_slope: 0.4,
            base_difficulty_slope: 3.5,
            guide_correct_prob: 0.75,
            judgment_accuracy: 0.85,
            uncertainty_noise: 0.15,
            uncertainty_if_correct: 0.25,
            uncertainty_if_wrong: 0.65,
            base_repeat_prob: 0.5,
            unsolvable_fraction: 0.15,
            base_prompt_tokens: 120.0,
            base_context_growth: 80.0,
            base_output_tokens: 60.0,
            guide_template_tokens: 40.0,
            guide_output_tokens: 4.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::validation("horizon", "must be at least 1"));
        }
        if self.answer_vocab_size < 2 * self.horizon as u32 + 1 {
            return Err(Error::validation(
                "answer_vocab_size",
                "must exceed 2*horizon so unsolvable traces can avoid the true answer",
            ));
        }
        for (name, p) in [
            ("guide_correct_prob", self.guide_correct_prob),
            ("judgment_accuracy", self.judgment_accuracy),
            ("base_repeat_prob", self.base_repeat_prob),
            ("unsolvable_fraction", self.unsolvable_fraction),
            ("uncertainty_if_correct", self.uncertainty_if_correct),
            ("uncertainty_if_wrong", self.uncertainty_if_wrong),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(name, format!("{p} is not a probability")));
            }
        }
        if !(self.difficulty_alpha > 0.0 && self.difficulty_beta > 0.0) {
            return Err(Error::validation("difficulty_alpha", "Beta parameters must be positive"));
        }
        if self.base_round_slope < 0.0 {
            return Err(Error::validation(
                "base_round_slope",
                "base correctness must be nondecreasing in the round",
            ));
        }
        if !(self.uncertainty_noise >= 0.0) {
            return Err(Error::validation("uncertainty_noise", "must be non-negative"));
        }
        for (name, v) in [
            ("base_prompt_tokens", self.base_prompt_tokens),
            ("base_context_growth", self.base_context_growth),
            ("base_output_tokens", self.base_output_tokens),
            ("guide_template_tokens", self.guide_template_tokens),
            ("guide_output_tokens", self.guide_output_tokens),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, "token counts must be non-negative"));
            }
        }
        Ok(())
    }

    /// Probability the base answer is correct at a 1-based round for difficulty `d`.
    pub fn base_correct_prob(&self, round: usize, difficulty: f64) -> f64 {
        let z = self.base_intercept + self.base_round_slope * (round as f64 - 1.0)
            - self.base_difficulty_slope * difficulty;
        1.0 / (1.0 + (-z).exp())
    }
}

fn wrong_answer(rng: &mut ChaCha8Rng, vocab: u32, truth: AnswerId) -> AnswerId {
    let draw = rng.random_range(0..vocab - 1);
    if draw >= truth {
        draw + 1
    } else {
        draw
    }
}

fn token_count(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let jitter = rng.random_range(0.75..1.25);
    (mean * jitter).round().max(1.0) as u64
}

/// Generates a deterministic corpus from `config.seed`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<TraceSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let difficulty = Beta::new(config.difficulty_alpha, config.difficulty_beta)
        .map_err(|e| Error::validation("difficulty_alpha", e.to_string()))?;
    let noise = Normal::new(0.0, config.uncertainty_noise)
        .map_err(|e| Error::validation("uncertainty_noise", e.to_string()))?;
    let vocab = config.answer_vocab_size;
    let rounds_all: Vec<usize> = (0..config.horizon).collect();

    let mut traces = Vec::with_capacity(config.num_traces);
    for n in 0..config.num_traces {
        let truth: AnswerId = rng.random_range(0..vocab);
        let d = difficulty.sample(&mut rng);
        let solvable = !rng.random_bool(config.unsolvable_fraction);

        let mut rounds: Vec<RoundRecord> = Vec::with_capacity(config.horizon);
        let mut prev_base: Option<AnswerId> = None;
        for t in 1..=config.horizon {
            let base_correct = solvable && rng.random_bool(config.base_correct_prob(t, d));
            let base_answer = if base_correct {
                truth
            } else {
                match prev_base {
                    Some(p) if p != truth && rng.random_bool(config.base_repeat_prob) => p,
                    _ => wrong_answer(&mut rng, vocab, truth),
                }
            };
            let judgment_accurate = rng.random_bool(config.judgment_accuracy);
            let guide_agrees = base_correct == judgment_accurate;
            let guide_answer = if guide_agrees {
                base_answer
            } else if solvable && !base_correct && rng.random_bool(config.guide_correct_prob) {
                truth
            } else {
                let mut a = wrong_answer(&mut rng, vocab, truth);
                while a == base_answer {
                    a = wrong_answer(&mut rng, vocab, truth);
                }
                a
            };

            let context = config.base_prompt_tokens + config.base_context_growth * (t as f64 - 1.0);
            let base_tokens_in = token_count(&mut rng, context);
            let base_tokens_out = token_count(&mut rng, config.base_output_tokens);
            let guide_tokens_in = base_tokens_in
                + base_tokens_out
                + token_count(&mut rng, config.guide_template_tokens);
            let guide_tokens_out = if guide_agrees {
                1
            } else {
                1 + token_count(&mut rng, config.guide_output_tokens)
            };

            rounds.push(RoundRecord {
                base_answer,
                guide_agrees,
                guide_answer,
                guide_uncertainty: 0.0,
                base_tokens_in,
                base_tokens_out,
                guide_tokens_in,
                guide_tokens_out,
            });
            prev_base = Some(base_answer);
        }

        // A solvable question must have the truth somewhere in its answer universe.
        if solvable
            && !rounds
                .iter()
                .any(|r| r.base_answer == truth || r.guide_answer == truth)
        {
            let t = *rounds_all.choose(&mut rng).expect("horizon >= 1");
            rounds[t].guide_agrees = false;
            rounds[t].guide_answer = truth;
        }

        for r in rounds.iter_mut() {
            let center = if r.guide_answer == truth {
                config.uncertainty_if_correct
            } else {
                config.uncertainty_if_wrong
            };
            r.guide_uncertainty = (center + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }

        traces.push(Trace {
            question_id: format!("syn-{}-{n:06}", config.seed),
            true_answer: truth,
            rounds,
            solvable_hint: Some(solvable),
        });
    }

    Ok(TraceSet {
        header: TraceHeader::new(config.horizon, vocab),
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::answer_universe;

    fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
        fn ranks(v: &[f64]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
            let mut r = vec![0.0; v.len()];
            let mut i = 0;
            while i < idx.len() {
                let mut j = i;
                while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                    j += 1;
                }
                let avg = (i + j) as f64 / 2.0 + 1.0;
                for k in i..=j {
                    r[idx[k]] = avg;
                }
                i = j + 1;
            }
            r
        }
        let (rx, ry) = (ranks(xs), ranks(ys));
        let n = xs.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn zero_unsolvable_fraction_means_all_solvable() {
        let cfg = SyntheticConfig {
            num_traces: 2000,
            unsolvable_fraction: 0.0,
            ..Default::default()
        };
        let set = generate_synthetic(&cfg).unwrap();
        for t in &set.traces {
            assert!(answer_universe(t).contains(t.true_answer));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SyntheticConfig {
            num_traces: 300,
            seed: 42,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SyntheticConfig { seed: 43, ..cfg.clone() };
        assert_ne!(generate_synthetic(&other).unwrap(), generate_synthetic(&cfg).unwrap());
    }

    #[test]
    fn unsolvable_rate_matches_config() {
        let cfg = SyntheticConfig {
            num_traces: 10_000,
            unsolvable_fraction: 0.2,
            seed: 7,
            ..Default::default()
        };
        let set = generate_synthetic(&cfg).unwrap();
        let unsolvable = set
            .traces
            .iter()
            .filter(|t| !answer_universe(t).contains(t.true_answer))
            .count() as f64
            / set.traces.len() as f64;
        assert!((unsolvable - 0.2).abs() <= 0.02, "rate {unsolvable}");
    }

    #[test]
    fn uncertainty_anticorrelates_with_guide_correctness() {
        let cfg = SyntheticConfig {
            num_traces: 3000,
            ..Default::default()
        };
        let set = generate_synthetic(&cfg).unwrap();
        let mut u = Vec::new();
        let mut correct = Vec::new();
        for t in &set.traces {
            for r in &t.rounds {
                u.push(r.guide_uncertainty);
                correct.push(if r.guide_answer == t.true_answer { 1.0 } else { 0.0 });
            }
        }
        assert!(spearman(&u, &correct) < 0.0);
    }

    #[test]
    fn every_generated_trace_is_valid() {
        let set = generate_synthetic(&SyntheticConfig::default()).unwrap();
        for t in &set.traces {
            super::super::validate_trace(t, set.header.horizon, set.header.answer_vocab_size).unwrap();
        }
    }

    #[test]
    fn base_curve_is_nondecreasing_in_round() {
        let cfg = SyntheticConfig::default();
        for d in [0.0, 0.3, 0.9] {
            for t in 1..cfg.horizon {
                assert!(cfg.base_correct_prob(t + 1, d) >= cfg.base_correct_prob(t, d));
            }
        }
    }

    #[test]
    fn rejects_bad_probability() {
        let cfg = SyntheticConfig {
            judgment_accuracy: 1.5,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Validation { .. })));
    }
}
