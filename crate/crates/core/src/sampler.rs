//! Parallel entity generation from Gaussian noisy spans: the reverse
//! diffusion loop over the timestep plan, candidate decoding, and
//! post-processing (de-duplication, filtering).

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Entity, LabelVocab, Sentence, SpanCodec};
use crate::denoiser::{BoundaryDenoiser, Denoiser, SentenceEncoding};
use crate::error::{Error, Result};
use crate::schedule::{TimestepPlan, VarianceSchedule};

/// Inference-time knobs; `k_eval` is decoupled from the training-time K.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub k_eval: usize,
    pub gamma: usize,
    /// Filtering threshold on the 3-point candidate score.
    pub phi: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_eval == 0 {
            return Err(Error::Validation("k_eval must be >= 1".into()));
        }
        if self.gamma == 0 {
            return Err(Error::Validation("gamma must be >= 1".into()));
        }
        if !(0.0..=3.0).contains(&self.phi) {
            return Err(Error::Validation(format!(
                "threshold phi = {} must lie in [0, 3]",
                self.phi
            )));
        }
        Ok(())
    }
}

/// A decoded candidate before post-processing. `score` is the sum of the
/// winning left/right boundary probabilities and the type probability.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEntity {
    pub left: usize,
    pub right: usize,
    pub label: usize,
    pub score: f64,
    /// Probability of the decoded type, used by de-duplication.
    pub type_prob: f64,
    /// Probability of the no-entity class; a candidate dominated by it is
    /// dropped in post-processing.
    pub null_prob: f64,
}

impl CandidateEntity {
    pub fn entity(&self) -> Entity {
        Entity { left: self.left, right: self.right, label: self.label }
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    (best, best_v)
}

/// Run the reverse process for one sentence: draw `k_eval x 2` Gaussian
/// spans, iterate denoise + DDIM refinement over the plan (the last
/// iteration keeps the denoiser output directly), then decode candidates.
pub fn sample_entities(
    denoiser: &dyn BoundaryDenoiser,
    enc: &SentenceEncoding,
    cfg: &SamplerConfig,
    sched: &VarianceSchedule,
    codec: &SpanCodec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CandidateEntity>> {
    cfg.validate()?;
    let plan = TimestepPlan::new(sched.t_max, cfg.gamma)?;
    let mut x = Array2::from_shape_fn((cfg.k_eval, 2), |_| rng.sample::<f64, _>(StandardNormal));

    let mut last = None;
    for (t_cur, t_prev) in plan.reverse_pairs() {
        let out = denoiser.denoise(&x, enc, t_cur, codec)?;
        if t_prev == 0 {
            last = Some(out);
        } else {
            x = sched.ddim_step(&x, &out.x0_hat, t_cur, t_prev)?;
        }
    }
    let out = last.expect("plan has at least one step");

    let num_types = denoiser.num_types();
    let mut candidates = Vec::with_capacity(cfg.k_eval);
    for k in 0..cfg.k_eval {
        let (l, lp) = argmax(out.p_left.row(k).iter().cloned());
        let (r, rp) = argmax(out.p_right.row(k).iter().cloned());
        let (label, tp) = argmax(out.p_class.row(k).iter().take(num_types).cloned());
        let (left, right) = if l <= r { (l, r) } else { (r, l) };
        candidates.push(CandidateEntity {
            left,
            right,
            label,
            score: lp + rp + tp,
            type_prob: tp,
            null_prob: out.p_class[[k, num_types]],
        });
    }
    Ok(candidates)
}

/// De-duplicate and filter: spans sharing identical boundaries collapse to
/// the one with the maximal type probability (first occurrence on ties),
/// candidates scoring below `phi` or dominated by the no-entity class are
/// dropped, and the output is ordered by (left, right, type).
pub fn postprocess(candidates: &[CandidateEntity], phi: f64) -> Vec<CandidateEntity> {
    let mut kept: Vec<CandidateEntity> = Vec::new();
    let mut index: std::collections::HashMap<(usize, usize), usize> = Default::default();
    for c in candidates {
        match index.get(&(c.left, c.right)) {
            Some(&i) => {
                if c.type_prob > kept[i].type_prob {
                    kept[i] = c.clone();
                }
            }
            None => {
                index.insert((c.left, c.right), kept.len());
                kept.push(c.clone());
            }
        }
    }
    let mut out: Vec<CandidateEntity> = kept
        .into_iter()
        .filter(|c| c.score >= phi && c.null_prob <= c.type_prob)
        .collect();
    out.sort_by_key(|c| (c.left, c.right, c.label));
    out
}

/// Encode once, sample, post-process: the per-sentence inference pipeline.
pub fn predict_sentence(
    model: &Denoiser,
    sentence: &Sentence,
    cfg: &SamplerConfig,
    sched: &VarianceSchedule,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CandidateEntity>> {
    let enc = model.encode_sentence(sentence)?;
    let codec = SpanCodec::new(sentence.len(), lambda)?;
    let candidates = sample_entities(model, &enc, cfg, sched, &codec, rng)?;
    Ok(postprocess(&candidates, cfg.phi))
}

/// Stable per-sentence RNG stream derived from the run seed, so concurrent
/// sentence processing cannot change results.
pub fn sentence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Run the pipeline over a dataset and write span_json predictions with
/// per-entity scores.
pub fn predict_file(
    model: &Denoiser,
    items: &[(Sentence, crate::corpus::EntitySet)],
    labels: &LabelVocab,
    cfg: &SamplerConfig,
    sched: &VarianceSchedule,
    lambda: f64,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    use rayon::prelude::*;
    let predictions: Vec<Vec<CandidateEntity>> = items
        .par_iter()
        .enumerate()
        .map(|(i, (sentence, _))| {
            let mut rng = sentence_rng(cfg.seed, i);
            predict_sentence(model, sentence, cfg, sched, lambda, &mut rng)
        })
        .collect::<Result<_>>()?;

    let rows: Vec<(Sentence, crate::corpus::EntitySet)> = items
        .iter()
        .zip(&predictions)
        .map(|((sentence, _), cands)| {
            let set = crate::corpus::EntitySet::new(cands.iter().map(|c| c.entity()).collect());
            (sentence.clone(), set)
        })
        .collect();
    let scores: Vec<Vec<f64>> =
        predictions.iter().map(|cs| cs.iter().map(|c| c.score).collect()).collect();
    crate::corpus::write_span_json(&rows, labels, Some(&scores), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntitySet;
    use crate::denoiser::OracleDenoiser;
    use crate::schedule::ScheduleKind;

    fn cand(l: usize, r: usize, label: usize, score: f64, tp: f64, np: f64) -> CandidateEntity {
        CandidateEntity { left: l, right: r, label, score, type_prob: tp, null_prob: np }
    }

    #[test]
    fn dedup_keeps_highest_type_probability() {
        let cands = vec![
            cand(1, 2, 0, 2.8, 0.9, 0.05),
            cand(1, 2, 1, 2.3, 0.4, 0.05),
            cand(3, 4, 1, 2.9, 0.95, 0.01),
        ];
        let out = postprocess(&cands, 0.0);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].label, 0);
        assert_eq!(out[0].type_prob, 0.9);
        // ties keep the first occurrence
        let cands = vec![cand(1, 2, 0, 2.8, 0.9, 0.0), cand(1, 2, 1, 2.8, 0.9, 0.0)];
        let out = postprocess(&cands, 0.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].label, 0);
    }

    #[test]
    fn threshold_and_null_dominance_filtering() {
        let cands = vec![
            cand(0, 1, 0, 2.4, 0.8, 0.1), // below phi = 2.5
            cand(2, 3, 0, 2.6, 0.8, 0.1),
            cand(4, 5, 0, 2.9, 0.3, 0.6), // no-entity dominated
        ];
        let out = postprocess(&cands, 2.5);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].left, out[0].right), (2, 3));

        // phi = 0 with no duplicates: only the null-dominated row drops
        let out = postprocess(&cands, 0.0);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn postprocess_is_threshold_monotone_and_duplicate_free() {
        use rand::prelude::*;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cands: Vec<CandidateEntity> = (0..40)
            .map(|_| {
                let l = rng.gen_range(0..6);
                let r = rng.gen_range(l..6);
                let tp = rng.gen_range(0.0..1.0);
                cand(
                    l,
                    r,
                    rng.gen_range(0..2),
                    rng.gen_range(0.0..3.0),
                    tp,
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let mut prev = postprocess(&cands, 0.0);
        for phi in [0.5, 1.0, 1.5, 2.0, 2.5, 3.0] {
            let cur = postprocess(&cands, phi);
            for c in &cur {
                assert!(prev.contains(c), "phi {phi} introduced a new candidate");
            }
            let mut pairs: Vec<(usize, usize)> = cur.iter().map(|c| (c.left, c.right)).collect();
            pairs.dedup();
            assert_eq!(pairs.len(), cur.len(), "duplicate span at phi {phi}");
            prev = cur;
        }
    }

    #[test]
    fn oracle_sampling_recovers_gold_exactly() {
        let sched = VarianceSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
        let codec = SpanCodec::new(8, 1.0).unwrap();
        let gold = EntitySet::new(vec![
            Entity { left: 1, right: 2, label: 0 },
            Entity { left: 4, right: 6, label: 1 },
        ]);
        let oracle = OracleDenoiser::new(gold.clone(), 2, codec);
        let enc = SentenceEncoding { h_s: Array2::zeros((8, 4)) };
        for phi in [0.0, 2.5] {
            let cfg = SamplerConfig { k_eval: 10, gamma: 5, phi, seed: 7 };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let cands = sample_entities(&oracle, &enc, &cfg, &sched, &codec, &mut rng).unwrap();
            assert_eq!(cands.len(), 10);
            assert!(cands.iter().all(|c| (c.score - 3.0).abs() < 1e-12));
            let found: std::collections::BTreeSet<(usize, usize, usize)> = postprocess(&cands, phi)
                .iter()
                .map(|c| (c.left, c.right, c.label))
                .collect();
            let expect: std::collections::BTreeSet<(usize, usize, usize)> =
                gold.entities.iter().map(|e| (e.left, e.right, e.label)).collect();
            assert_eq!(found, expect);
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let sched = VarianceSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        let codec = SpanCodec::new(6, 1.0).unwrap();
        let gold = EntitySet::new(vec![Entity { left: 0, right: 2, label: 0 }]);
        let oracle = OracleDenoiser::new(gold, 2, codec);
        let enc = SentenceEncoding { h_s: Array2::zeros((6, 4)) };
        let cfg = SamplerConfig { k_eval: 16, gamma: 5, phi: 2.5, seed: 11 };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            sample_entities(&oracle, &enc, &cfg, &sched, &codec, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_sampler_configs_are_rejected() {
        let bad = SamplerConfig { k_eval: 0, gamma: 5, phi: 2.5, seed: 0 };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig { k_eval: 5, gamma: 0, phi: 2.5, seed: 0 };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig { k_eval: 5, gamma: 5, phi: 3.5, seed: 0 };
        assert!(bad.validate().is_err());
    }
}
