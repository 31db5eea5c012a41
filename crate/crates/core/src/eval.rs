//! Exact-match evaluation, the analysis sweeps, ablation harness, and report
//! plumbing for the command-line surface.

use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use crate::config::RunConfig;
use crate::corpus::{make_synthetic_corpus, Dataset, Entity, LabelVocab, SyntheticSpec};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::sampler::{predict_sentence, sentence_rng, SamplerConfig};
use crate::schedule::VarianceSchedule;

/// What the throughput numbers cover; embedded in benchmark reports.
pub const TIMED_REGION: &str = "per-sentence encoding + reverse diffusion + post-processing; \
     model loading and dataset parsing excluded";

#[derive(Debug, Clone, Serialize, Default)]
pub struct TypePrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

/// Exact span-and-type match scores with per-type breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
    pub per_type: BTreeMap<String, TypePrf>,
}

fn prf(correct: usize, predicted: usize, gold: usize) -> (f64, f64, f64) {
    let p = if predicted > 0 { correct as f64 / predicted as f64 } else { 0.0 };
    let r = if gold > 0 { correct as f64 / gold as f64 } else { 0.0 };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

/// Multiset exact matching: an entity is correct iff boundaries and type all
/// match a gold entity, each gold matched at most once.
pub fn compute_prf(
    pred: &[Vec<Entity>],
    gold: &[Vec<Entity>],
    labels: &LabelVocab,
) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(Error::Validation(format!(
            "prediction set covers {} sentences, gold covers {}",
            pred.len(),
            gold.len()
        )));
    }
    let mut correct = 0usize;
    let mut by_type: HashMap<usize, TypePrf> = HashMap::new();
    let mut predicted = 0usize;
    let mut gold_total = 0usize;

    for (p_sent, g_sent) in pred.iter().zip(gold) {
        predicted += p_sent.len();
        gold_total += g_sent.len();
        let mut gold_counts: HashMap<(usize, usize, usize), usize> = HashMap::new();
        for g in g_sent {
            *gold_counts.entry((g.left, g.right, g.label)).or_default() += 1;
            by_type.entry(g.label).or_default().gold += 1;
        }
        for p in p_sent {
            let t = by_type.entry(p.label).or_default();
            t.predicted += 1;
            if let Some(c) = gold_counts.get_mut(&(p.left, p.right, p.label)) {
                if *c > 0 {
                    *c -= 1;
                    correct += 1;
                    t.correct += 1;
                }
            }
        }
    }

    let (precision, recall, f1) = prf(correct, predicted, gold_total);
    let per_type = by_type
        .into_iter()
        .map(|(id, mut t)| {
            let (p, r, f) = prf(t.correct, t.predicted, t.gold);
            t.precision = p;
            t.recall = r;
            t.f1 = f;
            (labels.name(id).unwrap_or("<unknown>").to_string(), t)
        })
        .collect();
    Ok(EvalReport { precision, recall, f1, gold: gold_total, predicted, correct, per_type })
}

/// Check that two loaded datasets cover the same sentences in the same order.
pub fn check_aligned(pred: &Dataset, gold: &Dataset) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::Validation(format!(
            "prediction file has {} sentences, gold file has {}",
            pred.len(),
            gold.len()
        )));
    }
    for (i, ((ps, _), (gs, _))) in pred.items.iter().zip(&gold.items).enumerate() {
        if ps.id != gs.id {
            return Err(Error::Validation(format!(
                "sentence id mismatch at record {}: {:?} vs {:?}",
                i + 1,
                ps.id,
                gs.id
            )));
        }
    }
    Ok(())
}

/// Sample and post-process every sentence (in parallel, with per-sentence
/// derived seeds) and score against the gold annotations.
pub fn evaluate_model(
    model: &Denoiser,
    ds: &Dataset,
    cfg: &SamplerConfig,
    sched: &VarianceSchedule,
    lambda: f64,
) -> Result<EvalReport> {
    let pred: Vec<Vec<Entity>> = ds
        .items
        .par_iter()
        .enumerate()
        .map(|(i, (sentence, _))| {
            let mut rng = sentence_rng(cfg.seed, i);
            predict_sentence(model, sentence, cfg, sched, lambda, &mut rng)
                .map(|cands| cands.iter().map(|c| c.entity()).collect())
        })
        .collect::<Result<_>>()?;
    let gold: Vec<Vec<Entity>> = ds.items.iter().map(|(_, g)| g.entities.clone()).collect();
    compute_prf(&pred, &gold, &ds.labels)
}

#[derive(Debug, Clone, Serialize)]
pub struct GammaRow {
    pub gamma: usize,
    pub f1: f64,
    pub sentences_per_sec: f64,
    pub wall_seconds: f64,
}

/// Evaluate at each reverse-iteration count, serially timed end to end.
pub fn sweep_gamma(
    model: &Denoiser,
    ds: &Dataset,
    gammas: &[usize],
    base: &SamplerConfig,
    sched: &VarianceSchedule,
    lambda: f64,
) -> Result<Vec<GammaRow>> {
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let cfg = SamplerConfig { gamma, ..*base };
        let start = Instant::now();
        let mut pred = Vec::with_capacity(ds.len());
        for (i, (sentence, _)) in ds.items.iter().enumerate() {
            let mut rng = sentence_rng(cfg.seed, i);
            let cands = predict_sentence(model, sentence, &cfg, sched, lambda, &mut rng)?;
            pred.push(cands.iter().map(|c| c.entity()).collect::<Vec<_>>());
        }
        let wall = start.elapsed().as_secs_f64();
        let gold: Vec<Vec<Entity>> = ds.items.iter().map(|(_, g)| g.entities.clone()).collect();
        let report = compute_prf(&pred, &gold, &ds.labels)?;
        rows.push(GammaRow {
            gamma,
            f1: report.f1,
            sentences_per_sec: ds.len() as f64 / wall,
            wall_seconds: wall,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct KevalRow {
    pub k_eval: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Evaluate at each sampling count without retraining, averaging the scores
/// over the given sampling seeds.
pub fn sweep_keval(
    model: &Denoiser,
    ds: &Dataset,
    kevals: &[usize],
    base: &SamplerConfig,
    sched: &VarianceSchedule,
    lambda: f64,
    seeds: &[u64],
) -> Result<Vec<KevalRow>> {
    if seeds.is_empty() {
        return Err(Error::Validation("seed list for the sweep is empty".into()));
    }
    let mut rows = Vec::with_capacity(kevals.len());
    for &k_eval in kevals {
        let mut acc = (0.0, 0.0, 0.0);
        for &seed in seeds {
            let cfg = SamplerConfig { k_eval, seed, ..*base };
            let report = evaluate_model(model, ds, &cfg, sched, lambda)?;
            acc = (acc.0 + report.precision, acc.1 + report.recall, acc.2 + report.f1);
        }
        let n = seeds.len() as f64;
        rows.push(KevalRow {
            k_eval,
            precision: acc.0 / n,
            recall: acc.1 / n,
            f1: acc.2 / n,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Scheduler,
    Expansion,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scheduler" => Ok(AblationAxis::Scheduler),
            "expansion" => Ok(AblationAxis::Expansion),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?} (expected \"scheduler\" or \"expansion\")"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateRow {
    pub variant: String,
    pub dev_f1: f64,
}

/// Desk-scale corpus and epoch budget for ablation training runs.
#[derive(Debug, Clone, Copy)]
pub struct AblateBudget {
    pub train_sentences: usize,
    pub dev_sentences: usize,
    pub epochs: usize,
}

impl Default for AblateBudget {
    fn default() -> Self {
        Self { train_sentences: 300, dev_sentences: 60, epochs: 2 }
    }
}

/// Train a small model per variant on a synthetic corpus and tabulate dev
/// F1. A comparison harness only; no thresholds are enforced.
pub fn ablate(
    axis: AblationAxis,
    base: &RunConfig,
    budget: &AblateBudget,
) -> Result<Vec<AblateRow>> {
    let train = make_synthetic_corpus(&SyntheticSpec {
        sentences: budget.train_sentences,
        seed: base.seed,
        ..Default::default()
    })?;
    let dev = make_synthetic_corpus(&SyntheticSpec {
        sentences: budget.dev_sentences,
        seed: base.seed + 1,
        ..Default::default()
    })?;

    let variants: Vec<(String, RunConfig)> = match axis {
        AblationAxis::Scheduler => {
            use crate::schedule::ScheduleKind::*;
            let mut v = Vec::new();
            for kind in [Linear, Cosine] {
                for t in [1000usize, 1500, 2000] {
                    let mut cfg = base.clone();
                    cfg.scheduler = kind;
                    cfg.timesteps = t;
                    v.push((format!("{kind} T={t}"), cfg));
                }
            }
            v
        }
        AblationAxis::Expansion => {
            use crate::corpus::ExpansionStrategy::*;
            let mut v = Vec::new();
            for strategy in [Repetition, Random] {
                for k in [60usize, 120, 150] {
                    let mut cfg = base.clone();
                    cfg.expansion = strategy;
                    cfg.k = k;
                    cfg.k_eval = k;
                    v.push((format!("{strategy} K={k}"), cfg));
                }
            }
            v
        }
    };

    let mut rows = Vec::with_capacity(variants.len());
    for (variant, mut cfg) in variants {
        cfg.epoch = budget.epochs;
        let dir = tempfile::tempdir().map_err(|e| Error::Runtime(e.to_string()))?;
        let report = crate::trainer::train(
            &cfg,
            &train,
            &dev,
            crate::denoiser::EncoderAdapter::Toy,
            dir.path(),
        )?;
        rows.push(AblateRow { variant, dev_f1: report.best_dev_f1 });
    }
    Ok(rows)
}

/// Envelope for machine-readable outputs: every report embeds the seed and
/// the configuration hash.
#[derive(Debug, Serialize)]
pub struct Report<T: Serialize> {
    pub seed: u64,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timed_region: Option<&'static str>,
    pub payload: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(cfg: &RunConfig, payload: T) -> Self {
        Self { seed: cfg.seed, config_sha256: cfg.hash(), timed_region: None, payload }
    }

    pub fn with_timing(mut self) -> Self {
        self.timed_region = Some(TIMED_REGION);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Runtime(e.to_string()))
    }
}
