//! Training loop: noise gold boundaries at a random timestep, run the
//! denoiser, match predictions to gold, and optimize.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::corpus::{expand_entities, Dataset, EntitySet, Sentence, SpanCodec};
use crate::denoiser::{
    save_checkpoint, Denoiser, EncoderAdapter, GradStore, ModelConfig, Session, TokenVocab,
};
use crate::error::{Error, Result};
use crate::matching::{hungarian_match, traced_training_loss, Matching};
use crate::sampler::SamplerConfig;
use crate::schedule::VarianceSchedule;

/// Linear warmup to the peak rate, then linear decay to zero. `step` counts
/// completed optimizer updates; the rate is 0 at step 0 (for any nonzero
/// warmup) and 0 again at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = (total_steps as f64 * warmup_fraction).round();
    let s = step as f64;
    if warmup > 0.0 && s < warmup {
        peak * s / warmup
    } else {
        let span = total_steps as f64 - warmup;
        if span <= 0.0 {
            0.0
        } else {
            peak * ((total_steps as f64 - s) / span).max(0.0)
        }
    }
}

/// Adam with decoupled weight decay. Decay applies only to parameters
/// registered with the decay flag (weight matrices, embeddings).
pub struct AdamW {
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: (0..num_params).map(|_| None).collect(),
            v: (0..num_params).map(|_| None).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(
        &mut self,
        params: &mut crate::denoiser::ParamSet,
        grads: &GradStore,
        lr: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in params.ids() {
            let Some(g) = grads.per_param[id.0].as_ref() else { continue };
            let m = self.m[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
            *m *= self.beta1;
            *m += &(g * (1.0 - self.beta1));
            *v *= self.beta2;
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gg| {
                *vv += (1.0 - self.beta2) * gg * gg;
            });
            let decay = if params.decay(id) { weight_decay } else { 0.0 };
            let value = params.value_mut(id);
            ndarray::Zip::from(&mut *value).and(&*m).and(&*v).for_each(|w, &mm, &vv| {
                let m_hat = mm / bc1;
                let v_hat = vv / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * *w);
            });
        }
    }
}

/// Inputs drawn ahead of the parallel section so results are independent of
/// scheduling: the timestep, the Gaussian noise, and the expanded boundaries.
struct DrawnSentence {
    x0: Array2<f64>,
    eps: Array2<f64>,
    t: usize,
}

/// Loss-term weights of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub null_class: f64,
    pub boundary_negative: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { null_class: 1.0, boundary_negative: 1.0 }
    }
}

impl LossWeights {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self { null_class: cfg.null_class_weight, boundary_negative: cfg.boundary_negative_weight }
    }
}

/// One forward/backward (or forward-only) pass for a single sentence.
/// `fixed_match` overrides the Hungarian assignment, which the gradient
/// check uses to hold the matching constant across perturbations.
pub struct SentencePass {
    pub loss: f64,
    pub grads: Option<GradStore>,
    pub matching: Matching,
}

#[allow(clippy::too_many_arguments)]
pub fn sentence_loss(
    model: &Denoiser,
    sentence: &Sentence,
    gold: &EntitySet,
    x_t: &Array2<f64>,
    t: usize,
    lambda: f64,
    weights: LossWeights,
    freeze_encoder: bool,
    track: bool,
    fixed_match: Option<&Matching>,
) -> Result<SentencePass> {
    let codec = SpanCodec::new(sentence.len(), lambda)?;
    let mut s = Session::new(&model.params, track, freeze_encoder);
    let h_s = model.traced_encode(&mut s, sentence)?;
    let traced = model.decode_traced(&mut s, h_s, x_t, t, &codec)?;
    let output = model.output_from_traced(&s, &traced, &codec);
    let matching = match fixed_match {
        Some(m) => m.clone(),
        None => hungarian_match(&output, gold)?,
    };
    let loss_var = traced_training_loss(
        &mut s,
        &traced,
        gold,
        &matching,
        weights.null_class,
        weights.boundary_negative,
    );
    let loss = s.tape.scalar(loss_var);
    let grads = if track {
        let g = s.tape.backward(loss_var);
        Some(s.extract_grads(g))
    } else {
        None
    };
    Ok(SentencePass { loss, grads, matching })
}

/// One optimizer update over a batch (Algorithm 1 body). Draws a timestep
/// and noise per sentence, diffuses the expanded gold boundaries, runs the
/// denoiser, matches, and steps. Returns the batch-mean loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Denoiser,
    opt: &mut AdamW,
    batch: &[&(Sentence, EntitySet)],
    sched: &VarianceSchedule,
    cfg: &RunConfig,
    lr: f64,
    freeze_encoder: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut drawn = Vec::with_capacity(batch.len());
    let mut kept = Vec::with_capacity(batch.len());
    for (sentence, gold) in batch {
        if gold.len() > cfg.k {
            if cfg.skip_oversized {
                eprintln!(
                    "warning: sentence {} has {} entities, more than K = {}; skipped",
                    sentence.id,
                    gold.len(),
                    cfg.k
                );
                continue;
            }
            return Err(Error::Validation(format!(
                "sentence {} has {} gold entities but K = {}",
                sentence.id,
                gold.len(),
                cfg.k
            )));
        }
        let codec = SpanCodec::new(sentence.len(), cfg.scale_factor)?;
        let expanded = expand_entities(gold, cfg.k, cfg.expansion, &codec, rng)?;
        let t = rng.gen_range(1..=sched.t_max);
        let eps = Array2::from_shape_fn((cfg.k, 2), |_| rng.sample::<f64, _>(StandardNormal));
        drawn.push(DrawnSentence { x0: expanded.b, eps, t });
        kept.push((sentence, gold));
    }
    if kept.is_empty() {
        return Ok(0.0);
    }

    let passes: Vec<Result<SentencePass>> = kept
        .par_iter()
        .zip(&drawn)
        .map(|((sentence, gold), d)| {
            let x_t = sched.forward_diffuse(&d.x0, d.t, &d.eps)?;
            sentence_loss(
                model,
                sentence,
                gold,
                &x_t,
                d.t,
                cfg.scale_factor,
                LossWeights::from_config(cfg),
                freeze_encoder,
                true,
                None,
            )
        })
        .collect();

    let mut total_loss = 0.0;
    let mut grads = GradStore::zeros_like(&model.params);
    let n = kept.len() as f64;
    for pass in passes {
        let pass = pass?;
        total_loss += pass.loss;
        grads.add_assign(pass.grads.as_ref().expect("tracked pass has grads"));
    }
    grads.scale(1.0 / n);

    if cfg.grad_clip_norm > 0.0 {
        let norm = grads.global_norm();
        if norm > cfg.grad_clip_norm {
            grads.scale(cfg.grad_clip_norm / norm);
        }
    }
    opt.update(&mut model.params, &grads, lr, cfg.weight_decay);
    Ok(total_loss / n)
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub dev_f1: f64,
}

pub struct TrainReport {
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub log_path: PathBuf,
    pub best_dev_f1: f64,
    pub history: Vec<LogRecord>,
}

/// Full training run: epoch loop with warmup/decay, optional encoder
/// freezing, per-epoch dev evaluation, and atomic periodic/final/best
/// checkpoints. Returns the best checkpoint (selected by dev F1).
pub fn train(
    cfg: &RunConfig,
    train_ds: &Dataset,
    dev_ds: &Dataset,
    adapter: EncoderAdapter,
    out_dir: impl AsRef<Path>,
) -> Result<TrainReport> {
    if train_ds.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut data = train_ds.items.clone();
    if cfg.merge_train_dev {
        data.extend(dev_ds.items.iter().cloned());
    }

    let token_vocab = TokenVocab::build(data.iter().map(|(s, _)| s));
    let model_cfg = ModelConfig {
        hidden: cfg.hidden_size,
        encoder_blocks: cfg.encoder_blocks,
        ff_mult: cfg.ff_mult,
        pointer_hidden: cfg.pointer_hidden,
        num_types: train_ds.labels.len(),
        activation: "gelu".into(),
    };
    let mut model = Denoiser::new(
        model_cfg,
        token_vocab,
        train_ds.labels.clone(),
        adapter,
        cfg.seed,
    )?;
    for (s, gold) in dev_ds.items.iter() {
        gold.check_bounds(s.len())?;
        if gold.entities.iter().any(|e| e.label >= model.cfg.num_types) {
            return Err(Error::Validation(format!(
                "dev sentence {} uses a label id outside the training vocabulary",
                s.id
            )));
        }
    }

    let sched = VarianceSchedule::new(cfg.scheduler, cfg.timesteps)?;
    let mut opt = AdamW::new(model.params.len());
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epoch * batches_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let last_path = out_dir.join("last.ckpt.json");
    let best_path = out_dir.join("best.ckpt.json");
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

    let extra = serde_json::to_value(cfg).map_err(|e| Error::Runtime(e.to_string()))?;
    // epochs = 0 still emits a loadable (untrained) checkpoint
    save_checkpoint(&model, extra.clone(), &last_path)?;
    save_checkpoint(&model, extra.clone(), &best_path)?;

    let mut best_dev_f1 = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epoch {
        let freeze = epoch < cfg.encoder_freeze_epochs;
        let mut order: Vec<usize> = (0..data.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&(Sentence, EntitySet)> = chunk.iter().map(|&i| &data[i]).collect();
            let lr = lr_at(step, total_steps, cfg.learning_rate, cfg.lr_warmup);
            let loss = train_step(&mut model, &mut opt, &batch, &sched, cfg, lr, freeze, &mut rng)?;
            epoch_loss += loss * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }
        let mean_loss = epoch_loss / seen.max(1) as f64;

        let sampler_cfg = SamplerConfig {
            k_eval: cfg.k,
            gamma: cfg.gamma,
            phi: cfg.threshold,
            seed: cfg.seed,
        };
        let report = crate::eval::evaluate_model(&model, dev_ds, &sampler_cfg, &sched, cfg.scale_factor)?;
        let lr_now = lr_at(step, total_steps, cfg.learning_rate, cfg.lr_warmup);
        let record = LogRecord { epoch, step, loss: mean_loss, lr: lr_now, dev_f1: report.f1 };
        let line = serde_json::to_string(&record).map_err(|e| Error::Runtime(e.to_string()))?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(log_path.display().to_string(), e))?;
        println!(
            "epoch {epoch}: loss {mean_loss:.4}, lr {lr_now:.2e}, dev F1 {:.4}",
            report.f1
        );
        history.push(record);

        save_checkpoint(&model, extra.clone(), &last_path)?;
        if report.f1 > best_dev_f1 {
            best_dev_f1 = report.f1;
            save_checkpoint(&model, extra.clone(), &best_path)?;
        }
    }

    Ok(TrainReport {
        best_path,
        last_path,
        log_path,
        best_dev_f1: best_dev_f1.max(0.0),
        history,
    })
}

#[cfg(test)]
mod tests;
