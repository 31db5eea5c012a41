//! Diffusion-time mathematics: variance schedules, closed-form forward
//! noising, deterministic DDIM reverse steps, and timestep subsequence plans.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Functional form of the beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!(
                "unknown schedule kind {other:?} (expected \"linear\" or \"cosine\")"
            ))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
            ScheduleKind::Cosine => write!(f, "cosine"),
        }
    }
}

const BETA_MAX: f64 = 0.999;

/// Precomputed beta/alpha tables for a diffusion process of `t_max` steps.
///
/// `beta[i]`, `alpha[i]` and `alpha_bar[i]` hold the values for timestep
/// `i + 1`; timestep 0 is the identity (`alpha_bar = 1`, the empty product).
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct VarianceSchedule {
    pub kind: ScheduleKind,
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl VarianceSchedule {
    /// Build a schedule of `t_max` timesteps.
    ///
    /// Linear: betas evenly spaced between `1e-4 * (1000/T)` and
    /// `0.02 * (1000/T)`, capped at 0.999 so alphas stay positive for small
    /// `T`. Cosine: `alpha_bar(t) = f(t)/f(0)` with
    /// `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`, `s = 0.008`, betas capped
    /// at 0.999 and alpha_bar rebuilt from the capped betas.
    pub fn new(kind: ScheduleKind, t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Validation(
                "schedule needs at least one timestep (T >= 1)".into(),
            ));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let scale = 1000.0 / t_max as f64;
                let start = 1e-4 * scale;
                let end = 0.02 * scale;
                linspace(start, end, t_max)
                    .into_iter()
                    .map(|b| b.min(BETA_MAX))
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| (((t / t_max as f64 + s) / (1.0 + s)) * PI / 2.0).cos().powi(2);
                let f0 = f(0.0);
                let mut prev = 1.0;
                (1..=t_max)
                    .map(|t| {
                        let bar = f(t as f64) / f0;
                        let b = (1.0 - bar / prev).min(BETA_MAX);
                        prev = bar;
                        b
                    })
                    .collect()
            }
        };

        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }

        let sched = Self {
            kind,
            t_max,
            beta,
            alpha,
            alpha_bar,
        };
        sched.check_invariants()?;
        Ok(sched)
    }

    fn check_invariants(&self) -> Result<()> {
        for (i, (&b, &a)) in self.beta.iter().zip(&self.alpha).enumerate() {
            if !(b > 0.0 && b < 1.0 && a > 0.0 && a < 1.0) {
                return Err(Error::Validation(format!(
                    "schedule invariant violated: beta[{}] = {b} not in (0, 1)",
                    i + 1
                )));
            }
        }
        for w in self.alpha_bar.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Validation(
                    "schedule invariant violated: alpha_bar not strictly decreasing".into(),
                ));
            }
        }
        let last = *self.alpha_bar.last().unwrap();
        if last >= 0.01 {
            return Err(Error::Validation(format!(
                "schedule invariant violated: alpha_bar[T] = {last} >= 0.01 \
                 (T = {} too small for a near-Gaussian terminal state)",
                self.t_max
            )));
        }
        Ok(())
    }

    /// Cumulative signal retention at timestep `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::Validation(format!(
                "timestep {t} out of range [1, {}]",
                self.t_max
            )));
        }
        Ok(())
    }

    /// Closed-form forward noising: `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
    ///
    /// `eps` is passed in rather than drawn internally so callers control
    /// determinism.
    pub fn forward_diffuse(
        &self,
        x0: &Array2<f64>,
        t: usize,
        eps: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_timestep(t)?;
        if x0.dim() != eps.dim() {
            return Err(Error::Shape(format!(
                "x0 has shape {:?} but eps has shape {:?}",
                x0.dim(),
                eps.dim()
            )));
        }
        let abar = self.alpha_bar_at(t);
        Ok(x0 * abar.sqrt() + eps * (1.0 - abar).sqrt())
    }

    /// One deterministic DDIM update from `t_cur` down to `t_prev`.
    ///
    /// Recovers the implied noise `(x - sqrt(abar_cur) * x0_hat) /
    /// sqrt(1 - abar_cur)` and re-applies it at the earlier timestep.
    pub fn ddim_step(
        &self,
        x_cur: &Array2<f64>,
        x0_hat: &Array2<f64>,
        t_cur: usize,
        t_prev: usize,
    ) -> Result<Array2<f64>> {
        if t_prev >= t_cur {
            return Err(Error::Validation(format!(
                "ddim step requires t_prev < t_cur, got t_prev = {t_prev}, t_cur = {t_cur}"
            )));
        }
        self.check_timestep(t_cur)?;
        if x_cur.dim() != x0_hat.dim() {
            return Err(Error::Shape(format!(
                "x_cur has shape {:?} but x0_hat has shape {:?}",
                x_cur.dim(),
                x0_hat.dim()
            )));
        }
        let abar_cur = self.alpha_bar_at(t_cur);
        let abar_prev = self.alpha_bar_at(t_prev);
        let eps_hat = (x_cur - &(x0_hat * abar_cur.sqrt())) / (1.0 - abar_cur).sqrt();
        Ok(x0_hat * abar_prev.sqrt() + &(eps_hat * (1.0 - abar_prev).sqrt()))
    }
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (end - start) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| start + step * i as f64).collect();
    v[n - 1] = end;
    v
}

/// Arithmetic subsequence of `[1, ..., T]` used as the reverse-process
/// timestep plan: `gamma` entries, strictly increasing, ending at `T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    pub gamma: usize,
    pub tau: Vec<usize>,
}

impl TimestepPlan {
    /// `tau_i = round(i * T / gamma)`; any duplicate produced by rounding is
    /// resolved by decrementing the earlier entry, preserving `tau_gamma = T`.
    pub fn new(t_max: usize, gamma: usize) -> Result<Self> {
        if gamma == 0 {
            return Err(Error::Validation("gamma must be >= 1".into()));
        }
        if gamma > t_max {
            return Err(Error::Validation(format!(
                "gamma = {gamma} exceeds total timesteps T = {t_max}"
            )));
        }
        let mut tau: Vec<usize> = (1..=gamma)
            .map(|i| ((i * t_max) as f64 / gamma as f64).round() as usize)
            .collect();
        tau[gamma - 1] = t_max;
        for i in (0..gamma.saturating_sub(1)).rev() {
            if tau[i] >= tau[i + 1] {
                tau[i] = tau[i + 1] - 1;
            }
        }
        debug_assert!(tau[0] >= 1);
        Ok(Self { gamma, tau })
    }

    /// Pairs `(t_cur, t_prev)` walked by the reverse process, ending at 0.
    pub fn reverse_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.gamma).rev().map(move |i| {
            let t_cur = self.tau[i];
            let t_prev = if i == 0 { 0 } else { self.tau[i - 1] };
            (t_cur, t_prev)
        })
    }
}
