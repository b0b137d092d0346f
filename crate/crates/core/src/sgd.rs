//! One-pass SGD on the sketched model.
//!
//! Each step draws `(z_t, y_t)`, forms `e_t = V^T z_t − y_t` and applies the
//! rank-one update `V ← V − γ_t z_t e_t^T`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::{SketchSystem, SketchedModel};
use crate::sampling::SketchedDataStream;

/// Any entry above this magnitude aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    Constant,
    StepDecay,
}

/// One constant-stepsize stretch of a schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage {
    pub gamma: f64,
    pub len: usize,
}

/// Stepsizes `γ_1..γ_N`.
///
/// Step decay splits the `N` steps into `L = max(1, ⌈log₂ N⌉)` stages of
/// `⌈N/L⌉` steps (the last one possibly shorter) and halves the stepsize at
/// every stage boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    gamma0: f64,
    total_steps: usize,
    mode: ScheduleMode,
}

impl StepSchedule {
    pub fn new(gamma0: f64, total_steps: usize, mode: ScheduleMode) -> Result<Self> {
        if !(gamma0 > 0.0) || !gamma0.is_finite() {
            return Err(Error::invalid(format!("initial stepsize must be positive, got {gamma0}")));
        }
        Ok(StepSchedule {
            gamma0,
            total_steps,
            mode,
        })
    }

    pub fn constant(gamma0: f64, total_steps: usize) -> Result<Self> {
        Self::new(gamma0, total_steps, ScheduleMode::Constant)
    }

    pub fn step_decay(gamma0: f64, total_steps: usize) -> Result<Self> {
        Self::new(gamma0, total_steps, ScheduleMode::StepDecay)
    }

    pub fn gamma0(&self) -> f64 {
        self.gamma0
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn stage_count(&self) -> usize {
        match self.mode {
            ScheduleMode::Constant => 1,
            ScheduleMode::StepDecay => ceil_log2(self.total_steps).max(1),
        }
    }

    pub fn stage_len(&self) -> usize {
        self.total_steps.div_ceil(self.stage_count())
    }

    pub fn gamma_at(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.total_steps {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.total_steps)));
        }
        Ok(match self.mode {
            ScheduleMode::Constant => self.gamma0,
            ScheduleMode::StepDecay => {
                let stage = (t - 1) / self.stage_len();
                self.gamma0 * 0.5_f64.powi(stage as i32)
            }
        })
    }

    /// Stages covering exactly `total_steps` steps.
    pub fn stages(&self) -> Vec<Stage> {
        let mut out = Vec::new();
        let len = self.stage_len();
        let mut remaining = self.total_steps;
        let mut gamma = self.gamma0;
        while remaining > 0 {
            let take = len.min(remaining);
            out.push(Stage { gamma, len: take });
            remaining -= take;
            if self.mode == ScheduleMode::StepDecay {
                gamma *= 0.5;
            }
        }
        out
    }

    pub fn gamma_sum(&self) -> f64 {
        self.stages().iter().map(|s| s.gamma * s.len as f64).sum()
    }

    /// `N_eff = N / ln N`, with the logarithm floored at 1 so that `N ≤ 2`
    /// gives `N_eff = N`.
    pub fn n_eff(&self) -> f64 {
        n_eff(self.total_steps)
    }
}

pub fn n_eff(n: usize) -> f64 {
    let n = n as f64;
    if n <= 0.0 {
        0.0
    } else {
        n / n.ln().max(1.0)
    }
}

fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// `γ = 1 / (c0 · tr(R G R^T))`.
pub fn default_gamma(gram_trace: f64, c0: f64) -> Result<f64> {
    if !(c0 > 1.0) {
        return Err(Error::invalid(format!("stepsize constant c0 must exceed 1, got {c0}")));
    }
    if !(gram_trace > 0.0) || !gram_trace.is_finite() {
        return Err(Error::invalid(format!("tr(RGR^T) must be positive, got {gram_trace}")));
    }
    Ok(1.0 / (c0 * gram_trace))
}

pub fn default_gamma_for(sys: &SketchSystem, c0: f64) -> Result<f64> {
    default_gamma(sys.gram_trace(), c0)
}

/// Train on `stream` for `schedule.total_steps()` steps starting from `v0`.
pub fn train_one_pass<R: Rng + ?Sized>(
    stream: &SketchedDataStream,
    schedule: &StepSchedule,
    v0: &SketchedModel,
    rng: &mut R,
) -> Result<SketchedModel> {
    let (m, p) = (stream.m(), stream.p());
    if v0.m() != m || v0.p() != p {
        return Err(Error::dims("train_one_pass", format!("{m}x{p}"), format!("{}x{}", v0.m(), v0.p())));
    }
    let mut noise = vec![0.0; m + p];
    let mut sample = vec![0.0; m + p];
    train_from_source(schedule, v0, |z, y| {
        stream.sample_into(rng, &mut noise, &mut sample);
        z.copy_from_slice(&sample[..m]);
        y.copy_from_slice(&sample[m..]);
    })
}

/// Same recursion, pulling samples from an arbitrary source. The callback
/// fills `z` (length `m`) and `y` (length `p`).
pub fn train_from_source<F>(schedule: &StepSchedule, v0: &SketchedModel, mut source: F) -> Result<SketchedModel>
where
    F: FnMut(&mut [f64], &mut [f64]),
{
    let (m, p) = (v0.m(), v0.p());
    let mut v = v0.clone();
    let mut z = vec![0.0; m];
    let mut y = vec![0.0; p];
    let mut e = vec![0.0; p];
    let mut t = 0;
    for stage in schedule.stages() {
        for _ in 0..stage.len {
            t += 1;
            source(&mut z, &mut y);
            let vm = v.matrix_mut().as_mut_slice(); // column-major m×p
            for k in 0..p {
                let col = &vm[k * m..(k + 1) * m];
                e[k] = col.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() - y[k];
            }
            let mut peak = 0.0_f64;
            for k in 0..p {
                let g = stage.gamma * e[k];
                for (vi, zi) in vm[k * m..(k + 1) * m].iter_mut().zip(&z) {
                    *vi -= g * zi;
                    peak = peak.max(vi.abs());
                }
            }
            if !(peak <= DIVERGENCE_LIMIT) {
                return Err(Error::Diverged { step: t, gamma: stage.gamma });
            }
        }
    }
    Ok(v)
}
