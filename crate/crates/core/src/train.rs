//! Adam with warmup + inverse-square-root decay, gradient accumulation over
//! a few songs per step, periodic validation with best-checkpoint tracking,
//! early stopping, and a divergence guard. Deterministic for a fixed seed:
//! song order comes from a seeded shuffle and gradients reduce in fixed
//! order even when computed in parallel.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

use crate::layout::LayoutCache;
use crate::model::{
    backward, forward, next_music_targets, nll_and_grad, ModelConfig, ModelError, ModelParams,
};
use crate::tokenize::TokenSeq;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Add `weight_decay · θ` to the gradient (classic L2) instead of the
    /// default decoupled multiplicative decay.
    pub l2_in_loss: bool,
    pub batch_songs: usize,
    pub max_steps: usize,
    pub valid_every: usize,
    /// Validations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults; the reference scale warms up over 16000 steps.
    fn default() -> Self {
        Self {
            betas: (0.9, 0.98),
            epsilon: 1e-9,
            peak_lr: 5e-4,
            warmup_steps: 200,
            weight_decay: 0.01,
            l2_in_loss: false,
            batch_songs: 4,
            max_steps: 2000,
            valid_every: 200,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_steps == 0 || self.peak_lr <= 0.0 || self.batch_songs == 0 {
            return Err(TrainError::Model(ModelError::Config(
                "warmup ≥ 1, peak_lr > 0 and batch_songs ≥ 1 required".into(),
            )));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then inverse-square-root decay; the two
/// branches meet at `step = warmup`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    assert!(step >= 1, "steps are 1-based");
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    cfg.peak_lr * (s / w).min((w / s).sqrt())
}

/// First and second moment estimates, flat like the parameters.
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One Adam update with bias correction and decoupled weight decay. Returns
/// false (leaving parameters and moments untouched) when the gradient is not
/// finite.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
    step: usize,
) -> bool {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return false;
    }
    let lr = lr_at(step, cfg);
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for i in 0..params.len() {
        let g = if cfg.l2_in_loss { grads[i] + cfg.weight_decay * params[i] } else { grads[i] };
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        if !cfg.l2_in_loss {
            params[i] *= 1.0 - lr * cfg.weight_decay;
        }
        params[i] -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
    }
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub train_nll: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidRecord {
    pub step: usize,
    pub nll: f64,
    pub ppl: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidRecord>,
    /// Reported on stderr, never serialized: wall time is not reproducible.
    pub wall_secs: f64,
}

impl TrainLog {
    /// One row per step; validation columns filled on validation steps.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,train_nll,valid_nll,valid_ppl\n");
        let mut valid = self.validations.iter().peekable();
        for s in &self.steps {
            let (vn, vp) = match valid.peek() {
                Some(v) if v.step == s.step => {
                    let v = valid.next().unwrap();
                    (format!("{:.6}", v.nll), format!("{:.6}", v.ppl))
                }
                _ => (String::new(), String::new()),
            };
            writeln!(out, "{},{:.8},{:.6},{},{}", s.step, s.lr, s.train_nll, vn, vp)
                .expect("string write");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxSteps,
    EarlyStopped { at_step: usize },
    Diverged { step: usize, nll: f64, initial: f64 },
}

pub struct TrainResult {
    /// Parameters at the best validation NLL (final parameters when no
    /// validation ran).
    pub best: ModelParams,
    pub final_params: ModelParams,
    pub best_valid_nll: f64,
    pub log: TrainLog,
    pub stop: StopReason,
}

/// Pooled mean NLL over every predicted position of `songs`.
pub fn corpus_nll(
    songs: &[TokenSeq],
    params: &ModelParams,
    cache: &LayoutCache,
) -> Result<f64, ModelError> {
    let per: Vec<(f64, usize)> = songs
        .par_iter()
        .map(|seq| -> Result<(f64, usize), ModelError> {
            let (logits, _) = forward(seq, params, cache)?;
            let targets = next_music_targets(seq);
            let per = crate::model::nll_per_position(&logits, &targets)?;
            Ok((per.iter().sum(), per.len()))
        })
        .collect::<Result<_, _>>()?;
    let (sum, count) = per.iter().fold((0.0, 0usize), |(s, c), &(a, b)| (s + a, c + b));
    Ok(sum / count.max(1) as f64)
}

/// Songs longer than the model's bar capacity are truncated up front, with
/// one warning per corpus.
fn fit_to_model(songs: &[TokenSeq], max_bars: usize) -> Vec<TokenSeq> {
    let over = songs.iter().filter(|s| s.bar_count() > max_bars).count();
    if over > 0 {
        eprintln!("warning: truncating {over} song(s) to {max_bars} bars");
    }
    songs.iter().map(|s| s.truncate_bars(max_bars)).collect()
}

pub fn train(
    train_songs: &[TokenSeq],
    valid_songs: &[TokenSeq],
    mcfg: ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    tcfg.validate()?;
    if train_songs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let started = std::time::Instant::now();
    let train_songs = fit_to_model(train_songs, mcfg.max_bars);
    let valid_songs = fit_to_model(valid_songs, mcfg.max_bars);
    let mut params = ModelParams::init(mcfg, tcfg.seed)?;
    let mut flat = params.flat();
    let mut adam = AdamState::new(flat.len());
    let cache = LayoutCache::new();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut validations_since_best = 0usize;
    let mut initial_nll: Option<f64> = None;
    let mut stop = StopReason::MaxSteps;

    'steps: for step in 1..=tcfg.max_steps {
        // refill the epoch order as needed; batches never straddle refills
        let mut batch: Vec<&TokenSeq> = Vec::with_capacity(tcfg.batch_songs);
        for _ in 0..tcfg.batch_songs {
            if order.is_empty() {
                order = (0..train_songs.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&train_songs[order.pop().expect("refilled")]);
        }
        let results: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|seq| -> Result<(f64, Vec<f64>), ModelError> {
                let (logits, tape) = forward(seq, &params, &cache)?;
                let (nll, d_logits) = nll_and_grad(&logits, &next_music_targets(seq))?;
                Ok((nll, backward(&d_logits, &tape, &params).flat()))
            })
            .collect::<Result<_, _>>()?;
        let scale = 1.0 / results.len() as f64;
        let mut grads = vec![0.0f64; flat.len()];
        let mut nll = 0.0;
        for (song_nll, g) in &results {
            nll += song_nll * scale;
            for (a, b) in grads.iter_mut().zip(g) {
                *a += b * scale;
            }
        }
        let lr = lr_at(step, tcfg);
        if !adam_step(&mut flat, &grads, &mut adam, tcfg, step) {
            eprintln!("step {step}: non-finite gradient, update skipped");
        }
        params.set_flat(&flat);
        log.steps.push(StepRecord { step, lr, train_nll: nll });

        let initial = *initial_nll.get_or_insert(nll);
        if nll.is_finite() && initial.is_finite() && nll > 10.0 * initial && initial > 0.0 {
            stop = StopReason::Diverged { step, nll, initial };
            break 'steps;
        }

        if !valid_songs.is_empty() && step % tcfg.valid_every == 0 {
            let vnll = corpus_nll(&valid_songs, &params, &cache)?;
            log.validations.push(ValidRecord { step, nll: vnll, ppl: vnll.exp() });
            let improved = best.as_ref().map_or(true, |(b, _)| vnll < *b);
            if improved {
                best = Some((vnll, params.clone()));
                validations_since_best = 0;
            } else {
                validations_since_best += 1;
                if tcfg.patience > 0 && validations_since_best >= tcfg.patience {
                    stop = StopReason::EarlyStopped { at_step: step };
                    break 'steps;
                }
            }
        }
    }

    let (best_valid_nll, best) = match best {
        Some((nll, p)) => (nll, p),
        None => (f64::NAN, params.clone()),
    };
    log.wall_secs = started.elapsed().as_secs_f64();
    Ok(TrainResult { best, final_params: params, best_valid_nll, log, stop })
}
