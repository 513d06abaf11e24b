use crate::config::ExperimentConfig;
use crate::data::{Prompt, Sigma};
use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::transformer::TfParams;

use super::{adam_step, icl_loss, layer_dists, loss_and_grad, AdamState, EvalRecord, RunHistory};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = u64::MAX;

/// Called after every recorded evaluation point.
pub type ProgressFn<'a> = &'a (dyn Fn(&EvalRecord) + Sync);

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub history: RunHistory,
    pub params: TfParams,
    pub sigma: Sigma,
}

/// Held-out prompts for run `run`. They depend only on the seed, the run
/// index and the data settings, so models that differ only in architecture
/// are scored on the same prompts.
pub fn eval_batch(config: &ExperimentConfig, run: usize) -> Result<Vec<Prompt>> {
    let sigma = config.sigma_for_run(run)?;
    let rng = Rng::new(config.seed).split(STREAM_EVAL).split(run as u64);
    config.sampler(sigma)?.sample_batch(config.train.eval_batch, &rng)
}

pub fn run_training(config: &ExperimentConfig, run: usize) -> Result<RunHistory> {
    Ok(run_training_with(config, run, None)?.history)
}

/// Trains one model. Deterministic in `(config, run)`.
pub fn run_training_with(config: &ExperimentConfig, run: usize, progress: Option<ProgressFn>) -> Result<TrainedRun> {
    config.validate()?;
    let t = &config.train;
    let sigma = config.sigma_for_run(run)?;
    let sampler = config.sampler(sigma.clone())?;
    let run_rng = Rng::new(config.seed).split(run as u64);
    let train_rng = run_rng.split(STREAM_TRAIN);
    let held_out = eval_batch(config, run)?;

    let mut params = TfParams::gaussian(
        config.d,
        config.layers,
        config.parameterization.full_a(),
        t.init_scale,
        &mut run_rng.split(STREAM_INIT),
    );
    let mut adam = AdamState::new(&params, t.lr);
    let mut history = RunHistory::new(config.layers);
    let mut batch = Vec::new();

    let guard = |step: usize, loss: f64| {
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            Err(Error::Diverged { step, loss })
        } else {
            Ok(())
        }
    };
    let record = |step: usize, train_loss: f64, params: &TfParams, history: &mut RunHistory| -> Result<()> {
        let eval_loss = icl_loss(params, config.activation, &held_out)?;
        guard(step, eval_loss)?;
        let (dist_bc, dist_a) = layer_dists(params, &sigma.sqrt)?;
        let rec = EvalRecord { step, train_loss, eval_loss, dist_bc, dist_a };
        if let Some(f) = progress {
            f(&rec);
        }
        history.push(rec)
    };

    for step in 0..t.steps {
        if step % t.resample_every == 0 {
            batch = sampler.sample_batch(t.batch, &train_rng.split((step / t.resample_every) as u64))?;
        }
        let (loss, grads) = loss_and_grad(&params, config.activation, &batch)?;
        guard(step, loss)?;
        if !grads.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if step % t.eval_every == 0 {
            record(step, loss, &params, &mut history)?;
        }
        adam.lr = if t.cosine_decay {
            0.5 * t.lr * (1.0 + (std::f64::consts::PI * step as f64 / t.steps as f64).cos())
        } else {
            t.lr
        };
        adam_step(&mut adam, &mut params, &grads, t.clip, t.clip_mode)?;
    }

    if t.steps % t.resample_every == 0 {
        batch = sampler.sample_batch(t.batch, &train_rng.split((t.steps / t.resample_every) as u64))?;
    }
    let final_loss = icl_loss(&params, config.activation, &batch)?;
    guard(t.steps, final_loss)?;
    record(t.steps, final_loss, &params, &mut history)?;
    Ok(TrainedRun { history, params, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig::parse(
            "d = 3\nn = 8\nsigma = identity\nkernel = linear\nactivation = linear\n\
             train.steps = 20\ntrain.batch = 64\ntrain.eval_every = 5\ntrain.eval_batch = 128\ntrain.lr = 0.01\n",
        )
        .unwrap()
    }

    #[test]
    fn deterministic() {
        let c = small();
        assert_eq!(run_training(&c, 0).unwrap(), run_training(&c, 0).unwrap());
        assert_ne!(run_training(&c, 0).unwrap(), run_training(&c, 1).unwrap());
    }

    #[test]
    fn records_every_eval_interval_and_final() {
        let h = run_training(&small(), 0).unwrap();
        let steps: Vec<usize> = h.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 5, 10, 15, 20]);
        assert!(h.records.iter().all(|r| r.dist_a.is_none()));
    }

    #[test]
    fn full_parameterization_tracks_a() {
        let c = ExperimentConfig::parse_with_overrides(&small().to_text(), &["parameterization=full".into()]).unwrap();
        let h = run_training(&c, 0).unwrap();
        assert!(h.records.iter().all(|r| r.dist_a.as_ref().is_some_and(|a| a.len() == 3)));
    }

    #[test]
    fn divergence_guard() {
        let c = ExperimentConfig::parse_with_overrides(
            &small().to_text(),
            &["train.init_scale=40".into(), "activation=exp".into()],
        )
        .unwrap();
        assert!(matches!(run_training(&c, 0), Err(Error::Diverged { .. } | Error::Overflow { .. })));
    }
}
