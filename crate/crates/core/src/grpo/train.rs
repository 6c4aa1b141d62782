use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::objective::policy_logprob_grad;
use super::{
    expected_reward, grpo_gradient, policy_logprob, sample_group, score_group, GrpoConfig, GrpoError, PolicyParams,
    RolloutGroup, SyntheticEnv, ToyQuery,
};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState<T> {
    pub theta: PolicyParams<T>,
    /// Held fixed for the whole run.
    pub theta_ref: PolicyParams<T>,
    pub step: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(init: PolicyParams<T>, theta_ref: PolicyParams<T>) -> Self {
        TrainState { theta: init, theta_ref, step: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    /// J at θ = θ_old, before the update.
    pub objective: f64,
    pub kl: f64,
    pub mean_reward: f64,
    pub clipped_fraction: f64,
    pub grad_norm: f64,
}

fn norm<T: Scalar>(g: &[T]) -> f64 {
    g.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

/// One outer iteration: sample groups under a snapshot θ_old, score them, then
/// take `inner_updates` ascent steps on J before the snapshot is refreshed.
pub fn grpo_step<T: Scalar>(
    state: &TrainState<T>,
    queries: &[ToyQuery<T>],
    config: &GrpoConfig<T>,
    seed: u64,
) -> Result<(TrainState<T>, StepStats), GrpoError> {
    let theta_old = state.theta.clone();
    let groups: Vec<RolloutGroup<T>> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let g = sample_group(&theta_old, q, config.group_size, seed::derive(seed, &["group", &i.to_string()]))?;
            Ok(score_group(&g, &config.schedule, config.std_floor))
        })
        .collect::<Result<_, GrpoError>>()?;
    let rewards: Vec<f64> =
        groups.iter().flat_map(|g| g.rollouts.iter().filter_map(|r| r.reward.map(T::to_f64_lossy))).collect();
    let mut theta = state.theta.clone();
    let mut first = None;
    for _ in 0..config.inner_updates {
        let (terms, grad) = grpo_gradient(&theta, &theta_old, &state.theta_ref, &groups, config)?;
        if !grad.iter().all(|g| g.is_finite()) || !terms.objective.is_finite() {
            return Err(GrpoError::NonFiniteGradient {
                step: state.step,
                max_abs: grad.iter().map(|g| g.to_f64_lossy().abs()).fold(0.0, f64::max),
                objective: terms.objective.to_f64_lossy(),
            });
        }
        first.get_or_insert((terms.clone(), norm(&grad)));
        theta = theta.axpy(config.learning_rate, &grad);
    }
    let (terms, grad_norm) = first.expect("inner_updates ≥ 1");
    let stats = StepStats {
        step: state.step,
        objective: terms.objective.to_f64_lossy(),
        kl: terms.kl.to_f64_lossy(),
        mean_reward: if rewards.is_empty() { 0.0 } else { rewards.iter().sum::<f64>() / rewards.len() as f64 },
        clipped_fraction: terms.clipped_fraction,
        grad_norm,
    };
    Ok((TrainState { theta, theta_ref: state.theta_ref.clone(), step: state.step + 1 }, stats))
}

/// Mean demonstration log-likelihood.
fn demo_loglik<T: Scalar>(theta: &PolicyParams<T>, demos: &[(ToyQuery<T>, Vec<usize>)]) -> Result<T, GrpoError> {
    let mut total = T::zero();
    for (q, o) in demos {
        total = total + policy_logprob(theta, q, o)?.0;
    }
    Ok(total / T::from_count(demos.len()))
}

/// Full-batch gradient ascent on the mean log-likelihood of demonstration
/// orderings. Errors if an epoch lowers the likelihood.
pub fn toy_sft_fit<T: Scalar>(
    demonstrations: &[(ToyQuery<T>, Vec<usize>)],
    init: &PolicyParams<T>,
    epochs: usize,
    learning_rate: T,
) -> Result<PolicyParams<T>, GrpoError> {
    if demonstrations.is_empty() {
        return Err(GrpoError::NoDemonstrations);
    }
    let n = T::from_count(demonstrations.len());
    let mut theta = init.clone();
    let mut ll = demo_loglik(&theta, demonstrations)?;
    for epoch in 0..epochs {
        let grads: Vec<Vec<T>> = demonstrations
            .par_iter()
            .map(|(q, o)| policy_logprob_grad(&theta, q, o).map(|(_, g)| g))
            .collect::<Result<_, _>>()?;
        let mut grad = vec![T::zero(); theta.dim()];
        for g in grads {
            for (a, b) in grad.iter_mut().zip(g) {
                *a = *a + b / n;
            }
        }
        let next = theta.axpy(learning_rate, &grad);
        let next_ll = demo_loglik(&next, demonstrations)?;
        let tol = T::lit(1e-9) * (T::one() + ll.abs());
        if !next_ll.is_finite() || next_ll < ll - tol {
            return Err(GrpoError::Diverged { epoch, before: ll.to_f64_lossy(), after: next_ll.to_f64_lossy() });
        }
        theta = next;
        ll = next_ll;
    }
    Ok(theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub steps: usize,
    pub eval_every: usize,
    pub eval_queries: usize,
    pub eval_samples: usize,
    /// Expected reward that counts as "reached".
    pub threshold: f64,
    /// Stop at the first evaluation that meets `threshold`.
    pub stop_at_threshold: bool,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 300,
            eval_every: 10,
            eval_queries: 200,
            eval_samples: 16,
            threshold: 0.9,
            stop_at_threshold: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub objective: f64,
    pub expected_reward: f64,
    pub kl: f64,
    pub mean_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub points: Vec<CurvePoint>,
    /// First evaluated step meeting the threshold.
    pub steps_to_threshold: Option<usize>,
    pub final_state: TrainState<f64>,
}

/// Trains on fresh environment batches each step and evaluates the expected
/// reward on a fixed held-out query set every `eval_every` steps (and at
/// step 0).
pub fn train(
    env: &SyntheticEnv<f64>,
    config: &GrpoConfig<f64>,
    options: &TrainOptions,
    init: PolicyParams<f64>,
    theta_ref: PolicyParams<f64>,
) -> Result<TrainingCurve, GrpoError> {
    config.validate()?;
    let eval_set = env.queries(options.eval_queries, u64::MAX);
    let eval_seed = seed::derive(env.seed, &["eval"]);
    let evaluate = |theta: &PolicyParams<f64>| {
        expected_reward(theta, &eval_set, options.eval_samples, eval_seed, &config.schedule)
    };
    let mut state = TrainState::new(init, theta_ref);
    let mut points = vec![CurvePoint {
        step: 0,
        objective: 0.0,
        expected_reward: evaluate(&state.theta)?,
        kl: 0.0,
        mean_reward: 0.0,
    }];
    let mut reached = (points[0].expected_reward >= options.threshold).then_some(0);
    for step in 0..options.steps {
        if reached.is_some() && options.stop_at_threshold {
            break;
        }
        let batch = env.queries(config.batch_size, seed::derive(options.seed, &["batch", &step.to_string()]));
        let (next, stats) =
            grpo_step(&state, &batch, config, seed::derive(options.seed, &["step", &step.to_string()]))?;
        state = next;
        let done = step + 1;
        if done % options.eval_every.max(1) == 0 || done == options.steps {
            let er = evaluate(&state.theta)?;
            points.push(CurvePoint {
                step: done,
                objective: stats.objective,
                expected_reward: er,
                kl: stats.kl,
                mean_reward: stats.mean_reward,
            });
            if reached.is_none() && er >= options.threshold {
                reached = Some(done);
            }
        }
    }
    Ok(TrainingCurve { points, steps_to_threshold: reached, final_state: state })
}

pub fn write_curve_csv(path: &Path, curve: &TrainingCurve) -> Result<(), GrpoError> {
    let mut s = String::from("step,objective,expected_reward,kl,mean_reward\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{},{},{}", p.step, p.objective, p.expected_reward, p.kl, p.mean_reward);
    }
    fs::write(path, s).map_err(|e| GrpoError::Checkpoint(format!("{}: {e}", path.display())))
}

const CHECKPOINT_HEADER: &str = "dualrec-grpo-checkpoint v1";

/// Plain-text checkpoint: header, config digest, step, shape, then θ and θ_ref
/// with one value per line.
pub fn write_checkpoint<T: Scalar>(path: &Path, state: &TrainState<T>, config_digest: &str) -> Result<(), GrpoError> {
    let mut s = format!(
        "{CHECKPOINT_HEADER}\nconfig_digest {config_digest}\nstep {}\nd_user {}\nd_item {}\n",
        state.step, state.theta.d_user, state.theta.d_item
    );
    for (name, p) in [("theta", &state.theta), ("theta_ref", &state.theta_ref)] {
        let _ = writeln!(s, "{name}");
        for x in &p.theta {
            let _ = writeln!(s, "{x}");
        }
    }
    fs::write(path, s).map_err(|e| GrpoError::Checkpoint(format!("{}: {e}", path.display())))
}

/// Reads a checkpoint back, returning the state and the stored config digest.
pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(TrainState<T>, String), GrpoError> {
    let bad = |m: String| GrpoError::Checkpoint(format!("{}: {m}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_HEADER) {
        return Err(bad("missing header".into()));
    }
    let mut field = |key: &str| -> Result<String, GrpoError> {
        let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_owned)
            .ok_or_else(|| bad(format!("expected {key}, found {line:?}")))
    };
    let digest = field("config_digest")?;
    let num = |v: String| v.parse::<usize>().map_err(|e| bad(e.to_string()));
    let step = num(field("step")?)?;
    let d_user = num(field("d_user")?)?;
    let d_item = num(field("d_item")?)?;
    let dim = d_user * d_item;
    let mut read_block = |name: &str| -> Result<PolicyParams<T>, GrpoError> {
        if lines.next() != Some(name) {
            return Err(bad(format!("missing {name} block")));
        }
        let theta = (0..dim)
            .map(|_| {
                let v = lines.next().ok_or_else(|| bad(format!("{name} truncated")))?;
                T::from_str_radix(v.trim(), 10).map_err(|_| bad(format!("bad number {v:?}")))
            })
            .collect::<Result<Vec<T>, _>>()?;
        PolicyParams::from_vec(d_user, d_item, theta)
    };
    let theta = read_block("theta")?;
    let theta_ref = read_block("theta_ref")?;
    Ok((TrainState { theta, theta_ref, step }, digest))
}

/// How the SFT anchor is fitted from teacher demonstrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub demonstrations: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig { demonstrations: 64, epochs: 30, learning_rate: 0.02 }
    }
}

/// The synthetic learning experiment: environment shape, anchor fit, GRPO
/// settings and the evaluation budget. Defaults give a 300-step budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyExperiment {
    pub d_user: usize,
    pub d_item: usize,
    pub n_candidates: usize,
    pub env_seed: u64,
    pub anchor: AnchorConfig,
    pub grpo: GrpoConfig<f64>,
    pub options: TrainOptions,
}

impl Default for ToyExperiment {
    fn default() -> Self {
        ToyExperiment {
            d_user: 4,
            d_item: 4,
            n_candidates: 20,
            env_seed: 7,
            anchor: AnchorConfig::default(),
            grpo: GrpoConfig::default(),
            options: TrainOptions { stop_at_threshold: true, ..Default::default() },
        }
    }
}

impl ToyExperiment {
    pub fn env(&self) -> SyntheticEnv<f64> {
        SyntheticEnv::new(self.d_user, self.d_item, self.n_candidates, self.env_seed)
    }

    /// Anchor fitted on teacher orderings of a seed-specific query stream.
    pub fn anchor(&self, seed: u64) -> Result<PolicyParams<f64>, GrpoError> {
        let env = self.env();
        let stream = seed::derive(seed, &["demonstrations"]);
        let demos = super::teacher_demonstrations(&env, &env.queries(self.anchor.demonstrations, stream));
        toy_sft_fit(
            &demos,
            &PolicyParams::zeros(self.d_user, self.d_item),
            self.anchor.epochs,
            self.anchor.learning_rate,
        )
    }
}

/// Runs one training seed, from the SFT anchor (which also serves as θ_ref)
/// or from θ = 0 with θ_ref = 0.
pub fn run_toy_experiment(exp: &ToyExperiment, seed: u64, anchored: bool) -> Result<TrainingCurve, GrpoError> {
    let init = if anchored { exp.anchor(seed)? } else { PolicyParams::zeros(exp.d_user, exp.d_item) };
    let options = TrainOptions { seed, ..exp.options.clone() };
    train(&exp.env(), &exp.grpo, &options, init.clone(), init)
}
