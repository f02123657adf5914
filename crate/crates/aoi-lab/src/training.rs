//! Policy-gradient training of the visiting-order policy.
//!
//! Classic score-function (REINFORCE) training with a greedy self-rollout
//! baseline: for every freshly generated instance the current policy samples
//! an order, a frozen copy of the policy decodes greedily, both orders are
//! refined to hovering points by weighted A*, and the difference of the two
//! total ages scales the gradient of the sampled order's log-probability.
//! The frozen baseline is replaced by the current policy only when a paired
//! one-sided t-test over a held-out evaluation set says the improvement is
//! significant.
//!
//! Costs enter the gradient as plain constants — only log-probabilities are
//! differentiated.  Rollouts and per-instance backward passes run in
//! parallel; gradients are folded in instance order so a fixed seed gives a
//! bit-identical training trajectory regardless of thread count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::channel;
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Tensor};
use crate::policy::{self, ModelConfig, PolicyParams};
use crate::router;
use crate::scenario::{self, CandidateGrid, EnvParams, Scenario, UavParams};

/// Everything a training run needs: model architecture, instance
/// distribution, optimization schedule, and output locations.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Clusters per training instance.
    pub m_train: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Significance level of the baseline-refresh t-test.
    pub ttest_alpha: f64,
    /// Held-out instances per baseline evaluation (fresh every epoch).
    pub eval_set_size: usize,
    /// Suboptimality weight of the A* refinement used for rollout costs.
    pub omega: f64,
    /// Side length of the square deployment area, m.
    pub area_side: f64,
    /// Per-cluster node counts are drawn uniformly from this set.
    pub node_count_choices: Vec<u32>,
    pub env: EnvParams,
    pub uav: UavParams,
    /// Master seed: weights, instance streams, and sampling streams all
    /// derive from it.
    pub seed: u64,
    /// When set, per-epoch checkpoints, a final checkpoint, and the metrics
    /// CSV are written here.
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Small CPU-friendly configuration: 5 clusters, 2×2 candidate grids,
    /// a 64-wide model, 20 epochs of 50 steps at batch 64.
    pub fn desk(seed: u64) -> Self {
        let env = EnvParams {
            l_sub: 2,
            ..EnvParams::default()
        };
        TrainConfig {
            model: ModelConfig::desk(2),
            m_train: 5,
            epochs: 20,
            steps_per_epoch: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            ttest_alpha: 0.05,
            eval_set_size: 512,
            omega: 1.2,
            area_side: 3000.0,
            node_count_choices: vec![5, 10, 15, 20, 25, 30],
            env,
            uav: UavParams::default(),
            seed,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.env.validate()?;
        self.uav.validate()?;
        for (name, v) in [
            ("m_train", self.m_train),
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("eval_set_size", self.eval_set_size),
        ] {
            if v < 1 {
                return Err(Error::param(format!("train.{name} must be ≥ 1, got {v}")));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.ttest_alpha > 0.0 && self.ttest_alpha < 1.0) {
            return Err(Error::param(format!(
                "train.ttest_alpha must lie in (0, 1), got {}",
                self.ttest_alpha
            )));
        }
        if !(self.omega >= 1.0) {
            return Err(Error::param(format!(
                "train.omega must be ≥ 1, got {}",
                self.omega
            )));
        }
        if !(self.area_side > 0.0) || !self.area_side.is_finite() {
            return Err(Error::param(format!(
                "train.area_side must be positive, got {}",
                self.area_side
            )));
        }
        if self.node_count_choices.is_empty() {
            return Err(Error::param("train.node_count_choices must be nonempty"));
        }
        // The model's input scaling must match the instance distribution,
        // otherwise features drift outside the range the weights see.
        if self.model.l_sub != self.env.l_sub {
            return Err(Error::param(format!(
                "model.l_sub = {} but env.l_sub = {}; grids would not fit the feature layout",
                self.model.l_sub, self.env.l_sub
            )));
        }
        if self.model.area_scale != self.area_side {
            return Err(Error::param(format!(
                "model.area_scale = {} but area_side = {}; coordinate scaling would be inconsistent",
                self.model.area_scale, self.area_side
            )));
        }
        let max_n = f64::from(*self.node_count_choices.iter().max().expect("nonempty"));
        if self.model.n_scale != max_n {
            return Err(Error::param(format!(
                "model.n_scale = {} but the largest node-count choice is {max_n}",
                self.model.n_scale
            )));
        }
        Ok(())
    }
}

/// One training/evaluation instance: the scenario plus its candidate grids.
#[derive(Debug, Clone)]
pub struct TrainInstance {
    pub scenario: Scenario,
    pub grids: Vec<CandidateGrid>,
}

/// Draws `count` fresh instances from the configured distribution, consuming
/// one `u64` seed per instance from `rng`.
pub fn generate_instances(
    config: &TrainConfig,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainInstance>> {
    let radius = channel::service_radius(&config.env)?;
    (0..count)
        .map(|_| {
            let seed = rng.random::<u64>();
            let scenario = scenario::generate_scenario_with(
                seed,
                config.m_train,
                config.area_side,
                &config.node_count_choices,
                config.env.clone(),
                config.uav.clone(),
            )?;
            let grids = scenario.build_grids(radius)?;
            Ok(TrainInstance { scenario, grids })
        })
        .collect()
}

/// One decoded-and-refined tour of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Visiting order (cluster indices).
    pub order: Vec<usize>,
    /// Chain-rule log-probability of that order under the decoding policy.
    pub log_prob: f64,
    /// Total age after weighted-A* hovering-point refinement, s.
    pub cost: f64,
}

/// How [`rollout_batch`] decodes each instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RolloutMode {
    /// Deterministic greedy decoding.
    Greedy,
    /// One sampled order per instance; instance `i` uses an independent
    /// stream derived from `seed` and `i`, so results do not depend on
    /// thread scheduling.
    Sample { seed: u64 },
}

fn per_instance_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Decodes every instance under `mode` and prices the order by weighted-A*
/// hovering-point selection.
pub fn rollout_batch(
    params: &PolicyParams,
    instances: &[TrainInstance],
    mode: RolloutMode,
    omega: f64,
) -> Result<Vec<Rollout>> {
    if instances.is_empty() {
        return Err(Error::contract("rollout over an empty batch"));
    }
    instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let decoded = match mode {
                RolloutMode::Greedy => {
                    policy::decode_greedy(params, &inst.scenario, &inst.grids)?
                }
                RolloutMode::Sample { seed } => policy::sample_orders(
                    params,
                    &inst.scenario,
                    &inst.grids,
                    1,
                    per_instance_seed(seed, i),
                )?
                .swap_remove(0),
            };
            let (_, cost) =
                router::plan_with_order(&inst.scenario, &inst.grids, &decoded.order, omega)?;
            Ok(Rollout {
                order: decoded.order,
                log_prob: decoded.log_prob,
                cost,
            })
        })
        .collect()
}

/// Gradient of `mean_i(advantage_i · log P(order_i))` with respect to every
/// parameter (canonical tensor order), plus that surrogate value itself.
/// Advantages are constants; instances with zero advantage contribute
/// nothing and skip their backward pass.
fn policy_gradient(
    params: &PolicyParams,
    instances: &[TrainInstance],
    orders: &[Vec<usize>],
    advantages: &[f64],
) -> Result<(Vec<Tensor>, f64)> {
    let b = instances.len();
    if b == 0 {
        return Err(Error::contract("policy gradient over an empty batch"));
    }
    if orders.len() != b || advantages.len() != b {
        return Err(Error::contract(format!(
            "{b} instances with {} orders and {} advantages",
            orders.len(),
            advantages.len()
        )));
    }
    let per: Vec<Option<(Vec<Tensor>, f64)>> = (0..b)
        .into_par_iter()
        .map(|i| -> Result<Option<(Vec<Tensor>, f64)>> {
            if advantages[i] == 0.0 {
                return Ok(None);
            }
            let lt = policy::log_prob_tape(
                params,
                &instances[i].scenario,
                &instances[i].grids,
                &orders[i],
                true,
            )?;
            let policy::LogProbTape {
                tape,
                log_prob,
                param_ids,
            } = lt;
            let lp = tape.value(log_prob).scalar()?;
            let grads = tape.backward(log_prob)?;
            let gs: Vec<Tensor> = param_ids.iter().map(|&id| grads.wrt(id)).collect();
            Ok(Some((gs, lp)))
        })
        .collect::<Result<_>>()?;

    let mut acc: Vec<Tensor> = params
        .named_tensors()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    let mut surrogate = 0.0;
    let scale = 1.0 / b as f64;
    for (i, item) in per.into_iter().enumerate() {
        if let Some((gs, lp)) = item {
            surrogate += advantages[i] * lp * scale;
            for (slot, g) in acc.iter_mut().zip(&gs) {
                slot.add_scaled(g, advantages[i] * scale)?;
            }
        }
    }
    Ok((acc, surrogate))
}

/// Per-step training telemetry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean refined cost of the sampled orders.
    pub mean_sample_cost: f64,
    /// Mean refined cost of greedy decoding under the current policy.
    pub mean_greedy_cost: f64,
    /// Mean refined cost of greedy decoding under the frozen baseline.
    pub baseline_cost: f64,
    /// `mean(advantage · log_prob)` — the differentiated surrogate.
    pub surrogate_loss: f64,
    /// Frobenius norm of the stacked parameter gradient.
    pub grad_norm: f64,
}

/// One metrics-CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    pub mean_sample_cost: f64,
    pub mean_greedy_cost: f64,
    pub baseline_cost: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

/// Outcome of a baseline-refresh check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineDecision {
    /// Mean of (current − baseline) evaluation costs.
    pub mean_difference: f64,
    /// Paired t-statistic; `None` when the differences have zero variance.
    pub t_statistic: Option<f64>,
    /// Whether the baseline parameters were replaced.
    pub updated: bool,
}

/// Paired t-statistic `mean(d)·√n / sd(d)` of a difference sample, or
/// `None` when the sample variance is zero (including single-element
/// samples).
pub fn paired_t_statistic(diffs: &[f64]) -> Result<Option<f64>> {
    if diffs.is_empty() {
        return Err(Error::contract("t-statistic of an empty sample"));
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    if diffs.len() == 1 {
        return Ok(None);
    }
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(None);
    }
    Ok(Some(mean * n.sqrt() / var.sqrt()))
}

/// One-sided test: is the mean difference significantly below zero at level
/// `alpha`?  Zero-variance samples fall back to the sign of the mean.
pub fn significantly_negative(diffs: &[f64], alpha: f64) -> Result<bool> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    match paired_t_statistic(diffs)? {
        None => {
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            Ok(mean < 0.0)
        }
        Some(t) => {
            let dof = (diffs.len() - 1) as f64;
            let dist = StudentsT::new(0.0, 1.0, dof)
                .map_err(|e| Error::Numeric(format!("t-distribution with {dof} dof: {e}")))?;
            Ok(dist.cdf(t) < alpha)
        }
    }
}

/// Mutable state of a run: current and frozen parameters, the optimizer,
/// and the three independent RNG streams (training instances, sampling,
/// evaluation instances).
pub struct Trainer {
    config: TrainConfig,
    params: PolicyParams,
    baseline: PolicyParams,
    adam: AdamState,
    rng_instances: ChaCha8Rng,
    rng_sampling: ChaCha8Rng,
    rng_eval: ChaCha8Rng,
    baseline_updates: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = PolicyParams::init(config.model.clone(), config.seed)?;
        let baseline = params.clone();
        let adam = AdamState::new(config.learning_rate);
        let mut rng_instances = ChaCha8Rng::seed_from_u64(config.seed);
        rng_instances.set_stream(1);
        let mut rng_sampling = ChaCha8Rng::seed_from_u64(config.seed);
        rng_sampling.set_stream(2);
        let mut rng_eval = ChaCha8Rng::seed_from_u64(config.seed);
        rng_eval.set_stream(3);
        Ok(Trainer {
            config,
            params,
            baseline,
            adam,
            rng_instances,
            rng_sampling,
            rng_eval,
            baseline_updates: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn baseline_params(&self) -> &PolicyParams {
        &self.baseline
    }

    pub fn baseline_updates(&self) -> usize {
        self.baseline_updates
    }

    /// Draws one fresh training batch from the instance stream.
    pub fn fresh_batch(&mut self) -> Result<Vec<TrainInstance>> {
        generate_instances(&self.config, self.config.batch_size, &mut self.rng_instances)
    }

    /// Draws one fresh held-out evaluation set from the evaluation stream.
    pub fn fresh_eval_set(&mut self) -> Result<Vec<TrainInstance>> {
        generate_instances(&self.config, self.config.eval_set_size, &mut self.rng_eval)
    }

    /// One gradient step: sample under the current policy, decode greedily
    /// under both policies, form advantages against the frozen baseline,
    /// and apply Adam to the mean advantage-weighted log-probability
    /// gradient.  Aborts with a diagnostic if the gradient turns non-finite.
    pub fn reinforce_step(&mut self, instances: &[TrainInstance]) -> Result<StepStats> {
        let sample_seed = self.rng_sampling.random::<u64>();
        let omega = self.config.omega;
        let sampled = rollout_batch(
            &self.params,
            instances,
            RolloutMode::Sample { seed: sample_seed },
            omega,
        )?;
        let greedy = rollout_batch(&self.params, instances, RolloutMode::Greedy, omega)?;
        let baseline = rollout_batch(&self.baseline, instances, RolloutMode::Greedy, omega)?;

        let advantages: Vec<f64> = sampled
            .iter()
            .zip(&baseline)
            .map(|(s, b)| s.cost - b.cost)
            .collect();
        let orders: Vec<Vec<usize>> = sampled.iter().map(|r| r.order.clone()).collect();
        let (grads, surrogate) = policy_gradient(&self.params, instances, &orders, &advantages)?;

        let grad_norm = grads
            .iter()
            .map(|g| g.norm().powi(2))
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() || !surrogate.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged: gradient norm {grad_norm}, surrogate {surrogate} \
                 (advantage range {:?})",
                advantages
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
                        (lo.min(a), hi.max(a))
                    })
            )));
        }
        {
            let mut named = self.params.named_tensors_mut();
            let mut refs: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            self.adam.apply(&mut refs, &grads)?;
        }

        let mean = |rs: &[Rollout]| rs.iter().map(|r| r.cost).sum::<f64>() / rs.len() as f64;
        Ok(StepStats {
            mean_sample_cost: mean(&sampled),
            mean_greedy_cost: mean(&greedy),
            baseline_cost: mean(&baseline),
            surrogate_loss: surrogate,
            grad_norm,
        })
    }

    /// Greedy-decodes the evaluation set under both parameter sets and
    /// replaces the baseline when the current policy is significantly
    /// cheaper (one-sided paired t-test at the configured level).
    pub fn maybe_update_baseline(
        &mut self,
        eval_instances: &[TrainInstance],
    ) -> Result<BaselineDecision> {
        let omega = self.config.omega;
        let current = rollout_batch(&self.params, eval_instances, RolloutMode::Greedy, omega)?;
        let frozen = rollout_batch(&self.baseline, eval_instances, RolloutMode::Greedy, omega)?;
        let diffs: Vec<f64> = current
            .iter()
            .zip(&frozen)
            .map(|(c, b)| c.cost - b.cost)
            .collect();
        let mean_difference = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let t_statistic = paired_t_statistic(&diffs)?;
        let updated = significantly_negative(&diffs, self.config.ttest_alpha)?;
        if updated {
            self.baseline = self.params.clone();
            self.baseline_updates += 1;
        }
        Ok(BaselineDecision {
            mean_difference,
            t_statistic,
            updated,
        })
    }

    pub fn into_params(self) -> PolicyParams {
        self.params
    }
}

/// Per-epoch progress passed to the [`train_with_progress`] callback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub epochs: usize,
    /// Mean greedy cost of the current policy on the epoch's evaluation set.
    pub eval_current_mean: f64,
    /// Mean greedy cost of the frozen baseline on the same set.
    pub eval_baseline_mean: f64,
    pub baseline_updated: bool,
    /// Wall-clock seconds spent on this epoch.
    pub seconds: f64,
}

/// Everything a finished run hands back.
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<MetricRow>,
    pub baseline_updates: usize,
}

/// Runs the full schedule (fresh instances every step, per-epoch baseline
/// check and checkpoint) and returns the trained parameters plus the
/// metric log.  See [`train_with_progress`] for a progress hook.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(config, |_| {})
}

/// As [`train`], invoking `on_epoch` after every epoch's baseline check.
pub fn train_with_progress(
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut metrics = Vec::with_capacity(config.epochs * config.steps_per_epoch);
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        for step in 0..config.steps_per_epoch {
            let step_start = Instant::now();
            let batch = trainer.fresh_batch()?;
            let stats = trainer.reinforce_step(&batch)?;
            metrics.push(MetricRow {
                epoch,
                step,
                mean_sample_cost: stats.mean_sample_cost,
                mean_greedy_cost: stats.mean_greedy_cost,
                baseline_cost: stats.baseline_cost,
                grad_norm: stats.grad_norm,
                seconds: step_start.elapsed().as_secs_f64(),
            });
        }
        let eval = trainer.fresh_eval_set()?;
        let decision = trainer.maybe_update_baseline(&eval)?;
        // Eval means are cheap to recover from the decision: mean_difference
        // = current − baseline, but we want both absolutes for progress.
        let current = rollout_batch(trainer.params(), &eval, RolloutMode::Greedy, config.omega)?;
        let eval_current_mean =
            current.iter().map(|r| r.cost).sum::<f64>() / current.len() as f64;
        let eval_baseline_mean = eval_current_mean - decision.mean_difference;
        if let Some(dir) = &config.out_dir {
            trainer
                .params()
                .save(&dir.join(format!("policy-epoch-{epoch:03}.ckpt")))?;
        }
        on_epoch(&EpochSummary {
            epoch,
            epochs: config.epochs,
            eval_current_mean,
            eval_baseline_mean,
            baseline_updated: decision.updated,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
    }
    if let Some(dir) = &config.out_dir {
        trainer.params().save(&dir.join("policy-final.ckpt"))?;
        write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
    }
    let baseline_updates = trainer.baseline_updates();
    Ok(TrainOutcome {
        params: trainer.into_params(),
        metrics,
        baseline_updates,
    })
}

/// Writes the metric log as CSV (header plus one row per training step).
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        file,
        "epoch,step,mean_sample_cost,mean_greedy_cost,baseline_cost,grad_norm,seconds"
    )?;
    for r in rows {
        writeln!(
            file,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.mean_sample_cost,
            r.mean_greedy_cost,
            r.baseline_cost,
            r.grad_norm,
            r.seconds
        )?;
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aoi;
    use approx::assert_relative_eq;

    /// Tiny configuration for fast unit tests (not the desk preset).
    fn tiny_train_config(seed: u64) -> TrainConfig {
        let mut c = TrainConfig::desk(seed);
        c.model = ModelConfig {
            d_em: 16,
            d_v: 4,
            heads: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_hidden: 32,
            clip_c: 10.0,
            l_sub: 2,
            area_scale: 3000.0,
            n_scale: 30.0,
        };
        c.m_train = 3;
        c.epochs = 1;
        c.steps_per_epoch = 2;
        c.batch_size = 4;
        c.eval_set_size = 8;
        c
    }

    fn tiny_instances(config: &TrainConfig, count: usize, stream: u64) -> Vec<TrainInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        rng.set_stream(stream);
        generate_instances(config, count, &mut rng).unwrap()
    }

    #[test]
    fn config_validation_catches_mismatches() {
        assert!(TrainConfig::desk(1).validate().is_ok());
        let mut c = TrainConfig::desk(1);
        c.model.l_sub = 3;
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
        let mut c = TrainConfig::desk(1);
        c.area_side = 2000.0;
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
        let mut c = TrainConfig::desk(1);
        c.node_count_choices = vec![5, 10];
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
        let mut c = TrainConfig::desk(1);
        c.ttest_alpha = 1.5;
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
        let mut c = TrainConfig::desk(1);
        c.batch_size = 0;
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
    }

    #[test]
    fn greedy_rollouts_are_deterministic_and_price_correctly() {
        let config = tiny_train_config(5);
        let params = PolicyParams::init(config.model.clone(), 5).unwrap();
        let instances = tiny_instances(&config, 4, 0);
        let a = rollout_batch(&params, &instances, RolloutMode::Greedy, 1.2).unwrap();
        let b = rollout_batch(&params, &instances, RolloutMode::Greedy, 1.2).unwrap();
        assert_eq!(a, b);
        for (r, inst) in a.iter().zip(&instances) {
            assert!(r.cost > 0.0);
            assert!(r.log_prob <= 0.0);
            // The reported cost must equal the age evaluator's verdict on
            // the reconstructed tour.
            let (tour, cost) =
                router::plan_with_order(&inst.scenario, &inst.grids, &r.order, 1.2).unwrap();
            assert_eq!(cost, r.cost);
            let direct = aoi::total_aoi(&tour, &inst.scenario, &inst.grids).unwrap();
            assert_relative_eq!(direct, r.cost, max_relative = 1e-9);
        }
    }

    #[test]
    fn sampled_rollouts_are_seeded() {
        let config = tiny_train_config(6);
        let params = PolicyParams::init(config.model.clone(), 6).unwrap();
        let instances = tiny_instances(&config, 8, 1);
        let a = rollout_batch(&params, &instances, RolloutMode::Sample { seed: 42 }, 1.2).unwrap();
        let b = rollout_batch(&params, &instances, RolloutMode::Sample { seed: 42 }, 1.2).unwrap();
        assert_eq!(a, b);
        let c = rollout_batch(&params, &instances, RolloutMode::Sample { seed: 43 }, 1.2).unwrap();
        assert_ne!(a, c, "a different seed should change at least one rollout");
    }

    #[test]
    fn zero_advantages_leave_parameters_unchanged() {
        let config = tiny_train_config(7);
        let params = PolicyParams::init(config.model.clone(), 7).unwrap();
        let instances = tiny_instances(&config, 3, 2);
        let orders: Vec<Vec<usize>> = instances
            .iter()
            .map(|_| vec![0usize, 1, 2])
            .collect();
        let (grads, surrogate) =
            policy_gradient(&params, &instances, &orders, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(surrogate, 0.0);
        for g in &grads {
            assert_eq!(g.norm(), 0.0);
        }
        // Feeding the zero gradient to a fresh optimizer moves nothing.
        let mut after = params.clone();
        {
            let mut adam = AdamState::new(1e-3);
            let mut named = after.named_tensors_mut();
            let mut refs: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            adam.apply(&mut refs, &grads).unwrap();
        }
        for ((_, x), (_, y)) in params.named_tensors().iter().zip(&after.named_tensors()) {
            assert_eq!(x.values(), y.values());
        }
    }

    #[test]
    fn policy_gradient_is_linear_in_advantage_and_batch_invariant() {
        let config = tiny_train_config(8);
        let params = PolicyParams::init(config.model.clone(), 8).unwrap();
        let instances = tiny_instances(&config, 1, 3);
        let order = vec![vec![1usize, 0, 2]];
        let (g1, s1) = policy_gradient(&params, &instances, &order, &[1.0]).unwrap();
        let (g2, s2) = policy_gradient(&params, &instances, &order, &[2.0]).unwrap();
        assert_relative_eq!(s2, 2.0 * s1, max_relative = 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_relative_eq!(*y, 2.0 * *x, max_relative = 1e-12);
            }
        }
        // Duplicating the batch (mean normalization) changes nothing.
        let doubled: Vec<TrainInstance> =
            vec![instances[0].clone(), instances[0].clone()];
        let orders2 = vec![order[0].clone(), order[0].clone()];
        let (g3, s3) = policy_gradient(&params, &doubled, &orders2, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(s3, s1, max_relative = 1e-12);
        for (a, b) in g1.iter().zip(&g3) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_relative_eq!(*y, *x, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let config = tiny_train_config(9);
        let params = PolicyParams::init(config.model.clone(), 9).unwrap();
        let instances = tiny_instances(&config, 1, 4);
        let orders = vec![vec![2usize, 1, 0]];
        let advantage = 1.7;
        let (grads, _) = policy_gradient(&params, &instances, &orders, &[advantage]).unwrap();

        let h = 1e-5;
        let named = params.named_tensors();
        // Probe a few parameters spread over the network.
        for &ti in &[0usize, 2, named.len() / 2, named.len() - 1] {
            let k = named[ti].1.len() / 2;
            let eval = |delta: f64| {
                let mut bumped = params.clone();
                bumped.named_tensors_mut()[ti].1.values_mut()[k] += delta;
                advantage
                    * policy::log_prob(
                        &bumped,
                        &instances[0].scenario,
                        &instances[0].grids,
                        &orders[0],
                    )
                    .unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = grads[ti].values()[k];
            let abs_err = (fd - analytic).abs();
            let rel = abs_err / fd.abs().max(analytic.abs()).max(1e-12);
            assert!(
                abs_err < 1e-8 || rel < 1e-5,
                "param {ti}[{k}]: fd={fd:.8e} analytic={analytic:.8e}"
            );
        }
    }

    #[test]
    fn t_statistic_matches_hand_oracle() {
        // d = [−1,−2,−3,−4,−5]: mean −3, sample sd √2.5,
        // t = −3·√5/√2.5 = −3√2.
        let t = paired_t_statistic(&[-1.0, -2.0, -3.0, -4.0, -5.0])
            .unwrap()
            .unwrap();
        assert_relative_eq!(t, -3.0 * 2f64.sqrt(), max_relative = 1e-12);
        assert!(significantly_negative(&[-1.0, -2.0, -3.0, -4.0, -5.0], 0.05).unwrap());

        // Cross-library check of the t CDF feeding the decision:
        // CDF_t(−3√2; 4 dof) = 0.006617799781841343.
        let dist = StudentsT::new(0.0, 1.0, 4.0).unwrap();
        assert_relative_eq!(dist.cdf(t), 0.006617799781841343, max_relative = 1e-9);

        // d = [−1,0,1,−2,−3]: t = −√2, p ≈ 0.115 — not significant at 5%.
        let t2 = paired_t_statistic(&[-1.0, 0.0, 1.0, -2.0, -3.0])
            .unwrap()
            .unwrap();
        assert_relative_eq!(t2, -(2f64.sqrt()), max_relative = 1e-12);
        assert_relative_eq!(dist.cdf(t2), 0.11509982054024936, max_relative = 1e-9);
        assert!(!significantly_negative(&[-1.0, 0.0, 1.0, -2.0, -3.0], 0.05).unwrap());
    }

    #[test]
    fn t_test_degenerate_cases() {
        // Zero variance: significance is the sign of the mean.
        assert_eq!(paired_t_statistic(&[-10.0, -10.0, -10.0]).unwrap(), None);
        assert!(significantly_negative(&[-10.0, -10.0, -10.0], 0.05).unwrap());
        assert!(!significantly_negative(&[0.0, 0.0, 0.0], 0.05).unwrap());
        assert!(!significantly_negative(&[5.0, 5.0], 0.05).unwrap());
        // Single-sample fallback.
        assert!(significantly_negative(&[-3.0], 0.05).unwrap());
        assert!(!significantly_negative(&[3.0], 0.05).unwrap());
        // Errors.
        assert!(paired_t_statistic(&[]).is_err());
        assert!(significantly_negative(&[-1.0, -2.0], 0.0).is_err());
    }

    #[test]
    fn baseline_update_decision_is_consistent() {
        let config = tiny_train_config(10);
        let mut trainer = Trainer::new(config.clone()).unwrap();
        let eval = tiny_instances(&config, 8, 5);

        // Identical parameter sets: all differences zero, no update.
        let d = trainer.maybe_update_baseline(&eval).unwrap();
        assert!(!d.updated);
        assert_eq!(d.mean_difference, 0.0);
        assert_eq!(d.t_statistic, None);
        assert_eq!(trainer.baseline_updates(), 0);

        // Distinct parameter sets: the decision must match an independent
        // recomputation from the two cost vectors.
        let other = PolicyParams::init(config.model.clone(), 999).unwrap();
        let cur = rollout_batch(&other, &eval, RolloutMode::Greedy, config.omega).unwrap();
        let base = rollout_batch(trainer.baseline_params(), &eval, RolloutMode::Greedy, config.omega)
            .unwrap();
        let diffs: Vec<f64> = cur.iter().zip(&base).map(|(c, b)| c.cost - b.cost).collect();
        let expect_update = significantly_negative(&diffs, config.ttest_alpha).unwrap();

        // Swap the trainer's current parameters for `other` and re-check.
        let mut trainer2 = Trainer::new(config.clone()).unwrap();
        trainer2.params = other;
        let d2 = trainer2.maybe_update_baseline(&eval).unwrap();
        assert_eq!(d2.updated, expect_update);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        assert_relative_eq!(d2.mean_difference, mean, max_relative = 1e-12);
    }

    #[test]
    fn advantages_at_initialization_center_on_greedy() {
        // At initialization the frozen baseline IS the current policy, so
        // the advantage must equal sample cost − current-greedy cost.
        let config = tiny_train_config(11);
        let trainer = Trainer::new(config.clone()).unwrap();
        let instances = tiny_instances(&config, 6, 6);
        let sampled = rollout_batch(
            trainer.params(),
            &instances,
            RolloutMode::Sample { seed: 3 },
            config.omega,
        )
        .unwrap();
        let greedy_current =
            rollout_batch(trainer.params(), &instances, RolloutMode::Greedy, config.omega).unwrap();
        let greedy_baseline = rollout_batch(
            trainer.baseline_params(),
            &instances,
            RolloutMode::Greedy,
            config.omega,
        )
        .unwrap();
        for (g, b) in greedy_current.iter().zip(&greedy_baseline) {
            assert_eq!(g.cost, b.cost);
            assert_eq!(g.order, b.order);
        }
        for (s, b) in sampled.iter().zip(&greedy_baseline) {
            let adv = s.cost - b.cost;
            assert!(adv.is_finite());
        }
    }

    #[test]
    fn reinforce_step_updates_parameters_and_reports_finite_stats() {
        let config = tiny_train_config(12);
        let mut trainer = Trainer::new(config).unwrap();
        let before = trainer.params().clone();
        let batch = trainer.fresh_batch().unwrap();
        let stats = trainer.reinforce_step(&batch).unwrap();
        assert!(stats.mean_sample_cost > 0.0);
        assert!(stats.mean_greedy_cost > 0.0);
        assert!(stats.baseline_cost > 0.0);
        assert!(stats.grad_norm.is_finite());
        assert!(stats.surrogate_loss.is_finite());
        let mut changed = false;
        for ((_, x), (_, y)) in before
            .named_tensors()
            .iter()
            .zip(&trainer.params().named_tensors())
        {
            if x.values() != y.values() {
                changed = true;
            }
        }
        assert!(changed, "a step with nonzero advantages must move the parameters");
    }

    #[test]
    fn corrupted_parameters_abort_with_diagnostic() {
        let config = tiny_train_config(13);
        let mut trainer = Trainer::new(config).unwrap();
        trainer.params.named_tensors_mut()[0].1.values_mut()[0] = f64::NAN;
        let batch = trainer.fresh_batch().unwrap();
        let err = trainer.reinforce_step(&batch);
        assert!(
            matches!(err, Err(Error::Numeric(_))),
            "NaN parameters must abort with a numeric diagnostic, got {err:?}"
        );
    }

    #[test]
    fn train_smoke_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_train_config(14);
        config.out_dir = Some(dir.path().to_path_buf());
        let outcome = train(&config).unwrap();
        assert_eq!(outcome.metrics.len(), config.epochs * config.steps_per_epoch);
        for (i, row) in outcome.metrics.iter().enumerate() {
            assert_eq!(row.epoch, i / config.steps_per_epoch);
            assert_eq!(row.step, i % config.steps_per_epoch);
            assert!(row.mean_sample_cost > 0.0);
            assert!(row.grad_norm.is_finite());
        }
        assert!(dir.path().join("policy-epoch-000.ckpt").exists());
        assert!(dir.path().join("policy-final.ckpt").exists());
        assert!(dir.path().join("metrics.csv").exists());

        let loaded = PolicyParams::load(&dir.path().join("policy-final.ckpt")).unwrap();
        assert_eq!(loaded.config(), &config.model);
        for ((_, x), (_, y)) in outcome
            .params
            .named_tensors()
            .iter()
            .zip(&loaded.named_tensors())
        {
            for (a, b) in x.values().iter().zip(y.values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,step,mean_sample_cost,mean_greedy_cost,baseline_cost,grad_norm,seconds"
        );
        assert_eq!(lines.count(), outcome.metrics.len());
    }

    #[test]
    fn training_is_reproducible() {
        let config = tiny_train_config(15);
        let a = train(&config).unwrap();
        let b = train(&config).unwrap();
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.epoch, y.epoch);
            assert_eq!(x.step, y.step);
            assert_eq!(x.mean_sample_cost.to_bits(), y.mean_sample_cost.to_bits());
            assert_eq!(x.mean_greedy_cost.to_bits(), y.mean_greedy_cost.to_bits());
            assert_eq!(x.baseline_cost.to_bits(), y.baseline_cost.to_bits());
            assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
            // seconds is wall time and legitimately differs.
        }
        for ((_, x), (_, y)) in a
            .params
            .named_tensors()
            .iter()
            .zip(&b.params.named_tensors())
        {
            for (p, q) in x.values().iter().zip(y.values()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        assert_eq!(a.baseline_updates, b.baseline_updates);
    }
}
