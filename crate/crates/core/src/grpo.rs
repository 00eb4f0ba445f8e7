//! Stage-2 policy optimization over latent perturbations: groups of rollouts
//! that differ only by Gaussian noise on the final thought embedding, a
//! hybrid likelihood/exact-match reward, baseline-relative advantages and a
//! clipped surrogate with a reverse-KL penalty. Only FLR parameters move.

use serde::{Deserialize, Serialize};

use crate::data::EOT;
use crate::decoding::{greedy_decode, PrefixTrie};
use crate::error::{contract, FlrError, Result};
use crate::model::Model;
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::objectives::{attn_div_loss, combine, orth_loss, sparsity_loss, LossToggles};
use crate::optim::AdamW;

/// Denominator guard of the advantage normalization.
pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub noise_sigma: f64,
    pub reward_alpha: f64,
    pub reward_beta: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_coef: f64,
    pub inner_epochs: usize,
    pub lr: f64,
    /// Prompts per optimizer step.
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            noise_sigma: 0.05,
            reward_alpha: 0.1,
            reward_beta: 1.0,
            clip_low: 0.2,
            clip_high: 0.28,
            kl_coef: 0.01,
            inner_epochs: 2,
            lr: 1e-4,
            batch_size: 4,
            steps: 200,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlrError::Config(format!("grpo: {m}")));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.clip_low > 0.0 && self.clip_high > 0.0) {
            return bad("clip bounds must be positive".into());
        }
        if self.inner_epochs == 0 || self.batch_size == 0 {
            return bad("inner_epochs and batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// `α · mean(logp) + β · 1[response == target]`.
pub fn hybrid_reward(logprobs: &[f64], response: &[usize], target: &[usize], cfg: &GrpoConfig) -> Result<f64> {
    if logprobs.is_empty() || response.is_empty() {
        return Err(contract("reward needs a nonempty response"));
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    let hit = if response == target { 1.0 } else { 0.0 };
    Ok(cfg.reward_alpha * mean + cfg.reward_beta * hit)
}

/// `Â_i = (r_i − r_1) / (‖r_{2:G} − r_1‖ + ε)`; the baseline gets 0.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(contract("a group needs at least two rewards"));
    }
    let base = rewards[0];
    let norm = rewards[1..].iter().map(|r| (r - base).powi(2)).sum::<f64>().sqrt();
    let mut adv: Vec<f64> = rewards.iter().map(|r| (r - base) / (norm + ADVANTAGE_EPS)).collect();
    adv[0] = 0.0;
    Ok(adv)
}

/// `e^Δ − Δ − 1`.
pub fn reverse_kl(delta: f64) -> f64 {
    delta.exp() - delta - 1.0
}

/// Per-token objective `min(ρÂ, clip(ρ)Â) − β_KL·KL` with
/// `ρ = exp(logp_new − logp_old)` and `Δ = logp_ref − logp_new`.
pub fn token_objective(logp_new: f64, logp_old: f64, logp_ref: f64, advantage: f64, cfg: &GrpoConfig) -> Result<f64> {
    let rho = (logp_new - logp_old).exp();
    if !rho.is_finite() {
        return Err(FlrError::Divergence(format!("importance ratio {rho}")));
    }
    let clipped = rho.clamp(1.0 - cfg.clip_low, 1.0 + cfg.clip_high);
    let term = (rho * advantage).min(clipped * advantage);
    Ok(term - cfg.kl_coef * reverse_kl(logp_ref - logp_new))
}

/// Tape version of [`token_objective`] over one sequence; returns the
/// per-token objectives `[T]`.
pub fn token_objective_var<'t>(
    logp_new: Var<'t>,
    logp_old: &[f64],
    logp_ref: &[f64],
    advantage: f64,
    cfg: &GrpoConfig,
) -> Result<Var<'t>> {
    let tape = logp_new.tape();
    let old = tape.constant(Tensor::vector(logp_old.to_vec()));
    let reference = tape.constant(Tensor::vector(logp_ref.to_vec()));
    let rho = logp_new.sub(old)?.exp();
    if let Some(bad) = rho.value().data().iter().find(|r| !r.is_finite()) {
        return Err(FlrError::Divergence(format!("importance ratio {bad}")));
    }
    let unclipped = rho.scale(advantage);
    let clipped = rho.clamp(1.0 - cfg.clip_low, 1.0 + cfg.clip_high).scale(advantage);
    let delta = reference.sub(logp_new)?;
    let kl = delta.exp().sub(delta)?.add_scalar(-1.0);
    unclipped.minimum(clipped)?.sub(kl.scale(cfg.kl_coef))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub epsilon: Tensor,
    pub item_id: u32,
    /// Response tokens: title followed by the end marker.
    pub tokens: Vec<usize>,
    /// Teacher-forced log-probs under the rollout-time snapshot.
    pub logp_old: Vec<f64>,
    /// Same tokens under the reference policy with the same perturbation.
    pub logp_ref: Vec<f64>,
    pub reward: f64,
    pub advantage: f64,
}

impl Rollout {
    pub fn exact_match(&self, target: &[usize]) -> bool {
        self.tokens == target
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn mean_reward(&self) -> f64 {
        self.rollouts.iter().map(|r| r.reward).sum::<f64>() / self.rollouts.len() as f64
    }
}

/// Draws `G` perturbations (the first is zero), greedily decodes a catalog
/// title under each, and scores the responses.
pub fn sample_group(
    model: &Model,
    reference: &Model,
    trie: &PrefixTrie,
    prompt: &[usize],
    target: &[usize],
    cfg: &GrpoConfig,
    rng: &mut Rng,
) -> Result<RolloutGroup> {
    cfg.validate()?;
    let d = model.config.d_model;
    let tape = Tape::new();
    let policy = model.bind(&tape, false, false);
    let base = policy.condition_default(prompt)?;
    let ref_tape = Tape::new();
    let ref_policy = reference.bind(&ref_tape, false, false);
    let ref_base = ref_policy.condition_default(prompt)?;
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    for i in 0..cfg.group_size {
        let epsilon = if i == 0 {
            Tensor::zeros(&[d])
        } else {
            rng.gaussian(&[d], cfg.noise_sigma)?
        };
        let cond = policy.perturb(&base, &epsilon)?;
        let mut scorer = |p: &[usize]| policy.next_logprobs(&cond, p);
        let decoded = greedy_decode(&mut scorer, trie, EOT)?;
        let mut tokens = decoded.tokens;
        tokens.push(EOT);
        let logp_old = policy.target_logprobs(&cond, &tokens)?.value().data().to_vec();
        let ref_cond = ref_policy.perturb(&ref_base, &epsilon)?;
        let logp_ref = ref_policy.target_logprobs(&ref_cond, &tokens)?.value().data().to_vec();
        let reward = hybrid_reward(&logp_old, &tokens, target, cfg)?;
        rollouts.push(Rollout {
            epsilon,
            item_id: decoded.item_id,
            tokens,
            logp_old,
            logp_ref,
            reward,
            advantage: 0.0,
        });
    }
    let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
    for (r, a) in rollouts.iter_mut().zip(group_advantages(&rewards)?) {
        r.advantage = a;
    }
    Ok(RolloutGroup {
        prompt: prompt.to_vec(),
        target: target.to_vec(),
        rollouts,
    })
}

/// Scalar summary of one stage-2 step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoReport {
    pub mean_reward: f64,
    pub exact_match_rate: f64,
    pub mean_abs_advantage: f64,
    /// Reverse KL to the reference, measured in the first inner epoch.
    pub kl_mean: f64,
    /// Share of tokens whose ratio left the clip range in the last inner
    /// epoch (the first always sees unit ratios).
    pub clip_fraction: f64,
    pub l_orth: f64,
    pub l_div: f64,
    pub l_sparse: f64,
    /// Mean importance ratio per inner epoch.
    pub rho_mean: Vec<f64>,
}

impl GrpoReport {
    pub const CSV_HEADER: &'static str =
        "step,mean_reward,exact_match_rate,mean_abs_advantage,kl_mean,clip_fraction,l_orth,l_div,l_sparse";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{}",
            self.mean_reward,
            self.exact_match_rate,
            self.mean_abs_advantage,
            self.kl_mean,
            self.clip_fraction,
            self.l_orth,
            self.l_div,
            self.l_sparse
        )
    }
}

/// `inner_epochs` optimizer updates of the FLR parameters on a batch of
/// groups. The baseline rollout is excluded from the surrogate; the
/// sequence advantage applies to every token of its response.
pub fn grpo_step(
    model: &mut Model,
    groups: &[RolloutGroup],
    toggles: &LossToggles,
    cfg: &GrpoConfig,
    opt: &mut AdamW,
) -> Result<GrpoReport> {
    if groups.is_empty() {
        return Err(contract("grpo_step needs at least one group"));
    }
    let mut report = GrpoReport::default();
    let n_rollouts: usize = groups.iter().map(|g| g.rollouts.len()).sum();
    for g in groups {
        for r in &g.rollouts {
            report.mean_reward += r.reward / n_rollouts as f64;
            report.mean_abs_advantage += r.advantage.abs() / n_rollouts as f64;
            if r.exact_match(&g.target) {
                report.exact_match_rate += 1.0 / n_rollouts as f64;
            }
        }
    }
    for epoch in 0..cfg.inner_epochs {
        let mut grads: Vec<Tensor> = model.flr.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let (mut kl_sum, mut clipped, mut tokens, mut rho_sum) = (0.0, 0usize, 0usize, 0.0);
        let mut regs_sum = [0.0; 3];
        for g in groups {
            let tape = Tape::new();
            let bound = model.bind(&tape, false, true);
            let base = bound.condition_default(&g.prompt)?;
            let last = base.last().ok_or_else(|| contract("no refinement iterations"))?;
            let regs = [
                orth_loss(&[last.factors])?,
                attn_div_loss(&[last.attention])?,
                sparsity_loss(&[last.alpha])?,
            ];
            let mut seq_objs = Vec::new();
            for r in g.rollouts.iter().skip(1) {
                let cond = bound.perturb(&base, &r.epsilon)?;
                let logp_new = bound.target_logprobs(&cond, &r.tokens)?;
                let obj = token_objective_var(logp_new, &r.logp_old, &r.logp_ref, r.advantage, cfg)?;
                seq_objs.push(obj.mean());
                let new = logp_new.value();
                for ((n, o), rf) in new.data().iter().zip(&r.logp_old).zip(&r.logp_ref) {
                    let rho = (n - o).exp();
                    rho_sum += rho;
                    kl_sum += reverse_kl(rf - n);
                    if rho < 1.0 - cfg.clip_low || rho > 1.0 + cfg.clip_high {
                        clipped += 1;
                    }
                    tokens += 1;
                }
            }
            let mean_obj = seq_objs
                .iter()
                .skip(1)
                .try_fold(seq_objs[0], |acc, o| acc.add(*o))?
                .scale(1.0 / seq_objs.len() as f64);
            for (s, r) in regs_sum.iter_mut().zip(&regs) {
                *s += r.item() / groups.len() as f64;
            }
            let loss = combine(mean_obj.neg(), regs, bound.flr.log_vars, toggles)?;
            let gr = tape.backward(loss)?;
            if bound.backbone.vars().iter().any(|v| gr.is_populated(*v)) {
                return Err(contract("backbone gradient populated during stage 2"));
            }
            for (acc, v) in grads.iter_mut().zip(bound.flr.vars()) {
                let gv = gr.get_or_zeros(v);
                acc.data_mut()
                    .iter_mut()
                    .zip(gv.data())
                    .for_each(|(a, x)| *a += x / groups.len() as f64);
            }
        }
        opt.step(model.flr.tensors_mut(), &grads)?;
        let t = tokens.max(1) as f64;
        report.rho_mean.push(rho_sum / t);
        if epoch + 1 == cfg.inner_epochs {
            report.clip_fraction = clipped as f64 / t;
        }
        if epoch == 0 {
            report.kl_mean = kl_sum / t;
            report.l_orth = regs_sum[0];
            report.l_div = regs_sum[1];
            report.l_sparse = regs_sum[2];
        }
    }
    if !model.is_finite() {
        return Err(FlrError::Divergence("non-finite FLR parameters after update".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_cases() {
        let cfg = GrpoConfig::default();
        let r = hybrid_reward(&[-2.0, -2.0], &[1, 2], &[1, 2], &cfg).unwrap();
        assert!((r - 0.8).abs() < 1e-9);
        let r = hybrid_reward(&[-1.0, -1.0, -1.0], &[1, 2, 3], &[1, 2, 4], &cfg).unwrap();
        assert!((r + 0.1).abs() < 1e-12);
        assert_eq!(hybrid_reward(&[0.0], &[7], &[7], &cfg).unwrap(), 1.0);
        assert!(hybrid_reward(&[], &[], &[1], &cfg).is_err());
    }

    #[test]
    fn advantage_cases() {
        assert_eq!(group_advantages(&[0.3; 4]).unwrap(), vec![0.0; 4]);
        let a = group_advantages(&[0.5, 0.7, 0.3]).unwrap();
        assert_eq!(a[0], 0.0);
        assert!((a[1] - 0.7071).abs() < 1e-4 && (a[2] + 0.7071).abs() < 1e-4);
        let shifted = group_advantages(&[1.5, 1.7, 1.3]).unwrap();
        for (x, y) in a.iter().zip(shifted) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(group_advantages(&[1.0]).is_err());
    }

    #[test]
    fn objective_cases() {
        let cfg = GrpoConfig::default();
        assert!((token_objective(-1.0, -1.0, -1.0, 0.7, &cfg).unwrap() - 0.7).abs() < 1e-15);
        let cfg0 = GrpoConfig {
            kl_coef: 0.0,
            ..Default::default()
        };
        let o = token_objective(1.5f64.ln(), 0.0, 1.5f64.ln(), 1.0, &cfg0).unwrap();
        assert!((o - 1.28).abs() < 1e-12);
        assert!((reverse_kl(1.0) - (std::f64::consts::E - 2.0)).abs() < 1e-9);
        assert!(token_objective(800.0, 0.0, 0.0, 1.0, &cfg).is_err());
    }

    #[test]
    fn var_objective_matches_scalar() {
        let cfg = GrpoConfig::default();
        let tape = Tape::new();
        let new = [-0.5, -2.0, -0.1];
        let old = [-0.7, -1.6, -0.1];
        let rf = [-0.4, -2.5, -0.3];
        for adv in [0.8, -1.3] {
            let v = token_objective_var(tape.constant(Tensor::vector(new.to_vec())), &old, &rf, adv, &cfg).unwrap();
            for i in 0..3 {
                let s = token_objective(new[i], old[i], rf[i], adv, &cfg).unwrap();
                assert!((v.value().data()[i] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        for bad in [
            GrpoConfig {
                group_size: 1,
                ..Default::default()
            },
            GrpoConfig {
                noise_sigma: -0.1,
                ..Default::default()
            },
            GrpoConfig {
                clip_low: 0.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
