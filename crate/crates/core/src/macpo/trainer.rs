use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cg::conjugate_gradient;
use super::gae::{compute_gae, discounted_sum};
use super::trust_region::{cpo_direction, line_search_accepts, StepCase};
use crate::env::{V2gEnv, OBS_DIM};
use crate::error::{Error, Result};
use crate::nn::{gaussian_kl, gaussian_log_prob, Adam, GaussianPolicy, Mlp, MlpShape, NetCheckpoint};
use crate::scalar::{dot, norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Training iterations; each runs one episode in every parallel env.
    pub episodes: usize,
    pub parallel_envs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub kl_delta: f64,
    pub cost_limit: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub cg_damping: f64,
    pub backtrack_iters: usize,
    pub backtrack_coeff: f64,
    /// Initial fraction of the trust-region step tried by the line search.
    pub line_search_step: f64,
    pub value_lr: f64,
    /// Full-batch Adam steps per iteration for each value network.
    pub value_epochs: usize,
    /// Factor turning the per-sample mean cost advantage into a change of
    /// `Ĵ_C`; `None` uses the episode's `Σ_{t<T} γ^t`.
    pub cost_surrogate_scale: Option<f64>,
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    pub master_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 3500,
            parallel_envs: 5,
            gamma: 0.99,
            gae_lambda: 0.95,
            kl_delta: 0.01,
            cost_limit: 0.1,
            cg_iters: 10,
            cg_tol: 1e-10,
            cg_damping: 0.1,
            backtrack_iters: 10,
            backtrack_coeff: 0.5,
            line_search_step: 1.0,
            value_lr: 5e-4,
            value_epochs: 20,
            cost_surrogate_scale: None,
            hidden: vec![64, 64],
            log_std_init: -0.5,
            checkpoint_every: 0,
            master_seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !unit(self.gamma) || !unit(self.gae_lambda) {
            return Err(Error::Config("gamma and gae_lambda must lie in (0, 1]".into()));
        }
        if !(self.kl_delta > 0.0) || !(self.cost_limit >= 0.0) || !(self.cg_damping >= 0.0) {
            return Err(Error::Config("kl_delta must be > 0, cost_limit and cg_damping ≥ 0".into()));
        }
        if self.cg_iters == 0 || self.backtrack_iters == 0 || self.parallel_envs == 0 {
            return Err(Error::Config("iteration counts and parallel_envs must be ≥ 1".into()));
        }
        if !(self.backtrack_coeff > 0.0 && self.backtrack_coeff < 1.0) || !(self.line_search_step > 0.0) {
            return Err(Error::Config("backtrack_coeff must lie in (0, 1) and line_search_step be > 0".into()));
        }
        if self.cost_surrogate_scale.is_some_and(|x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Config("cost_surrogate_scale must be finite and > 0".into()));
        }
        if !(self.value_lr > 0.0) || self.hidden.contains(&0) {
            return Err(Error::Config("value_lr must be > 0 and hidden sizes ≥ 1".into()));
        }
        Ok(())
    }

    fn trust(&self) -> TrustCfg {
        TrustCfg {
            delta: self.kl_delta,
            cost_limit: self.cost_limit,
            cg_iters: self.cg_iters,
            cg_tol: self.cg_tol,
            damping: self.cg_damping,
            backtrack_iters: self.backtrack_iters,
            backtrack_coeff: self.backtrack_coeff,
            step: self.line_search_step,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct TrustCfg {
    delta: f64,
    cost_limit: f64,
    cg_iters: usize,
    cg_tol: f64,
    damping: f64,
    backtrack_iters: usize,
    backtrack_coeff: f64,
    step: f64,
}

/// One agent's view of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub old_logp: Vec<f64>,
    /// Normalized reward advantages.
    pub advantages: Vec<f64>,
    pub cost_advantages: Vec<f64>,
    /// Discounted cost estimate `Ĵ_C` of the batch.
    pub cost_return: f64,
    /// Converts the per-sample mean cost advantage into a change of `Ĵ_C`.
    pub cost_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub agent: usize,
    pub case: StepCase,
    pub accepted: bool,
    pub kl: f64,
    pub improvement: f64,
    pub cost_return: f64,
    pub predicted_cost: f64,
    pub backtracks: usize,
    pub step_norm: f64,
}

/// Zero-mean, unit-std copy (unchanged when the spread vanishes).
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    if sd < 1e-12 {
        return xs.iter().map(|x| x - m).collect();
    }
    xs.iter().map(|x| (x - m) / sd).collect()
}

fn log_probs(policy: &GaussianPolicy<f64>, batch: &AgentBatch) -> Result<Vec<f64>> {
    batch.states.iter().zip(&batch.actions).map(|(s, a)| Ok(gaussian_log_prob(&policy.dist(s)?, a))).collect()
}

/// Constrained trust-region update of one agent. `others_factor` holds the
/// importance ratios of the agents already updated this iteration; it
/// weights the reward surrogate only. Returns the report and the agent's
/// new log-probabilities on the batch.
pub fn agent_update(
    agent: usize,
    policy: &mut GaussianPolicy<f64>,
    batch: &AgentBatch,
    others_factor: &[f64],
    cfg: &TrainConfig,
) -> Result<(UpdateReport, Vec<f64>)> {
    update_with(agent, policy, batch, others_factor, &cfg.trust())
}

fn update_with(
    agent: usize,
    policy: &mut GaussianPolicy<f64>,
    batch: &AgentBatch,
    others_factor: &[f64],
    tc: &TrustCfg,
) -> Result<(UpdateReport, Vec<f64>)> {
    let n = batch.states.len();
    let theta_old = policy.params();
    let c = batch.cost_return - tc.cost_limit;
    let mut report = UpdateReport {
        agent,
        case: StepCase::Unconstrained,
        accepted: false,
        kl: 0.0,
        improvement: 0.0,
        cost_return: batch.cost_return,
        predicted_cost: batch.cost_return,
        backtracks: 0,
        step_norm: 0.0,
    };
    if n == 0 {
        return Ok((report, Vec::new()));
    }
    let inv_n = 1.0 / n as f64;
    let mut g = vec![0.0; theta_old.len()];
    let mut b = vec![0.0; theta_old.len()];
    for k in 0..n {
        let (s, a) = (&batch.states[k], &batch.actions[k]);
        policy.accumulate_log_prob_grad(s, a, inv_n * others_factor[k] * batch.advantages[k], &mut g)?;
        policy.accumulate_log_prob_grad(s, a, inv_n * batch.cost_scale * batch.cost_advantages[k], &mut b)?;
    }
    if norm(&g) < 1e-12 && norm(&b) < 1e-12 {
        return Ok((report, batch.old_logp.clone()));
    }

    let old_dists = batch.states.iter().map(|s| policy.dist(s)).collect::<Result<Vec<_>>>()?;
    let surrogate_old: f64 = (0..n).map(|k| others_factor[k] * batch.advantages[k]).sum::<f64>() * inv_n;
    let (hinv_g, hinv_b) = {
        let fisher = policy.fisher(&batch.states)?;
        let hg = conjugate_gradient(|v| fisher.apply(v, tc.damping), &g, tc.cg_iters, tc.cg_tol)?;
        let hb = if norm(&b) > 0.0 {
            conjugate_gradient(|v| fisher.apply(v, tc.damping), &b, tc.cg_iters, tc.cg_tol)?
        } else {
            vec![0.0; b.len()]
        };
        (hg, hb)
    };
    let dir = cpo_direction(&g, &b, &hinv_g, &hinv_b, c, tc.delta);
    report.case = dir.case;
    if dir.direction.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("agent {agent}: non-finite step direction")));
    }
    let lin_cost = dot(&b, &dir.direction);

    let mut frac = tc.step;
    let mut candidate = theta_old.clone();
    for j in 0..tc.backtrack_iters {
        for (t, (&o, &d)) in candidate.iter_mut().zip(theta_old.iter().zip(&dir.direction)) {
            *t = o + frac * d;
        }
        policy.set_params(&candidate)?;
        let mut kl = 0.0;
        let mut surrogate = 0.0;
        for k in 0..n {
            let dist = policy.dist(&batch.states[k])?;
            kl += gaussian_kl(&old_dists[k], &dist);
            let ratio = (gaussian_log_prob(&dist, &batch.actions[k]) - batch.old_logp[k]).exp();
            surrogate += others_factor[k] * batch.advantages[k] * ratio;
        }
        kl *= inv_n;
        let improvement = surrogate * inv_n - surrogate_old;
        let cost_change = frac * lin_cost;
        report.backtracks = j;
        if line_search_accepts(kl, tc.delta, improvement, cost_change, c) {
            report.accepted = true;
            report.kl = kl;
            report.improvement = improvement;
            report.predicted_cost = batch.cost_return + cost_change;
            report.step_norm = frac * norm(&dir.direction);
            break;
        }
        frac *= tc.backtrack_coeff;
    }
    if !report.accepted {
        policy.set_params(&theta_old)?;
        return Ok((report, batch.old_logp.clone()));
    }
    let new_logp = log_probs(policy, batch)?;
    Ok((report, new_logp))
}

/// Everything one iteration learned from, laid out per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct JointBatch {
    pub agents: Vec<AgentBatch>,
}

/// Update agents one at a time in `order`, each seeing the importance
/// ratios of those updated before it.
pub fn sequential_joint_update(
    policies: &mut [GaussianPolicy<f64>],
    batch: &JointBatch,
    order: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<UpdateReport>> {
    let n = batch.agents.first().map_or(0, |a| a.states.len());
    let mut factor = vec![1.0; n];
    let tc = cfg.trust();
    let mut reports = Vec::with_capacity(order.len());
    for &i in order {
        let ab = &batch.agents[i];
        let (report, new_logp) = update_with(i, &mut policies[i], ab, &factor, &tc)?;
        for k in 0..n {
            factor[k] *= (new_logp[k] - ab.old_logp[k]).exp();
            if !factor[k].is_finite() {
                return Err(Error::Numeric(format!("agent {i}: importance ratio overflow")));
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Full-batch Adam regression of `net` onto `targets`; returns the mean
/// squared error before each step.
pub fn fit_value_networks(
    net: &mut Mlp<f64>,
    adam: &mut Adam<f64>,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    epochs: usize,
) -> Result<Vec<f64>> {
    let n = inputs.len();
    let mut losses = Vec::with_capacity(epochs);
    if n == 0 {
        return Ok(losses);
    }
    let scale = 1.0 / n as f64;
    for _ in 0..epochs {
        let mut grad = vec![0.0; net.params().len()];
        let mut loss = 0.0;
        for (x, y) in inputs.iter().zip(targets) {
            let cache = net.forward_cached(x)?;
            let out_grad: Vec<f64> = cache.output().iter().zip(y).map(|(o, t)| 2.0 * (o - t)).collect();
            loss += cache.output().iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>();
            net.backward(&cache, &out_grad, scale, &mut grad)?;
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::Numeric("value loss is not finite".into()));
        }
        losses.push(loss);
        let mut p = net.params().to_vec();
        adam.step(&mut p, &grad)?;
        net.set_params(&p)?;
    }
    Ok(losses)
}

/// Policies and critics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub policies: Vec<GaussianPolicy<f64>>,
    pub value: Mlp<f64>,
    pub cost_values: Vec<Mlp<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    n_agents: usize,
    policies: Vec<NetCheckpoint>,
    value: NetCheckpoint,
    cost_values: Vec<NetCheckpoint>,
}

impl ModelFile {
    fn new(model: &TrainedModel, adams: Option<(&Adam<f64>, &[Adam<f64>])>) -> Self {
        Self {
            n_agents: model.n_agents(),
            policies: model.policies.iter().map(NetCheckpoint::from_policy).collect(),
            value: NetCheckpoint::from_mlp(&model.value, adams.map(|a| a.0)),
            cost_values: model
                .cost_values
                .iter()
                .enumerate()
                .map(|(i, m)| NetCheckpoint::from_mlp(m, adams.map(|a| &a.1[i])))
                .collect(),
        }
    }

    fn restore(&self, adams: Option<(&mut Adam<f64>, &mut [Adam<f64>])>) -> Result<TrainedModel> {
        if self.policies.len() != self.n_agents || self.cost_values.len() != self.n_agents {
            return Err(Error::Checkpoint("agent count does not match stored networks".into()));
        }
        let hidden = self.policies.first().map(|c| c.shape.hidden_dims.clone()).unwrap_or_default();
        let mut model = TrainedModel::init(self.n_agents, &hidden, 0.0, 0)?;
        for (p, c) in model.policies.iter_mut().zip(&self.policies) {
            c.restore_policy(p)?;
        }
        match adams {
            Some((va, ca)) => {
                self.value.restore_mlp(&mut model.value, Some(va))?;
                for ((m, c), a) in model.cost_values.iter_mut().zip(&self.cost_values).zip(ca.iter_mut()) {
                    c.restore_mlp(m, Some(a))?;
                }
            }
            None => {
                self.value.restore_mlp(&mut model.value, None)?;
                for (m, c) in model.cost_values.iter_mut().zip(&self.cost_values) {
                    c.restore_mlp(m, None)?;
                }
            }
        }
        Ok(model)
    }
}

impl TrainedModel {
    pub fn init(n_agents: usize, hidden: &[usize], log_std_init: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let global = n_agents * OBS_DIM;
        let policies = (0..n_agents)
            .map(|_| Ok(GaussianPolicy::new(MlpShape::new(OBS_DIM, hidden.to_vec(), 1)?, log_std_init, &mut rng)))
            .collect::<Result<Vec<_>>>()?;
        let value = Mlp::init(MlpShape::new(global, hidden.to_vec(), n_agents)?, 1.0, &mut rng);
        let cost_values = (0..n_agents)
            .map(|_| Ok(Mlp::init(MlpShape::new(global, hidden.to_vec(), 1)?, 1.0, &mut rng)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { policies, value, cost_values })
    }

    pub fn n_agents(&self) -> usize {
        self.policies.len()
    }

    /// Mean actions.
    pub fn act_deterministic(&self, obs: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.policies.iter().zip(obs).map(|(p, o)| Ok(p.dist(o)?.mean[0])).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::new(self, None))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<ModelFile>(text)?.restore(None)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub episode: usize,
    pub mean_return: f64,
    pub cost_rate: f64,
    pub kl: f64,
    pub accepted: usize,
    pub recovery_used: usize,
    pub cost_return: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<TrainingRow>,
    /// Per-iteration update reports, one per agent in update order.
    pub reports: Vec<Vec<UpdateReport>>,
    /// Per-iteration `Ĵ_C` of each agent.
    pub cost_returns: Vec<Vec<f64>>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(["episode", "mean_return", "cost_rate", "kl", "accepted", "recovery_used", "cost_return"])?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: TrainingLog,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: TrainedModel,
    pub value_adam: Adam<f64>,
    pub cost_adams: Vec<Adam<f64>>,
    /// Iterations completed so far.
    pub episode: usize,
    pub log: TrainingLog,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    episode: usize,
    model: ModelFile,
    log: TrainingLog,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, n_agents: usize) -> Result<Self> {
        let model = TrainedModel::init(n_agents, &cfg.hidden, cfg.log_std_init, cfg.master_seed)?;
        let value_adam = Adam::new(model.value.params().len(), cfg.value_lr);
        let cost_adams = model.cost_values.iter().map(|m| Adam::new(m.params().len(), cfg.value_lr)).collect();
        Ok(Self { model, value_adam, cost_adams, episode: 0, log: TrainingLog::default() })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = StateFile {
            episode: self.episode,
            model: ModelFile::new(&self.model, Some((&self.value_adam, &self.cost_adams))),
            log: self.log.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: StateFile = serde_json::from_str(text)?;
        let mut value_adam = Adam::new(0, 0.0);
        let mut cost_adams = vec![Adam::new(0, 0.0); file.model.n_agents];
        let model = file.model.restore(Some((&mut value_adam, &mut cost_adams)))?;
        if file.log.rows.len() != file.episode {
            return Err(Error::Checkpoint(format!(
                "log holds {} iterations, checkpoint claims {}",
                file.log.rows.len(),
                file.episode
            )));
        }
        Ok(Self { model, value_adam, cost_adams, episode: file.episode, log: file.log })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

struct Episode {
    obs: Vec<Vec<Vec<f64>>>,
    global: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    logp: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    costs: Vec<Vec<f64>>,
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

fn rollout(env: &mut V2gEnv, policies: &[GaussianPolicy<f64>], env_seed: u64, act_seed: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(act_seed);
    let mut obs = env.reset(env_seed)?;
    let mut ep = Episode {
        obs: Vec::new(),
        global: Vec::new(),
        actions: Vec::new(),
        logp: Vec::new(),
        rewards: Vec::new(),
        costs: Vec::new(),
    };
    loop {
        let mut acts = Vec::with_capacity(policies.len());
        let mut lps = Vec::with_capacity(policies.len());
        for (p, o) in policies.iter().zip(&obs) {
            let (a, lp) = p.sample(o, &mut rng)?;
            acts.push(a[0]);
            lps.push(lp);
        }
        ep.global.push(obs.concat());
        let t = env.step(&acts)?;
        ep.obs.push(obs);
        ep.actions.push(acts);
        ep.logp.push(lps);
        ep.rewards.push(t.reward);
        ep.costs.push(t.costs);
        obs = t.next_states;
        if t.terminal {
            break;
        }
    }
    Ok(ep)
}

/// Run the full training loop from scratch. `envs` are the parallel
/// environments; `on_checkpoint` is called with the iteration count
/// whenever a checkpoint is due (including once at the end).
pub fn train<F>(cfg: &TrainConfig, envs: &mut [V2gEnv], mut on_checkpoint: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &TrainedModel) -> Result<()>,
{
    cfg.validate()?;
    let n_agents = envs.first().map_or(0, V2gEnv::n_agents);
    let state = TrainState::new(cfg, n_agents)?;
    let state = train_from(cfg, envs, state, |st| on_checkpoint(st.episode, &st.model))?;
    Ok(TrainOutcome { model: state.model, log: state.log })
}

/// Continue training `state` up to `cfg.episodes` iterations. Every
/// iteration draws its randomness from the master seed and its index
/// alone, so a resumed run repeats an uninterrupted one exactly.
pub fn train_from<F>(
    cfg: &TrainConfig,
    envs: &mut [V2gEnv],
    mut state: TrainState,
    mut on_checkpoint: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    cfg.validate()?;
    if envs.len() != cfg.parallel_envs {
        return Err(Error::Config(format!("expected {} environments, got {}", cfg.parallel_envs, envs.len())));
    }
    let n_agents = envs[0].n_agents();
    if state.model.n_agents() != n_agents {
        return Err(Error::Checkpoint(format!("model has {} agents, env has {n_agents}", state.model.n_agents())));
    }
    let horizon = envs[0].config().horizon;
    let cost_scale =
        cfg.cost_surrogate_scale.unwrap_or_else(|| (0..horizon).map(|t| cfg.gamma.powi(t as i32)).sum::<f64>());
    for it in state.episode..cfg.episodes {
        let policies = &state.model.policies;
        let episodes: Vec<Episode> = envs
            .par_iter_mut()
            .enumerate()
            .map(|(e, env)| {
                let env_seed = mix(cfg.master_seed, it as u64, e as u64);
                rollout(env, policies, env_seed, mix(env_seed, 0xAC7, e as u64))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut agents: Vec<AgentBatch> = (0..n_agents)
            .map(|_| AgentBatch {
                states: Vec::new(),
                actions: Vec::new(),
                old_logp: Vec::new(),
                advantages: Vec::new(),
                cost_advantages: Vec::new(),
                cost_return: 0.0,
                cost_scale,
            })
            .collect();
        let mut globals = Vec::new();
        let mut value_targets = Vec::new();
        let mut cost_targets: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_agents];
        let mut cost_returns = vec![0.0; n_agents];
        let mut returns_sum = 0.0;
        let mut cost_sum = 0.0;
        for ep in &episodes {
            let t_len = ep.rewards.len();
            returns_sum += ep.rewards.iter().sum::<f64>();
            let values = ep.global.iter().map(|g| state.model.value.forward(g)).collect::<Result<Vec<_>>>()?;
            let mut targets = vec![vec![0.0; n_agents]; t_len];
            for i in 0..n_agents {
                let mut v: Vec<f64> = values.iter().map(|v| v[i]).collect();
                v.push(0.0);
                let adv = compute_gae(&ep.rewards, &v, cfg.gamma, cfg.gae_lambda);
                let costs: Vec<f64> = ep.costs.iter().map(|c| c[i]).collect();
                cost_sum += costs.iter().sum::<f64>();
                cost_returns[i] += discounted_sum(&costs, cfg.gamma);
                let mut vc = ep
                    .global
                    .iter()
                    .map(|g| Ok(state.model.cost_values[i].forward(g)?[0]))
                    .collect::<Result<Vec<_>>>()?;
                vc.push(0.0);
                let cadv = compute_gae(&costs, &vc, cfg.gamma, cfg.gae_lambda);
                let ab = &mut agents[i];
                for t in 0..t_len {
                    targets[t][i] = adv[t] + v[t];
                    cost_targets[i].push(vec![cadv[t] + vc[t]]);
                    ab.states.push(ep.obs[t][i].clone());
                    ab.actions.push(vec![ep.actions[t][i]]);
                    ab.old_logp.push(ep.logp[t][i]);
                    ab.advantages.push(adv[t]);
                    ab.cost_advantages.push(cadv[t]);
                }
            }
            globals.extend(ep.global.iter().cloned());
            value_targets.extend(targets);
        }
        let n_eps = episodes.len() as f64;
        for (ab, cr) in agents.iter_mut().zip(&cost_returns) {
            ab.advantages = normalize(&ab.advantages);
            ab.cost_return = cr / n_eps;
        }
        let batch = JointBatch { agents };

        let mut order: Vec<usize> = (0..n_agents).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.master_seed, 0xD1CE, it as u64)));
        let reports = sequential_joint_update(&mut state.model.policies, &batch, &order, cfg)?;

        fit_value_networks(&mut state.model.value, &mut state.value_adam, &globals, &value_targets, cfg.value_epochs)?;
        for i in 0..n_agents {
            fit_value_networks(
                &mut state.model.cost_values[i],
                &mut state.cost_adams[i],
                &globals,
                &cost_targets[i],
                cfg.value_epochs,
            )?;
        }

        let steps = (horizon * n_agents) as f64 * n_eps;
        state.log.rows.push(TrainingRow {
            episode: it,
            mean_return: returns_sum / n_eps,
            cost_rate: cost_sum / steps,
            kl: reports.iter().filter(|r| r.accepted).map(|r| r.kl).fold(0.0, f64::max),
            accepted: reports.iter().filter(|r| r.accepted).count(),
            recovery_used: reports.iter().filter(|r| r.case.is_recovery()).count(),
            cost_return: batch.agents.iter().map(|a| a.cost_return).fold(0.0, f64::max),
        });
        state.log.cost_returns.push(batch.agents.iter().map(|a| a.cost_return).collect());
        state.log.reports.push(reports);
        state.episode = it + 1;
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.episodes {
            on_checkpoint(&state)?;
        }
    }
    on_checkpoint(&state)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_batch(seed: u64, n: usize) -> (GaussianPolicy<f64>, AgentBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pol = GaussianPolicy::new(MlpShape::new(3, vec![8], 1).unwrap(), -0.5, &mut rng);
        let states: Vec<Vec<f64>> =
            (0..n).map(|k| vec![(k as f64 * 0.37).sin(), (k as f64 * 0.11).cos(), 0.5]).collect();
        let mut actions = Vec::new();
        let mut old_logp = Vec::new();
        for s in &states {
            let (a, lp) = pol.sample(s, &mut rng).unwrap();
            actions.push(a);
            old_logp.push(lp);
        }
        let adv: Vec<f64> = actions.iter().map(|a| a[0]).collect();
        let batch = AgentBatch {
            states,
            actions,
            old_logp,
            advantages: normalize(&adv),
            cost_advantages: vec![0.0; n],
            cost_return: 0.0,
            cost_scale: 1.0,
        };
        (pol, batch)
    }

    #[test]
    fn zero_signal_is_a_no_op() {
        let (mut pol, mut batch) = toy_batch(1, 20);
        batch.advantages = vec![0.0; 20];
        let before = pol.params();
        let (r, _) = agent_update(0, &mut pol, &batch, &[1.0; 20], &TrainConfig::default()).unwrap();
        assert!(!r.accepted);
        assert_eq!(pol.params(), before);
    }

    #[test]
    fn accepted_steps_respect_trust_region() {
        let (mut pol, batch) = toy_batch(2, 64);
        let cfg = TrainConfig::default();
        let (r, new_logp) = agent_update(0, &mut pol, &batch, &[1.0; 64], &cfg).unwrap();
        assert!(r.accepted);
        assert!(r.kl <= cfg.kl_delta && r.kl > 0.0);
        assert!(r.improvement > 0.0);
        assert_eq!(new_logp.len(), 64);
    }

    #[test]
    fn infeasible_batch_takes_recovery_step() {
        let (mut pol, mut batch) = toy_batch(3, 64);
        batch.cost_advantages = batch.actions.iter().map(|a| a[0]).collect();
        batch.cost_return = 2.0;
        let (r, _) = agent_update(0, &mut pol, &batch, &[1.0; 64], &TrainConfig::default()).unwrap();
        assert_eq!(r.case, StepCase::Recovery);
        assert!(r.accepted);
        assert!(r.predicted_cost < batch.cost_return);
    }

    #[test]
    fn value_fit_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::init(MlpShape::new(4, vec![16], 2).unwrap(), 1.0, &mut rng);
        let mut adam = Adam::new(net.params().len(), 1e-2);
        let xs: Vec<Vec<f64>> = (0..32).map(|k| (0..4).map(|j| ((k * 4 + j) as f64 * 0.7).sin()).collect()).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] - x[1], 0.5 * x[2]]).collect();
        let losses = fit_value_networks(&mut net, &mut adam, &xs, &ys, 100).unwrap();
        assert!(losses.last().unwrap() < &(0.5 * losses[0]));
        let mut zero = Mlp::zeros(MlpShape::new(4, vec![16], 2).unwrap());
        let mut adam = Adam::new(zero.params().len(), 1e-2);
        let l = fit_value_networks(&mut zero, &mut adam, &xs, &vec![vec![0.0, 0.0]; 32], 3).unwrap();
        assert!(l.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_examples() {
        let z = normalize(&[1.0, 2.0, 3.0]);
        assert!(z.iter().sum::<f64>().abs() < 1e-12);
        assert!((z.iter().map(|x| x * x).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert_eq!(normalize(&[2.0, 2.0]), vec![0.0, 0.0]);
    }

    fn tiny() -> (TrainConfig, Vec<V2gEnv>) {
        let cfg =
            TrainConfig { episodes: 4, parallel_envs: 2, hidden: vec![8], value_epochs: 2, ..TrainConfig::default() };
        let env_cfg = crate::env::EnvConfig { fleet_size: 6, ..Default::default() };
        let envs = (0..2).map(|_| V2gEnv::new(env_cfg.clone()).unwrap()).collect();
        (cfg, envs)
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let (cfg, mut envs) = tiny();
        let full = train_from(&cfg, &mut envs, TrainState::new(&cfg, 2).unwrap(), |_| Ok(())).unwrap();

        let half = TrainConfig { episodes: 2, ..cfg.clone() };
        let first = train_from(&half, &mut envs, TrainState::new(&cfg, 2).unwrap(), |_| Ok(())).unwrap();
        let restored = TrainState::from_json(&first.to_json().unwrap()).unwrap();
        assert_eq!(restored.episode, 2);
        let resumed = train_from(&cfg, &mut envs, restored, |_| Ok(())).unwrap();

        assert_eq!(resumed.episode, 4);
        assert_eq!(resumed.log, full.log);
        assert_eq!(resumed.model.to_json().unwrap(), full.model.to_json().unwrap());
    }

    #[test]
    fn zero_iterations_only_checkpoints_the_initial_model() {
        let (cfg, mut envs) = tiny();
        let cfg = TrainConfig { episodes: 0, ..cfg };
        let mut calls = Vec::new();
        let out = train(&cfg, &mut envs, |k, _| {
            calls.push(k);
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, vec![0]);
        assert!(out.log.rows.is_empty());
    }

    #[test]
    fn corrupt_state_is_rejected() {
        let (cfg, _) = tiny();
        let st = TrainState::new(&cfg, 2).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&st.to_json().unwrap()).unwrap();
        v["episode"] = 3.into();
        assert!(matches!(TrainState::from_json(&v.to_string()), Err(Error::Checkpoint(_))));
    }
}
