//! Latent-conditioned soft actor-critic.
//!
//! The actor is a tanh-squashed Gaussian `π(a | s, z)`; the critic is a pair
//! of `Q(s, a, z)` networks with a slowly tracking target copy. Latents enter
//! every loss detached. Policy noise is passed in explicitly with each batch
//! so a loss is a pure function of its inputs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::buffers::{Dims, Transition, TransitionBatch};
use crate::envs::{PointEnv, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{softplus, Activation, Adam, BoundMlp, Graph, Matrix, Mlp, Var};
use crate::representation::LatentCode;
use crate::virtual_tasks::{mix_latents, sample_mix};

const LOG_STD_MIN: f64 = -20.0;
const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Sample,
    Mean,
}

/// `log(1 - tanh(u)^2)` in a numerically stable form.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub net: Mlp,
    pub dims: Dims,
    pub latent_dim: usize,
}

impl Actor {
    pub fn new(dims: Dims, latent_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut sizes = vec![dims.state + latent_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * dims.action);
        Self { net: Mlp::new(&sizes, Activation::Relu, Some(1e-3), rng), dims, latent_dim }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.net.params_mut()
    }

    /// Pre-squash mean and clamped log standard deviation.
    pub fn distribution(&self, s: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut x = s.to_vec();
        x.extend_from_slice(z);
        let out = self.net.forward(&Matrix::row_vector(x)).into_vec();
        let a = self.dims.action;
        let mu = out[..a].to_vec();
        let log_std = out[a..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        (mu, log_std)
    }

    pub fn act(&self, s: &[f64], z: &[f64], mode: ActMode, rng: &mut impl Rng) -> Vec<f64> {
        let (mu, log_std) = self.distribution(s, z);
        match mode {
            ActMode::Mean => mu.iter().map(|m| m.tanh()).collect(),
            ActMode::Sample => mu
                .iter()
                .zip(&log_std)
                .map(|(m, ls)| (m + ls.exp() * rng.sample::<f64, _>(StandardNormal)).tanh())
                .collect(),
        }
    }

    /// Log-density of a squashed action in `(-1, 1)^dim`.
    pub fn log_prob(&self, s: &[f64], z: &[f64], action: &[f64]) -> f64 {
        let (mu, log_std) = self.distribution(s, z);
        action
            .iter()
            .zip(mu.iter().zip(&log_std))
            .map(|(&a, (&m, &ls))| {
                let u = a.atanh();
                let e = (u - m) / ls.exp();
                -0.5 * e * e - ls - HALF_LOG_TWO_PI - log_one_minus_tanh_sq(u)
            })
            .sum()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundActor {
        BoundActor { net: self.net.bind(g), action_dim: self.dims.action }
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BoundActor {
        BoundActor { net: self.net.bind_frozen(g), action_dim: self.dims.action }
    }
}

#[derive(Clone, Debug)]
pub struct BoundActor {
    pub net: BoundMlp,
    pub action_dim: usize,
}

impl BoundActor {
    pub fn vars(&self) -> Vec<Var> {
        self.net.vars()
    }

    /// Reparameterised actions `tanh(μ + σ ε)` and their log-densities (n x 1).
    pub fn sample(&self, g: &mut Graph, s: Var, z: Var, noise: &Matrix) -> (Var, Var) {
        let x = g.concat_cols(&[s, z]);
        let out = self.net.forward(g, x);
        let a = self.action_dim;
        let mu = g.slice_cols(out, 0, a);
        let raw = g.slice_cols(out, a, 2 * a);
        let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        let std = g.exp(log_std);
        let eps = g.constant(noise.clone());
        let spread = g.mul(std, eps);
        let u = g.add(mu, spread);
        let action = g.tanh(u);
        // log N(u; μ, σ) = -ε²/2 - log σ - log √(2π)
        let gauss = g.constant(noise.map(|e| -0.5 * e * e - HALF_LOG_TWO_PI));
        let gauss = g.sub(gauss, log_std);
        // log(1 - tanh²u) = 2 (log 2 - u - softplus(-2u))
        let m2u = g.scale(u, -2.0);
        let sp = g.softplus(m2u);
        let inner = g.add(u, sp);
        let inner = g.add_scalar(inner, -std::f64::consts::LN_2);
        let corr = g.scale(inner, 2.0);
        // gauss - log(1 - tanh²u) = gauss + 2 (u + softplus(-2u) - log 2)
        let per_dim = g.add(gauss, corr);
        let logp = g.sum_cols(per_dim);
        (action, logp)
    }
}

/// Twin `Q(s, a, z)` networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub q1: Mlp,
    pub q2: Mlp,
}

impl Critic {
    pub fn new(dims: Dims, latent_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut sizes = vec![dims.state + dims.action + latent_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let q1 = Mlp::new(&sizes, Activation::Relu, None, rng);
        let q2 = Mlp::new(&sizes, Activation::Relu, None, rng);
        Self { q1, q2 }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.q1.params();
        p.extend(self.q2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.q1.params_mut();
        p.extend(self.q2.params_mut());
        p
    }

    /// `min(Q1, Q2)` at one input.
    pub fn q_min(&self, s: &[f64], a: &[f64], z: &[f64]) -> f64 {
        let x = Matrix::row_vector([s, a, z].concat());
        self.q1.forward(&x).item().min(self.q2.forward(&x).item())
    }

    pub fn bind(&self, g: &mut Graph) -> BoundCritic {
        BoundCritic { q1: self.q1.bind(g), q2: self.q2.bind(g) }
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BoundCritic {
        BoundCritic { q1: self.q1.bind_frozen(g), q2: self.q2.bind_frozen(g) }
    }

    /// `θ⁻ ← (1 − τ) θ⁻ + τ θ`.
    pub fn soft_update_from(&mut self, source: &Critic, tau: f64) {
        for (t, s) in self.params_mut().into_iter().zip(source.params()) {
            for (x, &y) in t.data_mut().iter_mut().zip(s.data()) {
                *x = (1.0 - tau) * *x + tau * y;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundCritic {
    pub q1: BoundMlp,
    pub q2: BoundMlp,
}

impl BoundCritic {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.q1.vars();
        v.extend(self.q2.vars());
        v
    }

    pub fn both(&self, g: &mut Graph, s: Var, a: Var, z: Var) -> (Var, Var) {
        let x = g.concat_cols(&[s, a, z]);
        (self.q1.forward(g, x), self.q2.forward(g, x))
    }

    pub fn min(&self, g: &mut Graph, s: Var, a: Var, z: Var) -> Var {
        let (q1, q2) = self.both(g, s, a, z);
        g.min(q1, q2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacCoefficients {
    pub lambda_rew: f64,
    pub lambda_ent: f64,
    pub gamma: f64,
    pub tau: f64,
}

/// Transitions of one task, the latent for every row, and the standard
/// normal draws used for the policy at `s` and at `s'`.
#[derive(Clone, Debug)]
pub struct RlBatch {
    pub batch: TransitionBatch,
    /// One row per transition, or a single row shared by all.
    pub z: Matrix,
    pub noise: Matrix,
    pub noise_next: Matrix,
}

impl RlBatch {
    pub fn new(batch: TransitionBatch, z: &LatentCode, rng: &mut impl Rng) -> Self {
        let n = batch.len();
        let a = batch.dims.action;
        let mut draw = || Matrix::from_vec(n, a, (0..n * a).map(|_| rng.sample(StandardNormal)).collect());
        let noise = draw();
        let noise_next = draw();
        Self { batch, z: z.as_row(), noise, noise_next }
    }

    fn latent_rows(&self, g: &mut Graph, z: Option<Var>) -> Var {
        let n = self.batch.len();
        let v = z.unwrap_or_else(|| g.constant(self.z.clone()));
        let v = g.detach(v);
        if g.value(v).rows() == n {
            v
        } else {
            g.broadcast_rows(v, n)
        }
    }
}

/// `½ mean[(Q1 − y)² + (Q2 − y)²]`, `y = λ_rew r + γ (min Q⁻(s', a') − λ_ent log π(a'|s'))`.
/// `z` overrides the batch latent (it is detached either way).
pub fn loss_critic(
    g: &mut Graph,
    critic: &BoundCritic,
    target: &BoundCritic,
    actor: &BoundActor,
    b: &RlBatch,
    z: Option<Var>,
    coef: &SacCoefficients,
) -> Var {
    let zr = b.latent_rows(g, z);
    let s = g.constant(b.batch.states());
    let a = g.constant(b.batch.actions());
    let r = g.constant(b.batch.rewards().map(|x| coef.lambda_rew * x));
    let y = if coef.gamma == 0.0 {
        r
    } else {
        let s2 = g.constant(b.batch.next_states());
        let (a2, logp2) = actor.sample(g, s2, zr, &b.noise_next);
        let q_next = target.min(g, s2, a2, zr);
        let ent = g.scale(logp2, coef.lambda_ent);
        let soft = g.sub(q_next, ent);
        let disc = g.scale(soft, coef.gamma);
        let y = g.add(r, disc);
        g.detach(y)
    };
    let (q1, q2) = critic.both(g, s, a, zr);
    let d1 = g.sub(q1, y);
    let d2 = g.sub(q2, y);
    let e1 = g.square(d1);
    let e2 = g.square(d2);
    let e = g.add(e1, e2);
    let m = g.mean(e);
    g.scale(m, 0.5)
}

/// `mean[λ_ent log π(ã|s) − min Q(s, ã)]` with reparameterised `ã`.
pub fn loss_actor(g: &mut Graph, actor: &BoundActor, critic: &BoundCritic, b: &RlBatch, z: Option<Var>, lambda_ent: f64) -> Var {
    let zr = b.latent_rows(g, z);
    let s = g.constant(b.batch.states());
    let (a, logp) = actor.sample(g, s, zr, &b.noise);
    let q = critic.min(g, s, a, zr);
    let ent = g.scale(logp, lambda_ent);
    let per = g.sub(ent, q);
    g.mean(per)
}

fn mean_of(g: &mut Graph, parts: &[Var]) -> Option<Var> {
    let (&first, rest) = parts.split_first()?;
    let mut acc = first;
    for &p in rest {
        acc = g.add(acc, p);
    }
    Some(g.scale(acc, 1.0 / parts.len() as f64))
}

/// `L_real + λ_VT · L_virtual` for the critic and the actor; each part is the
/// mean over its batches. With `λ_VT = 0` the virtual batches are not evaluated.
#[allow(clippy::too_many_arguments)]
pub fn loss_rl_total(
    g: &mut Graph,
    critic: &BoundCritic,
    target: &BoundCritic,
    actor: &BoundActor,
    frozen_critic: &BoundCritic,
    frozen_actor: &BoundActor,
    real: &[RlBatch],
    virt: &[RlBatch],
    lambda_vt: f64,
    coef: &SacCoefficients,
) -> (Var, Var) {
    let part = |g: &mut Graph, bs: &[RlBatch]| {
        let qs: Vec<Var> = bs.iter().map(|b| loss_critic(g, critic, target, frozen_actor, b, None, coef)).collect();
        let ps: Vec<Var> = bs.iter().map(|b| loss_actor(g, actor, frozen_critic, b, None, coef.lambda_ent)).collect();
        (mean_of(g, &qs), mean_of(g, &ps))
    };
    let zero = |g: &mut Graph| g.constant(Matrix::scalar(0.0));
    let (qr, pr) = part(g, real);
    let (mut q, mut p) = (qr.unwrap_or_else(|| zero(g)), pr.unwrap_or_else(|| zero(g)));
    if lambda_vt != 0.0 {
        if let (Some(qv), Some(pv)) = part(g, virt) {
            let qv = g.scale(qv, lambda_vt);
            let pv = g.scale(pv, lambda_vt);
            q = g.add(q, qv);
            p = g.add(p, pv);
        }
    }
    (q, p)
}

/// Actor, twin critics, target critics and their optimisers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sac {
    pub actor: Actor,
    pub critic: Critic,
    pub target: Critic,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RlLosses {
    pub critic: f64,
    pub actor: f64,
}

impl Sac {
    pub fn new(dims: Dims, latent_dim: usize, hidden: &[usize], lr: f64, rng: &mut impl Rng) -> Self {
        let actor = Actor::new(dims, latent_dim, hidden, rng);
        let critic = Critic::new(dims, latent_dim, hidden, rng);
        let target = critic.clone();
        let actor_opt = Adam::new(lr, &actor.params());
        let critic_opt = Adam::new(lr, &critic.params());
        Self { actor, critic, target, actor_opt, critic_opt }
    }

    /// One critic step, one actor step against the updated critic, then the
    /// target average.
    pub fn update(&mut self, real: &[RlBatch], virt: &[RlBatch], lambda_vt: f64, coef: &SacCoefficients) -> RlLosses {
        let mut g = Graph::new();
        let critic = self.critic.bind(&mut g);
        let target = self.target.bind_frozen(&mut g);
        let actor = self.actor.bind_frozen(&mut g);
        let mut parts = Vec::new();
        let mut virt_parts = Vec::new();
        for b in real {
            parts.push(loss_critic(&mut g, &critic, &target, &actor, b, None, coef));
        }
        if lambda_vt != 0.0 {
            for b in virt {
                virt_parts.push(loss_critic(&mut g, &critic, &target, &actor, b, None, coef));
            }
        }
        let q_loss = combine(&mut g, &parts, &virt_parts, lambda_vt);
        let critic_value = g.scalar(q_loss);
        let grads = g.backward(q_loss).collect(&critic.vars());
        self.critic_opt.step(self.critic.params_mut(), &grads);

        let mut g = Graph::new();
        let actor = self.actor.bind(&mut g);
        let critic = self.critic.bind_frozen(&mut g);
        let parts: Vec<Var> = real.iter().map(|b| loss_actor(&mut g, &actor, &critic, b, None, coef.lambda_ent)).collect();
        let virt_parts: Vec<Var> = if lambda_vt != 0.0 {
            virt.iter().map(|b| loss_actor(&mut g, &actor, &critic, b, None, coef.lambda_ent)).collect()
        } else {
            Vec::new()
        };
        let pi_loss = combine(&mut g, &parts, &virt_parts, lambda_vt);
        let actor_value = g.scalar(pi_loss);
        let grads = g.backward(pi_loss).collect(&actor.vars());
        self.actor_opt.step(self.actor.params_mut(), &grads);

        self.target.soft_update_from(&self.critic, coef.tau);
        RlLosses { critic: critic_value, actor: actor_value }
    }
}

fn combine(g: &mut Graph, real: &[Var], virt: &[Var], lambda_vt: f64) -> Var {
    let base = mean_of(g, real).unwrap_or_else(|| g.constant(Matrix::scalar(0.0)));
    match mean_of(g, virt) {
        Some(v) if lambda_vt != 0.0 => {
            let v = g.scale(v, lambda_vt);
            g.add(base, v)
        }
        _ => base,
    }
}

/// One episode worth of transitions plus the latent used at each step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub latents: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn undiscounted_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.r).sum()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.transitions.iter().rev().fold(0.0, |acc, t| t.r + gamma * acc)
    }

    /// Steps at which the latent differs from the previous step.
    pub fn latent_changes(&self) -> Vec<usize> {
        (1..self.latents.len()).filter(|&t| self.latents[t] != self.latents[t - 1]).collect()
    }
}

/// Episode with a latent chosen by `latent_at(t)` at every step.
pub fn rollout_with<R: Rng>(
    actor: &Actor,
    env: &PointEnv,
    task: &TaskSpec,
    mode: ActMode,
    rng: &mut R,
    mut latent_at: impl FnMut(usize, &mut R) -> Result<Vec<f64>>,
) -> Result<Trajectory> {
    let mut state = env.reset(task, rng);
    let mut traj = Trajectory::default();
    loop {
        let z = latent_at(state.t, rng)?;
        let s = state.observation();
        let a = actor.act(&s, &z, mode, rng);
        let out = env.step(task, &state, &a)?;
        traj.transitions.push(Transition { s: s.to_vec(), a, r: out.reward, s_next: out.next.observation().to_vec(), done: out.done });
        traj.latents.push(z);
        state = out.next;
        if out.done {
            return Ok(traj);
        }
    }
}

pub fn rollout<R: Rng>(actor: &Actor, env: &PointEnv, task: &TaskSpec, z: &LatentCode, mode: ActMode, rng: &mut R) -> Result<Trajectory> {
    rollout_with(actor, env, task, mode, rng, |_, _| Ok(z.z.clone()))
}

/// Exploration episode with `π(· | s, z_on^α)`: every `h_freq` steps a fresh
/// set of `m` source latents and a fresh `α` are drawn from `latents`.
#[allow(clippy::too_many_arguments)]
pub fn explore_rollout<R: Rng>(
    actor: &Actor,
    env: &PointEnv,
    task: &TaskSpec,
    latents: &[LatentCode],
    h_freq: usize,
    beta: f64,
    m: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if h_freq == 0 {
        return Err(Error::Config("h_freq must be at least 1".into()));
    }
    let mut current = Vec::new();
    rollout_with(actor, env, task, ActMode::Sample, rng, |t, r| {
        if t % h_freq == 0 {
            let mix = sample_mix(latents.len(), m, beta, r)?;
            let chosen: Vec<&LatentCode> = mix.source_tasks.iter().map(|&i| &latents[i]).collect();
            current = mix_latents(&chosen, &mix.alpha)?.z;
        }
        Ok(current.clone())
    })
}

/// Mean over episodes of `Q(s₀, π_mean(s₀, z), z) / λ_rew` minus the
/// discounted return of the mean policy from `s₀`. Positive means the critic
/// overestimates.
#[allow(clippy::too_many_arguments)]
pub fn q_estimation_bias(
    q: impl Fn(&[f64], &[f64], &[f64]) -> f64,
    actor: &Actor,
    env: &PointEnv,
    tasks: &[(TaskSpec, LatentCode)],
    n_episodes: usize,
    lambda_rew: f64,
    gamma: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if tasks.is_empty() || n_episodes == 0 {
        return Err(Error::Config("q estimation bias needs at least one task and episode".into()));
    }
    let mut total = 0.0;
    for (task, z) in tasks {
        for _ in 0..n_episodes {
            let traj = rollout(actor, env, task, z, ActMode::Mean, rng)?;
            let first = &traj.transitions[0];
            let estimate = q(&first.s, &first.a, &z.z) / lambda_rew;
            total += estimate - traj.discounted_return(gamma);
        }
    }
    Ok(total / (tasks.len() * n_episodes) as f64)
}
