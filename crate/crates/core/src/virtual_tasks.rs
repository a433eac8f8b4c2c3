//! Virtual tasks: mixed latents, decoder-generated contexts, and the
//! adversarial plus task-preserving objectives that shape the generator.
//!
//! The critic scores single `(s, a, r, s', z)` rows; a context's score is the
//! mean over its rows. The gradient penalty is taken per row.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::buffers::{Context, ContextSource, Dims, TaskBuffers, TransitionBatch, Which};
use crate::error::{Error, Result};
use crate::nn::{Activation, BoundMlp, Graph, Matrix, Mlp, Var};
use crate::representation::{BoundDecoder, BoundEncoder, LatentCode, LatentKind, TransitionDecoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixCoefficients {
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub source_tasks: Vec<usize>,
}

impl MixCoefficients {
    pub fn m(&self) -> usize {
        self.alpha.len()
    }

    pub fn bounds(m: usize, beta: f64) -> (f64, f64) {
        let shift = (beta - 1.0) / m as f64;
        (-shift, beta - shift)
    }
}

/// `β · Dirichlet(1, …, 1) − (β − 1) / M`.
pub fn sample_alpha(m: usize, beta: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::Config("at least one source task is required".into()));
    }
    if beta.is_nan() || beta < 1.0 || beta.is_infinite() {
        return Err(Error::Config(format!("beta must be >= 1, got {beta}")));
    }
    if m == 1 {
        return Ok(vec![1.0]);
    }
    let draws: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    let shift = (beta - 1.0) / m as f64;
    Ok(draws.into_iter().map(|d| beta * d / total - shift).collect())
}

/// Source tasks drawn without replacement when possible.
pub fn sample_sources(n_tasks: usize, m: usize, rng: &mut impl Rng) -> Vec<usize> {
    if m <= n_tasks {
        rand::seq::index::sample(rng, n_tasks, m).into_vec()
    } else {
        (0..m).map(|_| rng.gen_range(0..n_tasks)).collect()
    }
}

pub fn sample_mix(n_tasks: usize, m: usize, beta: f64, rng: &mut impl Rng) -> Result<MixCoefficients> {
    if n_tasks == 0 {
        return Err(Error::Config("no training tasks to mix".into()));
    }
    let source_tasks = sample_sources(n_tasks, m, rng);
    let alpha = sample_alpha(m, beta, rng)?;
    Ok(MixCoefficients { alpha, beta, source_tasks })
}

pub fn mix_latents(latents: &[&LatentCode], alpha: &[f64]) -> Result<LatentCode> {
    if latents.len() != alpha.len() || latents.is_empty() {
        return Err(Error::Input(format!("{} latents for {} coefficients", latents.len(), alpha.len())));
    }
    let dim = latents[0].dim();
    if latents.iter().any(|l| l.dim() != dim) {
        return Err(Error::Input("latent dimensions differ".into()));
    }
    let mut z = vec![0.0; dim];
    for (l, &a) in latents.iter().zip(alpha) {
        for (o, v) in z.iter_mut().zip(&l.z) {
            *o += a * v;
        }
    }
    Ok(LatentCode::new(z, LatentKind::Virtual))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualTask {
    pub mix: MixCoefficients,
    pub z_alpha_off: LatentCode,
    pub z_alpha_on: LatentCode,
}

impl VirtualTask {
    /// `z_off` and `z_on` are indexed by training task.
    pub fn build(mix: MixCoefficients, z_off: &[LatentCode], z_on: &[LatentCode]) -> Result<Self> {
        let pick = |zs: &[LatentCode]| -> Result<Vec<LatentCode>> {
            mix.source_tasks
                .iter()
                .map(|&i| zs.get(i).cloned().ok_or(Error::IndexOutOfRange { index: i, len: zs.len() }))
                .collect()
        };
        let off = pick(z_off)?;
        let on = pick(z_on)?;
        let z_alpha_off = mix_latents(&off.iter().collect::<Vec<_>>(), &mix.alpha)?;
        let z_alpha_on = mix_latents(&on.iter().collect::<Vec<_>>(), &mix.alpha)?;
        Ok(Self { mix, z_alpha_off, z_alpha_on })
    }
}

/// `n` real off-policy transitions; each row comes from a source task chosen
/// with probability proportional to `|α_i|`. Source indices refer to `buffers`.
pub fn draw_donor_context(
    mix: &MixCoefficients,
    buffers: &[&TaskBuffers],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Context> {
    let weights: Vec<f64> = mix.alpha.iter().map(|a| a.abs()).collect();
    let total: f64 = weights.iter().sum();
    let mut counts = vec![0usize; mix.m()];
    for _ in 0..n {
        let mut u = rng.gen::<f64>() * total;
        let mut k = 0;
        while k + 1 < weights.len() && u >= weights[k] {
            u -= weights[k];
            k += 1;
        }
        counts[k] += 1;
    }
    let mut parts = Vec::new();
    let mut done = Vec::new();
    let mut dims = None;
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let task = mix.source_tasks[k];
        let buf = buffers.get(task).ok_or(Error::IndexOutOfRange { index: task, len: buffers.len() })?;
        let batch = buf.sample_context(Which::Off, c, rng)?.batch;
        dims = Some(batch.dims);
        done.extend(batch.done.iter().copied());
        parts.push(batch.rows);
    }
    let dims = dims.ok_or_else(|| Error::Input("empty donor context".into()))?;
    let rows = Matrix::vcat(&parts.iter().collect::<Vec<_>>());
    Ok(Context::new(TransitionBatch { rows, done, dims }, ContextSource::Off))
}

fn check_eps(eps_reg: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eps_reg) {
        Ok(())
    } else {
        Err(Error::Config(format!("eps_reg must lie in [0, 1], got {eps_reg}")))
    }
}

/// Virtual context: donor `(s, a)`, decoded reward, and next state
/// `ε ŝ' + (1 − ε) s'_real`.
pub fn generate_virtual_context(
    decoder: &TransitionDecoder,
    z_alpha_off: &LatentCode,
    donor: &Context,
    eps_reg: f64,
) -> Result<Context> {
    check_eps(eps_reg)?;
    if z_alpha_off.dim() != decoder.cond_dim {
        return Err(Error::Input("latent does not match the decoder".into()));
    }
    let b = &donor.batch;
    let s = b.states();
    let a = b.actions();
    let pred = decoder.predict(&s, &a, &z_alpha_off.as_row().repeat_row(b.len()));
    let real_next = b.next_states();
    let next = pred.next_state.zip_map(&real_next, |h, r| eps_reg * h + (1.0 - eps_reg) * r);
    let rows = Matrix::hcat(&[&s, &a, &pred.reward, &next]);
    Ok(Context::new(TransitionBatch { rows, done: b.done.clone(), dims: b.dims }, ContextSource::Virtual))
}

/// Graph form of [`generate_virtual_context`]: rows `(s, a, r̂, ε ŝ' + (1 − ε) s')`
/// with gradients flowing into the decoder. The latent is detached.
pub fn generate_virtual_rows(g: &mut Graph, decoder: &BoundDecoder, z_alpha_off: Var, donor: &Context, eps_reg: f64) -> Var {
    let b = &donor.batch;
    let s = g.constant(b.states());
    let a = g.constant(b.actions());
    let z = g.detach(z_alpha_off);
    let zb = g.broadcast_rows(z, b.len());
    let (r, s_hat) = decoder.predict::<rand_chacha::ChaCha8Rng>(g, s, a, zb, None);
    let next = if eps_reg == 1.0 {
        s_hat
    } else {
        let real = g.constant(b.next_states().map(|x| (1.0 - eps_reg) * x));
        let pred = g.scale(s_hat, eps_reg);
        g.add(pred, real)
    };
    g.concat_cols(&[s, a, r, next])
}

/// Critic `f_ζ` over `(s, a, r, s', z)` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub net: Mlp,
    pub dims: Dims,
    pub latent_dim: usize,
}

impl Discriminator {
    pub fn new(dims: Dims, latent_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut sizes = vec![dims.row_width() + latent_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self { net: Mlp::new(&sizes, Activation::Tanh, None, rng), dims, latent_dim }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.net.params_mut()
    }

    /// Mean row score of a context paired with a latent.
    pub fn score(&self, ctx: &Context, z: &LatentCode) -> f64 {
        let x = Matrix::hcat(&[ctx.rows(), &z.as_row().repeat_row(ctx.len())]);
        let out = self.net.forward(&x);
        out.sum() / out.rows().max(1) as f64
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        self.net.bind(g)
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BoundMlp {
        self.net.bind_frozen(g)
    }
}

/// Critic input rows for a context paired with a (detached) latent.
pub fn critic_inputs(g: &mut Graph, rows: Var, z: Var) -> Var {
    let n = g.value(rows).rows();
    let z = g.detach(z);
    let zb = g.broadcast_rows(z, n);
    g.concat_cols(&[rows, zb])
}

/// Mean over rows of `(‖∇_x f(x)‖₂ − 1)²` at `x = δ real + (1 − δ) fake`, one
/// `δ ~ U[0, 1]` per row. Fake row `k` is paired with real row `k mod n_real`.
/// Both inputs are detached.
pub fn gradient_penalty(g: &mut Graph, critic: &BoundMlp, real: Var, fake: Var, rng: &mut impl Rng) -> Var {
    let real_v = g.value(real).clone();
    let fake_v = g.value(fake).clone();
    assert_eq!(real_v.cols(), fake_v.cols(), "real and fake inputs differ in width");
    let n = fake_v.rows();
    let mut x = Matrix::zeros(n, fake_v.cols());
    for k in 0..n {
        let d: f64 = rng.gen();
        let r = real_v.row(k % real_v.rows());
        for (o, (&rv, &fv)) in x.row_mut(k).iter_mut().zip(r.iter().zip(fake_v.row(k))) {
            *o = d * rv + (1.0 - d) * fv;
        }
    }
    let xv = g.constant(x);
    let (_, dx) = critic.input_gradient(g, xv);
    let sq = g.square(dx);
    let norm2 = g.sum_cols(sq);
    // Guard the square root at exactly zero gradient.
    let norm2 = g.add_scalar(norm2, 1e-24);
    let norm = g.sqrt(norm2);
    let gap = g.add_scalar(norm, -1.0);
    let pen = g.square(gap);
    g.mean(pen)
}

/// Value and node of the critic objective.
#[derive(Clone, Copy, Debug)]
pub struct DiscLoss {
    pub total: Var,
    pub wgan: f64,
    pub gp: f64,
}

/// `λ_WGAN (mean f(fake) − mean f(real)) + λ_GP · GP`. Inputs are critic input
/// rows (see [`critic_inputs`]); they are detached here.
pub fn loss_disc(
    g: &mut Graph,
    critic: &BoundMlp,
    real: Var,
    fake: Var,
    lambda_wgan: f64,
    lambda_gp: f64,
    rng: &mut impl Rng,
) -> DiscLoss {
    let real = g.detach(real);
    let fake = g.detach(fake);
    let mut parts = Vec::new();
    let mut wgan = 0.0;
    let mut gp = 0.0;
    if lambda_wgan != 0.0 {
        let fr = critic.forward(g, real);
        let ff = critic.forward(g, fake);
        let mr = g.mean(fr);
        let mf = g.mean(ff);
        let diff = g.sub(mf, mr);
        let w = g.scale(diff, lambda_wgan);
        wgan = g.scalar(w);
        parts.push(w);
    }
    if lambda_gp != 0.0 {
        let p = gradient_penalty(g, critic, real, fake, rng);
        let p = g.scale(p, lambda_gp);
        gp = g.scalar(p);
        parts.push(p);
    }
    let total = match parts.as_slice() {
        [] => g.constant(Matrix::scalar(0.0)),
        [one] => *one,
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    };
    DiscLoss { total, wgan, gp }
}

/// One virtual task inside the generator objective.
pub struct GenTerm<'a> {
    pub donor: &'a Context,
    /// Mixed off-policy latent; detached inside [`loss_gen`].
    pub z_alpha_off: Var,
}

#[derive(Clone, Debug)]
pub struct GenLoss {
    pub total: Var,
    pub wgan: f64,
    pub task_preserving: f64,
    /// `‖encode(ĉ^α) − z^α‖₂` per term.
    pub preserve_gap: Vec<f64>,
}

/// `−λ_WGAN f(ĉ^α, z̄^α) + λ_TP ‖encode(ĉ^α) − z̄^α‖²`, averaged over terms.
/// `ĉ^α` is generated with next-state weight `eps_gen`. The critic should be
/// bound frozen.
#[allow(clippy::too_many_arguments)]
pub fn loss_gen(
    g: &mut Graph,
    encoder: &BoundEncoder,
    decoder: &BoundDecoder,
    critic: &BoundMlp,
    terms: &[GenTerm<'_>],
    lambda_wgan: f64,
    lambda_tp: f64,
    eps_gen: f64,
) -> GenLoss {
    let n = terms.len().max(1) as f64;
    let mut parts = Vec::new();
    let (mut wgan, mut tp) = (0.0, 0.0);
    let mut preserve_gap = Vec::with_capacity(terms.len());
    for t in terms {
        let target = g.detach(t.z_alpha_off);
        let rows = generate_virtual_rows(g, decoder, target, t.donor, eps_gen);
        if lambda_wgan != 0.0 {
            let x = critic_inputs(g, rows, target);
            let f = critic.forward(g, x);
            let f = g.mean(f);
            let w = g.scale(f, -lambda_wgan);
            wgan += g.scalar(w);
            parts.push(w);
        }
        let z_hat = encoder.encode(g, rows);
        let diff = g.sub(z_hat, target);
        let sq = g.square(diff);
        let d2 = g.sum(sq);
        preserve_gap.push(g.scalar(d2).sqrt());
        if lambda_tp != 0.0 {
            let p = g.scale(d2, lambda_tp);
            tp += g.scalar(p);
            parts.push(p);
        }
    }
    let total = if parts.is_empty() {
        g.constant(Matrix::scalar(0.0))
    } else {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p);
        }
        g.scale(acc, 1.0 / n)
    };
    GenLoss { total, wgan: wgan / n, task_preserving: tp / n, preserve_gap }
}
