//! Task encoder, the two transition decoders, the decoder-based
//! bisimulation distance, and the encoder/decoder objective.
//!
//! The encoder is a deterministic set function: every `(s, a, r, s')` row
//! is embedded independently, the embeddings are averaged, and a small
//! network maps the average to the latent. Averaging uses an exact
//! fixed-point accumulator so the latent is bit-identical under any
//! permutation of the context.
//!
//! Two decoders share one architecture:
//! * the task decoder conditions on a latent and is the generator of
//!   virtual contexts;
//! * the index decoder conditions on a one-hot task index and is the model
//!   of each training task used to compute bisimulation targets.
//!
//! Both predict the reward and the state increment; the predicted next
//! state is `s + Δ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffers::{Context, Dims, TaskBuffers, Which};
use crate::envs::{PointEnv, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{Activation, BoundMlp, Dropout, Graph, Matrix, Mlp, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentKind {
    On,
    Off,
    Virtual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub z: Vec<f64>,
    pub kind: LatentKind,
}

impl LatentCode {
    pub fn new(z: Vec<f64>, kind: LatentKind) -> Self {
        Self { z, kind }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn as_row(&self) -> Matrix {
        Matrix::row_vector(self.z.clone())
    }

    pub fn l2_distance(&self, other: &Self) -> f64 {
        self.z.iter().zip(&other.z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentNorm {
    #[default]
    L1,
    L2,
}

const FIXED_SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64

/// Column means accumulated in 64.64 fixed point, so the result does not
/// depend on row order.
pub fn order_invariant_mean_rows(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    let mut acc = vec![0i128; cols];
    for r in 0..rows {
        for (a, &x) in acc.iter_mut().zip(m.row(r)) {
            *a += (x * FIXED_SCALE).round() as i128;
        }
    }
    let n = rows.max(1) as f64;
    Matrix::row_vector(acc.into_iter().map(|a| a as f64 / FIXED_SCALE / n).collect())
}

fn pooled_mean(g: &mut Graph, x: Var) -> Var {
    // Same gradient as a plain mean; the value is replaced by the exact one.
    let plain = g.mean_rows(x);
    let exact = order_invariant_mean_rows(g.value(x));
    let correction = exact.zip_map(g.value(plain), |e, p| e - p);
    let c = g.constant(correction);
    g.add(plain, c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub embed: Mlp,
    pub project: Mlp,
    pub dims: Dims,
    pub latent_dim: usize,
}

impl Encoder {
    pub fn new(dims: Dims, hidden: &[usize], latent_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let width = hidden.last().copied().unwrap_or(dims.row_width());
        let mut embed_sizes = vec![dims.row_width()];
        embed_sizes.extend_from_slice(hidden);
        let embed = Mlp::new(&embed_sizes, activation, None, rng);
        let project = Mlp::new(&[width, width, latent_dim], activation, None, rng);
        Self { embed, project, dims, latent_dim }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.embed.params();
        p.extend(self.project.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.embed.params_mut();
        p.extend(self.project.params_mut());
        p
    }

    /// Sets the final projection layer to zero.
    pub fn zero_projection(&mut self) {
        if let Some(last) = self.project.layers.last_mut() {
            last.weight.data_mut().fill(0.0);
            last.bias.data_mut().fill(0.0);
        }
    }

    pub fn encode_rows(&self, rows: &Matrix) -> Vec<f64> {
        let h = self.embed.forward(rows);
        let pooled = order_invariant_mean_rows(&h);
        self.project.forward(&pooled).into_vec()
    }

    pub fn encode(&self, ctx: &Context) -> Result<LatentCode> {
        if ctx.dims() != self.dims {
            return Err(Error::Input("context dimensions do not match the encoder".into()));
        }
        if ctx.is_empty() {
            return Err(Error::Input("cannot encode an empty context".into()));
        }
        if !ctx.rows().is_finite() {
            return Err(Error::Input("non-finite context".into()));
        }
        let kind = match ctx.source {
            crate::buffers::ContextSource::On => LatentKind::On,
            crate::buffers::ContextSource::Off => LatentKind::Off,
            crate::buffers::ContextSource::Virtual => LatentKind::Virtual,
        };
        Ok(LatentCode::new(self.encode_rows(ctx.rows()), kind))
    }

    pub fn bind(&self, g: &mut Graph) -> BoundEncoder {
        BoundEncoder { embed: self.embed.bind(g), project: self.project.bind(g) }
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BoundEncoder {
        BoundEncoder { embed: self.embed.bind_frozen(g), project: self.project.bind_frozen(g) }
    }
}

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub embed: BoundMlp,
    pub project: BoundMlp,
}

impl BoundEncoder {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.embed.vars();
        v.extend(self.project.vars());
        v
    }

    /// Latent row (1 x latent_dim) for a context given as rows on the graph.
    pub fn encode(&self, g: &mut Graph, rows: Var) -> Var {
        let h = self.embed.forward(g, rows);
        let pooled = pooled_mean(g, h);
        self.project.forward(g, pooled)
    }
}

/// Average of `n_avg` encodings of fresh off-policy contexts.
pub fn encode_off_avg(
    encoder: &Encoder,
    buffers: &TaskBuffers,
    n_avg: usize,
    n_c: usize,
    rng: &mut impl Rng,
) -> Result<LatentCode> {
    if n_avg == 0 {
        return Err(Error::Config("n_avg must be at least 1".into()));
    }
    let mut sum = vec![0.0; encoder.latent_dim];
    for _ in 0..n_avg {
        let ctx = buffers.sample_context(Which::Off, n_c, rng)?;
        for (s, z) in sum.iter_mut().zip(encoder.encode(&ctx)?.z) {
            *s += z;
        }
    }
    Ok(LatentCode::new(sum.into_iter().map(|s| s / n_avg as f64).collect(), LatentKind::Off))
}

/// Predicted reward (n x 1) and next state (n x state_dim).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub reward: Matrix,
    pub next_state: Matrix,
}

/// `(s, a, condition) -> (r̂, ŝ')` network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionDecoder {
    pub net: Mlp,
    pub dims: Dims,
    pub cond_dim: usize,
}

impl TransitionDecoder {
    pub fn new(dims: Dims, cond_dim: usize, hidden: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![dims.state + dims.action + cond_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1 + dims.state);
        Self { net: Mlp::new(&sizes, activation, None, rng), dims, cond_dim }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.net.params_mut()
    }

    pub fn predict(&self, s: &Matrix, a: &Matrix, cond: &Matrix) -> Prediction {
        let x = Matrix::hcat(&[s, a, cond]);
        let out = self.net.forward(&x);
        let reward = out.slice_cols(0, 1);
        let mut next_state = out.slice_cols(1, 1 + self.dims.state);
        next_state.add_assign(s);
        Prediction { reward, next_state }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundDecoder {
        BoundDecoder { net: self.net.bind(g), state_dim: self.dims.state }
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BoundDecoder {
        BoundDecoder { net: self.net.bind_frozen(g), state_dim: self.dims.state }
    }
}

#[derive(Clone, Debug)]
pub struct BoundDecoder {
    pub net: BoundMlp,
    pub state_dim: usize,
}

impl BoundDecoder {
    pub fn vars(&self) -> Vec<Var> {
        self.net.vars()
    }

    /// `(r̂, ŝ')` on the graph; `cond` has one row per sample.
    pub fn predict<R: Rng>(&self, g: &mut Graph, s: Var, a: Var, cond: Var, dropout: Option<Dropout<'_, R>>) -> (Var, Var) {
        let x = g.concat_cols(&[s, a, cond]);
        let out = self.net.forward_dropout(g, x, dropout);
        let r = g.slice_cols(out, 0, 1);
        let delta = g.slice_cols(out, 1, 1 + self.state_dim);
        let next = g.add(s, delta);
        (r, next)
    }
}

pub fn one_hot_rows(index: usize, n_tasks: usize, rows: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, n_tasks);
    for r in 0..rows {
        m.set(r, index, 1.0);
    }
    m
}

/// Encoder `q_ψ`, latent-conditioned decoder `p_φ` and index decoder `p_φ̃`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    pub encoder: Encoder,
    pub decoder: TransitionDecoder,
    pub idx_decoder: TransitionDecoder,
    pub n_tasks: usize,
}

impl TaskModel {
    pub fn new(
        dims: Dims,
        latent_dim: usize,
        n_tasks: usize,
        encoder_hidden: &[usize],
        decoder_hidden: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let encoder = Encoder::new(dims, encoder_hidden, latent_dim, activation, rng);
        let decoder = TransitionDecoder::new(dims, latent_dim, decoder_hidden, activation, rng);
        let idx_decoder = TransitionDecoder::new(dims, n_tasks, decoder_hidden, activation, rng);
        Self { encoder, decoder, idx_decoder, n_tasks }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.idx_decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend(self.idx_decoder.params_mut());
        p
    }

    pub fn bind(&self, g: &mut Graph) -> BoundTaskModel {
        BoundTaskModel {
            encoder: self.encoder.bind(g),
            decoder: self.decoder.bind(g),
            idx_decoder: self.idx_decoder.bind(g),
            n_tasks: self.n_tasks,
        }
    }

    /// `p_φ(s, a, z)` for a single latent shared by every row.
    pub fn decode(&self, s: &Matrix, a: &Matrix, z: &LatentCode) -> Result<Prediction> {
        check_finite(&[s, a])?;
        if z.dim() != self.decoder.cond_dim || !z.z.iter().all(|x| x.is_finite()) {
            return Err(Error::Input("latent does not match the decoder".into()));
        }
        Ok(self.decoder.predict(s, a, &z.as_row().repeat_row(s.rows())))
    }

    /// `p_φ̃(s, a, one_hot(task_index))`.
    pub fn decode_idx(&self, s: &Matrix, a: &Matrix, task_index: usize) -> Result<Prediction> {
        if task_index >= self.n_tasks {
            return Err(Error::IndexOutOfRange { index: task_index, len: self.n_tasks });
        }
        check_finite(&[s, a])?;
        Ok(self.idx_decoder.predict(s, a, &one_hot_rows(task_index, self.n_tasks, s.rows())))
    }

    /// Decoder-based bisimulation distance between two training tasks on a
    /// shared `(s, a)` batch: mean of `|r̂_i - r̂_j| + η ‖ŝ'_i - ŝ'_j‖₂`.
    pub fn bisim_distance(&self, i: usize, j: usize, s: &Matrix, a: &Matrix, eta: f64) -> Result<f64> {
        if s.rows() == 0 {
            return Err(Error::Input("empty (s, a) batch".into()));
        }
        let pi = self.decode_idx(s, a, i)?;
        let pj = self.decode_idx(s, a, j)?;
        Ok(prediction_distance(&pi, &pj, eta))
    }
}

fn check_finite(ms: &[&Matrix]) -> Result<()> {
    if ms.iter().all(|m| m.is_finite()) {
        Ok(())
    } else {
        Err(Error::Input("non-finite decoder input".into()))
    }
}

/// Row-mean of `|r_i - r_j| + η ‖s'_i - s'_j‖₂`. Between point predictions the
/// 2-Wasserstein distance reduces to the Euclidean distance of the points.
pub fn prediction_distance(pi: &Prediction, pj: &Prediction, eta: f64) -> f64 {
    let n = pi.reward.rows();
    let mut total = 0.0;
    for r in 0..n {
        let dr = (pi.reward.get(r, 0) - pj.reward.get(r, 0)).abs();
        let ds: f64 = pi
            .next_state
            .row(r)
            .iter()
            .zip(pj.next_state.row(r))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        total += dr + eta * ds;
    }
    total / n.max(1) as f64
}

/// The same distance computed from the true reward and transition functions.
pub fn reference_bisim_distance(env: &PointEnv, ti: &TaskSpec, tj: &TaskSpec, s: &Matrix, a: &Matrix, eta: f64) -> f64 {
    let n = s.rows();
    let mut total = 0.0;
    for r in 0..n {
        let (si, ri) = env.dynamics(ti, s.row(r), a.row(r));
        let (sj, rj) = env.dynamics(tj, s.row(r), a.row(r));
        let ds: f64 = si.iter().zip(&sj).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        total += (ri - rj).abs() + eta * ds;
    }
    total / n.max(1) as f64
}

#[derive(Clone, Debug)]
pub struct BoundTaskModel {
    pub encoder: BoundEncoder,
    pub decoder: BoundDecoder,
    pub idx_decoder: BoundDecoder,
    pub n_tasks: usize,
}

impl BoundTaskModel {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars();
        v.extend(self.decoder.vars());
        v.extend(self.idx_decoder.vars());
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BisimCoefficients {
    pub bisim: f64,
    pub recon: f64,
    pub on_off: f64,
    /// Weight of `‖mean_k z_off^k‖²`. Every other term is invariant to a
    /// common shift of the latents, so this pins the origin.
    #[serde(default)]
    pub center: f64,
    pub eta: f64,
    pub norm: LatentNorm,
}

/// Data of one training task inside a model update.
pub struct BisimTerm<'a> {
    pub task_index: usize,
    pub off: &'a Context,
    pub on: &'a Context,
    /// Target of the on-off alignment, usually an averaged off-policy latent.
    /// It is detached inside [`loss_bisim`].
    pub off_target: Var,
}

/// Loss node plus the weighted contribution of every term (averaged over tasks).
#[derive(Clone, Debug)]
pub struct BisimLoss {
    pub total: Var,
    pub bisim: f64,
    pub recon_idx: f64,
    pub recon: f64,
    pub on_off: f64,
    pub center: f64,
    /// Off-policy latents per term, as computed on the graph.
    pub z_off: Vec<Var>,
}

fn split_context(g: &mut Graph, ctx: &Context) -> (Var, Var, Var, Var) {
    let b = &ctx.batch;
    (g.constant(b.states()), g.constant(b.actions()), g.constant(b.rewards()), g.constant(b.next_states()))
}

/// Mean over rows of `(r - r̂)² + ‖s' - ŝ'‖²`.
fn reconstruction(g: &mut Graph, r: Var, s_next: Var, r_hat: Var, s_hat: Var) -> Var {
    let dr = g.sub(r, r_hat);
    let ds = g.sub(s_next, s_hat);
    let dr2 = g.square(dr);
    let ds2 = g.square(ds);
    let ds2 = g.sum_cols(ds2);
    let per_row = g.add(dr2, ds2);
    g.mean(per_row)
}

/// Encoder/decoder objective:
/// `λ_bisim (|z_off^i - z_off^j| - d(i, j))² + λ_recon (recon_idx + recon) + λ_on-off ‖z_on^i - z̄_off^i‖²`
/// averaged over `terms`, plus `λ_center ‖mean z_off‖²`; `partners[k]` is the
/// index into `terms` paired with term `k`.
///
/// The bisimulation target `d` comes from the index decoder and is treated as
/// a constant. The on-off target is detached. Terms whose coefficient is zero
/// are not evaluated.
pub fn loss_bisim<R: Rng>(
    g: &mut Graph,
    model: &BoundTaskModel,
    terms: &[BisimTerm<'_>],
    partners: &[usize],
    coef: &BisimCoefficients,
    mut dropout: Option<Dropout<'_, R>>,
) -> BisimLoss {
    assert_eq!(terms.len(), partners.len(), "one partner per term");
    let n = terms.len().max(1) as f64;
    let need_z_off = coef.bisim > 0.0 || coef.recon > 0.0 || coef.center > 0.0;
    let z_off: Vec<Var> = if need_z_off || coef.on_off > 0.0 {
        terms.iter().map(|t| {
            let rows = g.constant(t.off.rows().clone());
            model.encoder.encode(g, rows)
        }).collect()
    } else {
        Vec::new()
    };
    let mut parts: Vec<Var> = Vec::new();
    let (mut sum_b, mut sum_ri, mut sum_r, mut sum_o) = (0.0, 0.0, 0.0, 0.0);
    for (k, t) in terms.iter().enumerate() {
        let (s, a, r, s_next) = split_context(g, t.off);
        let rows = t.off.len();
        if coef.bisim > 0.0 {
            let p = &terms[partners[k]];
            let (sp, ap, _, _) = split_context(g, p.off);
            let s_all = g.concat_rows(&[s, sp]);
            let a_all = g.concat_rows(&[a, ap]);
            let d = bisim_target(g, model, t.task_index, p.task_index, s_all, a_all, coef.eta);
            let diff = g.sub(z_off[k], z_off[partners[k]]);
            let dist = match coef.norm {
                LatentNorm::L1 => {
                    let ab = g.abs(diff);
                    g.sum(ab)
                }
                LatentNorm::L2 => {
                    let sq = g.square(diff);
                    let s2 = g.sum(sq);
                    g.sqrt(s2)
                }
            };
            let gap = g.sub(dist, d);
            let sq = g.square(gap);
            let term = g.scale(sq, coef.bisim);
            sum_b += g.scalar(term);
            parts.push(term);
        }
        if coef.recon > 0.0 {
            let onehot = g.constant(one_hot_rows(t.task_index, model.n_tasks, rows));
            let (ri, si) = model.idx_decoder.predict::<R>(g, s, a, onehot, None);
            let li = reconstruction(g, r, s_next, ri, si);
            let li = g.scale(li, coef.recon);
            sum_ri += g.scalar(li);
            parts.push(li);

            let zb = g.broadcast_rows(z_off[k], rows);
            let drop = dropout.as_mut().map(|d| Dropout { rate: d.rate, rng: &mut *d.rng });
            let (rh, sh) = model.decoder.predict(g, s, a, zb, drop);
            let lr = reconstruction(g, r, s_next, rh, sh);
            let lr = g.scale(lr, coef.recon);
            sum_r += g.scalar(lr);
            parts.push(lr);
        }
        if coef.on_off > 0.0 {
            let on_rows = g.constant(t.on.rows().clone());
            let z_on = model.encoder.encode(g, on_rows);
            let target = g.detach(t.off_target);
            let diff = g.sub(z_on, target);
            let sq = g.square(diff);
            let lo = g.sum(sq);
            let lo = g.scale(lo, coef.on_off);
            sum_o += g.scalar(lo);
            parts.push(lo);
        }
    }
    let mut total = if parts.is_empty() {
        g.constant(Matrix::scalar(0.0))
    } else {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p);
        }
        g.scale(acc, 1.0 / n)
    };
    let mut center = 0.0;
    if coef.center > 0.0 && !z_off.is_empty() {
        let all = g.concat_rows(&z_off);
        let mean = g.mean_rows(all);
        let sq = g.square(mean);
        let sq = g.sum(sq);
        let lc = g.scale(sq, coef.center);
        center = g.scalar(lc);
        total = g.add(total, lc);
    }
    BisimLoss { total, bisim: sum_b / n, recon_idx: sum_ri / n, recon: sum_r / n, on_off: sum_o / n, center, z_off }
}

/// Detached decoder-based distance between tasks `i` and `j` on the given rows.
pub fn bisim_target(g: &mut Graph, model: &BoundTaskModel, i: usize, j: usize, s: Var, a: Var, eta: f64) -> Var {
    let rows = g.value(s).rows();
    let oi = g.constant(one_hot_rows(i, model.n_tasks, rows));
    let oj = g.constant(one_hot_rows(j, model.n_tasks, rows));
    let (ri, si) = model.idx_decoder.predict::<rand_chacha::ChaCha8Rng>(g, s, a, oi, None);
    let (rj, sj) = model.idx_decoder.predict::<rand_chacha::ChaCha8Rng>(g, s, a, oj, None);
    let dr = g.sub(ri, rj);
    let dr = g.abs(dr);
    let ds = g.sub(si, sj);
    let ds = g.square(ds);
    let ds = g.sum_cols(ds);
    let ds = g.sqrt(ds);
    let ds = g.scale(ds, eta);
    let per_row = g.add(dr, ds);
    let d = g.mean(per_row);
    g.detach(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffers::{ContextSource, TransitionBatch};
    use crate::nn::{finite_difference, gradient_mismatch};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> Dims {
        Dims::new(4, 2)
    }

    fn random_context(n: usize, source: ContextSource, rng: &mut ChaCha8Rng) -> Context {
        let w = dims().row_width();
        let rows = Matrix::from_vec(n, w, (0..n * w).map(|_| rng.gen_range(-1.0..1.0)).collect());
        Context::new(TransitionBatch { rows, done: vec![false; n], dims: dims() }, source)
    }

    fn small_model(rng: &mut ChaCha8Rng) -> TaskModel {
        TaskModel::new(dims(), 3, 4, &[6, 6], &[6], Activation::Tanh, rng)
    }

    #[test]
    fn zero_projection_gives_zero_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut enc = Encoder::new(dims(), &[8], 4, Activation::Tanh, &mut rng);
        enc.zero_projection();
        let ctx = random_context(5, ContextSource::On, &mut rng);
        let z = enc.encode(&ctx).unwrap();
        assert_eq!(z.z, vec![0.0; 4]);
        assert_eq!(z.kind, LatentKind::On);
    }

    #[test]
    fn graph_encoding_matches_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::new(dims(), &[8, 8], 3, Activation::Relu, &mut rng);
        let ctx = random_context(9, ContextSource::Off, &mut rng);
        let mut g = Graph::new();
        let b = enc.bind(&mut g);
        let rows = g.constant(ctx.rows().clone());
        let z = b.encode(&mut g, rows);
        assert_eq!(g.value(z).data(), enc.encode(&ctx).unwrap().z.as_slice());
    }

    #[test]
    fn non_finite_context_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(dims(), &[8], 3, Activation::Relu, &mut rng);
        let mut ctx = random_context(4, ContextSource::Off, &mut rng);
        ctx.batch.rows.set(1, 2, f64::INFINITY);
        assert!(matches!(enc.encode(&ctx), Err(Error::Input(_))));
    }

    #[test]
    fn off_average_of_one_equals_single_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(dims(), &[8], 3, Activation::Relu, &mut rng);
        let mut buf = TaskBuffers::new(0, dims(), 100, 100);
        let ctx = random_context(30, ContextSource::Off, &mut rng);
        buf.store(Which::Off, &ctx.batch.transitions().collect::<Vec<_>>()).unwrap();
        let avg = encode_off_avg(&enc, &buf, 1, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let single = buf.sample_context(Which::Off, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(avg.z, enc.encode(&single).unwrap().z);
        assert!(matches!(encode_off_avg(&enc, &buf, 0, 8, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn off_average_of_identical_contexts_equals_the_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::new(dims(), &[8], 3, Activation::Relu, &mut rng);
        let mut buf = TaskBuffers::new(0, dims(), 100, 100);
        let one = random_context(1, ContextSource::Off, &mut rng);
        buf.store(Which::Off, &one.batch.transitions().collect::<Vec<_>>()).unwrap();
        let avg = encode_off_avg(&enc, &buf, 4, 6, &mut rng).unwrap();
        let ctx = buf.sample_context(Which::Off, 6, &mut rng).unwrap();
        let z = enc.encode(&ctx).unwrap();
        for (x, y) in avg.z.iter().zip(&z.z) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn off_average_has_lower_variance_than_a_single_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = Encoder::new(dims(), &[16], 2, Activation::Tanh, &mut rng);
        let mut buf = TaskBuffers::new(0, dims(), 1000, 1000);
        let data = random_context(500, ContextSource::Off, &mut rng);
        buf.store(Which::Off, &data.batch.transitions().collect::<Vec<_>>()).unwrap();
        let variance = |n_avg: usize, rng: &mut ChaCha8Rng| {
            let zs: Vec<Vec<f64>> = (0..100).map(|_| encode_off_avg(&enc, &buf, n_avg, 16, rng).unwrap().z).collect();
            (0..2)
                .map(|d| {
                    let m = zs.iter().map(|z| z[d]).sum::<f64>() / 100.0;
                    zs.iter().map(|z| (z[d] - m).powi(2)).sum::<f64>() / 99.0
                })
                .sum::<f64>()
        };
        let single = variance(1, &mut rng);
        let averaged = variance(4, &mut rng);
        assert!(averaged <= single, "{averaged} > {single}");
    }

    #[test]
    fn decoders_are_deterministic_and_check_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = small_model(&mut rng);
        let s = Matrix::from_vec(2, 4, (0..8).map(|k| k as f64 * 0.1).collect());
        let a = Matrix::from_vec(2, 2, vec![0.1, -0.2, 0.3, 0.4]);
        let z = LatentCode::new(vec![0.2, -0.1, 0.5], LatentKind::Off);
        assert_eq!(m.decode(&s, &a, &z).unwrap(), m.decode(&s, &a, &z).unwrap());
        assert_eq!(m.decode_idx(&s, &a, 3).unwrap(), m.decode_idx(&s, &a, 3).unwrap());
        assert!(matches!(m.decode_idx(&s, &a, 4), Err(Error::IndexOutOfRange { index: 4, len: 4 })));
        let mut bad = s.clone();
        bad.set(0, 0, f64::NAN);
        assert!(m.decode(&bad, &a, &z).is_err());
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = small_model(&mut rng);
        let s = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let a = Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let z = Matrix::from_vec(1, 3, vec![0.3, -0.7, 0.2]).repeat_row(3);
        let weights = Matrix::from_vec(3, 5, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let objective = |d: &TransitionDecoder| {
            let p = d.predict(&s, &a, &z);
            let out = Matrix::hcat(&[&p.reward, &p.next_state]);
            out.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum::<f64>()
        };
        let mut g = Graph::new();
        let b = m.decoder.bind(&mut g);
        let (sv, av, zv) = (g.constant(s.clone()), g.constant(a.clone()), g.constant(z.clone()));
        let (r, sn) = b.predict::<ChaCha8Rng>(&mut g, sv, av, zv, None);
        let out = g.concat_cols(&[r, sn]);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w);
        let loss = g.sum(prod);
        let analytic = g.backward(loss).collect(&b.vars());
        let numeric = finite_difference(&mut m.decoder, |d| d.params_mut(), objective, 1e-6);
        assert!(gradient_mismatch(&analytic, &numeric, 1e-4, 1e-8) <= 1.0);
    }

    fn bisim_fixture(rng: &mut ChaCha8Rng) -> (TaskModel, Vec<Context>, Vec<Context>, Vec<Vec<f64>>) {
        let m = small_model(rng);
        let offs: Vec<Context> = (0..3).map(|_| random_context(5, ContextSource::Off, rng)).collect();
        let ons: Vec<Context> = (0..3).map(|_| random_context(5, ContextSource::On, rng)).collect();
        let targets: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        (m, offs, ons, targets)
    }

    fn bisim_value(m: &TaskModel, offs: &[Context], ons: &[Context], targets: &[Vec<f64>], coef: &BisimCoefficients) -> (Graph, BisimLoss, BoundTaskModel) {
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let tvars: Vec<Var> = targets.iter().map(|t| g.constant(Matrix::row_vector(t.clone()))).collect();
        let terms: Vec<BisimTerm> = (0..3)
            .map(|k| BisimTerm { task_index: [0, 2, 3][k], off: &offs[k], on: &ons[k], off_target: tvars[k] })
            .collect();
        let loss = loss_bisim::<ChaCha8Rng>(&mut g, &b, &terms, &[1, 2, 0], coef, None);
        (g, loss, b)
    }

    #[test]
    fn zero_coefficients_give_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (m, offs, ons, targets) = bisim_fixture(&mut rng);
        let coef = BisimCoefficients { bisim: 0.0, recon: 0.0, on_off: 0.0, center: 0.0, eta: 0.1, norm: LatentNorm::L1 };
        let (g, loss, _) = bisim_value(&m, &offs, &ons, &targets, &coef);
        assert_eq!(g.scalar(loss.total), 0.0);
    }

    #[test]
    fn self_pair_has_zero_bisim_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, offs, ons, _) = bisim_fixture(&mut rng);
        let coef = BisimCoefficients { bisim: 1.0, recon: 0.0, on_off: 0.0, center: 0.0, eta: 0.1, norm: LatentNorm::L1 };
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let t = g.constant(Matrix::zeros(1, 3));
        let terms = [BisimTerm { task_index: 1, off: &offs[0], on: &ons[0], off_target: t }];
        let loss = loss_bisim::<ChaCha8Rng>(&mut g, &b, &terms, &[0], &coef, None);
        assert_eq!(g.scalar(loss.total), 0.0);
    }

    #[test]
    fn bisim_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mut m, offs, ons, targets) = bisim_fixture(&mut rng);
        for norm in [LatentNorm::L1, LatentNorm::L2] {
            let coef = BisimCoefficients { bisim: 2.0, recon: 1.5, on_off: 0.7, center: 0.4, eta: 0.3, norm };
            let (g, loss, b) = bisim_value(&m, &offs, &ons, &targets, &coef);
            let analytic = g.backward(loss.total).collect(&b.vars());
            // The bisimulation target is a constant of the objective: freeze the
            // index decoder inside that term by evaluating it from a snapshot.
            let snapshot = m.clone();
            let numeric = finite_difference(
                &mut m,
                |m| m.params_mut(),
                |mm| {
                    let mut g = Graph::new();
                    let b = mm.bind(&mut g);
                    let frozen = snapshot.bind(&mut g);
                    let mut total = 0.0;
                    let mut z_mean = [0.0; 3];
                    let parts = [1usize, 2, 0];
                    let idx = [0usize, 2, 3];
                    for k in 0..3 {
                        let p = parts[k];
                        let rows_k = g.constant(offs[k].rows().clone());
                        let rows_p = g.constant(offs[p].rows().clone());
                        let zk = b.encoder.encode(&mut g, rows_k);
                        let zp = b.encoder.encode(&mut g, rows_p);
                        let (s, a, _, _) = split_context(&mut g, &offs[k]);
                        let (sp, ap, _, _) = split_context(&mut g, &offs[p]);
                        let s_all = g.concat_rows(&[s, sp]);
                        let a_all = g.concat_rows(&[a, ap]);
                        let dv = bisim_target(&mut g, &frozen, idx[k], idx[p], s_all, a_all, coef.eta);
                        let d = g.scalar(dv);
                        for (acc, z) in z_mean.iter_mut().zip(g.value(zk).data()) {
                            *acc += z / 3.0;
                        }
                        let diff: Vec<f64> = g.value(zk).data().iter().zip(g.value(zp).data()).map(|(x, y)| x - y).collect();
                        let dist = match norm {
                            LatentNorm::L1 => diff.iter().map(|x| x.abs()).sum::<f64>(),
                            LatentNorm::L2 => diff.iter().map(|x| x * x).sum::<f64>().sqrt(),
                        };
                        total += coef.bisim * (dist - d).powi(2);
                        let one = BisimCoefficients { bisim: 0.0, center: 0.0, ..coef };
                        let tv = g.constant(Matrix::row_vector(targets[k].clone()));
                        let term = [BisimTerm { task_index: idx[k], off: &offs[k], on: &ons[k], off_target: tv }];
                        let rest = loss_bisim::<ChaCha8Rng>(&mut g, &b, &term, &[0], &one, None);
                        total += g.scalar(rest.total);
                    }
                    total / 3.0 + coef.center * z_mean.iter().map(|z| z * z).sum::<f64>()
                },
                1e-6,
            );
            let worst = gradient_mismatch(&analytic, &numeric, 1e-4, 1e-7);
            assert!(worst <= 1.0, "{norm:?}: mismatch ratio {worst}");
        }
    }

    #[test]
    fn reference_distance_vanishes_for_equal_tasks() {
        use crate::envs::{Split, TaskFamily};
        let env = PointEnv::default();
        let t = TaskSpec { family: TaskFamily::PointMass, params: vec![0.3], split: Split::Train };
        let u = TaskSpec { family: TaskFamily::PointMass, params: vec![3.1], split: Split::Train };
        let s = Matrix::from_vec(2, 4, vec![0.0, 0.0, 0.1, 0.0, 1.0, 1.0, -0.2, 0.3]);
        let a = Matrix::from_vec(2, 2, vec![1.0, 0.0, -0.5, 0.5]);
        assert_eq!(reference_bisim_distance(&env, &t, &t.clone(), &s, &a, 0.1), 0.0);
        assert!(reference_bisim_distance(&env, &t, &u, &s, &a, 0.1) > 0.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(48))]

        #[test]
        fn encoding_is_exactly_permutation_invariant(seed in 0u64..10_000, n in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = Encoder::new(dims(), &[16, 16], 5, Activation::Relu, &mut rng);
            let ctx = random_context(n, ContextSource::Off, &mut rng);
            let z = enc.encode(&ctx).unwrap();
            let mut perm: Vec<usize> = (0..ctx.len()).collect();
            perm.shuffle(&mut rng);
            let shuffled = Context::new(ctx.batch.permuted(&perm), ContextSource::Off);
            proptest::prop_assert_eq!(enc.encode(&shuffled).unwrap().z, z.z);
        }

        #[test]
        fn bisim_distance_is_a_metric_on_a_shared_batch(seed in 0u64..10_000, rows in 1usize..40, eta in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = TaskModel::new(dims(), 3, 6, &[8], &[12, 12], Activation::Relu, &mut rng);
            let s = Matrix::from_vec(rows, 4, (0..rows * 4).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let a = Matrix::from_vec(rows, 2, (0..rows * 2).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let d: Vec<Vec<f64>> =
                (0..6).map(|i| (0..6).map(|j| m.bisim_distance(i, j, &s, &a, eta).unwrap()).collect()).collect();
            for i in 0..6 {
                proptest::prop_assert_eq!(d[i][i], 0.0);
                for j in 0..6 {
                    proptest::prop_assert_eq!(d[i][j], d[j][i]);
                    proptest::prop_assert!(d[i][j] >= 0.0);
                    for k in 0..6 {
                        proptest::prop_assert!(d[i][k] <= d[i][j] + d[j][k] + 1e-9);
                    }
                }
            }
        }

        #[test]
        fn centring_term_is_the_squared_mean_latent(seed in 0u64..10_000, center in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, offs, ons, targets) = bisim_fixture(&mut rng);
            let coef = BisimCoefficients { bisim: 0.0, recon: 0.0, on_off: 0.0, center, eta: 0.1, norm: LatentNorm::L1 };
            let (_, loss, _) = bisim_value(&m, &offs, &ons, &targets, &coef);
            let zs: Vec<Vec<f64>> = offs.iter().map(|c| m.encoder.encode(c).unwrap().z).collect();
            let mean: Vec<f64> = (0..3).map(|d| zs.iter().map(|z| z[d]).sum::<f64>() / 3.0).collect();
            let expect = center * mean.iter().map(|x| x * x).sum::<f64>();
            proptest::prop_assert!((loss.center - expect).abs() <= 1e-12 * (1.0 + expect));
        }
    }
}
