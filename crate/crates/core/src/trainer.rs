//! Meta-training and meta-testing loops, checkpoints, and the ablation suite.
//!
//! Every epoch runs collection, then `k_model` model steps, then `k_rl` RL
//! steps. Each phase draws from its own random stream derived from
//! `(seed, epoch, phase)`, so a run resumed from a checkpoint continues
//! exactly as an uninterrupted one.
//!
//! A model step performs `disc_steps` critic updates followed by one update of
//! the encoder and both decoders on the sum of the bisimulation objective and
//! the generator objective.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffers::{Context, ContextSource, Dims, TaskBuffers, TransitionBatch, Which};
use crate::config::TrainConfig;
use crate::envs::{sample_tasks, test_set_size, EnvConfig, PointEnv, Split, TaskSpec, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::metrics::{context_difference, ContextDifference, LatentRecord, MetricRecord};
use crate::nn::{Activation, Adam, Dropout, Graph, Matrix, Var};
use crate::representation::{encode_off_avg, loss_bisim, BisimCoefficients, BisimTerm, LatentCode, LatentKind, TaskModel};
use crate::rl::{explore_rollout, q_estimation_bias, rollout, ActMode, RlBatch, Sac, SacCoefficients};
use crate::virtual_tasks::{
    draw_donor_context, generate_virtual_context, loss_disc, loss_gen, mix_latents, sample_mix, Discriminator,
    GenTerm, VirtualTask,
};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
enum Stream {
    Init = 0,
    Collect = 1,
    Model = 2,
    Rl = 3,
    Eval = 4,
    Track = 5,
}

fn stream_rng(seed: u64, epoch: usize, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 8) | stream as u64);
    rng
}

/// Phases recorded in the call trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Collect,
    ModelUpdate,
    RlUpdate,
    Explore { task: usize },
    Evaluate { task: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub disc_updates: u64,
    pub gen_updates: u64,
    pub model_updates: u64,
    pub rl_updates: u64,
    pub virtual_tasks_built: u64,
    pub episodes: u64,
}

/// Everything a run needs to continue: parameters, optimisers, buffers and
/// bookkeeping.
#[derive(Clone, Debug)]
pub struct RunState {
    pub config: TrainConfig,
    pub epoch: usize,
    pub env: PointEnv,
    pub train_tasks: Vec<TaskSpec>,
    pub test_tasks: Vec<TaskSpec>,
    pub model: TaskModel,
    pub model_opt: Adam,
    pub disc: Discriminator,
    pub disc_opt: Adam,
    pub sac: Sac,
    pub buffers: Vec<TaskBuffers>,
    pub counters: Counters,
    /// z_on of the tracked training tasks after the previous epoch.
    pub tracked_z_on: Option<Vec<Vec<f64>>>,
    /// Phases of the most recent epoch or meta-test call.
    pub trace: Vec<Phase>,
}

#[derive(Clone, Debug, Default)]
struct Accum {
    sums: std::collections::BTreeMap<&'static str, (f64, usize)>,
}

impl Accum {
    fn add(&mut self, key: &'static str, v: f64) {
        let e = self.sums.entry(key).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }

    fn mean(&self, key: &str) -> f64 {
        match self.sums.get(key) {
            Some(&(s, n)) if n > 0 => s / n as f64,
            _ => 0.0,
        }
    }
}

/// Result of one test task under the meta-test protocol.
#[derive(Clone, Debug)]
pub struct TaskResult {
    pub task: TaskSpec,
    pub ret: f64,
    pub z_on: LatentCode,
    pub context: Context,
}

#[derive(Clone, Debug)]
pub struct TestReport {
    pub results: Vec<TaskResult>,
    pub mean_return: f64,
}

impl RunState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, usize::MAX >> 8, Stream::Init);
        let dims = Dims::new(STATE_DIM, ACTION_DIM);
        let env = PointEnv::new(EnvConfig { horizon: config.horizon, init_noise: config.init_noise, ..EnvConfig::default() });
        let train_tasks = sample_tasks(config.family, Split::Train, config.n_train, &mut rng);
        let test_tasks = sample_tasks(config.family, Split::Test, test_set_size(config.family), &mut rng);
        let model = TaskModel::new(
            dims,
            config.latent_dim,
            config.n_train,
            &config.encoder_hidden,
            &config.decoder_hidden,
            Activation::Relu,
            &mut rng,
        );
        let model_opt = Adam::new(config.lr_model, &model.params());
        let disc = Discriminator::new(dims, config.latent_dim, &config.disc_hidden, &mut rng);
        let disc_opt = Adam::new(config.lr_disc, &disc.params());
        let sac = Sac::new(dims, config.latent_dim, &config.rl_hidden, config.lr_rl, &mut rng);
        let buffers = (0..config.n_train)
            .map(|i| TaskBuffers::new(i, dims, config.on_buffer_capacity, config.buffer_capacity))
            .collect();
        Ok(Self {
            config,
            epoch: 0,
            env,
            train_tasks,
            test_tasks,
            model,
            model_opt,
            disc,
            disc_opt,
            sac,
            buffers,
            counters: Counters::default(),
            tracked_z_on: None,
            trace: Vec::new(),
        })
    }

    pub fn dims(&self) -> Dims {
        Dims::new(STATE_DIM, ACTION_DIM)
    }

    pub fn total_transitions(&self) -> usize {
        self.buffers.iter().map(|b| b.d_on.len() + b.d_off.len()).sum()
    }

    fn sac_coefficients(&self) -> SacCoefficients {
        let c = &self.config;
        SacCoefficients { lambda_rew: c.lambda_rew, lambda_ent: c.lambda_ent, gamma: c.gamma, tau: c.tau }
    }

    fn zero_latent(&self) -> LatentCode {
        LatentCode::new(vec![0.0; self.config.latent_dim], LatentKind::On)
    }

    /// Training tasks whose on- and off-policy buffers both hold data.
    fn ready_tasks(&self) -> Vec<usize> {
        self.buffers.iter().filter(|b| !b.d_on.is_empty() && !b.d_off.is_empty()).map(|b| b.task_index).collect()
    }

    fn z_on(&self, task: usize, rng: &mut ChaCha8Rng) -> Result<LatentCode> {
        let ctx = self.buffers[task].sample_context(Which::On, self.config.n_c, rng)?;
        self.model.encoder.encode(&ctx)
    }

    /// On-policy latents of every training task that has on-policy data.
    fn z_on_pool(&self, rng: &mut ChaCha8Rng) -> Result<Vec<LatentCode>> {
        let mut pool = Vec::new();
        for b in &self.buffers {
            if !b.d_on.is_empty() {
                pool.push(self.z_on(b.task_index, rng)?);
            }
        }
        if pool.is_empty() {
            pool.push(self.zero_latent());
        }
        Ok(pool)
    }

    fn meta_batch(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let ready = self.ready_tasks();
        let k = self.config.n_meta.min(ready.len());
        ready.choose_multiple(rng, k).copied().collect()
    }

    fn collect(&mut self, rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
        self.trace.push(Phase::Collect);
        let c = self.config.clone();
        let pool = self.z_on_pool(rng)?;
        let mut order: Vec<usize> = (0..c.n_train).collect();
        order.shuffle(rng);
        for &i in &order[..c.n_meta] {
            let task = self.train_tasks[i].clone();
            // z_on should only see this phase's exploration
            self.buffers[i].buffer_mut(Which::On).clear();
            for _ in 0..c.n_exp {
                let t = explore_rollout(&self.sac.actor, &self.env, &task, &pool, c.h_freq, c.beta, c.m, rng)?;
                self.buffers[i].store(Which::On, &t.transitions)?;
                self.counters.episodes += 1;
            }
            let z = if self.buffers[i].d_on.is_empty() { self.zero_latent() } else { self.z_on(i, rng)? };
            for _ in 0..c.n_rl {
                let t = rollout(&self.sac.actor, &self.env, &task, &z, ActMode::Sample, rng)?;
                acc.add("train_return", t.undiscounted_return());
                self.buffers[i].store(Which::Off, &t.transitions)?;
                self.counters.episodes += 1;
            }
        }
        Ok(())
    }

    fn model_step(&mut self, rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
        let c = self.config.clone();
        let sw = c.switches();
        let meta = self.meta_batch(rng);
        if meta.is_empty() {
            return Ok(());
        }
        self.trace.push(Phase::ModelUpdate);
        let mut offs = Vec::with_capacity(meta.len());
        let mut ons = Vec::with_capacity(meta.len());
        for &i in &meta {
            offs.push(self.buffers[i].sample_context(Which::Off, c.n_c, rng)?);
            ons.push(self.buffers[i].sample_context(Which::On, c.n_c, rng)?);
        }
        let targets: Vec<LatentCode> = if sw.lambda_on_off > 0.0 {
            meta.iter().map(|&i| encode_off_avg(&self.model.encoder, &self.buffers[i], c.n_avg, c.n_c, rng)).collect::<Result<_>>()?
        } else {
            vec![self.zero_latent(); meta.len()]
        };
        let mut partners: Vec<usize> = (0..meta.len()).collect();
        partners.shuffle(rng);

        // Virtual tasks and critic updates.
        let mut vts: Vec<(LatentCode, Context)> = Vec::new();
        if sw.adversarial {
            let z_off: Vec<LatentCode> = offs.iter().map(|o| self.model.encoder.encode(o)).collect::<Result<_>>()?;
            let bufs: Vec<&TaskBuffers> = meta.iter().map(|&i| &self.buffers[i]).collect();
            for _ in 0..c.n_vt {
                let mix = sample_mix(meta.len(), c.m, c.beta, rng)?;
                let chosen: Vec<&LatentCode> = mix.source_tasks.iter().map(|&k| &z_off[k]).collect();
                let z = mix_latents(&chosen, &mix.alpha)?;
                let donor = draw_donor_context(&mix, &bufs, c.n_c, rng)?;
                vts.push((z, donor));
                self.counters.virtual_tasks_built += 1;
            }
            let real_parts: Vec<Matrix> =
                offs.iter().zip(&z_off).map(|(o, z)| Matrix::hcat(&[o.rows(), &z.as_row().repeat_row(o.len())])).collect();
            let mut fake_parts = Vec::with_capacity(vts.len());
            for (z, donor) in &vts {
                let ctx = generate_virtual_context(&self.model.decoder, z, donor, 1.0)?;
                fake_parts.push(Matrix::hcat(&[ctx.rows(), &z.as_row().repeat_row(ctx.len())]));
            }
            let real = Matrix::vcat(&real_parts.iter().collect::<Vec<_>>());
            let fake = Matrix::vcat(&fake_parts.iter().collect::<Vec<_>>());
            for _ in 0..c.disc_steps {
                let mut g = Graph::new();
                let critic = self.disc.bind(&mut g);
                let r = g.constant(real.clone());
                let f = g.constant(fake.clone());
                let l = loss_disc(&mut g, &critic, r, f, c.lambda_wgan, c.lambda_gp, rng);
                let value = g.scalar(l.total);
                self.check_finite("discriminator loss", value)?;
                let grads = g.backward(l.total).collect(&critic.vars());
                self.disc_opt.step(self.disc.params_mut(), &grads);
                self.counters.disc_updates += 1;
                acc.add("loss_disc_wgan", l.wgan);
                acc.add("loss_disc_gp", l.gp);
            }
        }

        // Encoder and decoders.
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let target_vars: Vec<Var> = targets.iter().map(|t| g.constant(t.as_row())).collect();
        let terms: Vec<BisimTerm> = meta
            .iter()
            .enumerate()
            .map(|(k, &i)| BisimTerm { task_index: i, off: &offs[k], on: &ons[k], off_target: target_vars[k] })
            .collect();
        let coef = BisimCoefficients {
            bisim: sw.lambda_bisim,
            recon: c.lambda_recon,
            on_off: sw.lambda_on_off,
            center: c.lambda_center,
            eta: c.eta,
            norm: c.latent_norm,
        };
        let mut drop_rng = rng.clone();
        let dropout = (sw.decoder_dropout > 0.0).then_some(Dropout { rate: sw.decoder_dropout, rng: &mut drop_rng });
        let bl = loss_bisim(&mut g, &bound, &terms, &partners, &coef, dropout);
        acc.add("loss_bisim", bl.bisim);
        acc.add("loss_recon_idx", bl.recon_idx);
        acc.add("loss_recon", bl.recon);
        acc.add("loss_on_off", bl.on_off);
        acc.add("loss_center", bl.center);
        let mut total = bl.total;
        if sw.adversarial {
            let critic = self.disc.bind_frozen(&mut g);
            let zs: Vec<Var> = vts.iter().map(|(z, _)| g.constant(z.as_row())).collect();
            let gen_terms: Vec<GenTerm> =
                vts.iter().zip(&zs).map(|((_, donor), &z)| GenTerm { donor, z_alpha_off: z }).collect();
            let gl = loss_gen(&mut g, &bound.encoder, &bound.decoder, &critic, &gen_terms, c.lambda_wgan, c.lambda_tp, 1.0);
            self.counters.gen_updates += 1;
            acc.add("loss_gen_wgan", gl.wgan);
            acc.add("loss_gen_tp", gl.task_preserving);
            for gap in &gl.preserve_gap {
                acc.add("preserve_gap", *gap);
            }
            total = g.add(total, gl.total);
        }
        let value = g.scalar(total);
        self.check_finite("model loss", value)?;
        let grads = g.backward(total).collect(&bound.vars());
        self.model_opt.step(self.model.params_mut(), &grads);
        self.counters.model_updates += 1;
        Ok(())
    }

    fn rl_step(&mut self, rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
        let c = self.config.clone();
        let sw = c.switches();
        let meta = self.meta_batch(rng);
        if meta.is_empty() {
            return Ok(());
        }
        self.trace.push(Phase::RlUpdate);
        let mut real = Vec::with_capacity(meta.len());
        let mut z_on = Vec::with_capacity(meta.len());
        for &i in &meta {
            let z = self.z_on(i, rng)?;
            let batch = self.buffers[i].sample_rl_batch(c.rl_batch, rng)?;
            real.push(RlBatch::new(batch, &z, rng));
            z_on.push(z);
        }
        let mut virt = Vec::new();
        if sw.virtual_tasks {
            let mut z_off = Vec::with_capacity(meta.len());
            for &i in &meta {
                let ctx = self.buffers[i].sample_context(Which::Off, c.n_c, rng)?;
                z_off.push(self.model.encoder.encode(&ctx)?);
            }
            let bufs: Vec<&TaskBuffers> = meta.iter().map(|&i| &self.buffers[i]).collect();
            let eps = c.effective_eps_reg();
            for _ in 0..c.n_vt {
                let mix = sample_mix(meta.len(), c.m, c.beta, rng)?;
                let donor = draw_donor_context(&mix, &bufs, c.rl_batch, rng)?;
                let vt = VirtualTask::build(mix, &z_off, &z_on)?;
                let ctx = generate_virtual_context(&self.model.decoder, &vt.z_alpha_off, &donor, eps)?;
                virt.push(RlBatch::new(ctx.batch, &vt.z_alpha_on, rng));
            }
        }
        let losses = self.sac.update(&real, &virt, sw.lambda_vt, &self.sac_coefficients());
        self.check_finite("critic loss", losses.critic)?;
        self.check_finite("actor loss", losses.actor)?;
        acc.add("loss_critic", losses.critic);
        acc.add("loss_actor", losses.actor);
        self.counters.rl_updates += 1;
        Ok(())
    }

    fn check_finite(&self, what: &str, v: f64) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { what: what.to_string(), epoch: self.epoch })
        }
    }

    /// Meta-test protocol on `tasks`: `n_exp` exploration episodes with mixed
    /// training latents, inference of `z_on` from everything they collected,
    /// then one deterministic evaluation episode.
    pub fn meta_test(&mut self, tasks: &[TaskSpec], rng: &mut ChaCha8Rng) -> Result<TestReport> {
        if tasks.is_empty() {
            return Err(Error::Config("empty test task set".into()));
        }
        self.trace.clear();
        let c = self.config.clone();
        let pool = self.z_on_pool(rng)?;
        let mut results = Vec::with_capacity(tasks.len());
        for (k, task) in tasks.iter().enumerate() {
            self.trace.push(Phase::Explore { task: k });
            let mut transitions = Vec::new();
            for _ in 0..c.n_exp {
                transitions.extend(explore_rollout(&self.sac.actor, &self.env, task, &pool, c.h_freq, c.beta, c.m, rng)?.transitions);
            }
            let context = Context::new(TransitionBatch::from_transitions(self.dims(), &transitions), ContextSource::On);
            let z_on = if context.is_empty() { self.zero_latent() } else { self.model.encoder.encode(&context)? };
            self.trace.push(Phase::Evaluate { task: k });
            let ret = rollout(&self.sac.actor, &self.env, task, &z_on, ActMode::Mean, rng)?.undiscounted_return();
            results.push(TaskResult { task: task.clone(), ret, z_on, context });
        }
        let mean_return = results.iter().map(|r| r.ret).sum::<f64>() / results.len() as f64;
        Ok(TestReport { results, mean_return })
    }

    /// Q-estimation bias of the trained critic on the tasks of a report.
    pub fn q_bias(&self, report: &TestReport, rng: &mut ChaCha8Rng) -> Result<f64> {
        let pairs: Vec<(TaskSpec, LatentCode)> = report.results.iter().map(|r| (r.task.clone(), r.z_on.clone())).collect();
        let critic = &self.sac.critic;
        q_estimation_bias(
            |s, a, z| critic.q_min(s, a, z),
            &self.sac.actor,
            &self.env,
            &pairs,
            1,
            self.config.lambda_rew,
            self.config.gamma,
            rng,
        )
    }

    fn tracked_latents(&self, rng: &mut ChaCha8Rng) -> Result<Option<Vec<Vec<f64>>>> {
        let k = self.config.tracked_tasks.min(self.config.n_train);
        if k == 0 || (0..k).any(|i| self.buffers[i].d_on.is_empty()) {
            return Ok(None);
        }
        (0..k).map(|i| Ok(self.z_on(i, rng)?.z)).collect::<Result<Vec<_>>>().map(Some)
    }

    /// Held-out evaluation of the current parameters: `(report, q_bias)`.
    pub fn evaluate(&mut self, epoch_tag: usize) -> Result<(TestReport, f64)> {
        let mut rng = stream_rng(self.config.seed, epoch_tag, Stream::Eval);
        let tasks = self.test_tasks.clone();
        let report = self.meta_test(&tasks, &mut rng)?;
        let bias = self.q_bias(&report, &mut rng)?;
        Ok((report, bias))
    }

    /// z_on of every training task (from its on-policy buffer, or zero when
    /// it has none) computed with a fixed random stream.
    pub fn export_latents(&self) -> Result<Vec<LatentRecord>> {
        let mut rng = stream_rng(self.config.seed, 0, Stream::Track);
        let mut out = Vec::with_capacity(self.train_tasks.len());
        for (i, task) in self.train_tasks.iter().enumerate() {
            let z = if self.buffers[i].d_on.is_empty() { self.zero_latent() } else { self.z_on(i, &mut rng)? };
            out.push(LatentRecord { task: task.clone(), z });
        }
        Ok(out)
    }
}

/// One full epoch: collection, model updates, RL updates, evaluation.
pub fn meta_train_epoch(state: &mut RunState) -> Result<MetricRecord> {
    let c = state.config.clone();
    let epoch = state.epoch;
    state.trace.clear();
    let mut acc = Accum::default();

    let mut rng = stream_rng(c.seed, epoch, Stream::Collect);
    state.collect(&mut rng, &mut acc)?;

    let mut rng = stream_rng(c.seed, epoch, Stream::Model);
    for _ in 0..c.k_model {
        state.model_step(&mut rng, &mut acc)?;
    }

    let mut rng = stream_rng(c.seed, epoch, Stream::Rl);
    for _ in 0..c.k_rl {
        state.rl_step(&mut rng, &mut acc)?;
    }

    let mut record = MetricRecord::new(epoch, c.seed, &c.hash());
    for key in [
        "loss_bisim",
        "loss_recon_idx",
        "loss_recon",
        "loss_on_off",
        "loss_disc_wgan",
        "loss_disc_gp",
        "loss_gen_wgan",
        "loss_gen_tp",
        "preserve_gap",
        "loss_critic",
        "loss_actor",
        "train_return",
    ] {
        record.set(key, acc.mean(key));
    }
    record.set("transitions", state.total_transitions() as f64);
    record.set("disc_updates", state.counters.disc_updates as f64);
    record.set("gen_updates", state.counters.gen_updates as f64);

    let mut rng = stream_rng(c.seed, epoch, Stream::Track);
    let tracked = state.tracked_latents(&mut rng)?;
    let displacement = match (&state.tracked_z_on, &tracked) {
        (Some(prev), Some(now)) => {
            let d: f64 = prev
                .iter()
                .zip(now)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .sum();
            d / now.len() as f64
        }
        _ => f64::NAN,
    };
    record.set("z_on_displacement", displacement);
    state.tracked_z_on = tracked;

    let train_trace = std::mem::take(&mut state.trace);
    if c.eval_every > 0 && (epoch + 1).is_multiple_of(c.eval_every) {
        let (report, bias) = state.evaluate(epoch)?;
        record.set("ood_return", report.mean_return);
        record.set("q_bias", bias);
        let contexts: Vec<Context> = report.results.iter().map(|r| r.context.clone()).collect();
        let cd = context_difference(&state.model, &contexts)?;
        record.set("ctx_reward_diff", cd.reward);
        record.set("ctx_state_diff", cd.state);
    } else {
        for key in ["ood_return", "q_bias", "ctx_reward_diff", "ctx_state_diff"] {
            record.set(key, f64::NAN);
        }
    }
    state.trace = train_trace;
    state.epoch += 1;
    Ok(record)
}

#[derive(Serialize, Deserialize)]
struct CheckpointParams {
    version: u32,
    config_hash: String,
    config: TrainConfig,
    epoch: usize,
    train_tasks: Vec<TaskSpec>,
    test_tasks: Vec<TaskSpec>,
    model: TaskModel,
    model_opt: Adam,
    disc: Discriminator,
    disc_opt: Adam,
    sac: Sac,
    counters: Counters,
    tracked_z_on: Option<Vec<Vec<f64>>>,
}

/// Writes `params.json` and `buffers.bin` into `dir`.
pub fn save_checkpoint(state: &RunState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let params = CheckpointParams {
        version: CHECKPOINT_VERSION,
        config_hash: state.config.hash(),
        config: state.config.clone(),
        epoch: state.epoch,
        train_tasks: state.train_tasks.clone(),
        test_tasks: state.test_tasks.clone(),
        model: state.model.clone(),
        model_opt: state.model_opt.clone(),
        disc: state.disc.clone(),
        disc_opt: state.disc_opt.clone(),
        sac: state.sac.clone(),
        counters: state.counters,
        tracked_z_on: state.tracked_z_on.clone(),
    };
    let tmp = dir.join("params.json.tmp");
    serde_json::to_writer(BufWriter::new(std::fs::File::create(&tmp)?), &params)?;
    std::fs::rename(&tmp, dir.join("params.json"))?;
    let tmp = dir.join("buffers.bin.tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(state.buffers.len() as u32)?;
        for b in &state.buffers {
            b.write_to(&mut w)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, dir.join("buffers.bin"))?;
    Ok(())
}

/// Restores a checkpoint. With `expected` set, its hash must match the
/// stored configuration; its epoch count replaces the stored one.
pub fn load_checkpoint(dir: &Path, expected: Option<&TrainConfig>) -> Result<RunState> {
    let mut text = String::new();
    std::fs::File::open(dir.join("params.json"))?.read_to_string(&mut text)?;
    let p: CheckpointParams = serde_json::from_str(&text)?;
    if p.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", p.version)));
    }
    let mut config = p.config;
    if let Some(e) = expected {
        if e.hash() != p.config_hash {
            return Err(Error::Config("checkpoint was written with a different configuration".into()));
        }
        config.epochs = e.epochs;
    }
    let mut r = BufReader::new(std::fs::File::open(dir.join("buffers.bin"))?);
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported buffer archive version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let buffers = (0..n).map(|_| TaskBuffers::read_from(&mut r)).collect::<Result<Vec<_>>>()?;
    if buffers.len() != config.n_train {
        return Err(Error::Format("buffer count does not match the configuration".into()));
    }
    let env = PointEnv::new(EnvConfig { horizon: config.horizon, init_noise: config.init_noise, ..EnvConfig::default() });
    Ok(RunState {
        config,
        epoch: p.epoch,
        env,
        train_tasks: p.train_tasks,
        test_tasks: p.test_tasks,
        model: p.model,
        model_opt: p.model_opt,
        disc: p.disc,
        disc_opt: p.disc_opt,
        sac: p.sac,
        buffers,
        counters: p.counters,
        tracked_z_on: p.tracked_z_on,
        trace: Vec::new(),
    })
}

/// Files of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
}

/// Trains until `state.config.epochs`, appending one metric line per epoch
/// and refreshing the checkpoint after each. Wall-clock seconds go to a
/// separate timing file so metric files stay reproducible.
pub fn train(state: &mut RunState, dir: Option<&RunDir>) -> Result<Vec<MetricRecord>> {
    if let Some(d) = dir {
        std::fs::create_dir_all(&d.root)?;
        std::fs::write(d.config(), state.config.to_toml())?;
    }
    let mut records = Vec::new();
    while state.epoch < state.config.epochs {
        let start = Instant::now();
        let record = match meta_train_epoch(state) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                if let Some(d) = dir {
                    let mut diag = MetricRecord::new(state.epoch, state.config.seed, &state.config.hash());
                    diag.set("aborted", f64::NAN);
                    diag.append_to(&d.metrics())?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some(d) = dir {
            record.append_to(&d.metrics())?;
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(d.timing())?;
            writeln!(f, "{}", serde_json::json!({ "epoch": record.epoch, "seconds": start.elapsed().as_secs_f64() }))?;
            save_checkpoint(state, &d.checkpoint())?;
        }
        records.push(record);
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoVt,
    NoGen,
    NoOnOff,
    ReconOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoVt, Variant::NoGen, Variant::NoOnOff, Variant::ReconOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoVt => "no-vt",
            Variant::NoGen => "no-gen",
            Variant::NoOnOff => "no-on-off",
            Variant::ReconOnly => "recon-only",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = TrainConfig { no_vt: false, no_gen: false, no_onoff: false, recon_only: false, ..base.clone() };
        match self {
            Variant::Full => {}
            Variant::NoVt => c.no_vt = true,
            Variant::NoGen => c.no_gen = true,
            Variant::NoOnOff => c.no_onoff = true,
            Variant::ReconOnly => c.recon_only = true,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub ood_return: f64,
    pub ctx_reward_diff: f64,
    pub ctx_state_diff: f64,
}

/// Held-out evaluation after training, shared by every variant.
#[derive(Clone, Debug)]
pub struct FinalEvaluation {
    pub report: TestReport,
    pub q_bias: f64,
    pub context: ContextDifference,
}

pub fn final_evaluation(state: &mut RunState) -> Result<FinalEvaluation> {
    let (report, q_bias) = state.evaluate(usize::MAX >> 8)?;
    let contexts: Vec<Context> = report.results.iter().map(|r| r.context.clone()).collect();
    let context = context_difference(&state.model, &contexts)?;
    Ok(FinalEvaluation { report, q_bias, context })
}

/// One trained variant: its final state, per-epoch metrics and summary row.
#[derive(Clone, Debug)]
pub struct VariantRun {
    pub state: RunState,
    pub records: Vec<MetricRecord>,
    pub evaluation: FinalEvaluation,
    pub row: AblationRow,
}

pub fn run_variant(base: &TrainConfig, variant: Variant, seed: u64) -> Result<VariantRun> {
    let mut state = RunState::new(TrainConfig { seed, ..variant.apply(base) })?;
    let records = train(&mut state, None)?;
    let evaluation = final_evaluation(&mut state)?;
    let row = AblationRow {
        variant,
        seed,
        ood_return: evaluation.report.mean_return,
        ctx_reward_diff: evaluation.context.reward,
        ctx_state_diff: evaluation.context.state,
    };
    Ok(VariantRun { state, records, evaluation, row })
}

/// Trains every variant for every seed on the same base config and reports the
/// final held-out evaluation of each run.
pub fn run_ablation_suite(base: &TrainConfig, seeds: &[u64], variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &v in variants {
        for &seed in seeds {
            rows.push(run_variant(base, v, seed)?.row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::TaskFamily;

    fn tiny(family: TaskFamily) -> TrainConfig {
        TrainConfig {
            family,
            epochs: 2,
            n_train: 4,
            n_meta: 2,
            n_vt: 2,
            m: 2,
            horizon: 8,
            n_exp: 1,
            n_rl: 1,
            h_freq: 3,
            latent_dim: 2,
            encoder_hidden: vec![8],
            decoder_hidden: vec![8],
            disc_hidden: vec![8],
            rl_hidden: vec![8],
            k_model: 2,
            k_rl: 2,
            n_c: 6,
            n_avg: 2,
            rl_batch: 8,
            buffer_capacity: 200,
            tracked_tasks: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn collection_only_epoch_counts_transitions() {
        let c = TrainConfig { k_model: 0, k_rl: 0, ..tiny(TaskFamily::PointGoal) };
        let mut s = RunState::new(c.clone()).unwrap();
        meta_train_epoch(&mut s).unwrap();
        assert_eq!(s.total_transitions(), c.n_meta * (c.n_exp + c.n_rl) * c.horizon);
        meta_train_epoch(&mut s).unwrap();
        let off: usize = s.buffers.iter().map(|b| b.d_off.len()).sum();
        assert_eq!(off, 2 * c.n_meta * c.n_rl * c.horizon);
        // on-policy data is replaced, not appended
        assert!(s.buffers.iter().all(|b| b.d_on.is_empty() || b.d_on.len() == c.n_exp * c.horizon));
        assert_eq!(s.counters.model_updates + s.counters.rl_updates, 0);
    }

    #[test]
    fn epoch_phases_run_in_order_with_five_to_one_ratio() {
        let mut s = RunState::new(tiny(TaskFamily::PointGoal)).unwrap();
        for _ in 0..2 {
            meta_train_epoch(&mut s).unwrap();
        }
        let t = &s.trace;
        assert_eq!(t[0], Phase::Collect);
        let first_rl = t.iter().position(|p| *p == Phase::RlUpdate).unwrap();
        assert!(t[1..first_rl].iter().all(|p| *p == Phase::ModelUpdate));
        assert!(t[first_rl..].iter().all(|p| *p == Phase::RlUpdate));
        assert_eq!(s.counters.disc_updates, 5 * s.counters.gen_updates);
        assert!(s.counters.gen_updates > 0);
    }

    #[test]
    fn no_vt_never_touches_the_adversarial_losses() {
        let mut s = RunState::new(TrainConfig { no_vt: true, ..tiny(TaskFamily::PointGoal) }).unwrap();
        let recs: Vec<MetricRecord> = (0..2).map(|_| meta_train_epoch(&mut s).unwrap()).collect();
        assert_eq!(s.counters.disc_updates, 0);
        assert_eq!(s.counters.gen_updates, 0);
        assert_eq!(s.counters.virtual_tasks_built, 0);
        for r in &recs {
            assert_eq!(r.get("loss_gen_wgan"), Some(0.0));
            assert_eq!(r.get("loss_disc_gp"), Some(0.0));
        }
    }

    #[test]
    fn variant_flags_zero_the_intended_terms() {
        let base = tiny(TaskFamily::PointGoal);
        let run = |v: Variant| {
            let mut s = RunState::new(v.apply(&base)).unwrap();
            meta_train_epoch(&mut s).unwrap();
            meta_train_epoch(&mut s).unwrap()
        };
        let full = run(Variant::Full);
        assert!(full.get("loss_bisim").unwrap() > 0.0);
        assert!(full.get("loss_on_off").unwrap() > 0.0);
        assert!(full.get("loss_gen_tp").unwrap() > 0.0);
        let r = run(Variant::NoOnOff);
        assert_eq!(r.get("loss_on_off"), Some(0.0));
        assert!(r.get("loss_bisim").unwrap() > 0.0);
        let r = run(Variant::NoGen);
        assert_eq!((r.get("loss_gen_wgan"), r.get("loss_gen_tp"), r.get("loss_disc_wgan")), (Some(0.0), Some(0.0), Some(0.0)));
        let r = run(Variant::ReconOnly);
        assert_eq!((r.get("loss_bisim"), r.get("loss_on_off"), r.get("loss_gen_tp")), (Some(0.0), Some(0.0), Some(0.0)));
        assert!(r.get("loss_recon").unwrap() > 0.0);
    }

    #[test]
    fn same_seed_gives_identical_metrics() {
        let c = tiny(TaskFamily::PointMass);
        let a = train(&mut RunState::new(c.clone()).unwrap(), None).unwrap();
        let b = train(&mut RunState::new(c.clone()).unwrap(), None).unwrap();
        let la: Vec<String> = a.iter().map(|r| r.to_line()).collect();
        let lb: Vec<String> = b.iter().map(|r| r.to_line()).collect();
        assert_eq!(la, lb);
        let other = train(&mut RunState::new(TrainConfig { seed: 1, ..c }).unwrap(), None).unwrap();
        assert_ne!(other[1].to_line(), la[1]);
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let dir = tempfile::tempdir().unwrap();
        let c = TrainConfig { epochs: 3, ..tiny(TaskFamily::PointVel) };
        let mut straight = RunState::new(c.clone()).unwrap();
        let all = train(&mut straight, None).unwrap();

        let mut s = RunState::new(TrainConfig { epochs: 2, ..c.clone() }).unwrap();
        train(&mut s, None).unwrap();
        save_checkpoint(&s, dir.path()).unwrap();
        let mut restored = load_checkpoint(dir.path(), Some(&c)).unwrap();
        assert_eq!(restored.model, s.model);
        assert_eq!(restored.sac, s.sac);
        assert_eq!(restored.disc, s.disc);
        assert_eq!(restored.buffers, s.buffers);
        let rest = train(&mut restored, None).unwrap();
        assert_eq!(rest.len(), 1);
        assert_eq!(rest[0].to_line(), all[2].to_line());

        let other = TrainConfig { beta: 1.5, ..c };
        assert!(matches!(load_checkpoint(dir.path(), Some(&other)), Err(Error::Config(_))));
    }

    #[test]
    fn meta_test_explores_before_each_evaluation() {
        let c = tiny(TaskFamily::PointGoal);
        let mut s = RunState::new(TrainConfig { n_exp: 2, ..c }).unwrap();
        meta_train_epoch(&mut s).unwrap();
        let tasks = s.test_tasks.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = s.meta_test(&tasks, &mut rng).unwrap();
        assert_eq!(report.results.len(), tasks.len());
        let mut expected = Vec::new();
        for k in 0..tasks.len() {
            expected.push(Phase::Explore { task: k });
            expected.push(Phase::Evaluate { task: k });
        }
        assert_eq!(s.trace, expected);
        assert!(report.results.iter().all(|r| r.context.len() == 2 * s.config.horizon));
        let again = s.meta_test(&tasks, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(again.mean_return, report.mean_return);
        assert!(matches!(s.meta_test(&[], &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn still_policy_return_matches_oracle() {
        let mut s = RunState::new(TrainConfig { horizon: 64, ..tiny(TaskFamily::PointGoal) }).unwrap();
        for p in s.sac.actor.params_mut() {
            p.data_mut().fill(0.0);
        }
        let tasks = s.test_tasks.clone();
        let report = s.meta_test(&tasks, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // Zero mean action keeps the robot at the origin for the whole episode.
        let oracle: f64 = tasks
            .iter()
            .map(|t| -(s.env.horizon() as f64) * (t.params[0].abs() + t.params[1].abs()))
            .sum::<f64>()
            / tasks.len() as f64;
        assert!((report.mean_return - oracle).abs() <= 0.1 * oracle.abs());
    }

    #[test]
    fn ablation_suite_without_training_reports_identical_rows() {
        let base = TrainConfig { epochs: 0, ..tiny(TaskFamily::PointGoal) };
        let rows = run_ablation_suite(&base, &[3], &Variant::ALL).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.ood_return == rows[0].ood_return));
    }

    #[test]
    fn run_directory_gets_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::new(dir.path());
        let mut s = RunState::new(tiny(TaskFamily::PointGoal)).unwrap();
        train(&mut s, Some(&rd)).unwrap();
        assert_eq!(crate::metrics::read_metrics(&rd.metrics()).unwrap().len(), 2);
        assert!(rd.checkpoint().join("params.json").exists());
        assert!(rd.checkpoint().join("buffers.bin").exists());
        assert_eq!(std::fs::read_to_string(rd.timing()).unwrap().lines().count(), 2);
    }
}
