//! Per-task replay storage split into on-policy and off-policy buffers, and
//! uniform context sampling.
//!
//! # Binary layout
//!
//! A single buffer serialises as one record (all integers and floats
//! little-endian):
//!
//! | field        | type      |
//! |--------------|-----------|
//! | magic        | `b"MVTB"` |
//! | version      | `u32` = 1 |
//! | state_dim    | `u32`     |
//! | action_dim   | `u32`     |
//! | capacity     | `u64`     |
//! | count        | `u64`     |
//! | transitions  | `count` rows of `f64`: `s, a, r, s', done` (done as 0.0/1.0) |
//!
//! Rows are written oldest first. [`TaskBuffers`] writes a `u32` task index
//! followed by its on-policy record and then its off-policy record.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

const MAGIC: &[u8; 4] = b"MVTB";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub state: usize,
    pub action: usize,
}

impl Dims {
    pub fn new(state: usize, action: usize) -> Self {
        Self { state, action }
    }

    /// Width of an `(s, a, r, s')` row.
    pub fn row_width(&self) -> usize {
        2 * self.state + self.action + 1
    }

    pub fn reward_col(&self) -> usize {
        self.state + self.action
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

impl Transition {
    fn check(&self, dims: Dims) -> Result<()> {
        if self.s.len() != dims.state || self.s_next.len() != dims.state || self.a.len() != dims.action {
            return Err(Error::Input(format!(
                "transition dims ({}, {}, {}) do not match state {} / action {}",
                self.s.len(),
                self.a.len(),
                self.s_next.len(),
                dims.state,
                dims.action
            )));
        }
        let finite = self.s.iter().chain(&self.a).chain(&self.s_next).all(|x| x.is_finite()) && self.r.is_finite();
        if !finite {
            return Err(Error::Input("non-finite transition".into()));
        }
        Ok(())
    }
}

/// Rows laid out as `s | a | r | s'`, plus per-row terminal flags.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub rows: Matrix,
    pub done: Vec<bool>,
    pub dims: Dims,
}

impl TransitionBatch {
    pub fn from_transitions(dims: Dims, ts: &[Transition]) -> Self {
        let mut data = Vec::with_capacity(ts.len() * dims.row_width());
        for t in ts {
            data.extend_from_slice(&t.s);
            data.extend_from_slice(&t.a);
            data.push(t.r);
            data.extend_from_slice(&t.s_next);
        }
        Self { rows: Matrix::from_vec(ts.len(), dims.row_width(), data), done: ts.iter().map(|t| t.done).collect(), dims }
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn states(&self) -> Matrix {
        self.rows.slice_cols(0, self.dims.state)
    }

    pub fn actions(&self) -> Matrix {
        self.rows.slice_cols(self.dims.state, self.dims.state + self.dims.action)
    }

    pub fn rewards(&self) -> Matrix {
        let c = self.dims.reward_col();
        self.rows.slice_cols(c, c + 1)
    }

    pub fn next_states(&self) -> Matrix {
        let c = self.dims.reward_col() + 1;
        self.rows.slice_cols(c, c + self.dims.state)
    }

    pub fn transition(&self, i: usize) -> Transition {
        let row = self.rows.row(i);
        let (s, rest) = row.split_at(self.dims.state);
        let (a, rest) = rest.split_at(self.dims.action);
        Transition { s: s.to_vec(), a: a.to_vec(), r: rest[0], s_next: rest[1..].to_vec(), done: self.done[i] }
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.len()).map(|i| self.transition(i))
    }

    /// Rows reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { rows: self.rows.select_rows(perm), done: perm.iter().map(|&i| self.done[i]).collect(), dims: self.dims }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextSource {
    On,
    Off,
    Virtual,
}

/// A fixed-size batch of transitions from one (real or virtual) task.
#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub batch: TransitionBatch,
    pub source: ContextSource,
}

impl Context {
    pub fn new(batch: TransitionBatch, source: ContextSource) -> Self {
        Self { batch, source }
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn rows(&self) -> &Matrix {
        &self.batch.rows
    }

    pub fn dims(&self) -> Dims {
        self.batch.dims
    }
}

/// Bounded FIFO of transitions stored as flat rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    dims: Dims,
    capacity: usize,
    // ring storage, each row is s|a|r|s'|done
    storage: Vec<f64>,
    start: usize,
    len: usize,
}

impl ReplayBuffer {
    pub fn new(dims: Dims, capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self { dims, capacity, storage: Vec::new(), start: 0, len: 0 }
    }

    fn width(&self) -> usize {
        self.dims.row_width() + 1
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.storage.clear();
        self.start = 0;
        self.len = 0;
    }

    fn slot(&self, i: usize) -> usize {
        (self.start + i) % self.capacity
    }

    fn raw_row(&self, i: usize) -> &[f64] {
        let w = self.width();
        let s = self.slot(i);
        &self.storage[s * w..(s + 1) * w]
    }

    fn push_row(&mut self, row: &[f64]) {
        let w = self.width();
        if self.len < self.capacity {
            let slot = self.slot(self.len);
            if (slot + 1) * w > self.storage.len() {
                self.storage.extend_from_slice(row);
            } else {
                self.storage[slot * w..(slot + 1) * w].copy_from_slice(row);
            }
            self.len += 1;
        } else {
            let slot = self.start;
            self.storage[slot * w..(slot + 1) * w].copy_from_slice(row);
            self.start = (self.start + 1) % self.capacity;
        }
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        t.check(self.dims)?;
        let mut row = Vec::with_capacity(self.width());
        row.extend_from_slice(&t.s);
        row.extend_from_slice(&t.a);
        row.push(t.r);
        row.extend_from_slice(&t.s_next);
        row.push(if t.done { 1.0 } else { 0.0 });
        self.push_row(&row);
        Ok(())
    }

    /// Appends every transition, evicting the oldest at capacity. Validation
    /// happens up front so a bad batch leaves the buffer untouched.
    pub fn extend(&mut self, ts: &[Transition]) -> Result<()> {
        for t in ts {
            t.check(self.dims)?;
        }
        for t in ts {
            self.push(t)?;
        }
        Ok(())
    }

    /// The `i`-th oldest retained transition.
    pub fn get(&self, i: usize) -> Transition {
        assert!(i < self.len, "buffer index out of range");
        let row = self.raw_row(i);
        let d = self.dims;
        Transition {
            s: row[..d.state].to_vec(),
            a: row[d.state..d.state + d.action].to_vec(),
            r: row[d.reward_col()],
            s_next: row[d.reward_col() + 1..d.row_width()].to_vec(),
            done: row[d.row_width()] != 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    /// `n` rows drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<TransitionBatch> {
        if self.len == 0 {
            return Err(Error::Unavailable("cannot sample from an empty buffer".into()));
        }
        let w = self.dims.row_width();
        let mut data = Vec::with_capacity(n * w);
        let mut done = Vec::with_capacity(n);
        for _ in 0..n {
            let row = self.raw_row(rng.gen_range(0..self.len));
            data.extend_from_slice(&row[..w]);
            done.push(row[w] != 0.0);
        }
        Ok(TransitionBatch { rows: Matrix::from_vec(n, w, data), done, dims: self.dims })
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u32::<LittleEndian>(self.dims.state as u32)?;
        out.write_u32::<LittleEndian>(self.dims.action as u32)?;
        out.write_u64::<LittleEndian>(self.capacity as u64)?;
        out.write_u64::<LittleEndian>(self.len as u64)?;
        for i in 0..self.len {
            for &x in self.raw_row(i) {
                out.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad buffer magic".into()));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported buffer version {version}")));
        }
        let state = input.read_u32::<LittleEndian>()? as usize;
        let action = input.read_u32::<LittleEndian>()? as usize;
        let capacity = input.read_u64::<LittleEndian>()? as usize;
        let count = input.read_u64::<LittleEndian>()? as usize;
        if capacity == 0 || count > capacity {
            return Err(Error::Format(format!("count {count} exceeds capacity {capacity}")));
        }
        let mut buf = Self::new(Dims::new(state, action), capacity);
        let w = buf.width();
        let mut row = vec![0.0; w];
        for _ in 0..count {
            for x in row.iter_mut() {
                *x = input.read_f64::<LittleEndian>()?;
            }
            buf.push_row(&row);
        }
        Ok(buf)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    On,
    Off,
}

/// The on-policy and off-policy buffers of one training task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBuffers {
    pub task_index: usize,
    pub d_on: ReplayBuffer,
    pub d_off: ReplayBuffer,
}

impl TaskBuffers {
    pub fn new(task_index: usize, dims: Dims, on_capacity: usize, off_capacity: usize) -> Self {
        Self { task_index, d_on: ReplayBuffer::new(dims, on_capacity), d_off: ReplayBuffer::new(dims, off_capacity) }
    }

    pub fn buffer(&self, which: Which) -> &ReplayBuffer {
        match which {
            Which::On => &self.d_on,
            Which::Off => &self.d_off,
        }
    }

    pub fn buffer_mut(&mut self, which: Which) -> &mut ReplayBuffer {
        match which {
            Which::On => &mut self.d_on,
            Which::Off => &mut self.d_off,
        }
    }

    pub fn store(&mut self, which: Which, ts: &[Transition]) -> Result<()> {
        self.buffer_mut(which).extend(ts)
    }

    pub fn sample_context(&self, which: Which, n_c: usize, rng: &mut impl Rng) -> Result<Context> {
        let source = match which {
            Which::On => ContextSource::On,
            Which::Off => ContextSource::Off,
        };
        Ok(Context::new(self.buffer(which).sample(n_c, rng)?, source))
    }

    pub fn sample_rl_batch(&self, batch_size: usize, rng: &mut impl Rng) -> Result<TransitionBatch> {
        self.d_off.sample(batch_size, rng)
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_u32::<LittleEndian>(self.task_index as u32)?;
        self.d_on.write_to(out)?;
        self.d_off.write_to(out)
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let task_index = input.read_u32::<LittleEndian>()? as usize;
        let d_on = ReplayBuffer::read_from(input)?;
        let d_off = ReplayBuffer::read_from(input)?;
        Ok(Self { task_index, d_on, d_off })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> Dims {
        Dims::new(2, 1)
    }

    fn tr(k: f64) -> Transition {
        Transition { s: vec![k, -k], a: vec![0.5 * k], r: -k, s_next: vec![k + 1.0, 2.0 * k], done: k as i64 % 3 == 0 }
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let mut b = TaskBuffers::new(0, dims(), 8, 8);
        let ts: Vec<_> = (0..10).map(|k| tr(k as f64)).collect();
        b.store(Which::On, &ts).unwrap();
        assert_eq!(b.d_on.len(), 8);
        let kept: Vec<Transition> = b.d_on.iter().collect();
        assert_eq!(kept, ts[2..].to_vec());
    }

    #[test]
    fn storing_nothing_is_a_no_op() {
        let mut b = TaskBuffers::new(0, dims(), 8, 8);
        b.store(Which::Off, &[]).unwrap();
        assert!(b.d_off.is_empty());
    }

    #[test]
    fn dimension_mismatch_is_rejected_without_partial_writes() {
        let mut b = TaskBuffers::new(0, dims(), 8, 8);
        let bad = Transition { s: vec![0.0], ..tr(1.0) };
        assert!(matches!(b.store(Which::Off, &[tr(0.0), bad]), Err(Error::Input(_))));
        assert!(b.d_off.is_empty());
    }

    #[test]
    fn single_transition_context_repeats_it() {
        let mut b = TaskBuffers::new(0, dims(), 8, 8);
        b.store(Which::Off, &[tr(4.0)]).unwrap();
        let c = b.sample_context(Which::Off, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.source, ContextSource::Off);
        assert!(c.batch.transitions().all(|t| t == tr(4.0)));
    }

    #[test]
    fn sampling_is_seeded_and_members_come_from_the_buffer() {
        let mut b = TaskBuffers::new(3, dims(), 2000, 2000);
        let ts: Vec<_> = (0..1000).map(|k| tr(k as f64 * 0.01)).collect();
        b.store(Which::Off, &ts).unwrap();
        let c1 = b.sample_context(Which::Off, 128, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let c2 = b.sample_context(Which::Off, 128, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(c1, c2);
        assert!(c1.batch.transitions().all(|t| ts.contains(&t)));
        let rl = b.sample_rl_batch(64, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(rl.len(), 64);
        assert!(rl.transitions().all(|t| ts.contains(&t)));
    }

    #[test]
    fn empty_buffer_is_unavailable() {
        let b = TaskBuffers::new(0, dims(), 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample_context(Which::On, 4, &mut rng), Err(Error::Unavailable(_))));
        assert!(matches!(b.sample_rl_batch(4, &mut rng), Err(Error::Unavailable(_))));
    }

    #[test]
    fn sampling_does_not_mutate() {
        let mut b = TaskBuffers::new(0, dims(), 16, 16);
        b.store(Which::Off, &(0..12).map(|k| tr(k as f64)).collect::<Vec<_>>()).unwrap();
        let before = b.clone();
        let _ = b.sample_context(Which::Off, 50, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b, before);
    }

    #[test]
    fn binary_record_round_trips() {
        let mut b = TaskBuffers::new(5, dims(), 6, 4);
        b.store(Which::On, &(0..9).map(|k| tr(k as f64 * 0.3)).collect::<Vec<_>>()).unwrap();
        b.store(Which::Off, &(0..3).map(|k| tr(k as f64 * 1.7)).collect::<Vec<_>>()).unwrap();
        let mut bytes = Vec::new();
        b.write_to(&mut bytes).unwrap();
        // header + rows: 4 + 4*3 + 8*2 per buffer, 4 for task index
        let row_bytes = 8 * (dims().row_width() + 1);
        assert_eq!(bytes.len(), 4 + 2 * (4 + 12 + 16) + (6 + 3) * row_bytes);
        let back = TaskBuffers::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.task_index, 5);
        assert_eq!(back.d_on.iter().collect::<Vec<_>>(), b.d_on.iter().collect::<Vec<_>>());
        assert_eq!(back.d_off.iter().collect::<Vec<_>>(), b.d_off.iter().collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn interleaved_store_and_sample_keep_the_last_capacity_transitions(
            chunks in proptest::collection::vec(0usize..7, 1..12),
            cap in 1usize..10,
        ) {
            let mut b = TaskBuffers::new(0, dims(), cap, cap);
            let mut all = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut k = 0.0;
            for n in chunks {
                let ts: Vec<_> = (0..n).map(|_| { k += 1.0; tr(k * 0.137) }).collect();
                b.store(Which::On, &ts).unwrap();
                all.extend(ts);
                if !b.d_on.is_empty() {
                    let c = b.sample_context(Which::On, 3, &mut rng).unwrap();
                    let kept: Vec<_> = b.d_on.iter().collect();
                    prop_assert!(c.batch.transitions().all(|t| kept.contains(&t)));
                }
            }
            let expect: Vec<_> = all[all.len().saturating_sub(cap)..].to_vec();
            prop_assert_eq!(b.d_on.iter().collect::<Vec<_>>(), expect);
        }

        #[test]
        fn binary_record_round_trips_any_contents(
            on in proptest::collection::vec(-1e6f64..1e6, 0..20),
            off in proptest::collection::vec(-1e6f64..1e6, 0..20),
            cap_on in 1usize..8,
            cap_off in 1usize..8,
            index in 0usize..1000,
        ) {
            let mut b = TaskBuffers::new(index, dims(), cap_on, cap_off);
            b.store(Which::On, &on.iter().map(|&k| tr(k)).collect::<Vec<_>>()).unwrap();
            b.store(Which::Off, &off.iter().map(|&k| tr(k)).collect::<Vec<_>>()).unwrap();
            let mut bytes = Vec::new();
            b.write_to(&mut bytes).unwrap();
            let back = TaskBuffers::read_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back.task_index, index);
            prop_assert_eq!(back.d_on.iter().collect::<Vec<_>>(), b.d_on.iter().collect::<Vec<_>>());
            prop_assert_eq!(back.d_off.iter().collect::<Vec<_>>(), b.d_off.iter().collect::<Vec<_>>());
        }
    }
}
