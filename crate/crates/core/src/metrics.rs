//! Per-epoch metric records and evaluation diagnostics.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::buffers::Context;
use crate::envs::TaskSpec;
use crate::error::{Error, Result};
use crate::representation::{LatentCode, TaskModel};

/// One line of a metrics file. Non-finite values are stored as `null` and
/// their keys listed in `flagged`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub scalars: BTreeMap<String, Option<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flagged: Vec<String>,
}

impl MetricRecord {
    pub fn new(epoch: usize, seed: u64, config_hash: &str) -> Self {
        Self { epoch, seed, config_hash: config_hash.to_string(), scalars: BTreeMap::new(), flagged: Vec::new() }
    }

    pub fn set(&mut self, key: &str, value: f64) {
        if value.is_finite() {
            self.scalars.insert(key.to_string(), Some(value));
            self.flagged.retain(|k| k != key);
        } else {
            self.scalars.insert(key.to_string(), None);
            if !self.flagged.iter().any(|k| k == key) {
                self.flagged.push(key.to_string());
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.scalars.get(key).copied().flatten()
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }

    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", self.to_line())?;
        f.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub key: String,
    pub last: Option<f64>,
    pub mean_last_quarter: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

/// Per-key summary over a run: last value, mean over the final quarter of
/// epochs, and extremes. Missing values are skipped.
pub fn summarize(records: &[MetricRecord]) -> Vec<MetricSummary> {
    let mut keys: Vec<&String> = records.iter().flat_map(|r| r.scalars.keys()).collect();
    keys.sort();
    keys.dedup();
    let tail_start = records.len() - records.len().div_ceil(4).min(records.len());
    keys.into_iter()
        .map(|k| {
            let values: Vec<f64> = records.iter().filter_map(|r| r.get(k)).collect();
            let tail: Vec<f64> = records[tail_start..].iter().filter_map(|r| r.get(k)).collect();
            MetricSummary {
                key: k.clone(),
                last: records.last().and_then(|r| r.get(k)),
                mean_last_quarter: (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64),
                min: values.iter().copied().reduce(f64::min),
                max: values.iter().copied().reduce(f64::max),
            }
        })
        .collect()
}

/// Mean reward and next-state errors of the task decoder on real contexts,
/// each decoded with the latent inferred from that same context.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextDifference {
    pub reward: f64,
    pub state: f64,
}

pub fn context_difference(model: &TaskModel, contexts: &[Context]) -> Result<ContextDifference> {
    if contexts.is_empty() {
        return Err(Error::Input("no contexts".into()));
    }
    let (mut reward, mut state, mut rows) = (0.0, 0.0, 0usize);
    for ctx in contexts {
        let z = model.encoder.encode(ctx)?;
        let b = &ctx.batch;
        let pred = model.decode(&b.states(), &b.actions(), &z)?;
        let r = b.rewards();
        let s = b.next_states();
        for k in 0..b.len() {
            reward += (r.get(k, 0) - pred.reward.get(k, 0)).abs();
            state += s.row(k).iter().zip(pred.next_state.row(k)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
        rows += b.len();
    }
    Ok(ContextDifference { reward: reward / rows as f64, state: state / rows as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub task: TaskSpec,
    pub z: LatentCode,
}

/// Writes one JSON line per task.
pub fn latent_export(records: &[LatentRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let rx = ranks(x);
    let ry = ranks(y);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffers::{ContextSource, Dims, TransitionBatch};
    use crate::envs::{Split, TaskFamily};
    use crate::nn::{Activation, Matrix};
    use crate::representation::LatentKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn non_finite_values_are_flagged() {
        let mut r = MetricRecord::new(3, 7, "abc");
        r.set("a", 1.5);
        r.set("b", f64::NAN);
        let back: MetricRecord = serde_json::from_str(&r.to_line()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.get("a"), Some(1.5));
        assert_eq!(back.get("b"), None);
        assert_eq!(back.flagged, vec!["b".to_string()]);
        r.set("b", 2.0);
        assert!(r.flagged.is_empty());
    }

    #[test]
    fn summary_over_records() {
        let recs: Vec<MetricRecord> = (0..8)
            .map(|e| {
                let mut r = MetricRecord::new(e, 0, "h");
                r.set("x", e as f64);
                r
            })
            .collect();
        let s = &summarize(&recs)[0];
        assert_eq!(s.last, Some(7.0));
        assert_eq!(s.mean_last_quarter, Some(6.5));
        assert_eq!((s.min, s.max), (Some(0.0), Some(7.0)));
    }

    #[test]
    fn metrics_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        for e in 0..3 {
            let mut r = MetricRecord::new(e, 1, "h");
            r.set("v", 0.1 * e as f64);
            r.append_to(&p).unwrap();
        }
        let recs = read_metrics(&p).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].get("v"), Some(0.1 * 2.0));
    }

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // Ties: ranks x = [1.5, 1.5, 3], y = [1, 2, 3] -> Pearson of those ranks.
        let r = spearman(&[5.0, 5.0, 9.0], &[1.0, 2.0, 3.0]);
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn exact_decoder_has_zero_context_difference() {
        // Zero decoder output means r = 0 and s' = s; build contexts that obey it.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dims = Dims::new(4, 2);
        let mut model = TaskModel::new(dims, 2, 3, &[4], &[4], Activation::Relu, &mut rng);
        for p in model.decoder.params_mut() {
            p.data_mut().fill(0.0);
        }
        let n = 6;
        let mut rows = Matrix::zeros(n, dims.row_width());
        for k in 0..n {
            let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let row = [s.clone(), a, vec![0.0], s].concat();
            rows.row_mut(k).copy_from_slice(&row);
        }
        let ctx = Context::new(TransitionBatch { rows, done: vec![false; n], dims }, ContextSource::On);
        let d = context_difference(&model, &[ctx]).unwrap();
        assert_eq!((d.reward, d.state), (0.0, 0.0));
    }

    #[test]
    fn latent_export_writes_one_line_per_task() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.jsonl");
        let recs: Vec<LatentRecord> = (0..3)
            .map(|k| LatentRecord {
                task: TaskSpec { family: TaskFamily::PointVel, params: vec![k as f64], split: Split::Train },
                z: LatentCode::new(vec![k as f64, -1.0], LatentKind::On),
            })
            .collect();
        latent_export(&recs, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        let back: LatentRecord = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert_eq!(back, recs[1]);
    }

    proptest::proptest! {
        #[test]
        fn spearman_is_bounded_symmetric_and_rank_based(
            pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..30),
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let rho = spearman(&x, &y);
            proptest::prop_assume!(rho.is_finite());
            proptest::prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
            proptest::prop_assert!((rho - spearman(&y, &x)).abs() < 1e-12);
            // strictly increasing maps keep the ranks
            let warped: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            proptest::prop_assert!((rho - spearman(&warped, &y)).abs() < 1e-12);
            proptest::prop_assert!((spearman(&x, &x) - 1.0).abs() < 1e-12 || x.windows(2).all(|w| w[0] == w[1]));
        }
    }
}
