//! Turns session logs into the three training regimes: daily RCT instances
//! for uplift, hourly transitions for offline RL, and per-session stream
//! instances for the fusion weights.
//!
//! Pages are 0-based everywhere. RCT treatment ids are `t = page + 1`, with
//! `t = 0` the control arm. Record files hold raw feature values; the
//! sidecar manifest carries the schema and train-only normalisation
//! constants.

mod build;
mod features;

pub use build::{
    assign_rct_arms, build_daily_rct, build_hourly_transitions, build_stream_instances, default_threshold,
    stream_label, SkipReport,
};
pub use features::{
    context_features, long_term_features, rct_features, DayStats, FeatureSchema, Field, HistoryTable, Normalizer, HOURS,
};

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::nn::RngStream;
use crate::{Error, Result};

const SPLIT_STREAM: u64 = 0x5350_4c49_5400_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RctInstance {
    pub user_id: u64,
    pub x: Vec<f64>,
    /// 0 = control, `k` = landing page `k - 1`.
    pub t: usize,
    /// Mean daily usage seconds over the experiment window.
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub user_id: u64,
    pub day: usize,
    pub hour: u8,
    pub s: Vec<f64>,
    /// Landing page, 0-based.
    pub a: usize,
    /// Session usage seconds.
    pub r: f64,
    pub s_next: Vec<f64>,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamInstance {
    pub user_id: u64,
    pub day: usize,
    pub hour: u8,
    pub c: Vec<f64>,
    pub v: Vec<f64>,
    pub k: usize,
    pub label: u8,
}

pub trait UserKeyed {
    fn user_id(&self) -> u64;
}

macro_rules! user_keyed {
    ($($t:ty),*) => {$(
        impl UserKeyed for $t {
            fn user_id(&self) -> u64 {
                self.user_id
            }
        }
    )*};
}
user_keyed!(RctInstance, Transition, StreamInstance, crate::sim::SessionLog);

/// Shuffles the distinct users and puts `round(ratio · n)` of them, clamped
/// to `[1, n - 1]`, in the training set.
pub fn split_users(users: &BTreeSet<u64>, ratio: f64, seed: u64) -> Result<(BTreeSet<u64>, BTreeSet<u64>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio must be in (0,1), got {ratio}")));
    }
    if users.len() < 2 {
        return Err(Error::Data(format!("cannot split {} user(s)", users.len())));
    }
    let mut ids: Vec<u64> = users.iter().copied().collect();
    ids.shuffle(&mut RngStream::new(seed, SPLIT_STREAM).rng());
    let n_train = ((ratio * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let eval = ids.split_off(n_train);
    Ok((ids.into_iter().collect(), eval.into_iter().collect()))
}

/// User-level split: no user appears on both sides.
pub fn split_train_eval<T: UserKeyed + Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let users: BTreeSet<u64> = items.iter().map(UserKeyed::user_id).collect();
    let (train, _) = split_users(&users, ratio, seed)?;
    Ok(items.iter().cloned().partition(|i| train.contains(&i.user_id())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Sidecar describing one record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub records: usize,
    pub schema: FeatureSchema,
    /// Stream records split the schema into `c` (first `context_dims`) and `v`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_dims: Option<usize>,
    pub normalizer: Normalizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub skipped_users: Vec<u64>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(user: u64) -> RctInstance {
        RctInstance { user_id: user, x: vec![user as f64], t: 0, y: 1.0 }
    }

    #[test]
    fn split_sizes_follow_ratio() {
        let items: Vec<_> = (0..10).flat_map(|u| [inst(u), inst(u)]).collect();
        let (tr, ev) = split_train_eval(&items, 0.8, 3).unwrap();
        let tu: BTreeSet<_> = tr.iter().map(|i| i.user_id).collect();
        let eu: BTreeSet<_> = ev.iter().map(|i| i.user_id).collect();
        assert_eq!((tu.len(), eu.len()), (8, 2));
        assert!(tu.is_disjoint(&eu));
        let two: Vec<_> = (0..2).map(inst).collect();
        let (a, b) = split_train_eval(&two, 0.5, 0).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
    }

    #[test]
    fn split_is_deterministic_and_rejects_tiny_input() {
        let items: Vec<_> = (0..50).map(inst).collect();
        assert_eq!(split_train_eval(&items, 0.8, 9).unwrap(), split_train_eval(&items, 0.8, 9).unwrap());
        assert!(split_train_eval(&items[..1], 0.8, 9).is_err());
        assert!(split_train_eval(&items, 1.0, 9).is_err());
    }

    #[test]
    fn jsonl_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let items: Vec<_> = (0..3).map(inst).collect();
        let p = dir.path().join("rct.jsonl");
        write_jsonl(&p, &items).unwrap();
        assert_eq!(read_jsonl::<RctInstance>(&p).unwrap(), items);
        let m = DatasetManifest {
            kind: "rct".into(),
            records: 3,
            schema: FeatureSchema::rct(3),
            context_dims: None,
            normalizer: Normalizer::identity(18),
            threshold: None,
            skipped_users: vec![4],
        };
        let mp = dir.path().join("rct.manifest.json");
        m.write(&mp).unwrap();
        assert_eq!(DatasetManifest::read(&mp).unwrap(), m);
    }
}
