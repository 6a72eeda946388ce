//! Trajectory datasets and their JSON-Lines file format.
//!
//! Line 1 is a header object:
//!
//! ```text
//! {"format":"rsdbpf-dataset/1","suite":{..},"counts":{"train":1000,"val":500,"test":500},"master_seed":7}
//! ```
//!
//! followed by one object per trajectory:
//!
//! ```text
//! {"traj_id":0,"split":"train","regimes":[3,3,..],"states":[..],"observations":[..]}
//! ```
//!
//! Regime indices are 1-based in the file. Reals are written in shortest
//! round-trip form, so `load(save(d)) == d` bit for bit.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ssm::{ModelSuite, Trajectory};
use crate::{Error, Result};

pub const DATASET_FORMAT: &str = "rsdbpf-dataset/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 1000 / 500 / 500.
    pub const STANDARD: SplitCounts = SplitCounts {
        train: 1000,
        val: 500,
        test: 500,
    };

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub suite: ModelSuite,
    pub counts: SplitCounts,
    pub master_seed: u64,
    pub trajectories: Vec<Trajectory>,
    /// Split of `trajectories[i]`.
    pub splits: Vec<Split>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    suite: ModelSuite,
    counts: SplitCounts,
    master_seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    traj_id: u64,
    split: Split,
    regimes: Vec<usize>,
    states: Vec<f64>,
    observations: Vec<f64>,
}

impl Dataset {
    /// Simulates `counts.total()` trajectories with ids `0..N`; the first
    /// `train` ids form the training split, then validation, then test.
    pub fn generate(suite: &ModelSuite, counts: SplitCounts, master_seed: u64) -> Result<Self> {
        suite.validate()?;
        if counts.train == 0 || counts.val == 0 || counts.test == 0 {
            return Err(Error::Config("all split counts must be positive".into()));
        }
        let trajectories: Vec<Trajectory> = (0..counts.total() as u64)
            .into_par_iter()
            .map(|id| suite.simulate(master_seed, id))
            .collect();
        let splits = (0..counts.total()).map(|i| counts.split_of(i)).collect();
        Ok(Self {
            suite: suite.clone(),
            counts,
            master_seed,
            trajectories,
            splits,
        })
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &Trajectory> {
        self.trajectories
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == which)
            .map(|(t, _)| t)
    }

    pub fn train(&self) -> Vec<&Trajectory> {
        self.split(Split::Train).collect()
    }

    pub fn val(&self) -> Vec<&Trajectory> {
        self.split(Split::Val).collect()
    }

    pub fn test(&self) -> Vec<&Trajectory> {
        self.split(Split::Test).collect()
    }

    /// Checks that every trajectory is reproduced by its `(master_seed, traj_id)` stream.
    pub fn verify_regenerable(&self) -> bool {
        self.trajectories
            .par_iter()
            .all(|t| self.suite.simulate(self.master_seed, t.traj_id) == *t)
    }

    pub fn validate(&self) -> Result<()> {
        self.suite.validate()?;
        if self.trajectories.len() != self.splits.len() {
            return Err(Error::Validation("split list does not match trajectories".into()));
        }
        let mut seen = HashSet::new();
        let mut tally = SplitCounts {
            train: 0,
            val: 0,
            test: 0,
        };
        for (t, s) in self.trajectories.iter().zip(&self.splits) {
            if !seen.insert(t.traj_id) {
                return Err(Error::Validation(format!("duplicate traj_id {}", t.traj_id)));
            }
            t.validate(self.suite.n_regimes(), self.suite.horizon)?;
            match s {
                Split::Train => tally.train += 1,
                Split::Val => tally.val += 1,
                Split::Test => tally.test += 1,
            }
        }
        if tally != self.counts {
            return Err(Error::Validation(format!(
                "split sizes {tally:?} do not match declared {:?}",
                self.counts
            )));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let header = Header {
            format: DATASET_FORMAT.to_string(),
            suite: self.suite.clone(),
            counts: self.counts,
            master_seed: self.master_seed,
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for (t, &split) in self.trajectories.iter().zip(&self.splits) {
            let record = Record {
                traj_id: t.traj_id,
                split,
                regimes: t.regimes.iter().map(|m| m + 1).collect(),
                states: t.states.clone(),
                observations: t.observations.clone(),
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&record)?);
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
        // check the version before the rest of the header so format changes
        // surface as version errors
        let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| parse_err(1, e.to_string()))?;
        let found = raw.get("format").and_then(|f| f.as_str()).unwrap_or("");
        if found != DATASET_FORMAT {
            return Err(Error::Version {
                expected: DATASET_FORMAT.into(),
                found: found.into(),
            });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| parse_err(1, e.to_string()))?;
        header.suite.validate().map_err(|e| parse_err(1, e.to_string()))?;
        let n_regimes = header.suite.n_regimes();

        let mut trajectories = Vec::with_capacity(header.counts.total());
        let mut splits = Vec::with_capacity(header.counts.total());
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(line_no, e.to_string()))?;
            if let Some(&bad) = rec.regimes.iter().find(|&&m| m == 0 || m > n_regimes) {
                return Err(parse_err(
                    line_no,
                    format!("regime index {bad} outside 1..={n_regimes}"),
                ));
            }
            let t = Trajectory {
                traj_id: rec.traj_id,
                states: rec.states,
                regimes: rec.regimes.into_iter().map(|m| m - 1).collect(),
                observations: rec.observations,
            };
            t.validate(n_regimes, header.suite.horizon)
                .map_err(|e| parse_err(line_no, e.to_string()))?;
            trajectories.push(t);
            splits.push(rec.split);
        }
        if trajectories.len() != header.counts.total() {
            return Err(parse_err(
                text.lines().count() + 1,
                format!(
                    "expected {} trajectories, found {} (truncated file?)",
                    header.counts.total(),
                    trajectories.len()
                ),
            ));
        }
        let ds = Dataset {
            suite: header.suite,
            counts: header.counts,
            master_seed: header.master_seed,
            trajectories,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::DynamicsKind;

    fn small(kind: DynamicsKind) -> Dataset {
        let counts = SplitCounts {
            train: 2,
            val: 1,
            test: 1,
        };
        Dataset::generate(&ModelSuite::eight_regime(kind), counts, 17).unwrap()
    }

    #[test]
    fn small_counts() {
        let ds = small(DynamicsKind::Markov);
        assert_eq!(ds.trajectories.len(), 4);
        assert!(ds.trajectories.iter().all(|t| t.observations.len() == 50));
        assert_eq!(ds.train().len(), 2);
        assert_eq!(ds.val().len(), 1);
        assert_eq!(ds.test()[0].traj_id, 3);
        assert!(ds.verify_regenerable());
    }

    #[test]
    fn standard_counts() {
        let ds = Dataset::generate(&ModelSuite::eight_regime(DynamicsKind::Polya), SplitCounts::STANDARD, 1).unwrap();
        assert_eq!(ds.trajectories.len(), 2000);
        assert_eq!((ds.train().len(), ds.val().len(), ds.test().len()), (1000, 500, 500));
        ds.validate().unwrap();
    }

    #[test]
    fn round_trip_is_lossless_and_deterministic() {
        let ds = small(DynamicsKind::Polya);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        ds.save(&p).unwrap();
        let back = Dataset::load(&p).unwrap();
        assert_eq!(ds, back);
        for (a, b) in ds.trajectories.iter().zip(&back.trajectories) {
            for (x, y) in a.states.iter().zip(&b.states) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(ds.to_jsonl().unwrap(), small(DynamicsKind::Polya).to_jsonl().unwrap());
        assert!(ds.to_jsonl().unwrap().starts_with("{\"format\":\"rsdbpf-dataset/1\""));
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = small(DynamicsKind::Markov).to_jsonl().unwrap();
        let cut = &text[..text.len() - 40];
        match Dataset::from_jsonl(cut, Path::new("d.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        let first_two: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            Dataset::from_jsonl(&first_two, Path::new("d")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn regime_out_of_range_is_rejected() {
        let text = small(DynamicsKind::Markov).to_jsonl().unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        rec["regimes"][4] = serde_json::json!(9);
        lines[2] = rec.to_string();
        let bad = lines.join("\n");
        match Dataset::from_jsonl(&bad, Path::new("d")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("regime index 9"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let text = small(DynamicsKind::Markov)
            .to_jsonl()
            .unwrap()
            .replacen("rsdbpf-dataset/1", "rsdbpf-dataset/0", 1);
        assert!(matches!(
            Dataset::from_jsonl(&text, Path::new("d")),
            Err(Error::Version { .. })
        ));
    }

    #[test]
    fn zero_count_rejected() {
        let counts = SplitCounts {
            train: 0,
            val: 1,
            test: 1,
        };
        assert!(Dataset::generate(&ModelSuite::eight_regime(DynamicsKind::Markov), counts, 0).is_err());
    }
}
