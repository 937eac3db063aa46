use std::fmt;
use std::path::{Path, PathBuf};

use super::{evaluate, EvalOptions};
use crate::backbone::{AttentionMode, EditModel};
use crate::numerics::ParamStore;
use crate::train::TrainingSample;
use crate::{Error, Result};

/// One ablation configuration: attention mode and whether the source frame
/// is reconstructed during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AblationArm {
    pub mode: AttentionMode,
    pub recon: bool,
}

impl AblationArm {
    pub fn new(mode: AttentionMode, recon: bool) -> Self {
        Self { mode, recon }
    }

    /// Checkpoint file name of this arm trained with `seed`.
    pub fn checkpoint_name(&self, seed: u64) -> String {
        format!("{}_{}_seed{seed}.fpck", self.mode.as_str(), if self.recon { "recon" } else { "norecon" })
    }
}

impl fmt::Display for AblationArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.mode.as_str(), if self.recon { "recon_on" } else { "recon_off" })
    }
}

impl std::str::FromStr for AblationArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mode, recon) = s.split_once('/').ok_or_else(|| Error::Config(format!("bad ablation arm {s:?}")))?;
        let recon = match recon {
            "recon_on" => true,
            "recon_off" => false,
            other => return Err(Error::Config(format!("bad reconstruction flag {other:?}"))),
        };
        Ok(Self { mode: mode.parse()?, recon })
    }
}

/// `seed` is `None` on cross-seed mean rows. `matching` is NaN for arms
/// without a matching branch.
#[derive(Clone, Copy, Debug)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub seed: Option<u64>,
    pub mean_ssim: f64,
    pub matching: f64,
}

impl PartialEq for AblationRow {
    fn eq(&self, o: &Self) -> bool {
        self.arm == o.arm && self.seed == o.seed && self.mean_ssim.to_bits() == o.mean_ssim.to_bits() && self.matching.to_bits() == o.matching.to_bits()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn mean_finite(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

const TSV_HEADER: &str = "arm\tseed\tmean_ssim\tmatching_accuracy";

impl AblationTable {
    /// Per-seed rows grouped by arm in first-seen order, each group followed
    /// by its mean row.
    pub fn from_runs(runs: &[AblationRow]) -> Self {
        let mut arms: Vec<AblationArm> = Vec::new();
        for r in runs {
            if !arms.contains(&r.arm) {
                arms.push(r.arm);
            }
        }
        let mut rows = Vec::new();
        for arm in arms {
            let group: Vec<&AblationRow> = runs.iter().filter(|r| r.arm == arm && r.seed.is_some()).collect();
            rows.extend(group.iter().map(|r| **r));
            rows.push(AblationRow {
                arm,
                seed: None,
                mean_ssim: mean_finite(group.iter().map(|r| r.mean_ssim)),
                matching: mean_finite(group.iter().map(|r| r.matching)),
            });
        }
        Self { rows }
    }

    pub fn mean(&self, arm: AblationArm) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm && r.seed.is_none())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<22} {:>6} {:>10} {:>10}\n", "config", "seed", "ssim", "match_acc");
        for r in &self.rows {
            let seed = r.seed.map_or("mean".to_owned(), |v| v.to_string());
            let m = if r.matching.is_nan() { "-".to_owned() } else { format!("{:.4}", r.matching) };
            s.push_str(&format!("{:<22} {:>6} {:>10.4} {:>10}\n", r.arm.to_string(), seed, r.mean_ssim, m));
        }
        s
    }

    /// Tab-separated with full-precision floats, so `from_tsv` restores the
    /// table exactly.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{TSV_HEADER}\n");
        for r in &self.rows {
            let seed = r.seed.map_or("mean".to_owned(), |v| v.to_string());
            s.push_str(&format!("{}\t{seed}\t{:?}\t{:?}\n", r.arm, r.mean_ssim, r.matching));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(TSV_HEADER) {
            return Err(Error::format("ablation table", "missing header"));
        }
        let rows = lines
            .enumerate()
            .map(|(i, line)| {
                let bad = || Error::format("ablation table", format!("line {}: malformed row", i + 2));
                let f: Vec<&str> = line.split('\t').collect();
                let [arm, seed, ssim, m] = f[..] else { return Err(bad()) };
                Ok(AblationRow {
                    arm: arm.parse().map_err(|_| bad())?,
                    seed: if seed == "mean" { None } else { Some(seed.parse().map_err(|_| bad())?) },
                    mean_ssim: ssim.parse().map_err(|_| bad())?,
                    matching: m.parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }
}

/// Evaluates one trained model as a per-seed row.
pub fn ablation_row(
    arm: AblationArm,
    seed: u64,
    model: &EditModel,
    store: &ParamStore<f32>,
    samples: &[TrainingSample],
    opts: &EvalOptions,
) -> Result<AblationRow> {
    let cfg = model.backbone();
    if cfg.attention_mode != arm.mode {
        return Err(Error::Config(format!("checkpoint for {arm} seed {seed} holds a {} model", cfg.attention_mode.as_str())));
    }
    let report = evaluate(model, store, samples, opts)?;
    Ok(AblationRow { arm, seed: Some(seed), mean_ssim: report.mean_ssim, matching: report.matching.map_or(f64::NAN, |m| m.value) })
}

/// Loads `dir/<arm.checkpoint_name(seed)>` for every arm and seed and
/// evaluates it on `samples`.
pub fn run_ablation(dir: &Path, samples: &[TrainingSample], arms: &[AblationArm], seeds: &[u64], opts: &EvalOptions) -> Result<AblationTable> {
    let mut runs = Vec::with_capacity(arms.len() * seeds.len());
    for &arm in arms {
        for &seed in seeds {
            let path: PathBuf = dir.join(arm.checkpoint_name(seed));
            if !path.is_file() {
                return Err(Error::Config(format!("missing checkpoint for {arm} seed {seed}: {}", path.display())));
            }
            let (model, store) = crate::formats::load_model(&path)?;
            runs.push(ablation_row(arm, seed, &model, &store, samples, opts)?);
        }
    }
    Ok(AblationTable::from_runs(&runs))
}
