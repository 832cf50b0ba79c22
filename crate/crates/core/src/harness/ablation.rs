use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::harness::config::{config_hash, LinearProbeConfig, MaskingStrategy, PretrainConfig};
use crate::harness::pretrain::pretrain;
use crate::harness::probe::linear_probe;
use crate::model::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Streams,
    Masking,
    SegmentLength,
    DecoderDepth,
    DecoderWidth,
    MaskRatio,
    ScheduleLength,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 7] = [
        AblationAxis::Streams,
        AblationAxis::Masking,
        AblationAxis::SegmentLength,
        AblationAxis::DecoderDepth,
        AblationAxis::DecoderWidth,
        AblationAxis::MaskRatio,
        AblationAxis::ScheduleLength,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Streams => "streams",
            AblationAxis::Masking => "masking",
            AblationAxis::SegmentLength => "segment-length",
            AblationAxis::DecoderDepth => "decoder-depth",
            AblationAxis::DecoderWidth => "decoder-width",
            AblationAxis::MaskRatio => "mask-ratio",
            AblationAxis::ScheduleLength => "schedule-length",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|a| a.as_str()).collect();
            Error::Config(format!("unknown ablation axis {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// Base run plus the value grids swept by each axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub pretrain: PretrainConfig,
    pub probe: LinearProbeConfig,
    pub seeds: Vec<u64>,
    pub mask_ratios: Vec<f64>,
    pub segment_lengths: Vec<usize>,
    pub decoder_depths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub schedule_epochs: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            pretrain: PretrainConfig::default(),
            probe: LinearProbeConfig::default(),
            seeds: vec![0],
            mask_ratios: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
            segment_lengths: vec![1, 2, 4],
            decoder_depths: vec![1, 2, 3],
            decoder_widths: vec![16, 32, 64],
            schedule_epochs: vec![25, 50, 100],
        }
    }
}

/// The labelled pre-training configurations swept along `axis`.
pub fn ablation_settings(cfg: &AblationConfig, axis: AblationAxis) -> Vec<(String, PretrainConfig)> {
    let base = &cfg.pretrain;
    let with_arch = |f: &dyn Fn(&mut crate::model::ArchConfig)| {
        let mut c = base.clone();
        f(&mut c.arch);
        c
    };
    match axis {
        AblationAxis::Streams => [Stream::Joint, Stream::Motion]
            .into_iter()
            .flat_map(|input| [Stream::Joint, Stream::Motion].map(|target| (input, target)))
            .map(|(input, target)| {
                let label = format!("{}->{}", input.as_str(), target.as_str());
                (
                    label,
                    with_arch(&|a| {
                        a.input_stream = input;
                        a.target_stream = target;
                    }),
                )
            })
            .collect(),
        AblationAxis::Masking => [MaskingStrategy::MotionAware, MaskingStrategy::Random]
            .into_iter()
            .map(|m| {
                (
                    m.as_str().to_string(),
                    PretrainConfig {
                        masking: m,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        AblationAxis::SegmentLength => cfg
            .segment_lengths
            .iter()
            .map(|&l| (l.to_string(), with_arch(&|a| a.segment_len = l)))
            .collect(),
        AblationAxis::DecoderDepth => cfg
            .decoder_depths
            .iter()
            .map(|&d| (d.to_string(), with_arch(&|a| a.decoder_depth = d)))
            .collect(),
        AblationAxis::DecoderWidth => cfg
            .decoder_widths
            .iter()
            .map(|&w| (w.to_string(), with_arch(&|a| a.decoder_dim = w)))
            .collect(),
        AblationAxis::MaskRatio => cfg
            .mask_ratios
            .iter()
            .map(|&r| (r.to_string(), with_arch(&|a| a.mask_ratio = r)))
            .collect(),
        AblationAxis::ScheduleLength => cfg
            .schedule_epochs
            .iter()
            .map(|&e| {
                let warmup = (base.warmup_epochs * e).div_ceil(base.epochs).min(e - 1);
                (
                    e.to_string(),
                    PretrainConfig {
                        epochs: e,
                        warmup_epochs: warmup,
                        ..base.clone()
                    },
                )
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub probe_accuracies: Vec<f64>,
    pub final_losses: Vec<f64>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

impl AblationRow {
    pub fn probe_accuracy_mean(&self) -> f64 {
        mean(&self.probe_accuracies)
    }

    pub fn final_loss_mean(&self) -> f64 {
        mean(&self.final_losses)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_HEADER: &str =
    "axis,setting,config_hash,seeds,probe_accuracy_mean,probe_accuracy_std,final_loss_mean,probe_accuracies";

impl AblationTable {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    /// One line per setting; per-seed values are `;`-separated.
    pub fn to_csv(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(";");
        let mut out = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.axis,
                r.setting,
                r.config_hash,
                join(&mut r.seeds.iter().map(u64::to_string)),
                r.probe_accuracy_mean(),
                std_dev(&r.probe_accuracies),
                r.final_loss_mean(),
                join(&mut r.probe_accuracies.iter().map(f64::to_string)),
            )
            .expect("write to string");
        }
        out
    }
}

/// Pre-trains and probes every setting of `axis` for every seed.
///
/// Each setting's probe uses the same probe configuration; its seed follows
/// the pre-training seed. `progress` is called after each finished run.
pub fn run_ablation_suite(
    cfg: &AblationConfig,
    axis: AblationAxis,
    corpus: &Corpus,
    mut progress: impl FnMut(&str, u64, f64),
) -> Result<AblationTable> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (setting, pcfg) in ablation_settings(cfg, axis) {
        pcfg.validate()?;
        let mut row = AblationRow {
            config_hash: config_hash(&(&pcfg, &cfg.probe)),
            setting,
            seeds: cfg.seeds.clone(),
            probe_accuracies: Vec::new(),
            final_losses: Vec::new(),
        };
        for &seed in &cfg.seeds {
            let run = PretrainConfig { seed, ..pcfg.clone() };
            let outcome = pretrain(&run, corpus, None)?;
            let probe_cfg = LinearProbeConfig { seed, ..cfg.probe.clone() };
            let probe = linear_probe(&outcome.checkpoint, corpus, &probe_cfg)?;
            row.final_losses.push(outcome.record.last("train", "loss").unwrap_or(f64::NAN));
            row.probe_accuracies.push(probe.test_accuracy);
            progress(&row.setting, seed, probe.test_accuracy);
        }
        rows.push(row);
    }
    Ok(AblationTable { axis, rows })
}
