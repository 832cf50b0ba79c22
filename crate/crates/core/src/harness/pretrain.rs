use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{training_view, Corpus, SkeletonSequence};
use crate::error::{Error, Result};
use crate::harness::config::{MaskingStrategy, PretrainConfig};
use crate::harness::record::RunRecord;
use crate::harness::rng::{derive_rng, Purpose};
use crate::masking::{masked_count, sample_mask, sample_mask_random, MaskPlan};
use crate::model::{
    bind_params, forward_batch, init_params, masking_distribution, param_shapes, prepare_sample, ArchConfig,
    Checkpoint, ModelParams, PretrainSample,
};
use crate::numerics::{lr_at, AdamW, AdamWConfig, DenseArray, ScheduleConfig, Tape};

/// Parameters and AdamW state for the masked-prediction objective.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub arch: ArchConfig,
    pub params: ModelParams<DenseArray>,
    pub optimizer: AdamW,
}

impl Trainer {
    pub fn new(arch: ArchConfig, params: ModelParams<DenseArray>, optimizer: AdamWConfig) -> Self {
        let shapes = param_shapes(&arch);
        let optimizer = AdamW::new(optimizer, shapes.values().into_iter().map(Vec::as_slice));
        Self {
            arch,
            params,
            optimizer,
        }
    }

    /// Loss and gradients for a batch without updating anything.
    pub fn loss_and_grads(
        &self,
        samples: &[PretrainSample],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<DenseArray>)> {
        let tape = Tape::new();
        let vars = bind_params(&tape, &self.params, |_| true);
        let out = forward_batch(&tape, &vars, &self.arch, samples, dropout_rng)?;
        let loss = out.loss.value().item();
        let mut grads = tape.backward(out.loss)?;
        Ok((loss, vars.into_vec().into_iter().map(|v| grads.take(v)).collect()))
    }

    /// One optimizer step; returns the loss before the update. A non-finite
    /// loss or gradient leaves the parameters untouched and reports a
    /// numerical error.
    pub fn step(&mut self, samples: &[PretrainSample], lr: f64, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(samples, dropout_rng)?;
        if !loss.is_finite() || !grads.iter().all(DenseArray::is_finite) {
            return Err(Error::Numerical(format!("non-finite loss {loss} or gradient")));
        }
        let grad_refs: Vec<&DenseArray> = grads.iter().collect();
        self.optimizer.step(&mut self.params.values_mut(), &grad_refs, lr, None)?;
        Ok(loss)
    }
}

/// Result of a pre-training run.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub record: RunRecord,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

pub(crate) fn check_sequences(seqs: &[SkeletonSequence], arch: &ArchConfig) -> Result<()> {
    for s in seqs {
        if s.num_joints() != arch.joints || s.channels() != arch.channels {
            return Err(Error::Data(format!(
                "{}: {} joints × {} channels, network expects {} × {}",
                s.id,
                s.num_joints(),
                s.channels(),
                arch.joints,
                arch.channels
            )));
        }
    }
    Ok(())
}

/// Draws the training view and mask plan of train sequence `index` for
/// `epoch` and prepares its loss inputs.
pub fn pretrain_sample(cfg: &PretrainConfig, seq: &SkeletonSequence, epoch: usize, index: usize) -> Result<PretrainSample> {
    let arch = &cfg.arch;
    let tags = [epoch as u64, index as u64];
    let mut view_rng = derive_rng(cfg.seed, Purpose::View, &tags);
    let view = training_view(&seq.frames, arch.frames, &mut view_rng)?;
    let mut mask_rng = derive_rng(cfg.seed, Purpose::Mask, &tags);
    let plan = match cfg.masking {
        MaskingStrategy::MotionAware => {
            let probs = masking_distribution(&view, arch, cfg.temperature)?;
            sample_mask(&probs, arch.mask_ratio, &mut mask_rng)?
        }
        MaskingStrategy::Random => sample_mask_random(arch.tokens(), arch.mask_ratio, &mut mask_rng)?,
    };
    prepare_sample(&view, arch, plan)
}

#[derive(Serialize)]
struct DumpEntry<'a> {
    index: usize,
    id: &'a str,
    masked: &'a [usize],
}

#[derive(Serialize)]
struct NumericalDump<'a> {
    step: usize,
    epoch: usize,
    lr: f64,
    loss: String,
    batch: Vec<DumpEntry<'a>>,
}

fn write_dump(dir: &Path, dump: &NumericalDump<'_>) -> Result<PathBuf> {
    let path = dir.join(format!("numerical_failure_step{}.json", dump.step));
    let text = serde_json::to_string_pretty(dump).expect("dump serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Pre-trains a freshly initialized network on `corpus.train`.
///
/// With `out_dir`, intermediate checkpoints (`checkpoint_every`) and the
/// diagnostic dump of a numerical failure are written there.
pub fn pretrain(cfg: &PretrainConfig, corpus: &Corpus, out_dir: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let arch = &cfg.arch;
    if masked_count(arch.mask_ratio, arch.tokens()) == 0 {
        return Err(Error::Config(format!(
            "mask_ratio {} masks no token of a {}-token grid",
            arch.mask_ratio,
            arch.tokens()
        )));
    }
    let train = &corpus.train;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    check_sequences(train, arch)?;

    let started = Instant::now();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = ScheduleConfig {
        warmup_epochs: cfg.warmup_epochs,
        total_epochs: cfg.epochs,
        steps_per_epoch,
        peak_lr: cfg.peak_lr,
        floor_lr: cfg.floor_lr,
    };
    let mut trainer = Trainer::new(arch.clone(), init_params(arch, cfg.seed), cfg.optimizer);
    let mut record = RunRecord::new(cfg.hash());
    let mut step_losses = Vec::with_capacity(schedule.total_steps());
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, Purpose::Shuffle, &[epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            lr = lr_at(step, &schedule)?;
            let samples = batch
                .iter()
                .map(|&i| pretrain_sample(cfg, &train[i], epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let mut dropout_rng = derive_rng(cfg.seed, Purpose::Dropout, &[step as u64]);
            let dropout_rng = (arch.dropout > 0.0).then_some(&mut dropout_rng);
            let loss = match trainer.step(&samples, lr, dropout_rng) {
                Ok(loss) => loss,
                Err(Error::Numerical(msg)) => {
                    let dump = NumericalDump {
                        step,
                        epoch,
                        lr,
                        loss: msg.clone(),
                        batch: batch
                            .iter()
                            .zip(&samples)
                            .map(|(&i, s)| DumpEntry {
                                index: i,
                                id: &train[i].id,
                                masked: &s.plan.masked,
                            })
                            .collect(),
                    };
                    let location = match out_dir {
                        Some(dir) => format!("dump written to {}", write_dump(dir, &dump)?.display()),
                        None => serde_json::to_string(&dump).expect("dump serializes"),
                    };
                    return Err(Error::Numerical(format!("step {step}, epoch {epoch}: {msg}; {location}")));
                }
                Err(e) => return Err(e),
            };
            step_losses.push(loss);
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        record.push(epoch, "train", "loss", epoch_loss / train.len() as f64);
        record.push(epoch, "train", "lr", lr);
        if let (Some(dir), Some(every)) = (out_dir, cfg.checkpoint_every) {
            if epoch % every == 0 && epoch < cfg.epochs {
                let ck = snapshot(cfg, &trainer, step);
                ck.save(&dir.join(format!("checkpoint_epoch{epoch:04}.ckpt")))?;
            }
        }
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(PretrainOutcome {
        checkpoint: snapshot(cfg, &trainer, step),
        record,
        step_losses,
    })
}

fn snapshot(cfg: &PretrainConfig, trainer: &Trainer, step: usize) -> Checkpoint {
    Checkpoint {
        arch: cfg.arch.clone(),
        seed: cfg.seed,
        step: step as u64,
        params: trainer.params.clone(),
        optimizer: Some(trainer.optimizer.clone()),
    }
}

/// Fixed (view, plan) samples: the centered evaluation view of each sequence
/// and a seeded mask. Useful for overfitting checks.
pub fn fixed_samples(cfg: &PretrainConfig, seqs: &[SkeletonSequence]) -> Result<Vec<PretrainSample>> {
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let view = crate::data::test_view(&s.frames, cfg.arch.frames)?;
            let mut rng = derive_rng(cfg.seed, Purpose::Mask, &[0, i as u64]);
            let plan: MaskPlan = match cfg.masking {
                MaskingStrategy::MotionAware => {
                    let probs = masking_distribution(&view, &cfg.arch, cfg.temperature)?;
                    sample_mask(&probs, cfg.arch.mask_ratio, &mut rng)?
                }
                MaskingStrategy::Random => sample_mask_random(cfg.arch.tokens(), cfg.arch.mask_ratio, &mut rng)?,
            };
            prepare_sample(&view, &cfg.arch, plan)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SyntheticCorpus, SyntheticCorpusConfig};

    fn tiny_corpus() -> Corpus {
        let syn = SyntheticCorpus::generate(&SyntheticCorpusConfig {
            num_classes: 2,
            sequences_per_class: 4,
            num_joints: 3,
            frames: (10, 14),
            ..Default::default()
        })
        .unwrap();
        Corpus {
            train: syn.sequences,
            test: Vec::new(),
        }
    }

    fn tiny_config() -> PretrainConfig {
        PretrainConfig {
            arch: ArchConfig::toy(),
            epochs: 3,
            warmup_epochs: 1,
            batch_size: 3,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_run() {
        let corpus = tiny_corpus();
        let a = pretrain(&tiny_config(), &corpus, None).unwrap();
        let b = pretrain(&tiny_config(), &corpus, None).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.record.to_csv(), b.record.to_csv());
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.step_losses.len(), 9);
        assert_eq!(a.checkpoint.step, 9);
        let c = pretrain(&PretrainConfig { seed: 1, ..tiny_config() }, &corpus, None).unwrap();
        assert_ne!(a.step_losses, c.step_losses);
    }

    #[test]
    fn full_masking_makes_strategies_agree() {
        let corpus = tiny_corpus();
        let base = PretrainConfig {
            arch: ArchConfig {
                mask_ratio: 1.0,
                ..ArchConfig::toy()
            },
            ..tiny_config()
        };
        let motion = pretrain(&base, &corpus, None).unwrap();
        let random = pretrain(
            &PretrainConfig {
                masking: MaskingStrategy::Random,
                ..base
            },
            &corpus,
            None,
        )
        .unwrap();
        assert_eq!(motion.step_losses, random.step_losses);
    }

    #[test]
    fn mismatched_joints_is_data_error() {
        let mut corpus = tiny_corpus();
        corpus.train[2].frames = DenseArray::zeros(vec![10, 4, 3]);
        let err = pretrain(&tiny_config(), &corpus, None).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn divergence_is_reported_with_dump() {
        let corpus = tiny_corpus();
        let cfg = PretrainConfig {
            peak_lr: 1e300,
            floor_lr: 1e300,
            warmup_epochs: 0,
            ..tiny_config()
        };
        let dir = tempfile::tempdir().unwrap();
        let err = pretrain(&cfg, &corpus, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
        assert_eq!(err.exit_code(), 4);
        let dumps: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(dumps.len(), 1);
        let text = fs::read_to_string(dumps[0].as_ref().unwrap().path()).unwrap();
        assert!(text.contains("\"masked\""));
    }

    #[test]
    fn interval_checkpoints() {
        let corpus = tiny_corpus();
        let dir = tempfile::tempdir().unwrap();
        let cfg = PretrainConfig {
            checkpoint_every: Some(1),
            ..tiny_config()
        };
        pretrain(&cfg, &corpus, Some(dir.path())).unwrap();
        let ck = Checkpoint::load(&dir.path().join("checkpoint_epoch0002.ckpt")).unwrap();
        assert_eq!(ck.step, 6);
        assert!(!dir.path().join("checkpoint_epoch0003.ckpt").exists());
    }
}
