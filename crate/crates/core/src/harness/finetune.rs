use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{test_view, training_view, Corpus};
use crate::error::{Error, Result};
use crate::harness::config::{config_hash, FinetuneConfig};
use crate::harness::pretrain::check_sequences;
use crate::harness::probe::check_labeled;
use crate::harness::record::RunRecord;
use crate::harness::rng::{derive_rng, Purpose};
use crate::model::{bind_params, encode_pooled, input_tokens, ArchConfig, Checkpoint, ModelParams};
use crate::numerics::init::xavier_uniform;
use crate::numerics::{lr_at, AdamW, DenseArray, ScheduleConfig, Tape, Var};

/// Two-layer classifier on pooled features: `C_e → C_e` (GELU) `→ classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub fc1_weight: DenseArray,
    pub fc1_bias: DenseArray,
    pub fc2_weight: DenseArray,
    pub fc2_bias: DenseArray,
}

impl ClassifierHead {
    pub fn new(width: usize, classes: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, Purpose::HeadInit, &[]);
        Self {
            fc1_weight: xavier_uniform(width, width, &mut rng),
            fc1_bias: DenseArray::zeros(vec![width]),
            fc2_weight: xavier_uniform(width, classes, &mut rng),
            fc2_bias: DenseArray::zeros(vec![classes]),
        }
    }

    fn arrays_mut(&mut self) -> [&mut DenseArray; 4] {
        [&mut self.fc1_weight, &mut self.fc1_bias, &mut self.fc2_weight, &mut self.fc2_bias]
    }

    fn logits<'t>(vars: &[Var<'t>; 4], pooled: Var<'t>) -> Result<Var<'t>> {
        pooled.linear(vars[0], vars[1])?.gelu().linear(vars[2], vars[3])
    }
}

/// Learning-rate multiplier of an encoder-side parameter under layer-wise
/// decay: the final norm gets `decay⁰`, block `i` (0-based) gets
/// `decay^(L_e − i)`, embedding and positional tables get `decay^(L_e + 1)`.
/// Decoder-side parameters are not fine-tuned and give `None`.
pub fn layer_lr_scale(name: &str, encoder_depth: usize, decay: f64) -> Option<f64> {
    let layer = if name.starts_with("enc_norm") {
        0
    } else if name.starts_with("embed") || name.starts_with("enc_pos") {
        encoder_depth + 1
    } else if let Some(rest) = name.strip_prefix("encoder.") {
        let i: usize = rest.split('.').next()?.parse().ok()?;
        encoder_depth - i
    } else {
        return None;
    };
    Some(decay.powi(layer as i32))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub test_accuracy: f64,
    pub record: RunRecord,
    /// Updated network; only encoder-side arrays differ from the input.
    pub params: ModelParams<DenseArray>,
    pub head: ClassifierHead,
}

fn evaluate(params: &ModelParams<DenseArray>, head: &ClassifierHead, arch: &ArchConfig, views: &[DenseArray]) -> Result<Vec<usize>> {
    let mut pred = Vec::with_capacity(views.len());
    for chunk in views.chunks(32) {
        let inputs = chunk.iter().map(|v| input_tokens(v, arch)).collect::<Result<Vec<_>>>()?;
        let tape = Tape::new();
        let vars = bind_params(&tape, params, |_| false);
        let pooled = encode_pooled(&tape, &vars, arch, &inputs, None)?;
        let hv = [&head.fc1_weight, &head.fc1_bias, &head.fc2_weight, &head.fc2_bias].map(|a| tape.constant(a.clone()));
        let logits = ClassifierHead::logits(&hv, pooled)?.value();
        let (rows, k) = logits.dims2();
        for r in 0..rows {
            let row = &logits.data()[r * k..(r + 1) * k];
            let best = (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            pred.push(best);
        }
    }
    Ok(pred)
}

/// Fine-tunes the encoder together with a fresh MLP head on the labeled
/// training set (or a per-class `label_fraction` subset) and reports top-1
/// test accuracy. `corpus` may differ from the pre-training corpus.
pub fn finetune(ck: &Checkpoint, corpus: &Corpus, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let arch = &ck.arch;
    let corpus = corpus.label_subset(cfg.label_fraction, cfg.seed)?;
    let (train_y, test_y, classes) = check_labeled(&corpus)?;
    check_sequences(&corpus.train, arch)?;
    check_sequences(&corpus.test, arch)?;
    let started = Instant::now();

    let names = ck.params.names();
    let scales: Vec<Option<f64>> = names
        .iter()
        .map(|n| layer_lr_scale(n, arch.encoder_depth, cfg.layer_decay))
        .collect();
    let trainable = |name: &str| layer_lr_scale(name, arch.encoder_depth, 1.0).is_some();
    let mut params = ck.params.clone();
    let mut head = ClassifierHead::new(arch.embed_dim, classes, cfg.seed);

    let mut lr_scale: Vec<f64> = scales.iter().flatten().copied().collect();
    lr_scale.extend([1.0; 4]);
    let mut shapes: Vec<Vec<usize>> = params
        .values()
        .into_iter()
        .zip(&scales)
        .filter(|(_, s)| s.is_some())
        .map(|(a, _)| a.shape().to_vec())
        .collect();
    shapes.extend(head.arrays_mut().map(|a| a.shape().to_vec()));
    let mut optimizer = AdamW::new(cfg.optimizer, shapes.iter().map(Vec::as_slice));

    let n = corpus.train.len();
    let schedule = ScheduleConfig {
        warmup_epochs: cfg.warmup_epochs,
        total_epochs: cfg.epochs,
        steps_per_epoch: n.div_ceil(cfg.batch_size),
        peak_lr: cfg.peak_lr,
        floor_lr: cfg.floor_lr,
    };
    let test_views = corpus
        .test
        .iter()
        .map(|s| test_view(&s.frames, arch.frames))
        .collect::<Result<Vec<_>>>()?;
    let mut record = RunRecord::new(config_hash(&(cfg, ck.params.digest())));
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(cfg.seed, Purpose::FinetuneShuffle, &[epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inputs = batch
                .iter()
                .map(|&i| {
                    let mut rng = derive_rng(cfg.seed, Purpose::FinetuneView, &[epoch as u64, i as u64]);
                    input_tokens(&training_view(&corpus.train[i].frames, arch.frames, &mut rng)?, arch)
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let tape = Tape::new();
            let vars = bind_params(&tape, &params, trainable);
            let hv = head.arrays_mut().map(|a| tape.param(a.clone()));
            let mut dropout_rng = derive_rng(cfg.seed, Purpose::FinetuneDropout, &[step as u64]);
            let pooled = encode_pooled(&tape, &vars, arch, &inputs, (arch.dropout > 0.0).then_some(&mut dropout_rng))?;
            let loss = ClassifierHead::logits(&hv, pooled)?.cross_entropy(&labels)?;
            let value = loss.value().item();
            let mut grads = tape.backward(loss)?;
            let mut grad_list: Vec<DenseArray> = vars
                .into_vec()
                .into_iter()
                .zip(&scales)
                .filter(|(_, s)| s.is_some())
                .map(|(v, _)| grads.take(v))
                .collect();
            grad_list.extend(hv.map(|v| grads.take(v)));
            if !value.is_finite() || !grad_list.iter().all(DenseArray::is_finite) {
                return Err(Error::Numerical(format!(
                    "fine-tune loss {value} at step {step}, epoch {epoch}, batch {batch:?}"
                )));
            }
            let mut targets: Vec<&mut DenseArray> = params
                .values_mut()
                .into_iter()
                .zip(&scales)
                .filter(|(_, s)| s.is_some())
                .map(|(a, _)| a)
                .collect();
            targets.extend(head.arrays_mut());
            let grad_refs: Vec<&DenseArray> = grad_list.iter().collect();
            optimizer.step(&mut targets, &grad_refs, lr_at(step, &schedule)?, Some(&lr_scale))?;
            epoch_loss += value * batch.len() as f64;
            step += 1;
        }
        record.push(epoch, "train", "loss", epoch_loss / n as f64);
        let pred = evaluate(&params, &head, arch, &test_views)?;
        let correct = pred.iter().zip(&test_y).filter(|(p, y)| p == y).count();
        record.push(epoch, "test", "accuracy", correct as f64 / test_y.len() as f64);
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(FinetuneOutcome {
        test_accuracy: record.last("test", "accuracy").expect("at least one epoch"),
        record,
        params,
        head,
    })
}
