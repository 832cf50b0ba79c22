use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{test_view, Corpus, SkeletonSequence};
use crate::error::{Error, Result};
use crate::harness::config::{config_hash, LinearProbeConfig};
use crate::harness::pretrain::check_sequences;
use crate::harness::record::RunRecord;
use crate::harness::rng::{derive_rng, Purpose};
use crate::model::{bind_params, encode_pooled, init_params, input_tokens, Checkpoint};
use crate::numerics::{lr_at, DenseArray, ScheduleConfig, SgdMomentum, Tape};

const ENCODE_CHUNK: usize = 32;

/// Freshly initialized network with the checkpoint's architecture, used as
/// the untrained baseline.
pub fn random_init_checkpoint(arch: &crate::model::ArchConfig, seed: u64) -> Checkpoint {
    Checkpoint {
        arch: arch.clone(),
        seed,
        step: 0,
        params: init_params(arch, seed),
        optimizer: None,
    }
}

/// Pooled encoder features for a batch of `T_s × V × C_s` views, one row per
/// view (`N × C_e`). No token is masked and dropout is off.
pub fn encode_views(ck: &Checkpoint, views: &[DenseArray]) -> Result<DenseArray> {
    let arch = &ck.arch;
    let mut data = Vec::with_capacity(views.len() * arch.embed_dim);
    for chunk in views.chunks(ENCODE_CHUNK) {
        let inputs = chunk.iter().map(|v| input_tokens(v, arch)).collect::<Result<Vec<_>>>()?;
        let tape = Tape::new();
        let vars = bind_params(&tape, &ck.params, |_| false);
        let pooled = encode_pooled(&tape, &vars, arch, &inputs, None)?;
        data.extend_from_slice(pooled.value().data());
    }
    DenseArray::new(vec![views.len(), arch.embed_dim], data)
}

/// Pooled encoder feature vector (`C_e`) of one view.
pub fn encode_features(ck: &Checkpoint, view: &DenseArray) -> Result<Vec<f64>> {
    Ok(encode_views(ck, std::slice::from_ref(view))?.into_data())
}

/// Probe result; `record` holds per-epoch train loss and test accuracy.
#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub record: RunRecord,
}

pub(crate) fn labels_of(seqs: &[SkeletonSequence]) -> Result<Vec<usize>> {
    seqs.iter()
        .map(|s| s.label.ok_or_else(|| Error::Data(format!("{}: sequence has no label", s.id))))
        .collect()
}

pub(crate) fn check_labeled(corpus: &Corpus) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let train_y = labels_of(&corpus.train)?;
    let test_y = labels_of(&corpus.test)?;
    if test_y.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let mut present = train_y.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Data(format!(
            "classifier needs at least 2 classes in the training set, found {}",
            present.len()
        )));
    }
    Ok((train_y, test_y, corpus.num_classes()))
}

fn features(ck: &Checkpoint, seqs: &[SkeletonSequence]) -> Result<DenseArray> {
    let views = seqs
        .iter()
        .map(|s| test_view(&s.frames, ck.arch.frames))
        .collect::<Result<Vec<_>>>()?;
    encode_views(ck, &views)
}

/// Rescales columns to zero mean and unit variance using `train` statistics.
fn standardize(train: &mut DenseArray, test: &mut DenseArray) {
    let (n, d) = train.dims2();
    for j in 0..d {
        let mean = (0..n).map(|i| train.data()[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (train.data()[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var.sqrt() + 1e-6);
        for a in [&mut *train, &mut *test] {
            let rows = a.dims2().0;
            for i in 0..rows {
                let x = &mut a.data_mut()[i * d + j];
                *x = (*x - mean) * inv;
            }
        }
    }
}

/// Trains a linear probe on the frozen encoder's pooled features and
/// reports top-1 test accuracy. The checkpoint is only read.
pub fn linear_probe(ck: &Checkpoint, corpus: &Corpus, cfg: &LinearProbeConfig) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let corpus = corpus.label_subset(cfg.label_fraction, cfg.seed)?;
    let (train_y, test_y, classes) = check_labeled(&corpus)?;
    check_sequences(&corpus.train, &ck.arch)?;
    check_sequences(&corpus.test, &ck.arch)?;
    let started = Instant::now();
    let mut train_x = features(ck, &corpus.train)?;
    let mut test_x = features(ck, &corpus.test)?;
    standardize(&mut train_x, &mut test_x);
    let mut out = train_linear_classifier(&train_x, &train_y, &test_x, &test_y, classes, cfg)?;
    out.record.config_hash = config_hash(&(cfg, ck.params.digest()));
    out.record.provenance = RunRecord::new(out.record.config_hash.clone()).provenance;
    out.record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(out)
}

fn predict(x: &DenseArray, w: &DenseArray, b: &DenseArray) -> Vec<usize> {
    let (n, d) = x.dims2();
    let k = b.len();
    (0..n)
        .map(|i| {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..k {
                let z = b.data()[c] + (0..d).map(|j| x.data()[i * d + j] * w.data()[j * k + c]).sum::<f64>();
                if z > best.1 {
                    best = (c, z);
                }
            }
            best.0
        })
        .collect()
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Softmax cross-entropy linear classifier trained by minibatch SGD with
/// momentum and cosine decay to zero, on precomputed `N × D` features.
pub fn train_linear_classifier(
    train_x: &DenseArray,
    train_y: &[usize],
    test_x: &DenseArray,
    test_y: &[usize],
    num_classes: usize,
    cfg: &LinearProbeConfig,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let (n, d) = train_x.dims2();
    if n != train_y.len() || test_x.dims2() != (test_y.len(), d) {
        return Err(Error::Shape("feature rows do not match labels".into()));
    }
    if num_classes < 2 || train_y.iter().chain(test_y).any(|&y| y >= num_classes) {
        return Err(Error::Data(format!("labels must lie in 0..{num_classes} with at least 2 classes")));
    }
    let schedule = ScheduleConfig {
        warmup_epochs: 0,
        total_epochs: cfg.epochs,
        steps_per_epoch: n.div_ceil(cfg.batch_size),
        peak_lr: cfg.lr,
        floor_lr: 0.0,
    };
    let mut w = DenseArray::zeros(vec![d, num_classes]);
    let mut b = DenseArray::zeros(vec![num_classes]);
    let mut opt = SgdMomentum::new(cfg.momentum, [w.shape(), b.shape()]);
    let mut record = RunRecord::new(config_hash(cfg));
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(cfg.seed, Purpose::ProbeShuffle, &[epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = DenseArray::from_fn(vec![batch.len(), d], |k| train_x.data()[batch[k / d] * d + k % d]);
            let yb: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let tape = Tape::new();
            let (wv, bv) = (tape.param(w.clone()), tape.param(b.clone()));
            let loss = tape.constant(xb).matmul(wv)?.add_row(bv)?.cross_entropy(&yb)?;
            epoch_loss += loss.value().item() * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let mut gw = grads.take(wv);
            let gb = grads.take(bv);
            if cfg.weight_decay > 0.0 {
                gw = gw.zip_map(&w, |g, p| g + cfg.weight_decay * p)?;
            }
            opt.step(&mut [&mut w, &mut b], &[&gw, &gb], lr_at(step, &schedule)?)?;
            step += 1;
        }
        let epoch_loss = epoch_loss / n as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Numerical(format!("probe loss {epoch_loss} at epoch {epoch}")));
        }
        record.push(epoch, "train", "loss", epoch_loss);
        record.push(epoch, "test", "accuracy", accuracy(&predict(test_x, &w, &b), test_y));
    }
    let train_accuracy = accuracy(&predict(train_x, &w, &b), train_y);
    let test_accuracy = record.last("test", "accuracy").expect("at least one epoch");
    record.push(cfg.epochs, "train", "accuracy", train_accuracy);
    Ok(ProbeOutcome {
        test_accuracy,
        train_accuracy,
        record,
    })
}
