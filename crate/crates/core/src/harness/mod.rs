//! Pre-training loop, frozen and fine-tuned evaluation, ablation sweeps and
//! run records.

mod ablation;
mod config;
mod finetune;
mod probe;
mod pretrain;
mod record;
pub mod rng;

pub use ablation::{ablation_settings, ABLATION_HEADER, run_ablation_suite, AblationAxis, AblationConfig, AblationRow, AblationTable};
pub use config::{
    config_hash, load_yaml, parse_yaml, EvalConfig, FinetuneConfig, LinearProbeConfig, MaskingStrategy, Pooling,
    PretrainConfig,
};
pub use finetune::{finetune, layer_lr_scale, ClassifierHead, FinetuneOutcome};
pub use probe::{
    encode_features, encode_views, linear_probe, random_init_checkpoint, train_linear_classifier, ProbeOutcome,
};
pub use pretrain::{fixed_samples, pretrain, pretrain_sample, PretrainOutcome, Trainer};
pub use record::{MetricRow, RunRecord, METRICS_HEADER};
