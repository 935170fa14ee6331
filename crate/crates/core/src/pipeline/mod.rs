//! Configuration, commands and reports for the end-to-end pipeline:
//! classifier, then masker, then generator, then rewriting, evaluation and
//! the augmentation experiment.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{
    augment, eval, eval_augmentation, gen_data, rewrite, sweep_lambda, train, Stage,
};
pub use config::{AugmentMethod, PipelineConfig};
