//! Desk-scale benchmark substrate: a micro transformer over the same
//! seven-matrices-per-layer taxonomy, a procedural corpus, query
//! perturbation, per-sample gradient extraction and the end-to-end run.

mod bench;
pub mod corpus;
pub mod model;
pub mod train;

pub use bench::{
    extract_gradients, noise_gradients, run_benchmark, run_benchmark_with, BenchConfig, GradientSource, Setting, STAGES,
};
pub use corpus::{from_corpus, generate_corpus, perturb_sample, to_corpus, PerturbMode, ToySample, ToyVocab};
pub use model::{MicroModelConfig, Params, TokenSequence};
pub use train::{corpus_loss, finite_difference_check, train_micro_model, GradCheck, TrainConfig};
