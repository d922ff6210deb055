//! The vanilla policy: a small causal transformer, its training loop,
//! sampling, and an n-gram reference model for perplexity.

mod model;
mod ngram;
mod record;
mod sample;
mod train;

pub use model::{log_softmax, softmax, DecodeState, ForwardStates, LmConfig, TransformerLm, CHECKPOINT_KIND, LN_EPS};
pub(crate) use model::random_tensor;
#[cfg(test)]
pub(crate) use model::normal;
pub use ngram::{perplexity, train_ngram, NGramLm};
pub use record::{read_records, write_records, GenerationMode, GenerationRecord, IdeologyTag};
pub(crate) use sample::check_budget;
pub use sample::{generate_vanilla, sample_top_k, DecodeConfig, StepSampler};
pub use train::{train_lm, LmTrainConfig, LmTrainReport};
