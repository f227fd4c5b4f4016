//! Toy-scale neural machine translation workbench.
//!
//! Four architecture families (deep pre-norm and wide Transformers, the
//! average-attention decoder and the deep-transition recurrent model), a
//! synthetic-data pipeline (back-translation, distillation, iterated in-domain
//! transfer), four finetuning regimes including minimum risk training, and
//! self-BLEU guided ensemble selection, all runnable on generated corpora.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model_zoo;
pub mod numerics;
pub mod pipeline;
pub mod text;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
