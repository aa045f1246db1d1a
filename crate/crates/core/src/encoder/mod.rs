//! Token vocabulary, the trainable toy encoder, and file-backed hidden states.

mod hidden;
pub mod hidden_file;
pub mod transformer;
pub mod vocab;

pub use hidden::{HiddenSourceTag, HiddenStates};
pub use hidden_file::{load_hidden_states, write_container, HiddenStateFile};
pub use transformer::{Encoder, EncoderConfig};
pub use vocab::{Tokenized, Vocabulary};
