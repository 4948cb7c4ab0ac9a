//! Feature files, manifests, vocabulary, stream alignment, and the
//! synthetic dataset generator.

pub mod align;
pub mod feature;
pub mod manifest;
pub mod synth;
pub mod vocab;

pub use align::{pad_and_assemble, resample_indices, resample_to_clock, AlignedSample, ModalProjection, Projections};
pub use feature::{read_feature_file, write_feature_file};
pub use manifest::{load_sample, read_manifest, write_manifest, LoadedSample, SampleRecord};
pub use synth::{gen_redundant_variant, gen_synthetic_dataset, SynthProfile};
pub use vocab::{tokenize, Vocab, DELIM_ID, PAD_ID, STOP_ID, UNK_ID};
