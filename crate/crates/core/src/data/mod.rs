//! Corpus ingestion, vocabulary, packing, corruption objectives and
//! language up-sampling.

pub mod corpus;
pub mod noise;
pub mod pack;
pub mod sampling;
pub mod synthetic;
pub mod vocab;

pub use corpus::{
    parse_records, read_corpus, ClassificationRecord, CorpusRecord, GenerationRecord,
    LabelingRecord,
};
pub use noise::{
    apply_selection, denoise_corrupt, mlm_corrupt, DenoiseExample, MlmExample, MlmSplits,
    NoiseConfig, NoiseMode,
};
pub use pack::{pack_documents, padding_fraction, unpack, Document, PackedSequence};
pub use sampling::{upsample_weights, SamplingPolicy};
pub use vocab::{Encoded, Vocab, BOS, DOC, EOS, MASK, NUM_SPECIALS, PAD, UNK};

/// Seed for item `index` of a named random stream, independent of how work
/// is split or ordered.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
