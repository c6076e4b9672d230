//! Feature files, dataset manifests and synthetic task generators.

mod dataset;
pub mod synth;
pub mod tensor_file;

pub use dataset::{
    Captions, Dataset, InputDims, Question, Sample, Split, TaskKind, Video, MANIFEST_FILE,
    TENSOR_DIR,
};
pub use synth::{
    gen_choice_task, gen_count_task, gen_word_task, generate_task, SizeRanges, SynthConfig,
};
pub use tensor_file::{read_tensor, write_tensor, Precision};
