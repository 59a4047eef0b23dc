//! Multimodal samples, flexible-modal protocols, synthetic data and loaders.

mod ir;
mod loader;
mod protocol;
mod sample;
mod synth;

pub use ir::{ir_preprocess, preprocess_ir_planes, IrHook, IrPreprocess};
pub use loader::{
    load_directory_dataset, read_manifest, write_directory_dataset, LoadedSample, ManifestRow,
    MANIFEST_HEADER,
};
pub use protocol::{
    generate_protocol, subset_counts, ProtocolAssignment, ProtocolFile, ProtocolSetting,
    ProtocolSpec, SplitEcho, SubsetCounts,
};
pub use sample::{
    zero_fill, DenseInput, Label, Modality, ModalityAvailability, MultimodalSample, Plane,
};
pub use synth::synth_dataset;
