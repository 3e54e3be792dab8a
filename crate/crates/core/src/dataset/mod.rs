//! Dataset layout, decoding, splits and the synthetic generator.

pub mod image;
pub mod manifest;
pub mod split;
pub mod store;
pub mod synth;

pub use self::image::{decode_image, decode_image_bytes, encode_gray_png};
pub use manifest::{
    load_manifest, DatasetManifest, LogoRecord, SketchRecord, Split, Subset, SubsetCounts,
};
pub use split::{all_train, make_split, SplitMode};
pub use store::ImageStore;
pub use synth::{synth_generate, SynthConfig};
