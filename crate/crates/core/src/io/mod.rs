//! File formats. Everything is little-endian and round-trips exactly;
//! readers reject malformed input with the byte offset (or line number) and
//! field named in the error.

mod bytes;
pub mod feature;
pub mod ivector;
pub mod manifest;
pub mod model_dir;
pub mod posterior;

pub use feature::{read_features, write_features};
pub use ivector::{
    read_ivectors_binary, read_ivectors_text, write_ivectors_binary, write_ivectors_text,
    IVectorEntry,
};
pub use manifest::{read_manifest, write_manifest, Manifest, ManifestEntry};
pub use model_dir::{read_model, write_model};
pub use posterior::{read_posteriors, read_posteriors_sparse, sparsify, write_posteriors};
