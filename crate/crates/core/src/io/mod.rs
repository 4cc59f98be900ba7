//! File formats: PLY point tables, the binary map archive, TUM
//! trajectories and evaluation references.

pub mod archive;
pub mod ply;
pub mod reference;
pub mod tum;

pub use archive::{export_map, export_ply, import_map};
pub use ply::{ScalarType, VertexTable};
pub use reference::{load_surface, save_surface, ClassEmbeddings};
pub use tum::{read_tum, write_tum};
