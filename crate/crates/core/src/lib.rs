//! Unified multi-entity, multi-domain top-k matching.
//!
//! Data flows `synthdata` → `encoder` → `backbone` (+ `rrl` auxiliary losses)
//! → `trainer`; `retrieval` and `harness` consume trained models.

pub mod backbone;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod rrl;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
