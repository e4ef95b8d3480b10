//! Geo-anchored prior extraction and token-wise modulation for a toy
//! SAR image-text model, with a two-stage training loop and a four-task
//! evaluation harness.
//!
//! The pipeline, end to end:
//!
//! 1. [`geo`] — anchor a regular grid of points over a geographic box and
//!    pull one 64-dim embedding per anchor from a per-year raster store.
//! 2. [`tlm`] — turn those anchor embeddings into per-token scale/shift
//!    modulation over an image token grid, with exact analytic gradients.
//! 3. [`sft`] — a small vision-language model wired through the modulation,
//!    trained in two decoupled stages (modulation MLP first, then low-rank
//!    head adapters).
//! 4. [`eval`] — counting, localization, classification, and detection
//!    metrics over prediction records.
//! 5. [`dataset`] — triplet records on disk, plain PGM images, and a
//!    synthetic scene generator whose labels live only in the embedding
//!    field.
//!
//! Every random draw comes from a seeded ChaCha20 stream and every file
//! format is fixed-layout, so identical inputs produce identical bytes.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --example anchor_extraction
//! cargo run --example tlm_fusion
//! cargo run --example gradient_check
//! cargo run --example synthetic_data
//! cargo run --example two_stage_training
//! cargo run --example evaluation_harness
//! ```

pub mod dataset;
pub mod eval;
pub mod geo;
pub mod sft;
pub mod tensor;
pub mod tlm;
