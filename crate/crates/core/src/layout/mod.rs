//! Layout data model, corpus I/O, reading order, rasterization and synthesis.

pub mod corpus;
pub mod order;
pub mod perturb;
pub mod raster;
pub mod synth;
pub mod types;

pub use corpus::{corpus_hash, load_corpus, save_corpus, FilterRules, LoadReport};
pub use order::{reading_order, DEFAULT_BAND_TOLERANCE};
pub use perturb::{perturb_fake, DEFAULT_FAKE_MAGNITUDE};
pub use raster::{rasterize, rasterize_batch, DEFAULT_RASTER_RES};
pub use synth::{synth_grammar, Profile};
pub use types::{
    bbox_problem, clamp_bbox, BBox, Canvas, CategoryVocabulary, Layout, LayoutObject, WireLayout,
    WireObject, BBOX_EPS, DEFAULT_MAX_OBJECTS,
};
