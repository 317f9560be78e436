//! ShapesWorld: procedural scenes with captions, exact masks and the four
//! condition extractors.

pub mod dataset;
pub mod extract;
pub mod render;
pub mod scene;

pub use dataset::{Dataset, DatasetConfig, DatasetManifest, Example};
pub use extract::{make_color_palette, make_depth, make_segmentation, make_sketch, SEG_COLORS, SKETCH_THRESHOLD};
pub use render::{render_scene, RenderedScene};
pub use scene::{Background, Cell, ObjectColor, Primitive, SceneSpec, ShapeKind, SizeClass, Style};
