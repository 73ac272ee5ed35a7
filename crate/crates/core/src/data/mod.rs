//! Samples, the synthetic scene generator, tiling and on-disk datasets.

mod io;
mod synth;
mod tiling;

pub use io::{load_dataset, load_manifest, save_dataset, save_sample, Manifest, Split, MANIFEST};
pub use synth::{generate_dataset, generate_scene, DatasetConfig, SceneConfig};
pub use tiling::{resize_bilinear, resize_nearest, tile_and_resize};

use crate::raster::{Image, Mask};

/// Class names of the built-in palette, indexed by class id.
pub const CLASS_NAMES: [&str; 6] = [
    "surface",
    "building",
    "low_vegetation",
    "tree",
    "car",
    "clutter",
];

pub const SURFACE: u8 = 0;
pub const BUILDING: u8 = 1;
pub const LOW_VEGETATION: u8 = 2;
pub const TREE: u8 = 3;
pub const CAR: u8 = 4;
pub const CLUTTER: u8 = 5;

/// One labelled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}
