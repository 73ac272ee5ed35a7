//! On-disk datasets: `images/<id>.png`, `masks/<id>.png` and `manifest.json`.
//!
//! Images are 8-bit RGB PNGs, masks 8-bit grayscale PNGs holding class ids.
//! The manifest lists the split ids and the class palette (name → id).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Sample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub palette: BTreeMap<String, u8>,
}

impl Manifest {
    /// Manifest with the built-in six-class palette.
    pub fn with_default_palette(train: Vec<String>, test: Vec<String>) -> Self {
        let palette = CLASS_NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), i as u8))
            .collect();
        Self {
            train,
            test,
            palette,
        }
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.png"))
}

fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("masks").join(format!("{id}.png"))
}

/// Reads `manifest.json`; a directory without one yields an empty manifest.
pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(Manifest::default());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        msg: e.to_string(),
    })
}

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let format = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format(e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

fn read_image(path: &Path) -> Result<Image> {
    let (info, buf) = decode(path)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let step = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("expected an RGB image, found {other:?}"),
            })
        }
    };
    let data = buf
        .chunks_exact(step)
        .flat_map(|px| px[..3].iter().map(|&v| f32::from(v) / 255.0))
        .collect();
    Image::new(h, w, data)
}

fn read_mask(path: &Path) -> Result<Mask> {
    let (info, buf) = decode(path)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "expected a single-channel mask, found {:?}",
                info.color_type
            ),
        });
    }
    Mask::new(info.height as usize, info.width as usize, buf)
}

fn encode(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    };
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(data).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

/// Writes one sample's image and mask under `dir`.
///
/// Pixel values are rounded to the nearest multiple of 1/255.
pub fn save_sample(dir: &Path, sample: &Sample) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let img = &sample.image;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode(
        &image_path(dir, &sample.id),
        img.width,
        img.height,
        png::ColorType::Rgb,
        &bytes,
    )?;
    let m = &sample.mask;
    encode(
        &mask_path(dir, &sample.id),
        m.width,
        m.height,
        png::ColorType::Grayscale,
        &m.data,
    )
}

/// Writes both splits and a manifest with the built-in palette.
pub fn save_dataset(dir: &Path, train: &[Sample], test: &[Sample]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in train.iter().chain(test) {
        save_sample(dir, s)?;
    }
    let ids = |xs: &[Sample]| xs.iter().map(|s| s.id.clone()).collect();
    let manifest = Manifest::with_default_palette(ids(train), ids(test));
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads one split in lexicographic id order.
pub fn load_dataset(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let manifest = load_manifest(dir)?;
    let mut ids = manifest.ids(split).to_vec();
    ids.sort();
    ids.dedup();
    let max_class = manifest.palette.values().copied().max();
    ids.into_iter()
        .map(|id| {
            let mpath = mask_path(dir, &id);
            if !mpath.exists() {
                return Err(Error::Dataset(format!(
                    "missing mask for `{id}` ({})",
                    mpath.display()
                )));
            }
            let image = read_image(&image_path(dir, &id))?;
            let mask = read_mask(&mpath)?;
            if (image.height, image.width) != (mask.height, mask.width) {
                return Err(Error::Dataset(format!(
                    "`{id}`: image {}x{} and mask {}x{} differ",
                    image.height, image.width, mask.height, mask.width
                )));
            }
            if let Some(max) = max_class {
                if let Some(&bad) = mask
                    .data
                    .iter()
                    .find(|&&c| c > max && c != crate::raster::IGNORE_LABEL)
                {
                    return Err(Error::Dataset(format!(
                        "`{id}`: class id {bad} not in palette"
                    )));
                }
            }
            Ok(Sample { id, image, mask })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};

    fn small() -> (Vec<Sample>, Vec<Sample>) {
        let mut cfg = DatasetConfig {
            train: 3,
            test: 2,
            ..DatasetConfig::default()
        };
        cfg.scene.image_side = 32;
        cfg.scene.building_size = [4, 10];
        generate_dataset(&cfg).unwrap()
    }

    #[test]
    fn empty_dir_gives_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path(), Split::Train).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = small();
        save_dataset(dir.path(), &train, &test).unwrap();
        assert_eq!(load_dataset(dir.path(), Split::Train).unwrap(), train);
        assert_eq!(load_dataset(dir.path(), Split::Test).unwrap(), test);
    }

    #[test]
    fn manifest_defines_split() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = small();
        for s in &train {
            save_sample(dir.path(), s).unwrap();
        }
        let m = Manifest::with_default_palette(
            vec![train[2].id.clone(), train[0].id.clone()],
            vec![train[1].id.clone()],
        );
        fs::write(
            dir.path().join(MANIFEST),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        let ids: Vec<String> = load_dataset(dir.path(), Split::Train)
            .unwrap()
            .into_iter()
            .map(|s| s.id)
            .collect();
        assert_eq!(ids, vec![train[0].id.clone(), train[2].id.clone()]);
    }

    #[test]
    fn missing_mask_names_id() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = small();
        save_dataset(dir.path(), &train, &test).unwrap();
        fs::remove_file(mask_path(dir.path(), &train[1].id)).unwrap();
        let err = load_dataset(dir.path(), Split::Train)
            .unwrap_err()
            .to_string();
        assert!(err.contains(&train[1].id), "{err}");
    }

    #[test]
    fn corrupt_png_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = small();
        save_dataset(dir.path(), &train, &test).unwrap();
        let p = image_path(dir.path(), &test[0].id);
        fs::write(&p, b"not a png at all").unwrap();
        let err = load_dataset(dir.path(), Split::Test)
            .unwrap_err()
            .to_string();
        assert!(err.contains(&p.display().to_string()), "{err}");
    }
}
