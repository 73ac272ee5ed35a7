//! Procedural aerial-like scenes.
//!
//! A noisy road-surface background is overpainted with low-vegetation
//! ellipses, tree crowns, rectangular roofs, thin clutter strips and finally
//! tiny car dots that only ever sit on free surface pixels. Every painted
//! pixel records its class in the mask. Pixel values are quantized to
//! multiples of 1/255 so that a PNG round trip is exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, BUILDING, CAR, CLUTTER, LOW_VEGETATION, SURFACE, TREE};
use crate::error::{Error, Result};
use crate::patching::DEFAULT_PATCH_SIZES;
use crate::raster::{Image, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_side: usize,
    /// Instance count ranges `[min, max]`, inclusive.
    pub buildings: [usize; 2],
    pub low_vegetation: [usize; 2],
    pub trees: [usize; 2],
    pub clutter: [usize; 2],
    pub cars: [usize; 2],
    /// Building side length range in pixels.
    pub building_size: [usize; 2],
    /// Low-vegetation ellipse semi-axis range in pixels.
    pub vegetation_radius: [usize; 2],
    pub tree_radius: [usize; 2],
    /// Clutter strip length range; strips are 1–2 px wide.
    pub clutter_length: [usize; 2],
    /// Car side length range in pixels; must stay below the finest patch size.
    pub car_size: [usize; 2],
    /// Per-pixel uniform noise amplitude.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            buildings: [1, 3],
            low_vegetation: [1, 3],
            trees: [1, 4],
            clutter: [0, 2],
            cars: [2, 6],
            building_size: [10, 22],
            vegetation_radius: [5, 12],
            tree_radius: [3, 6],
            clutter_length: [4, 10],
            car_size: [1, 3],
            noise: 0.04,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let finest = DEFAULT_PATCH_SIZES[0];
        if self.car_size[1] >= finest {
            return Err(Error::Config(format!(
                "scene.car_size max {} must be smaller than the finest patch size {finest} \
                 so that cars never fill a finest-stage patch",
                self.car_size[1]
            )));
        }
        let ranges = [
            ("buildings", self.buildings),
            ("low_vegetation", self.low_vegetation),
            ("trees", self.trees),
            ("clutter", self.clutter),
            ("cars", self.cars),
            ("building_size", self.building_size),
            ("vegetation_radius", self.vegetation_radius),
            ("tree_radius", self.tree_radius),
            ("clutter_length", self.clutter_length),
            ("car_size", self.car_size),
        ];
        for (name, [lo, hi]) in ranges {
            if lo > hi {
                return Err(Error::Config(format!(
                    "scene.{name} range [{lo}, {hi}] is inverted"
                )));
            }
        }
        if self.car_size[0] == 0 || self.building_size[0] == 0 || self.clutter_length[0] == 0 {
            return Err(Error::Config("scene sizes must be at least 1 px".into()));
        }
        if self.image_side < self.building_size[1] || self.image_side == 0 {
            return Err(Error::Config(format!(
                "scene.image_side {} smaller than the largest building",
                self.image_side
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!(
                "scene.noise {} outside [0, 0.5]",
                self.noise
            )));
        }
        Ok(())
    }
}

/// Sizes of the generated train/test splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub train: usize,
    pub test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            train: 512,
            test: 128,
        }
    }
}

fn span<R: Rng>(rng: &mut R, [lo, hi]: [usize; 2]) -> usize {
    rng.gen_range(lo..=hi)
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Canvas<'a, R> {
    rgb: Vec<[f32; 3]>,
    mask: Vec<u8>,
    side: usize,
    noise: f32,
    rng: &'a mut R,
}

impl<R: Rng> Canvas<'_, R> {
    fn jitter(&mut self, base: [f32; 3], amount: f32) -> [f32; 3] {
        let shift = self.rng.gen_range(-amount..=amount);
        base.map(|c| c + shift + self.rng.gen_range(-amount..=amount) * 0.5)
    }

    fn paint(&mut self, y: usize, x: usize, color: [f32; 3], class: u8) {
        let i = y * self.side + x;
        let n = self.noise;
        self.rgb[i] = color.map(|c| c + self.rng.gen_range(-n..=n));
        self.mask[i] = class;
    }

    fn rect(&mut self, y0: usize, x0: usize, h: usize, w: usize, color: [f32; 3], class: u8) {
        for y in y0..(y0 + h).min(self.side) {
            for x in x0..(x0 + w).min(self.side) {
                self.paint(y, x, color, class);
            }
        }
    }

    fn ellipse(&mut self, cy: f32, cx: f32, ry: f32, rx: f32, color: [f32; 3], class: u8) {
        for y in 0..self.side {
            for x in 0..self.side {
                let dy = (y as f32 + 0.5 - cy) / ry;
                let dx = (x as f32 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    self.paint(y, x, color, class);
                }
            }
        }
    }

    /// True when the box and a 1-px ring around it contain no car, and the
    /// box itself is all surface.
    fn car_fits(&self, y0: usize, x0: usize, h: usize, w: usize) -> bool {
        let side = self.side as isize;
        for y in y0 as isize - 1..=(y0 + h) as isize {
            for x in x0 as isize - 1..=(x0 + w) as isize {
                if y < 0 || x < 0 || y >= side || x >= side {
                    continue;
                }
                let c = self.mask[y as usize * self.side + x as usize];
                let inside = y >= y0 as isize
                    && y < (y0 + h) as isize
                    && x >= x0 as isize
                    && x < (x0 + w) as isize;
                if c == CAR || (inside && c != SURFACE) {
                    return false;
                }
            }
        }
        true
    }
}

const ROOFS: [[f32; 3]; 3] = [[0.72, 0.33, 0.28], [0.62, 0.6, 0.68], [0.5, 0.3, 0.25]];
const CARS: [[f32; 3]; 4] = [
    [0.95, 0.95, 0.95],
    [0.12, 0.2, 0.8],
    [0.85, 0.12, 0.1],
    [0.06, 0.06, 0.08],
];

/// Draws one scene from `rng`.
pub fn generate_scene<R: Rng>(
    cfg: &SceneConfig,
    id: impl Into<String>,
    rng: &mut R,
) -> Result<Sample> {
    cfg.validate()?;
    let side = cfg.image_side;
    let mut canvas = Canvas {
        rgb: vec![[0.0; 3]; side * side],
        mask: vec![SURFACE; side * side],
        side,
        noise: cfg.noise,
        rng,
    };
    let surface = canvas.jitter([0.55, 0.55, 0.52], 0.05);
    for y in 0..side {
        for x in 0..side {
            canvas.paint(y, x, surface, SURFACE);
        }
    }
    let sidef = side as f32;
    for _ in 0..span(canvas.rng, cfg.low_vegetation) {
        let color = canvas.jitter([0.52, 0.64, 0.34], 0.05);
        let (cy, cx) = (
            canvas.rng.gen_range(0.0..sidef),
            canvas.rng.gen_range(0.0..sidef),
        );
        let ry = span(canvas.rng, cfg.vegetation_radius) as f32;
        let rx = span(canvas.rng, cfg.vegetation_radius) as f32;
        canvas.ellipse(cy, cx, ry, rx, color, LOW_VEGETATION);
    }
    for _ in 0..span(canvas.rng, cfg.trees) {
        let color = canvas.jitter([0.16, 0.38, 0.17], 0.04);
        let (cy, cx) = (
            canvas.rng.gen_range(0.0..sidef),
            canvas.rng.gen_range(0.0..sidef),
        );
        let r = span(canvas.rng, cfg.tree_radius) as f32;
        canvas.ellipse(cy, cx, r, r, color, TREE);
    }
    for _ in 0..span(canvas.rng, cfg.buildings) {
        let roof = ROOFS[canvas.rng.gen_range(0..ROOFS.len())];
        let color = canvas.jitter(roof, 0.05);
        let h = span(canvas.rng, cfg.building_size);
        let w = span(canvas.rng, cfg.building_size);
        let y0 = canvas.rng.gen_range(0..=side - h);
        let x0 = canvas.rng.gen_range(0..=side - w);
        canvas.rect(y0, x0, h, w, color, BUILDING);
    }
    for _ in 0..span(canvas.rng, cfg.clutter) {
        let color = canvas.jitter([0.85, 0.25, 0.6], 0.08);
        let len = span(canvas.rng, cfg.clutter_length).min(side);
        let thick = canvas.rng.gen_range(1..=2);
        let (h, w) = if canvas.rng.gen_bool(0.5) {
            (thick, len)
        } else {
            (len, thick)
        };
        let y0 = canvas.rng.gen_range(0..=side - h);
        let x0 = canvas.rng.gen_range(0..=side - w);
        canvas.rect(y0, x0, h, w, color, CLUTTER);
    }
    for _ in 0..span(canvas.rng, cfg.cars) {
        let body = CARS[canvas.rng.gen_range(0..CARS.len())];
        let color = canvas.jitter(body, 0.03);
        let h = span(canvas.rng, cfg.car_size);
        let w = span(canvas.rng, cfg.car_size);
        for _attempt in 0..20 {
            let y0 = canvas.rng.gen_range(0..=side - h);
            let x0 = canvas.rng.gen_range(0..=side - w);
            if canvas.car_fits(y0, x0, h, w) {
                canvas.rect(y0, x0, h, w, color, CAR);
                break;
            }
        }
    }
    let data = canvas.rgb.iter().flat_map(|p| p.map(quantize)).collect();
    Ok(Sample {
        id: id.into(),
        image: Image::new(side, side, data)?,
        mask: Mask::new(side, side, canvas.mask)?,
    })
}

/// Scene `index` of a dataset seeded with `seed`; each index owns its own
/// random stream, so scenes are independent of generation order.
fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates the train and test splits.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    cfg.scene.validate()?;
    let make = |prefix: &str, offset: usize, count: usize| -> Result<Vec<Sample>> {
        (0..count)
            .map(|i| {
                let mut rng = scene_rng(cfg.scene.seed, (offset + i) as u64);
                generate_scene(&cfg.scene, format!("{prefix}_{i:05}"), &mut rng)
            })
            .collect()
    };
    Ok((
        make("train", 0, cfg.train)?,
        make("test", cfg.train, cfg.test)?,
    ))
}
