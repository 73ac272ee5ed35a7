//! Ground-truth patch grids and the per-class positive/negative selection rule.
//!
//! For every backbone stage the label mask is cut into non-overlapping
//! squares of the stage's patch size. A patch is a positive for class `c`
//! when every one of its pixels is `c`; it is a negative for `c` when no
//! pixel is `c`. Everything else (mixed patches containing `c`) is unused.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, IGNORE_LABEL};

/// Pixel side of a patch at each of the four stages.
pub const DEFAULT_PATCH_SIZES: [usize; 4] = [4, 8, 16, 32];

/// Geometry of one backbone stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// 1-based stage index.
    pub stage: usize,
    pub patch_px: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl StageSpec {
    pub fn new(stage: usize, patch_px: usize, height: usize, width: usize) -> Result<Self> {
        if patch_px == 0 || height % patch_px != 0 || width % patch_px != 0 {
            return Err(Error::op(
                "stage_spec",
                format!("stage {stage}: patch size {patch_px} does not divide {height}x{width}"),
            ));
        }
        Ok(Self {
            stage,
            patch_px,
            grid_h: height / patch_px,
            grid_w: width / patch_px,
        })
    }

    /// Stage specs for the given patch sizes, numbered from 1.
    pub fn hierarchy(height: usize, width: usize, patch_sizes: &[usize]) -> Result<Vec<Self>> {
        patch_sizes
            .iter()
            .enumerate()
            .map(|(i, &p)| Self::new(i + 1, p, height, width))
            .collect()
    }

    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn flat(&self, row: usize, col: usize) -> usize {
        row * self.grid_w + col
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.grid_w, index % self.grid_w)
    }
}

/// Total patch count over all stages of a square image.
pub fn total_patches(image_side: usize, patch_sizes: &[usize]) -> Result<usize> {
    Ok(StageSpec::hierarchy(image_side, image_side, patch_sizes)?
        .iter()
        .map(StageSpec::patches)
        .sum())
}

/// 256-bit set of class ids.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ClassSet([u64; 4]);

impl ClassSet {
    pub fn insert(&mut self, c: u8) {
        self.0[(c >> 6) as usize] |= 1 << (c & 63);
    }

    pub fn contains(&self, c: u8) -> bool {
        self.0[(c >> 6) as usize] & (1 << (c & 63)) != 0
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    pub fn union(&self, other: &ClassSet) -> ClassSet {
        let mut out = *self;
        for (a, b) in out.0.iter_mut().zip(other.0) {
            *a |= b;
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0..=255u8).filter(move |&c| self.contains(c))
    }
}

impl fmt::Debug for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl FromIterator<u8> for ClassSet {
    fn from_iter<I: IntoIterator<Item = u8>>(iter: I) -> Self {
        let mut s = ClassSet::default();
        iter.into_iter().for_each(|c| s.insert(c));
        s
    }
}

/// Summary of the label pixels under one patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PatchEntry {
    /// Classes present (ignore label excluded).
    pub classes: ClassSet,
    /// Set iff every pixel carries the same non-ignore class.
    pub homogeneous: Option<u8>,
}

/// Per-stage grid of patch summaries, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLabelGrid {
    pub stage: StageSpec,
    pub entries: Vec<PatchEntry>,
}

impl PatchLabelGrid {
    pub fn entry(&self, row: usize, col: usize) -> &PatchEntry {
        &self.entries[self.stage.flat(row, col)]
    }

    /// Union of classes present over all patches.
    pub fn classes(&self) -> ClassSet {
        self.entries
            .iter()
            .fold(ClassSet::default(), |acc, e| acc.union(&e.classes))
    }
}

fn build_grid(mask: &Mask, spec: StageSpec) -> Result<PatchLabelGrid> {
    if spec.grid_h * spec.patch_px != mask.height || spec.grid_w * spec.patch_px != mask.width {
        return Err(Error::op(
            "build_patch_grids",
            format!(
                "stage {}: {}x{} patches of {} px do not tile a {}x{} mask",
                spec.stage, spec.grid_h, spec.grid_w, spec.patch_px, mask.height, mask.width
            ),
        ));
    }
    let p = spec.patch_px;
    let mut entries = Vec::with_capacity(spec.patches());
    for gi in 0..spec.grid_h {
        for gj in 0..spec.grid_w {
            let mut classes = ClassSet::default();
            let mut ignored = false;
            for y in gi * p..(gi + 1) * p {
                for &c in &mask.data[y * mask.width + gj * p..y * mask.width + (gj + 1) * p] {
                    if c == IGNORE_LABEL {
                        ignored = true;
                    } else {
                        classes.insert(c);
                    }
                }
            }
            let homogeneous = match (ignored, classes.len()) {
                (false, 1) => classes.iter().next(),
                _ => None,
            };
            entries.push(PatchEntry {
                classes,
                homogeneous,
            });
        }
    }
    Ok(PatchLabelGrid {
        stage: spec,
        entries,
    })
}

/// One ground-truth patch grid per stage.
pub fn build_patch_grids(mask: &Mask, specs: &[StageSpec]) -> Result<Vec<PatchLabelGrid>> {
    specs.iter().map(|&s| build_grid(mask, s)).collect()
}

/// Flat indices of patches whose pixels are all class `c`.
pub fn positive_indices(grid: &PatchLabelGrid, c: u8) -> Vec<usize> {
    grid.entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.homogeneous == Some(c))
        .map(|(i, _)| i)
        .collect()
}

/// Flat indices of patches containing no pixel of class `c`.
pub fn negative_indices(grid: &PatchLabelGrid, c: u8) -> Vec<usize> {
    grid.entries
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.classes.contains(c))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toy() -> Mask {
        Mask::from_rows(&[&[1, 1, 2, 2], &[1, 1, 2, 2], &[3, 3, 3, 3], &[3, 3, 3, 3]]).unwrap()
    }

    fn toy_grid() -> PatchLabelGrid {
        let spec = StageSpec::new(1, 2, 4, 4).unwrap();
        build_patch_grids(&toy(), &[spec]).unwrap().remove(0)
    }

    fn coords(grid: &PatchLabelGrid, idx: &[usize]) -> Vec<(usize, usize)> {
        idx.iter().map(|&i| grid.stage.coords(i)).collect()
    }

    #[test]
    fn full_size_patch_count() {
        let specs = StageSpec::hierarchy(512, 512, &DEFAULT_PATCH_SIZES).unwrap();
        let sides: Vec<_> = specs.iter().map(|s| s.grid_h).collect();
        assert_eq!(sides, vec![128, 64, 32, 16]);
        assert_eq!(total_patches(512, &DEFAULT_PATCH_SIZES).unwrap(), 21_760);
    }

    #[test]
    fn uniform_mask_is_homogeneous_everywhere() {
        let mask = Mask::filled(16, 16, 3);
        let specs = StageSpec::hierarchy(16, 16, &[4, 8]).unwrap();
        for grid in build_patch_grids(&mask, &specs).unwrap() {
            assert!(grid.entries.iter().all(|e| e.homogeneous == Some(3)));
            assert_eq!(positive_indices(&grid, 3).len(), grid.stage.patches());
            assert!(negative_indices(&grid, 3).is_empty());
            assert!(positive_indices(&grid, 0).is_empty());
        }
    }

    #[test]
    fn toy_grid_entries() {
        let grid = toy_grid();
        let hom: Vec<_> = grid.entries.iter().map(|e| e.homogeneous).collect();
        assert_eq!(hom, vec![Some(1), Some(2), Some(3), Some(3)]);
        assert_eq!(
            coords(&grid, &positive_indices(&grid, 3)),
            vec![(1, 0), (1, 1)]
        );
        assert_eq!(
            coords(&grid, &negative_indices(&grid, 1)),
            vec![(0, 1), (1, 0), (1, 1)]
        );
    }

    #[test]
    fn non_dividing_patch_size_names_stage() {
        let err = StageSpec::hierarchy(20, 20, &[4, 8])
            .unwrap_err()
            .to_string();
        assert!(err.contains("stage 2") && err.contains("20x20"), "{err}");
        let spec = StageSpec::new(1, 4, 16, 16).unwrap();
        assert!(build_patch_grids(&Mask::filled(8, 8, 0), &[spec]).is_err());
    }

    #[test]
    fn ignore_pixels_block_positives_and_presence() {
        let mut mask = Mask::filled(4, 4, 2);
        mask.set(0, 0, IGNORE_LABEL);
        let spec = StageSpec::new(1, 2, 4, 4).unwrap();
        let grid = build_patch_grids(&mask, &[spec]).unwrap().remove(0);
        assert_eq!(grid.entries[0].homogeneous, None);
        assert_eq!(grid.entries[0].classes.iter().collect::<Vec<_>>(), vec![2]);
        assert_eq!(positive_indices(&grid, 2), vec![1, 2, 3]);
    }

    #[test]
    fn sub_patch_class_is_never_positive() {
        // 3x3 blobs of class 4 placed across patch boundaries and inside patches
        let mut mask = Mask::filled(16, 16, 0);
        for &(y, x) in &[(1, 1), (6, 9), (12, 3)] {
            for dy in 0..3 {
                for dx in 0..3 {
                    mask.set(y + dy, x + dx, 4);
                }
            }
        }
        let specs = StageSpec::hierarchy(16, 16, &[4, 8, 16]).unwrap();
        for grid in build_patch_grids(&mask, &specs).unwrap() {
            assert!(positive_indices(&grid, 4).is_empty());
            assert!(grid.classes().contains(4));
        }
    }

    fn mask_strategy() -> impl Strategy<Value = Mask> {
        (1usize..=4, 2u8..=6).prop_flat_map(|(k, classes)| {
            let side = 4 * k;
            prop::collection::vec(0..classes, side * side)
                .prop_map(move |data| Mask::new(side, side, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn selection_invariants(mask in mask_strategy()) {
            let specs = StageSpec::hierarchy(mask.height, mask.width, &[1, 2, 4]).unwrap();
            let grids = build_patch_grids(&mask, &specs).unwrap();
            for grid in &grids {
                let mut owner = vec![None; grid.entries.len()];
                for c in 0..6u8 {
                    let pos = positive_indices(grid, c);
                    let neg = negative_indices(grid, c);
                    prop_assert!(pos.iter().all(|i| !neg.contains(i)));
                    for i in pos {
                        prop_assert!(owner[i].is_none());
                        owner[i] = Some(c);
                    }
                }
                prop_assert_eq!(grid.classes(), mask.classes().into_iter().collect::<ClassSet>());
                for e in &grid.entries {
                    prop_assert_eq!(e.homogeneous.is_some(), e.classes.len() == 1);
                }
            }
            // coarse homogeneous patch implies all covered fine patches homogeneous
            for w in grids.windows(2) {
                let (fine, coarse) = (&w[0], &w[1]);
                let r = coarse.stage.patch_px / fine.stage.patch_px;
                for (ci, e) in coarse.entries.iter().enumerate() {
                    if let Some(c) = e.homogeneous {
                        let (gi, gj) = coarse.stage.coords(ci);
                        for fi in gi * r..(gi + 1) * r {
                            for fj in gj * r..(gj + 1) * r {
                                prop_assert_eq!(fine.entry(fi, fj).homogeneous, Some(c));
                            }
                        }
                    }
                }
            }
        }
    }
}
