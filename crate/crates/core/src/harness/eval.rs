use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::raster::IGNORE_LABEL;
use crate::tensor::Parameters;

/// Pixel confusion counts, `counts[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    /// Adds one label map; ignored truth pixels are skipped.
    pub fn add(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::shape("confusion", &[truth.len()], &[pred.len()]));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::op(
                    "confusion",
                    format!("class id {} out of range", t.max(p)),
                ));
            }
            self.counts[t][p] += 1;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class is absent from
    /// both truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.counts[c][c];
                let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
                let fp: u64 = self.counts.iter().map(|row| row[c]).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

/// Per-class IoU and their mean over the defined classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Classes whose IoU is undefined and therefore left out of the mean.
    pub undefined: Vec<usize>,
}

impl Evaluation {
    pub fn from_confusion(conf: &Confusion) -> Self {
        let iou = conf.iou();
        let defined: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        let undefined = (0..iou.len()).filter(|&c| iou[c].is_none()).collect();
        Self {
            iou,
            miou,
            undefined,
        }
    }
}

/// Arg-max class per pixel of `[..., K]` logits.
pub fn argmax_labels(logits: &[f32], k: usize) -> Vec<u8> {
    logits
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// Predicts every test sample in batches and scores the result.
pub fn evaluate(
    model: &Model,
    params: &Parameters,
    test: &[Sample],
    batch_size: usize,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Dataset(
            "evaluation needs at least one test sample".into(),
        ));
    }
    let k = model.config().num_classes;
    let mut conf = Confusion::new(k);
    for chunk in test.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let logits = model.predict(params, &images)?;
        let pred = argmax_labels(logits.data(), k);
        let per = pred.len() / chunk.len();
        for (i, s) in chunk.iter().enumerate() {
            conf.add(&s.mask.data, &pred[i * per..(i + 1) * per])?;
        }
    }
    Ok(Evaluation::from_confusion(&conf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_two_by_two() {
        let mut c = Confusion::new(2);
        c.add(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let e = Evaluation::from_confusion(&c);
        assert_eq!(e.iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((e.miou - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_disjoint() {
        let truth = [0, 1, 2, 2, 1, 0];
        let mut c = Confusion::new(3);
        c.add(&truth, &truth).unwrap();
        let e = Evaluation::from_confusion(&c);
        assert!(e.iou.iter().all(|&v| v == Some(1.0)));
        let mut c = Confusion::new(3);
        c.add(&[2, 2, 0], &[0, 0, 0]).unwrap();
        assert_eq!(c.iou()[2], Some(0.0));
    }

    #[test]
    fn absent_class_is_undefined_and_excluded() {
        let mut c = Confusion::new(3);
        c.add(&[0, 1], &[0, 1]).unwrap();
        let e = Evaluation::from_confusion(&c);
        assert_eq!(e.undefined, vec![2]);
        assert_eq!(e.miou, 1.0);
    }

    #[test]
    fn ignore_pixels_do_not_count() {
        let mut c = Confusion::new(2);
        c.add(&[0, IGNORE_LABEL, 1], &[0, 0, 1]).unwrap();
        assert_eq!(c.iou(), vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn argmax_picks_first_maximum() {
        assert_eq!(
            argmax_labels(&[0.1, 0.5, 0.5, 2.0, -1.0, 0.0], 3),
            vec![1, 0]
        );
    }
}
