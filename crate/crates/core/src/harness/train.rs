use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ContrastiveMode, ExperimentConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{
    cl_loss, dice_loss, info_nce, joint_loss, soft_cross_entropy, LossBreakdown, TermKey,
};
use crate::mining::{gather_candidates, mine_hard_negatives, mine_hard_positives, SampleSet};
use crate::model::Model;
use crate::patching::{build_patch_grids, ClassSet, PatchLabelGrid, StageSpec};
use crate::raster::IGNORE_LABEL;
use crate::tensor::{Graph, Parameters, Var};

/// Random stream ids derived from a run seed.
pub(crate) const DATA_STREAM: u64 = 1;
pub(crate) const MINING_STREAM: u64 = 2;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Candidate counts of one gathered (stage, class) set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SetLog {
    pub stage: usize,
    pub class: u8,
    pub positives: usize,
    pub negatives: usize,
    /// For each class id, how many of the negatives contain that class.
    pub negatives_containing: Vec<usize>,
}

/// Everything recorded about one optimizer step.
#[derive(Clone, Debug)]
pub struct StepLog {
    pub breakdown: LossBreakdown,
    pub grad_norm_pre: f32,
    pub grad_norm_post: f32,
    pub sets: Vec<SetLog>,
}

impl StepLog {
    pub fn clipped(&self, max_norm: f32) -> bool {
        self.grad_norm_pre > max_norm
    }
}

/// Contrastive terms of one batch plus the candidate sets they came from.
pub struct ContrastiveTerms {
    pub terms: Vec<(TermKey, Var)>,
    pub sets: Vec<SampleSet>,
}

fn collect_rows(flat: &[f32], n: usize, rows: &[usize]) -> Vec<Vec<f32>> {
    rows.iter()
        .map(|&r| flat[r * n..(r + 1) * n].to_vec())
        .collect()
}

/// Builds every contrastive term for one batch.
///
/// `projected[s]` is the (s+1)-th stage's `[B, g, g, n]` embedding map and
/// `grids[b][s]` the label grid of image `b` at that stage. A term exists for
/// each enabled stage and each class present in the batch at that stage,
/// unless mining leaves nothing to contrast.
pub fn contrastive_terms(
    g: &mut Graph<f32>,
    cfg: &ExperimentConfig,
    projected: &[Var],
    grids: &[Vec<PatchLabelGrid>],
    rng: &mut ChaCha8Rng,
) -> Result<ContrastiveTerms> {
    let mut terms = Vec::new();
    let mut sets = Vec::new();
    let batch = grids.len();
    for (s, &fmap) in projected.iter().enumerate() {
        if !cfg.stage_enable[s] {
            continue;
        }
        let shape = g.shape(fmap).to_vec();
        let n = shape[3];
        let per_image = shape[1] * shape[2];
        let flat = g.reshape(fmap, &[batch * per_image, n])?;
        let values = g.value(flat).data().to_vec();
        let stage_grids: Vec<&PatchLabelGrid> = grids.iter().map(|gs| &gs[s]).collect();
        let present = stage_grids
            .iter()
            .fold(ClassSet::default(), |acc, grid| acc.union(&grid.classes()));
        for class in present.iter().filter(|&c| c != IGNORE_LABEL) {
            let mut set = gather_candidates(&stage_grids, class, cfg.positive_cap, rng);
            set.negatives.truncate(cfg.negative_cap);
            let pos_rows: Vec<usize> = set.positives.iter().map(|p| p.row(per_image)).collect();
            let neg_rows: Vec<usize> = set.negatives.iter().map(|p| p.row(per_image)).collect();
            let pos_vecs = collect_rows(&values, n, &pos_rows);
            let neg_vecs = collect_rows(&values, n, &neg_rows);
            let pos_refs: Vec<&[f32]> = pos_vecs.iter().map(Vec::as_slice).collect();
            let neg_refs: Vec<&[f32]> = neg_vecs.iter().map(Vec::as_slice).collect();
            let hard_pos = mine_hard_positives(&pos_refs, rng);
            let hard_neg = mine_hard_negatives(&pos_refs, &neg_refs, cfg.pair_budget, rng);
            let key = TermKey {
                stage: s + 1,
                class,
            };
            let term = match cfg.contrastive_mode {
                ContrastiveMode::Off => None,
                ContrastiveMode::Cl => {
                    let mut u = Vec::new();
                    let mut v = Vec::new();
                    let mut targets = Vec::new();
                    for p in &hard_pos.kept {
                        u.push(pos_rows[p.first]);
                        v.push(pos_rows[p.second]);
                        targets.push(true);
                    }
                    for p in &hard_neg.kept {
                        u.push(pos_rows[p.first]);
                        v.push(neg_rows[p.second]);
                        targets.push(false);
                    }
                    if targets.is_empty() {
                        None
                    } else {
                        let u = g.gather(flat, &u)?;
                        let v = g.gather(flat, &v)?;
                        cl_loss(g, u, v, &targets, cfg.smoothing)?
                    }
                }
                ContrastiveMode::Infonce => {
                    let mut negs: Vec<usize> = Vec::new();
                    for p in &hard_neg.kept {
                        if !negs.contains(&neg_rows[p.second]) {
                            negs.push(neg_rows[p.second]);
                        }
                    }
                    if hard_pos.kept.is_empty() || negs.is_empty() {
                        None
                    } else {
                        let a: Vec<usize> =
                            hard_pos.kept.iter().map(|p| pos_rows[p.first]).collect();
                        let b: Vec<usize> =
                            hard_pos.kept.iter().map(|p| pos_rows[p.second]).collect();
                        let a = g.gather(flat, &a)?;
                        let b = g.gather(flat, &b)?;
                        let m = g.gather(flat, &negs)?;
                        info_nce(g, a, b, m, cfg.temperature)?
                    }
                }
            };
            if let Some(t) = term {
                terms.push((key, t));
            }
            sets.push(set);
        }
    }
    Ok(ContrastiveTerms { terms, sets })
}

/// One model, its parameters and the mining stream of a single seed.
pub struct Trainer {
    pub model: Model,
    pub params: Parameters,
    cfg: ExperimentConfig,
    specs: Vec<StageSpec>,
    mining_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = Model::new(cfg.model.clone(), seed)?;
        Ok(Self {
            specs: cfg.model.stage_specs()?,
            model,
            params,
            cfg: cfg.clone(),
            mining_rng: stream(seed, MINING_STREAM),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Forward, joint loss, backward, clip and one AdamW update.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepLog> {
        self.step_inner(batch).map_err(|e| Error::Step {
            batch: batch
                .iter()
                .map(|s| s.id.as_str())
                .collect::<Vec<_>>()
                .join(","),
            source: Box::new(e),
        })
    }

    fn step_inner(&mut self, batch: &[&Sample]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::op("train_step", "empty batch"));
        }
        let cfg = &self.cfg;
        let k = cfg.model.num_classes;
        let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
        let mut labels =
            Vec::with_capacity(batch.len() * cfg.model.image_side * cfg.model.image_side);
        for s in batch {
            labels.extend_from_slice(&s.mask.data);
        }

        let mut sess = self.params.session();
        let mut feats = self.model.backbone_forward(&mut sess, &images)?;
        let logits = self.model.decode(&mut sess, &feats)?;
        let g = &mut sess.graph;
        let ce = soft_cross_entropy(g, logits, &labels, cfg.smoothing)?;
        let probs = g.softmax(logits, 3)?;
        let dice = dice_loss(g, probs, &labels)?;

        let mut sets = Vec::new();
        let mut terms = Vec::new();
        if cfg.contrastive_mode != ContrastiveMode::Off {
            self.model.project(&mut sess, &mut feats)?;
            let grids = batch
                .iter()
                .map(|s| build_patch_grids(&s.mask, &self.specs))
                .collect::<Result<Vec<_>>>()?;
            let projected = feats.projected.as_ref().expect("projected after project()");
            let out = contrastive_terms(
                &mut sess.graph,
                cfg,
                projected,
                &grids,
                &mut self.mining_rng,
            )?;
            terms = out.terms;
            sets = out
                .sets
                .into_iter()
                .map(|set| {
                    let mut negatives_containing = vec![0; k];
                    for p in &set.negatives {
                        for c in grids[p.image][set.stage - 1].entries[p.index]
                            .classes
                            .iter()
                        {
                            if (c as usize) < k {
                                negatives_containing[c as usize] += 1;
                            }
                        }
                    }
                    SetLog {
                        stage: set.stage,
                        class: set.class,
                        positives: set.positives.len(),
                        negatives: set.negatives.len(),
                        negatives_containing,
                    }
                })
                .collect();
        }
        let joint = joint_loss(&mut sess.graph, ce, dice, &terms, cfg.contrastive_clip)?;
        if !joint.breakdown.total.is_finite() {
            return Err(Error::op(
                "train_step",
                format!("non-finite loss {}", joint.breakdown.total),
            ));
        }
        sess.backward(joint.total)?;
        let grads = sess.param_grads();
        drop(sess);
        self.params.accumulate(grads);
        let grad_norm_pre = self.params.clip_gradients(cfg.grad_clip);
        let grad_norm_post = self.params.grad_norm();
        if !grad_norm_pre.is_finite() {
            return Err(Error::op("train_step", "non-finite gradient norm"));
        }
        self.params.adamw_step(&cfg.optimizer)?;
        Ok(StepLog {
            breakdown: joint.breakdown,
            grad_norm_pre,
            grad_norm_post,
            sets,
        })
    }
}
