//! Self-checks run by `ct check`: finite-difference gradient checks for every
//! differentiable op and loss, a brute-force oracle for patch selection and
//! candidate gathering, a full-sort oracle for mining, and the patch count of
//! a 512 px input.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    cl_loss, cosine_similarity, dice_loss, info_nce, joint_loss, soft_cross_entropy, TermKey,
};
use crate::mining::{gather_candidates, mine_hard_negatives, mine_hard_positives, PatchRef};
use crate::patching::{
    build_patch_grids, negative_indices, positive_indices, total_patches, StageSpec,
    DEFAULT_PATCH_SIZES,
};
use crate::raster::{Mask, IGNORE_LABEL};
use crate::tensor::{fd_gradient, relative_error, Graph, Tensor, Var};

/// Tolerance on the relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Random inputs drawn per gradient case.
pub const GRAD_TRIALS: usize = 10;
const FD_STEP: f64 = 1e-6;

/// Patch count of a 512 px square input over the four default stages.
pub const PATCHES_512: usize = 21_760;

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One random instance of a gradient case: inputs and a scalar-valued graph.
pub struct GradTrial {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

/// A named differentiable op (or loss) and a generator of random trials.
pub struct GradCase {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> GradTrial,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.outcomes {
            writeln!(f, "{o}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.outcomes.len(), failed)
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("shape matches")
}

fn signed(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, rng)
}

/// Reduces a tensor-valued op to a scalar with fixed random weights so that
/// every output element contributes a distinct gradient.
fn weighted(
    op: fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Build {
    let w = signed(out_shape, rng);
    Box::new(move |g, xs| {
        let y = op(g, xs)?;
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    })
}

fn unary(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    out: &[usize],
    op: fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> GradTrial {
    GradTrial {
        inputs: vec![signed(shape, rng)],
        build: weighted(op, out, rng),
    }
}

fn binary(
    rng: &mut ChaCha8Rng,
    a: &[usize],
    b: &[usize],
    op: fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> GradTrial {
    GradTrial {
        inputs: vec![signed(a, rng), signed(b, rng)],
        build: weighted(op, a, rng),
    }
}

fn labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.1) {
                IGNORE_LABEL
            } else {
                rng.gen_range(0..k as u8)
            }
        })
        .collect()
}

/// Every differentiable op and loss of the engine.
pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add",
            make: |r| binary(r, &[3, 4], &[3, 4], |g, x| g.add(x[0], x[1])),
        },
        GradCase {
            name: "add_broadcast",
            make: |r| binary(r, &[3, 4], &[4], |g, x| g.add(x[0], x[1])),
        },
        GradCase {
            name: "sub",
            make: |r| binary(r, &[2, 5], &[5], |g, x| g.sub(x[0], x[1])),
        },
        GradCase {
            name: "mul",
            make: |r| binary(r, &[3, 4], &[3, 4], |g, x| g.mul(x[0], x[1])),
        },
        GradCase {
            name: "mul_broadcast",
            make: |r| binary(r, &[2, 3, 4], &[4], |g, x| g.mul(x[0], x[1])),
        },
        GradCase {
            name: "div",
            make: |r| GradTrial {
                inputs: vec![signed(&[3, 4], r), uniform(&[4], 0.5, 2.0, r)],
                build: weighted(|g, x| g.div(x[0], x[1]), &[3, 4], r),
            },
        },
        GradCase {
            name: "scale",
            make: |r| unary(r, &[5], &[5], |g, x| Ok(g.scale(x[0], -1.7))),
        },
        GradCase {
            name: "add_scalar",
            make: |r| unary(r, &[5], &[5], |g, x| Ok(g.add_scalar(x[0], 0.3))),
        },
        GradCase {
            name: "matmul",
            make: |r| GradTrial {
                inputs: vec![signed(&[3, 5], r), signed(&[5, 2], r)],
                build: weighted(|g, x| g.matmul(x[0], x[1]), &[3, 2], r),
            },
        },
        GradCase {
            name: "bmm",
            make: |r| GradTrial {
                inputs: vec![signed(&[2, 3, 4], r), signed(&[2, 4, 2], r)],
                build: weighted(|g, x| g.bmm(x[0], x[1]), &[2, 3, 2], r),
            },
        },
        GradCase {
            name: "permute",
            make: |r| {
                unary(r, &[2, 3, 4], &[4, 2, 3], |g, x| {
                    g.permute(x[0], &[2, 0, 1])
                })
            },
        },
        GradCase {
            name: "transpose",
            make: |r| unary(r, &[3, 4], &[4, 3], |g, x| g.transpose(x[0])),
        },
        GradCase {
            name: "reshape",
            make: |r| unary(r, &[2, 6], &[3, 4], |g, x| g.reshape(x[0], &[3, 4])),
        },
        GradCase {
            name: "gelu",
            make: |r| unary(r, &[7], &[7], |g, x| Ok(g.gelu(x[0]))),
        },
        GradCase {
            name: "layer_norm",
            make: |r| GradTrial {
                inputs: vec![signed(&[3, 4], r), signed(&[4], r), signed(&[4], r)],
                build: weighted(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-5), &[3, 4], r),
            },
        },
        GradCase {
            name: "softmax",
            make: |r| unary(r, &[3, 4], &[3, 4], |g, x| g.softmax(x[0], 1)),
        },
        GradCase {
            name: "softmax_axis0",
            make: |r| unary(r, &[3, 4], &[3, 4], |g, x| g.softmax(x[0], 0)),
        },
        GradCase {
            name: "log_softmax",
            make: |r| unary(r, &[3, 4], &[3, 4], |g, x| g.log_softmax(x[0], 1)),
        },
        GradCase {
            name: "sum",
            make: |r| unary(r, &[3, 4], &[], |g, x| Ok(g.sum(x[0]))),
        },
        GradCase {
            name: "mean",
            make: |r| unary(r, &[3, 4], &[], |g, x| Ok(g.mean(x[0]))),
        },
        GradCase {
            name: "sum_axis",
            make: |r| unary(r, &[2, 3, 4], &[2, 4], |g, x| g.sum_axis(x[0], 1)),
        },
        GradCase {
            name: "mean_axis",
            make: |r| unary(r, &[2, 3, 4], &[2, 3], |g, x| g.mean_axis(x[0], 2)),
        },
        GradCase {
            name: "avg_pool2",
            make: |r| unary(r, &[1, 4, 4, 2], &[1, 2, 2, 2], |g, x| g.avg_pool2(x[0])),
        },
        GradCase {
            name: "upsample",
            make: |r| unary(r, &[1, 2, 2, 2], &[1, 6, 6, 2], |g, x| g.upsample(x[0], 3)),
        },
        GradCase {
            name: "pool3",
            make: |r| unary(r, &[2, 3, 4, 2], &[2, 3, 4, 2], |g, x| g.pool3(x[0])),
        },
        GradCase {
            name: "gather",
            make: |r| unary(r, &[4, 3], &[5, 3], |g, x| g.gather(x[0], &[2, 0, 2, 3, 1])),
        },
        GradCase {
            name: "narrow",
            make: |r| unary(r, &[3, 5], &[3, 2], |g, x| g.narrow(x[0], 1, 2, 2)),
        },
        GradCase {
            name: "concat",
            make: |r| GradTrial {
                inputs: vec![signed(&[2, 3], r), signed(&[2, 2], r)],
                build: weighted(|g, x| g.concat(&[x[0], x[1]], 1), &[2, 5], r),
            },
        },
        GradCase {
            name: "exp",
            make: |r| unary(r, &[6], &[6], |g, x| Ok(g.exp(x[0]))),
        },
        GradCase {
            name: "log",
            make: |r| GradTrial {
                inputs: vec![uniform(&[6], 0.2, 3.0, r)],
                build: weighted(|g, x| Ok(g.log(x[0])), &[6], r),
            },
        },
        GradCase {
            name: "clamp",
            make: |r| unary(r, &[8], &[8], |g, x| Ok(g.clamp(x[0], -0.5, 0.5))),
        },
        GradCase {
            name: "map",
            make: |r| {
                unary(r, &[6], &[6], |g, x| {
                    Ok(g.map(x[0], f64::tanh, |v| 1.0 - v.tanh().powi(2)))
                })
            },
        },
        GradCase {
            name: "normalize_rows",
            make: |r| unary(r, &[3, 4], &[3, 4], |g, x| g.normalize_rows(x[0], 1e-12)),
        },
        GradCase {
            name: "cosine_similarity",
            make: |r| GradTrial {
                inputs: vec![signed(&[4, 5], r), signed(&[4, 5], r)],
                build: weighted(|g, x| cosine_similarity(g, x[0], x[1]), &[4], r),
            },
        },
        GradCase {
            name: "info_nce",
            make: |r| GradTrial {
                inputs: vec![signed(&[3, 6], r), signed(&[3, 6], r), signed(&[4, 6], r)],
                build: Box::new(|g, x| Ok(info_nce(g, x[0], x[1], x[2], 0.5)?.expect("non-empty"))),
            },
        },
        GradCase {
            name: "cl_loss",
            make: |r| {
                let targets: Vec<bool> = (0..5).map(|_| r.gen_bool(0.5)).collect();
                GradTrial {
                    inputs: vec![signed(&[5, 4], r), signed(&[5, 4], r)],
                    build: Box::new(move |g, x| {
                        Ok(cl_loss(g, x[0], x[1], &targets, 0.1)?.expect("non-empty"))
                    }),
                }
            },
        },
        GradCase {
            name: "soft_cross_entropy",
            make: |r| {
                let mut y = labels(6, 4, r);
                y[0] = 1;
                GradTrial {
                    inputs: vec![signed(&[1, 2, 3, 4], r)],
                    build: Box::new(move |g, x| {
                        Ok(soft_cross_entropy(g, x[0], &y, 0.1)?.expect("non-empty"))
                    }),
                }
            },
        },
        GradCase {
            name: "dice_loss",
            make: |r| {
                let y = labels(6, 3, r);
                GradTrial {
                    inputs: vec![signed(&[1, 2, 3, 3], r)],
                    build: Box::new(move |g, x| {
                        let p = g.softmax(x[0], 3)?;
                        dice_loss(g, p, &y)
                    }),
                }
            },
        },
        GradCase {
            name: "joint_loss",
            make: |r| joint_trial(r, 10.0),
        },
        GradCase {
            name: "joint_loss_clipped",
            make: |r| joint_trial(r, 0.05),
        },
    ]
}

/// Soft CE + dice + two contrastive terms under the given contrastive clip.
fn joint_trial(r: &mut ChaCha8Rng, clip: f64) -> GradTrial {
    let mut y = labels(8, 3, r);
    y[0] = 2;
    let targets: Vec<bool> = (0..3).map(|_| r.gen_bool(0.5)).collect();
    GradTrial {
        inputs: vec![
            signed(&[1, 2, 4, 3], r),
            signed(&[3, 4], r),
            signed(&[3, 4], r),
            signed(&[2, 4], r),
        ],
        build: Box::new(move |g, x| {
            let ce = soft_cross_entropy(g, x[0], &y, 0.1)?;
            let p = g.softmax(x[0], 3)?;
            let dice = dice_loss(g, p, &y)?;
            let cl = cl_loss(g, x[1], x[2], &targets, 0.1)?.expect("non-empty");
            let nce = info_nce(g, x[1], x[2], x[3], 0.5)?.expect("non-empty");
            let terms = [
                (TermKey { stage: 1, class: 0 }, cl),
                (TermKey { stage: 2, class: 1 }, nce),
            ];
            Ok(joint_loss(g, ce, dice, &terms, clip)?.total)
        }),
    }
}

/// Largest relative error between analytic and central-difference gradients
/// of one trial, over all inputs.
pub fn trial_error(trial: &GradTrial) -> Result<f64> {
    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = (trial.build)(&mut g, &vars)?;
        g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                g.grad(v)
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect();
        Ok((g.value(loss).item(), grads))
    };
    let (_, analytic) = eval(&trial.inputs)?;
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        let numeric = fd_gradient(
            |t| {
                let mut inputs = trial.inputs.clone();
                inputs[i] = t.clone();
                Ok(eval(&inputs)?.0)
            },
            &trial.inputs[i],
            FD_STEP,
        )?;
        for (&a, &n) in grad.data().iter().zip(numeric.data()) {
            worst = worst.max(relative_error(a, n));
        }
    }
    Ok(worst)
}

/// Runs `trials` random instances of each case.
pub fn check_gradients(cases: &[GradCase], trials: usize, seed: u64) -> Vec<CheckOutcome> {
    cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut worst = 0.0f64;
            let mut error = None;
            for _ in 0..trials {
                match trial_error(&(case.make)(&mut rng)) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            let (passed, detail) = match error {
                Some(e) => (false, format!("error: {e}")),
                None => (
                    worst <= GRAD_TOLERANCE,
                    format!("max relative error {worst:.2e} over {trials} inputs (tolerance {GRAD_TOLERANCE:.0e})"),
                ),
            };
            CheckOutcome {
                name: format!("gradient {}", case.name),
                passed,
                detail,
            }
        })
        .collect()
}

fn random_mask(h: usize, w: usize, classes: u8, rng: &mut ChaCha8Rng) -> Mask {
    // blocky masks so homogeneous patches occur at every size
    let block = [1, 2, 4][rng.gen_range(0..3)];
    let bw = w.div_ceil(block);
    let cells: Vec<u8> = (0..h.div_ceil(block) * bw)
        .map(|_| {
            if rng.gen_bool(0.03) {
                IGNORE_LABEL
            } else {
                rng.gen_range(0..classes)
            }
        })
        .collect();
    let data = (0..h * w)
        .map(|i| cells[(i / w / block) * bw + (i % w) / block])
        .collect();
    Mask::new(h, w, data).expect("sizes match")
}

fn patch_pixels(mask: &Mask, spec: &StageSpec, index: usize) -> Vec<u8> {
    let (r, c) = spec.coords(index);
    let p = spec.patch_px;
    (r * p..(r + 1) * p)
        .flat_map(|y| (c * p..(c + 1) * p).map(move |x| (y, x)))
        .map(|(y, x)| mask.data[y * mask.width + x])
        .collect()
}

/// Positive and negative indices by direct pixel enumeration.
fn brute_force(mask: &Mask, spec: &StageSpec, class: u8) -> (Vec<usize>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..spec.patches() {
        let px = patch_pixels(mask, spec, i);
        if px.iter().all(|&v| v == class) {
            pos.push(i);
        }
        if px.iter().all(|&v| v != class) {
            neg.push(i);
        }
    }
    (pos, neg)
}

/// Compares patch selection and candidate gathering against pixel enumeration
/// on `trials` random batches of masks up to 16×16.
pub fn sampling_oracle(trials: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layouts: [(usize, &[usize]); 4] = [
        (4, &[1, 2, 4]),
        (8, &[1, 2, 4, 8]),
        (12, &[2, 3, 6]),
        (16, &[2, 4, 8, 16]),
    ];
    let mut mismatches = Vec::new();
    for trial in 0..trials {
        let (side, sizes) = layouts[rng.gen_range(0..layouts.len())];
        let classes = rng.gen_range(2..=6u8);
        let batch = rng.gen_range(1..=3);
        let masks: Vec<Mask> = (0..batch)
            .map(|_| random_mask(side, side, classes, &mut rng))
            .collect();
        let specs = StageSpec::hierarchy(side, side, sizes).expect("layout divides side");
        let grids: Vec<_> = masks
            .iter()
            .map(|m| build_patch_grids(m, &specs).expect("grid"))
            .collect();
        for (s, spec) in specs.iter().enumerate() {
            let stage: Vec<_> = grids.iter().map(|g| &g[s]).collect();
            for class in 0..classes {
                let mut all_pos = BTreeSet::new();
                let mut all_neg = BTreeSet::new();
                for (b, mask) in masks.iter().enumerate() {
                    let (pos, neg) = brute_force(mask, spec, class);
                    if positive_indices(stage[b], class) != pos
                        || negative_indices(stage[b], class) != neg
                    {
                        mismatches.push(format!(
                            "trial {trial} stage {} class {class} image {b}",
                            spec.stage
                        ));
                    }
                    all_pos.extend(pos.into_iter().map(|index| PatchRef { image: b, index }));
                    all_neg.extend(neg.into_iter().map(|index| PatchRef { image: b, index }));
                }
                let cap = if rng.gen_bool(0.5) {
                    usize::MAX
                } else {
                    rng.gen_range(1..8)
                };
                let set = gather_candidates(&stage, class, cap, &mut rng);
                let got_pos: BTreeSet<_> = set.positives.iter().copied().collect();
                let got_neg: BTreeSet<_> = set.negatives.iter().copied().collect();
                let ok = got_pos.len() == set.positives.len()
                    && got_neg.len() == set.negatives.len()
                    && got_pos.is_subset(&all_pos)
                    && got_neg.is_subset(&all_neg)
                    && got_pos.len() == all_pos.len().min(cap)
                    && got_neg.len() == all_neg.len().min(cap)
                    && set.stage == spec.stage
                    && set.class == class;
                if !ok {
                    mismatches.push(format!(
                        "trial {trial} gather stage {} class {class}",
                        spec.stage
                    ));
                }
            }
        }
    }
    CheckOutcome {
        name: "sampling oracle".into(),
        passed: mismatches.is_empty(),
        detail: match mismatches.first() {
            None => format!("{trials} random mask batches match pixel enumeration"),
            Some(first) => format!("{} mismatches, first: {first}", mismatches.len()),
        },
    }
}

fn embeddings(count: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..count)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect()
}

fn cosine64(u: &[f32], v: &[f32]) -> f64 {
    let dot: f64 = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum();
    let nu: f64 = u.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// Survivors must be exactly the top (`descending`) or bottom `keep` of all
/// formed pairs by similarity.
fn is_exact_half(all: &[f64], kept: &[f64], keep: usize, descending: bool) -> bool {
    let mut sorted = all.to_vec();
    sorted.sort_by(|a, b| {
        if descending {
            b.total_cmp(a)
        } else {
            a.total_cmp(b)
        }
    });
    let mut kept = kept.to_vec();
    kept.sort_by(|a, b| {
        if descending {
            b.total_cmp(a)
        } else {
            a.total_cmp(b)
        }
    });
    kept.len() == keep && kept.iter().zip(&sorted).all(|(a, b)| (a - b).abs() < 1e-6)
}

/// Checks hard-pair mining against a full sort on `trials` random pools of at
/// most 64 embeddings.
pub fn mining_oracle(trials: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for trial in 0..trials {
        let n = rng.gen_range(2..9);
        let pos = embeddings(rng.gen_range(2..=64), n, &mut rng);
        let neg = embeddings(rng.gen_range(1..=64), n, &mut rng);
        let budget = rng.gen_range(1..=64);
        let pr: Vec<&[f32]> = pos.iter().map(Vec::as_slice).collect();
        let nr: Vec<&[f32]> = neg.iter().map(Vec::as_slice).collect();

        let hn = mine_hard_negatives(&pr, &nr, budget, &mut rng);
        let sim = |p: &crate::mining::MinedPair, b: &[&[f32]]| cosine64(pr[p.first], b[p.second]);
        let all: Vec<f64> = hn
            .kept
            .iter()
            .chain(&hn.discarded)
            .map(|p| sim(p, &nr))
            .collect();
        let kept: Vec<f64> = hn.kept.iter().map(|p| sim(p, &nr)).collect();
        if all.len() != budget || !is_exact_half(&all, &kept, (budget / 2).max(1), true) {
            failures.push(format!("trial {trial} hard negatives"));
        }

        let hp = mine_hard_positives(&pr, &mut rng);
        let half = pr.len() / 2;
        let mut used: Vec<usize> = hp
            .kept
            .iter()
            .chain(&hp.discarded)
            .flat_map(|p| [p.first, p.second])
            .collect();
        used.sort_unstable();
        used.dedup();
        let all: Vec<f64> = hp
            .kept
            .iter()
            .chain(&hp.discarded)
            .map(|p| sim(p, &pr))
            .collect();
        let kept: Vec<f64> = hp.kept.iter().map(|p| sim(p, &pr)).collect();
        if all.len() != half
            || used.len() != 2 * half
            || !is_exact_half(&all, &kept, (half / 2).max(1), false)
        {
            failures.push(format!("trial {trial} hard positives"));
        }
    }
    CheckOutcome {
        name: "mining oracle".into(),
        passed: failures.is_empty(),
        detail: match failures.first() {
            None => format!("{trials} random pools agree with a full sort"),
            Some(first) => format!("{} failures, first: {first}", failures.len()),
        },
    }
}

pub fn patch_count() -> CheckOutcome {
    match total_patches(512, &DEFAULT_PATCH_SIZES) {
        Ok(n) => CheckOutcome {
            name: "patch count".into(),
            passed: n == PATCHES_512,
            detail: format!("512 px with patch sizes {DEFAULT_PATCH_SIZES:?} gives {n} patches (expected {PATCHES_512})"),
        },
        Err(e) => CheckOutcome {
            name: "patch count".into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// The full self-check suite.
pub fn run_all(seed: u64) -> CheckReport {
    let mut outcomes = check_gradients(&gradient_cases(), GRAD_TRIALS, seed);
    outcomes.push(sampling_oracle(100, seed));
    outcomes.push(mining_oracle(100, seed));
    outcomes.push(patch_count());
    CheckReport { outcomes }
}
