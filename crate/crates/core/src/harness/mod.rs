//! Training driver, evaluation, gradient-verification suites, and the CLI.

pub mod cli;
pub mod config;
pub mod metrics;
pub mod render;

pub use config::RunConfig;
pub use metrics::{compute_metrics, confusion_from_pairs, MetricsReport};
pub use render::{render_map, MapSource, PALETTE};

use std::io::Write;

use crate::data::{extract_patch, split_train_test, HsiCube};
use crate::error::{Error, Result};
use crate::model::{ModelState, TrainBatch, TrainParams};
use crate::noise_space::NoiseSpace;
use crate::rng::Rng;
use crate::tensor::{finite_diff_grad, rel_err, Tape, Tensor};

/// At most this many held-out pixels are scored per epoch; the final
/// report always uses the full test set.
const EPOCH_EVAL_CAP: usize = 512;

/// Losses (means over the epoch's steps) and held-out OA after one epoch.
/// Epoch 0 is the untrained model: no losses, only OA.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cross_entropy: Option<f64>,
    pub center: Option<f64>,
    pub reconstruction: Option<f64>,
    pub sparsity: Option<f64>,
    pub diversity: Option<f64>,
    pub overall_accuracy: f64,
}

impl EpochRecord {
    fn csv_row(&self) -> String {
        let field = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            field(self.cross_entropy),
            field(self.center),
            field(self.reconstruction),
            field(self.sparsity),
            field(self.diversity),
            self.overall_accuracy
        )
    }
}

/// Everything a training run produces in memory.
pub struct TrainOutcome {
    pub state: ModelState,
    pub records: Vec<EpochRecord>,
    pub final_eval: MetricsReport,
    pub train_coords: Vec<(usize, usize)>,
    pub test_coords: Vec<(usize, usize)>,
}

/// Predict the listed pixels and score them against ground truth.
pub fn evaluate(
    state: &ModelState,
    cube: &HsiCube,
    coords: &[(usize, usize)],
    neighbor: usize,
    baseline: bool,
) -> Result<MetricsReport> {
    if coords.is_empty() {
        return Err(Error::invalid("no pixels to evaluate".to_string()));
    }
    if neighbor != state.neighbor || state.bands != cube.bands {
        return Err(Error::dim(format!(
            "model expects {} bands / neighbor {}, got cube with {} bands / neighbor {}",
            state.bands, state.neighbor, cube.bands, neighbor
        )));
    }
    let mut truth = Vec::with_capacity(coords.len());
    let mut pred = Vec::with_capacity(coords.len());
    for &(row, col) in coords {
        let label = cube.label_at(row, col);
        if label == 0 {
            return Err(Error::invalid(format!(
                "pixel ({row}, {col}) is unlabeled"
            )));
        }
        let patch = extract_patch(cube, row, col, neighbor)?;
        truth.push(label as usize - 1);
        pred.push(state.predict(&patch, baseline)?);
    }
    compute_metrics(&confusion_from_pairs(&truth, &pred, cube.num_classes)?)
}

fn train_params(cfg: &RunConfig) -> TrainParams {
    TrainParams {
        lr: cfg.lr,
        lambda_c: cfg.lambda_c,
        update_sign: cfg.update_sign,
        baseline: cfg.baseline,
    }
}

/// The full training protocol: seeded split, seeded init, epochs of batched
/// steps with per-epoch held-out OA, then a full-test evaluation.
pub fn run_training(cfg: &RunConfig, cube: &HsiCube) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_coords, test_coords) = split_train_test(cube, cfg.per_class, cfg.seed)?;

    // Fixed held-out subset for the per-epoch score.
    let eval_coords: Vec<(usize, usize)> = if test_coords.len() > EPOCH_EVAL_CAP {
        let mut rng = Rng::seeded(cfg.seed).split(0xE7A1);
        let mut idx = rng.choose_indices(test_coords.len(), EPOCH_EVAL_CAP);
        idx.sort_unstable();
        idx.into_iter().map(|i| test_coords[i]).collect()
    } else {
        test_coords.clone()
    };

    let mut state = ModelState::init(
        cube.bands,
        cfg.neighbor,
        cube.num_classes,
        cfg.d,
        cfg.k,
        cfg.seed,
    )?;
    state.noise_space.alpha = cfg.alpha;
    state.noise_space.beta = cfg.beta;
    state.centers.gamma = cfg.gamma;
    let opts = train_params(cfg);

    let patches: Vec<Tensor> = train_coords
        .iter()
        .map(|&(r, c)| extract_patch(cube, r, c, cfg.neighbor))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = train_coords
        .iter()
        .map(|&(r, c)| cube.label_at(r, c) as usize - 1)
        .collect();

    let mut records = Vec::with_capacity(cfg.epochs + 1);
    records.push(EpochRecord {
        epoch: 0,
        cross_entropy: None,
        center: None,
        reconstruction: None,
        sparsity: None,
        diversity: None,
        overall_accuracy: evaluate(&state, cube, &eval_coords, cfg.neighbor, cfg.baseline)?
            .overall_accuracy,
    });

    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut shuffle_rng = Rng::seeded(cfg.seed).split(0x0EDE2);
    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut sums = [0.0f64; 5];
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let batch = TrainBatch {
                patches: chunk.iter().map(|&i| patches[i].clone()).collect(),
                labels: chunk.iter().map(|&i| labels[i]).collect(),
            };
            let report = state.train_step(&batch, &opts)?;
            sums[0] += report.cross_entropy;
            sums[1] += report.center;
            sums[2] += report.reconstruction;
            sums[3] += report.sparsity;
            sums[4] += report.diversity;
            steps += 1;
        }
        let n = steps as f64;
        records.push(EpochRecord {
            epoch,
            cross_entropy: Some(sums[0] / n),
            center: Some(sums[1] / n),
            reconstruction: Some(sums[2] / n),
            sparsity: Some(sums[3] / n),
            diversity: Some(sums[4] / n),
            overall_accuracy: evaluate(&state, cube, &eval_coords, cfg.neighbor, cfg.baseline)?
                .overall_accuracy,
        });
    }

    let final_eval = evaluate(&state, cube, &test_coords, cfg.neighbor, cfg.baseline)?;
    Ok(TrainOutcome {
        state,
        records,
        final_eval,
        train_coords,
        test_coords,
    })
}

pub const LOG_HEADER: &str = "epoch,ce,center,recon,sparsity,diversity,oa";

pub fn write_log<W: Write>(records: &[EpochRecord], mut w: W) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// [`run_training`] plus artifacts in `cfg.out_dir`: `log.csv`,
/// `splits.csv`, `model.hdnm`, and the predicted `map.ppm`.
pub fn run_training_with_artifacts(cfg: &RunConfig, cube: &HsiCube) -> Result<TrainOutcome> {
    let out_dir = cfg
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::Config("out-dir is required".to_string()))?
        .clone();
    std::fs::create_dir_all(&out_dir)?;
    let outcome = run_training(cfg, cube)?;

    write_log(
        &outcome.records,
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("log.csv"))?),
    )?;
    crate::data::save_split_csv(
        cube,
        &outcome.train_coords,
        &outcome.test_coords,
        &out_dir.join("splits.csv"),
    )?;
    outcome.state.save(&out_dir.join("model.hdnm"))?;
    render_map(
        cube,
        &MapSource::Predictions {
            state: &outcome.state,
            baseline: cfg.baseline,
        },
        &PALETTE,
        &out_dir.join("map.ppm"),
    )?;
    Ok(outcome)
}

// ── Gradient-verification suites ────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{}: max rel err {:.3e} (tol {:.1e}) ... {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub suites: Vec<SuiteResult>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }
}

/// Run every finite-difference suite: tensor primitives, the fixed-weight
/// noise-space gradient, and the end-to-end tiny model.
pub fn check_gradients() -> Result<GradCheckReport> {
    Ok(GradCheckReport {
        suites: vec![
            tensor_primitive_suite()?,
            noise_space_suite()?,
            model_end_to_end_suite()?,
        ],
    })
}

/// Sample uniformly but keep a margin away from zero, where relu and
/// reciprocal are not differentiable or ill-conditioned.
fn sample_off_kink(rng: &mut Rng) -> f64 {
    let sign = if rng.next_u64() % 2 == 0 { 1.0 } else { -1.0 };
    sign * (0.05 + 0.95 * rng.next_f64())
}

fn random_sized_vector(rng: &mut Rng, max_extent: usize) -> Tensor {
    let n = 1 + (rng.next_u64() % max_extent as u64) as usize;
    Tensor::vector((0..n).map(|_| sample_off_kink(rng)).collect())
}

/// Every primitive's backward against central differences: 100 random
/// small instances per primitive, h = 1e-5.
pub fn tensor_primitive_suite() -> Result<SuiteResult> {
    const H: f64 = 1e-5;
    let mut rng = Rng::seeded(0xADC0);
    let mut max_err = 0.0f64;

    // one builder per primitive: (tape, tracked inputs, scalar loss)
    type Builder = Box<dyn Fn(&[Tensor]) -> (Tape, Vec<crate::tensor::VarId>, crate::tensor::VarId)>;
    let composites: Vec<(Builder, Box<dyn FnMut(&mut Rng) -> Vec<Tensor>>)> = vec![
        // add / sub / mul / scale chain
        (
            Box::new(|inputs: &[Tensor]| {
                let mut t = Tape::new();
                let a = t.input(inputs[0].clone());
                let b = t.input(inputs[1].clone());
                let s = t.add(a, b).unwrap();
                let d = t.sub(s, b).unwrap();
                let m = t.mul(d, b).unwrap();
                let sc = t.scale(m, 1.7).unwrap();
                let loss = t.sum(sc).unwrap();
                (t, vec![a, b], loss)
            }),
            Box::new(|rng: &mut Rng| {
                let v = random_sized_vector(rng, 6);
                let w = Tensor::vector(
                    (0..v.numel()).map(|_| sample_off_kink(rng)).collect(),
                );
                vec![v, w]
            }),
        ),
        // relu and mean
        (
            Box::new(|inputs: &[Tensor]| {
                let mut t = Tape::new();
                let a = t.input(inputs[0].clone());
                let r = t.relu(a).unwrap();
                let loss = t.mean(r).unwrap();
                (t, vec![a], loss)
            }),
            Box::new(|rng: &mut Rng| vec![random_sized_vector(rng, 6)]),
        ),
        // reciprocal and tracked-scalar broadcast. Length >= 2: a length-1
        // unit direction is locally constant, which starves the check.
        (
            Box::new(|inputs: &[Tensor]| {
                let mut t = Tape::new();
                let a = t.input(inputs[0].clone());
                let n = t.l2_norm(a).unwrap();
                let inv = t.recip(n).unwrap();
                let scaled = t.smul(inv, a).unwrap();
                let loss = t.sum(scaled).unwrap();
                (t, vec![a], loss)
            }),
            Box::new(|rng: &mut Rng| {
                let n = 2 + (rng.next_u64() % 5) as usize;
                vec![Tensor::vector(
                    (0..n).map(|_| sample_off_kink(rng)).collect(),
                )]
            }),
        ),
        // dot and l2_norm
        (
            Box::new(|inputs: &[Tensor]| {
                let mut t = Tape::new();
                let a = t.input(inputs[0].clone());
                let b = t.input(inputs[1].clone());
                let d = t.dot(a, b).unwrap();
                let n = t.l2_norm(a).unwrap();
                let loss = t.mul(d, n).unwrap();
                (t, vec![a, b], loss)
            }),
            Box::new(|rng: &mut Rng| {
                let v = random_sized_vector(rng, 6);
                let w = Tensor::vector(
                    (0..v.numel()).map(|_| sample_off_kink(rng)).collect(),
                );
                vec![v, w]
            }),
        ),
        // matmul
        (
            Box::new(|inputs: &[Tensor]| {
                let mut t = Tape::new();
                let a = t.input(inputs[0].clone());
                let b = t.input(inputs[1].clone());
                let c = t.matmul(a, b).unwrap();
                let loss = t.sum(c).unwrap();
                (t, vec![a, b], loss)
            }),
            Box::new(|rng: &mut Rng| {
                let m = 1 + (rng.next_u64() % 6) as usize;
                let n = 1 + (rng.next_u64() % 6) as usize;
                let p = 1 + (rng.next_u64() % 6) as usize;
                vec![
                    Tensor::new(vec![m, n], (0..m * n).map(|_| sample_off_kink(rng)).collect())
                        .unwrap(),
                    Tensor::new(vec![n, p], (0..n * p).map(|_| sample_off_kink(rng)).collect())
                        .unwrap(),
                ]
            }),
        ),
        // conv3d with channel bias
        (
            Box::new(|inputs: &[Tensor]| {
                let mut t = Tape::new();
                let x = t.input(inputs[0].clone());
                let k = t.input(inputs[1].clone());
                let b = t.input(inputs[2].clone());
                let c = t.conv3d(x, k, 1).unwrap();
                let cb = t.channel_bias(c, b).unwrap();
                let loss = t.sum(cb).unwrap();
                (t, vec![x, k, b], loss)
            }),
            Box::new(|rng: &mut Rng| {
                let c = 1 + (rng.next_u64() % 2) as usize;
                let ext = |rng: &mut Rng| 2 + (rng.next_u64() % 3) as usize;
                let (d, h, w) = (ext(rng), ext(rng), ext(rng));
                let k = 1 + (rng.next_u64() % 2) as usize;
                let kd = 1 + (rng.next_u64() % d as u64) as usize;
                let kh = 1 + (rng.next_u64() % h as u64) as usize;
                let kw = 1 + (rng.next_u64() % w as u64) as usize;
                vec![
                    Tensor::new(
                        vec![c, d, h, w],
                        (0..c * d * h * w).map(|_| sample_off_kink(rng)).collect(),
                    )
                    .unwrap(),
                    Tensor::new(
                        vec![k, c, kd, kh, kw],
                        (0..k * c * kd * kh * kw)
                            .map(|_| sample_off_kink(rng))
                            .collect(),
                    )
                    .unwrap(),
                    Tensor::vector((0..k).map(|_| sample_off_kink(rng)).collect()),
                ]
            }),
        ),
        // softmax cross-entropy through a reshape
        (
            Box::new(|inputs: &[Tensor]| {
                let mut t = Tape::new();
                let n = inputs[0].numel();
                let a = t.input(inputs[0].clone());
                let col = t.reshape(a, vec![n, 1]).unwrap();
                let back = t.reshape(col, vec![n]).unwrap();
                let loss = t.softmax_cross_entropy(back, 0).unwrap();
                (t, vec![a], loss)
            }),
            Box::new(|rng: &mut Rng| {
                let n = 2 + (rng.next_u64() % 5) as usize;
                vec![Tensor::vector(
                    (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect(),
                )]
            }),
        ),
    ];

    for (build, mut sample) in composites {
        for _ in 0..100 {
            let inputs = sample(&mut rng);
            let (tape, vars, loss) = build(&inputs);
            let grads = tape.backward(loss)?;
            for (i, &var) in vars.iter().enumerate() {
                let fd = finite_diff_grad(
                    |x| {
                        let mut probe = inputs.clone();
                        probe[i] = x.clone();
                        let (t, _, l) = build(&probe);
                        t.value(l).item()
                    },
                    &inputs[i],
                    H,
                );
                let analytic = grads
                    .get(var)
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
                max_err = max_err.max(rel_err(&analytic, fd.data()));
            }
        }
    }

    Ok(SuiteResult {
        name: "tensor-primitives",
        max_rel_err: max_err,
        tolerance: 1e-4,
    })
}

/// The analytic fixed-weight noise-space gradient against central
/// differences, over random instances with k <= 8, d <= 16.
pub fn noise_space_suite() -> Result<SuiteResult> {
    noise_space_suite_with(|space, extracted, weights| space.base_gradients(extracted, weights))
}

/// Same suite with an injectable gradient function, so a deliberately
/// broken rule can be shown to fail.
pub fn noise_space_suite_with(
    grad_fn: impl Fn(&NoiseSpace, &[f64], &[f64]) -> Result<Vec<Vec<f64>>>,
) -> Result<SuiteResult> {
    let mut rng = Rng::seeded(0x5ACE);
    let mut max_err = 0.0f64;
    for _ in 0..100 {
        let k = 2 + (rng.next_u64() % 7) as usize;
        let d = 2 + (rng.next_u64() % 15) as usize;
        let mut space = NoiseSpace::init(k, d, rng.next_u64())?;
        space.alpha = rng.uniform(0.2, 1.5);
        let extracted: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let est = space.estimate(extracted.clone())?;
        let weights = est.weights;

        let analytic: Vec<f64> = grad_fn(&space, &extracted, &weights)?
            .into_iter()
            .flatten()
            .collect();

        let flat = Tensor::vector(space.bases_flat().to_vec());
        let alpha = space.alpha;
        let fd = finite_diff_grad(
            |bases| {
                let mut s = NoiseSpace::with_bases(k, d, bases.data().to_vec()).unwrap();
                s.alpha = alpha;
                s.reconstruction_loss(&extracted, &weights).unwrap()
                    + alpha * s.diversity_loss().unwrap()
            },
            &flat,
            1e-6,
        );
        max_err = max_err.max(rel_err(&analytic, fd.data()));
    }
    Ok(SuiteResult {
        name: "noise-space",
        max_rel_err: max_err,
        tolerance: 1e-4,
    })
}

/// End-to-end tape gradient of the combined loss on the tiny model (d=8,
/// k=4, two classes, 4 bands, 3x3 patches) against central differences for
/// every parameter.
pub fn model_end_to_end_suite() -> Result<SuiteResult> {
    let state = ModelState::init(4, 3, 2, 8, 4, 0xE2E)?;
    let mut rng = Rng::seeded(0xBA7C);
    let batch = TrainBatch {
        patches: (0..4)
            .map(|_| Tensor::uniform(vec![4, 3, 3], 1.0, &mut rng))
            .collect(),
        labels: vec![0, 1, 0, 1],
    };
    let opts = TrainParams {
        lr: 0.0,
        lambda_c: crate::model::DEFAULT_LAMBDA_C,
        update_sign: crate::noise_space::UpdateSign::Descent,
        baseline: false,
    };

    let analytic = state.batch_gradients(&batch, &opts)?;
    let mut max_err = 0.0f64;
    for (name, grad) in &analytic {
        let base = state.param(name).expect("named parameter exists").clone();
        let fd = finite_diff_grad(
            |p| {
                let mut probe = state.clone();
                probe.set_param(name, p.clone()).unwrap();
                probe.batch_loss(&batch, &opts).unwrap()
            },
            &base,
            1e-5,
        );
        let analytic_data = grad
            .as_ref()
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; base.numel()]);
        let err = rel_err(&analytic_data, fd.data());
        max_err = max_err.max(err);
    }
    Ok(SuiteResult {
        name: "model-end-to-end",
        max_rel_err: max_err,
        tolerance: 1e-3,
    })
}
