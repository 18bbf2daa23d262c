//! Gradient verification suites: per-op finite-difference checks, sub-loss
//! checks, and the end-to-end model check over sampled parameter coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::FixationMap;
use crate::loss::{self, LossWeights};
use crate::model::{
    model_backward, model_forward, ModelConfig, ModelParams, Phase, Result as ModelResult,
};
use crate::tensor::{grad_check, GradCheckReport, Tensor, FD_STEP};

/// Outcome of one named verification check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_detail: String,
    pub tol: f64,
}

impl Check {
    pub fn passes(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn failure(&self) -> Option<String> {
        if self.passes() {
            None
        } else {
            Some(format!(
                "{}: rel err {:.3e} > tol {:.1e} at {}",
                self.name, self.max_rel_err, self.tol, self.worst_detail
            ))
        }
    }

    fn from_report(name: &str, report: &GradCheckReport) -> Self {
        let worst = report
            .inputs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err));
        let (max_rel_err, worst_detail) = match worst {
            Some((i, r)) => (
                r.max_rel_err,
                format!("input {} coordinate {}", i, r.worst_coord),
            ),
            None => (0.0, "no inputs".to_string()),
        };
        Self {
            name: name.to_string(),
            max_rel_err,
            worst_detail,
            tol: report.tol,
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(1.0, f64::max(a.abs(), n.abs()))
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rand_tensor_off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Finite-difference checks for every differentiable tensor op.
pub fn tensor_op_checks(seed: u64, tol: f64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(seed));
    let mut out: Vec<Check> = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(Check::from_report(name, &report));
    };

    let x34 = rand_tensor(&[3, 4], &mut rng);
    let y34 = rand_tensor(&[3, 4], &mut rng);
    push(
        "add",
        grad_check(|t, ids| t.add(ids[0], ids[1]), &[x34.clone(), y34.clone()], FD_STEP, tol, seed).unwrap(),
    );
    push(
        "mul",
        grad_check(|t, ids| t.mul(ids[0], ids[1]), &[x34, y34], FD_STEP, tol, seed).unwrap(),
    );
    push(
        "scale",
        grad_check(|t, ids| Ok(t.scale(ids[0], -2.5)), &[rand_tensor(&[2, 5], &mut rng)], FD_STEP, tol, seed).unwrap(),
    );
    let a = rand_tensor(&[3, 2], &mut rng);
    let b = rand_tensor(&[2, 4], &mut rng);
    push(
        "matmul",
        grad_check(|t, ids| t.matmul(ids[0], ids[1]), &[a, b], FD_STEP, tol, seed).unwrap(),
    );
    let x = rand_tensor(&[2, 3], &mut rng);
    let bias = rand_tensor(&[3], &mut rng);
    push(
        "add_bias_rows",
        grad_check(|t, ids| t.add_bias_rows(ids[0], ids[1]), &[x, bias], FD_STEP, tol, seed).unwrap(),
    );
    push(
        "transpose",
        grad_check(|t, ids| t.transpose(ids[0]), &[rand_tensor(&[3, 4], &mut rng)], FD_STEP, tol, seed).unwrap(),
    );
    push(
        "slice_concat_cols",
        grad_check(
            |t, ids| {
                let left = t.slice_cols(ids[0], 0, 2)?;
                let right = t.slice_cols(ids[0], 2, 3)?;
                t.concat_cols(&[right, left])
            },
            &[rand_tensor(&[3, 5], &mut rng)],
            FD_STEP,
            tol,
            seed,
        )
        .unwrap(),
    );
    push(
        "token_grid_roundtrip",
        grad_check(
            |t, ids| {
                let tok = t.tokens_from_grid(ids[0])?;
                t.grid_from_tokens(tok, 2, 3)
            },
            &[rand_tensor(&[4, 2, 3], &mut rng)],
            FD_STEP,
            tol,
            seed,
        )
        .unwrap(),
    );
    push(
        "softmax",
        grad_check(|t, ids| Ok(t.softmax_last(ids[0])), &[rand_tensor(&[2, 6], &mut rng)], FD_STEP, tol, seed).unwrap(),
    );
    push(
        "relu",
        grad_check(
            |t, ids| Ok(t.relu(ids[0])),
            &[rand_tensor_off_kink(&[3, 4], &mut rng)],
            FD_STEP,
            tol,
            seed,
        )
        .unwrap(),
    );
    push(
        "gelu",
        grad_check(|t, ids| Ok(t.gelu(ids[0])), &[rand_tensor(&[3, 4], &mut rng)], FD_STEP, tol, seed).unwrap(),
    );
    push(
        "sigmoid",
        grad_check(|t, ids| Ok(t.sigmoid(ids[0])), &[rand_tensor(&[3, 4], &mut rng)], FD_STEP, tol, seed).unwrap(),
    );
    let cx = rand_tensor(&[2, 4, 4], &mut rng);
    let cw1 = rand_tensor(&[3, 2, 1, 1], &mut rng);
    let cw3 = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let cb = rand_tensor(&[3], &mut rng);
    push(
        "conv2d_1x1",
        grad_check(|t, ids| t.conv2d(ids[0], ids[1], ids[2]), &[cx.clone(), cw1, cb.clone()], FD_STEP, tol, seed).unwrap(),
    );
    push(
        "conv2d_3x3",
        grad_check(|t, ids| t.conv2d(ids[0], ids[1], ids[2]), &[cx.clone(), cw3, cb], FD_STEP, tol, seed).unwrap(),
    );
    push(
        "avg_pool_2x2",
        grad_check(|t, ids| t.avg_pool_2x2(ids[0]), &[cx.clone()], FD_STEP, tol, seed).unwrap(),
    );
    push(
        "upsample_nearest_2x",
        grad_check(|t, ids| t.upsample_nearest_2x(ids[0]), &[cx], FD_STEP, tol, seed).unwrap(),
    );
    let bx = rand_tensor(&[2, 2, 3, 3], &mut rng);
    let bg = rand_tensor(&[2], &mut rng);
    let bb = rand_tensor(&[2], &mut rng);
    push(
        "batch_norm_train",
        grad_check(
            |t, ids| t.batch_norm_train(ids[0], ids[1], ids[2]).map(|(id, _)| id),
            &[bx.clone(), bg.clone(), bb.clone()],
            FD_STEP,
            tol,
            seed,
        )
        .unwrap(),
    );
    push(
        "batch_norm_eval",
        grad_check(
            |t, ids| t.batch_norm_eval(ids[0], ids[1], ids[2], &[0.2, -0.1], &[0.9, 1.3]),
            &[bx, bg, bb],
            FD_STEP,
            tol,
            seed,
        )
        .unwrap(),
    );
    let lx = rand_tensor(&[3, 5], &mut rng);
    let lg = rand_tensor(&[5], &mut rng);
    let lb = rand_tensor(&[5], &mut rng);
    push(
        "layer_norm",
        grad_check(|t, ids| t.layer_norm(ids[0], ids[1], ids[2]), &[lx, lg, lb], FD_STEP, tol, seed).unwrap(),
    );
    out
}

fn fd_scalar_check(
    name: &str,
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    tol: f64,
) -> Check {
    let mut max_rel_err = 0.0f64;
    let mut worst = 0usize;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let numeric = (f(&xp) - f(&xm)) / (2.0 * FD_STEP);
        let e = rel_err(analytic.data()[i], numeric);
        if e > max_rel_err {
            max_rel_err = e;
            worst = i;
        }
    }
    Check {
        name: name.to_string(),
        max_rel_err,
        worst_detail: format!("prediction coordinate {worst}"),
        tol,
    }
}

/// Finite-difference checks for the four sub-losses, the combined loss, and
/// the BCE alternative.
pub fn loss_checks(seed: u64, tol: f64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xabcd));
    let pred = Tensor::from_fn(&[6, 6], |_| rng.gen_range(0.05..0.95));
    let mut gt = Tensor::from_fn(&[6, 6], |_| rng.gen_range(0.05..0.95));
    // Keep normalized prediction and target separated so the SIM check never
    // straddles a tie.
    let (ps, gs) = (pred.sum(), gt.sum());
    for i in 0..gt.len() {
        if (pred.data()[i] / ps - gt.data()[i] / gs).abs() < 1e-3 * (pred.data()[i] / ps) {
            gt.data_mut()[i] *= 1.1;
        }
    }
    let mut fix = FixationMap::empty(6, 6);
    for _ in 0..4 {
        fix.set_hit(rng.gen_range(0..6), rng.gen_range(0..6));
    }
    let w = LossWeights::default();

    let mut out = Vec::new();
    let (_, g) = loss::loss_nss(&pred, &fix).unwrap();
    out.push(fd_scalar_check(
        "loss_nss",
        |p| loss::loss_nss(p, &fix).unwrap().0,
        &pred,
        &g,
        tol,
    ));
    let (_, g) = loss::loss_kld(&pred, &gt).unwrap();
    out.push(fd_scalar_check(
        "loss_kld",
        |p| loss::loss_kld(p, &gt).unwrap().0,
        &pred,
        &g,
        tol,
    ));
    let (_, g) = loss::loss_cc(&pred, &gt).unwrap();
    out.push(fd_scalar_check(
        "loss_cc",
        |p| loss::loss_cc(p, &gt).unwrap().0,
        &pred,
        &g,
        tol,
    ));
    let (_, g) = loss::loss_sim(&pred, &gt).unwrap();
    out.push(fd_scalar_check(
        "loss_sim",
        |p| loss::loss_sim(p, &gt).unwrap().0,
        &pred,
        &g,
        tol,
    ));
    let combined = loss::combined_loss(&pred, &gt, &fix, &w).unwrap();
    out.push(fd_scalar_check(
        "loss_combined",
        |p| loss::combined_loss(p, &gt, &fix, &w).unwrap().value,
        &pred,
        &combined.grad,
        tol,
    ));
    let (_, g) = loss::loss_bce(&pred, &gt).unwrap();
    out.push(fd_scalar_check(
        "loss_bce",
        |p| loss::loss_bce(p, &gt).unwrap().0,
        &pred,
        &g,
        tol,
    ));
    out
}

/// End-to-end check: image through the model into the combined loss, with
/// central finite differences over `n_coords` sampled parameter coordinates.
pub fn model_end_to_end_check(
    config: &ModelConfig,
    seed: u64,
    n_coords: usize,
    tol: f64,
) -> ModelResult<Check> {
    let params = ModelParams::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x51ed));
    let image = Tensor::from_fn(&[3, config.input_h, config.input_w], |_| {
        rng.gen_range(0.0..1.0)
    });
    let gt = Tensor::from_fn(&[config.input_h, config.input_w], |_| {
        rng.gen_range(0.01..1.0)
    });
    let mut fix = FixationMap::empty(config.input_w, config.input_h);
    for _ in 0..5 {
        fix.set_hit(
            rng.gen_range(0..config.input_h),
            rng.gen_range(0..config.input_w),
        );
    }
    let w = LossWeights::default();

    let eval = |params: &ModelParams| -> ModelResult<f64> {
        let out = model_forward(config, params, &image, Phase::Train)?;
        let l = loss::combined_loss(out.prediction(), &gt, &fix, &w)
            .map_err(|e| crate::model::ModelError::Config(e.to_string()))?;
        Ok(l.value)
    };

    let forward = model_forward(config, &params, &image, Phase::Train)?;
    let l = loss::combined_loss(forward.prediction(), &gt, &fix, &w)
        .map_err(|e| crate::model::ModelError::Config(e.to_string()))?;
    let analytic = model_backward(&params, &forward, &l.grad)?;

    // Sample coordinates uniformly over the flattened learnable store.
    let names = params.learnable_names();
    let sizes: Vec<usize> = names.iter().map(|n| params.get(n).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut max_rel_err = 0.0f64;
    let mut worst_detail = String::from("none");
    for _ in 0..n_coords {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let name = &names[which];
        let base = params.get(name).data()[flat];
        let mut bumped = params.clone();
        bumped.get_mut(name).data_mut()[flat] = base + FD_STEP;
        let plus = eval(&bumped)?;
        bumped.get_mut(name).data_mut()[flat] = base - FD_STEP;
        let minus = eval(&bumped)?;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[name].data()[flat];
        let e = rel_err(a, numeric);
        if e > max_rel_err {
            max_rel_err = e;
            worst_detail = format!("{name}[{flat}]");
        }
    }
    Ok(Check {
        name: "model_end_to_end".to_string(),
        max_rel_err,
        worst_detail,
        tol,
    })
}
