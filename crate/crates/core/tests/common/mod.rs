#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsl_core::data::Event;
use tsl_core::loss::{assign_targets, total_loss, LossConfig};
use tsl_core::model::{
    build_pyramid, generate_points, run_heads, BackboneConfig, ModelConfig, ParamStore,
};
use tsl_core::tensor::{Tape, Tensor, Var};
use tsl_core::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// A small model with every parameter jittered away from its
/// initialisation so no gradient path is trivially zero.
pub fn tiny_model(
    input_dim: usize,
    d_model: usize,
    schedule: &[usize],
    num_classes: usize,
    msa_residual: bool,
    seed: u64,
) -> (ModelConfig, ParamStore) {
    let cfg = ModelConfig {
        input_dim,
        num_classes,
        backbone: BackboneConfig {
            d_model,
            num_blocks: schedule.len(),
            stride_schedule: schedule.to_vec(),
            num_heads: 2,
            window: 5,
            msa_residual,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut store = ParamStore::initialize(&cfg.param_specs(), seed);
    let mut r = rng(seed ^ 0xa5a5);
    for t in store.values_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    (cfg, store)
}

pub fn events(list: &[(usize, f64, f64)]) -> Vec<Event> {
    list.iter()
        .map(|&(label, start_sec, end_sec)| Event {
            label,
            start_sec,
            end_sec,
        })
        .collect()
}

/// Backbone, heads and training loss for `x` with parameters bound from
/// `vars`; stride is one second.
pub fn composed_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    store: &ParamStore,
    x: Var,
    param_vars: &[Var],
    gt: &[Event],
    loss_cfg: &LossConfig,
) -> Result<Var> {
    let p = store.bind_vars(tape, param_vars)?;
    let t = tape.shape(x)[0];
    let mask = vec![true; t];
    let pyramid = build_pyramid(tape, &p, &cfg.backbone, x, &mask)?;
    let heads = run_heads(tape, &p, &pyramid, &cfg.head, cfg.backbone.ln_eps)?;
    let points = generate_points(&pyramid, cfg.head.range_base);
    let masks: Vec<Vec<bool>> = pyramid.levels.iter().map(|l| l.mask.clone()).collect();
    let assignment = assign_targets(
        &points,
        gt,
        1.0,
        cfg.num_classes,
        loss_cfg.center_radius,
        Some(&masks),
    );
    let (loss, _) = total_loss(tape, &heads, &assignment, loss_cfg)?;
    Ok(loss)
}

/// Gradient-check error of every differentiable tape op at shapes drawn
/// from `seed` (up to 16 × 32).
pub fn op_grad_suite(seed: u64) -> Vec<(&'static str, f64)> {
    use tsl_core::tensor::{grad_check, grad_check_many, DEFAULT_STEP};
    let mut r = rng(seed);
    let t = r.random_range(1..=16);
    let d = r.random_range(1..=32);
    let x = random_tensor(&mut r, &[t, d], 1.0);
    let y = random_tensor(&mut r, &[t, d], 1.0);
    let w = random_tensor(&mut r, &[t, d], 1.0);
    let row = random_tensor(&mut r, &[d], 1.0);
    let positive = Tensor::new(&[t, d], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let off_kink = Tensor::new(
        &[t, d],
        x.data().iter().map(|v| v + 0.1f64.copysign(*v)).collect(),
    )
    .unwrap();
    let n = r.random_range(1..=16);
    let rhs = random_tensor(&mut r, &[d, n], 1.0);
    let cout = r.random_range(1..=8);
    let kernel = random_tensor(&mut r, &[3, d, cout], 0.5);
    let mask: Vec<bool> = (0..t).map(|i| i == 0 || r.random_bool(0.7)).collect();
    let h = DEFAULT_STEP;

    // weighted sum keeps every output coordinate in play
    fn weighted(tape: &mut Tape, v: Var, w: &Tensor) -> Result<Var> {
        let shape = tape.shape(v).to_vec();
        let n: usize = shape.iter().product();
        let c = tape.constant(Tensor::new(
            &shape,
            w.data().iter().cycle().take(n).copied().collect(),
        )?);
        let m = tape.mul(v, c)?;
        Ok(tape.sum(m))
    }

    let mut out = Vec::new();
    let mut push = |name: &'static str, e: Result<f64>| out.push((name, e.unwrap()));
    push(
        "add",
        grad_check_many(
            |tp, v| {
                let s = tp.add(v[0], v[1])?;
                weighted(tp, s, &w)
            },
            &[x.clone(), y.clone()],
            h,
        ),
    );
    push(
        "sub",
        grad_check_many(
            |tp, v| {
                let s = tp.sub(v[0], v[1])?;
                weighted(tp, s, &w)
            },
            &[x.clone(), y.clone()],
            h,
        ),
    );
    push(
        "mul",
        grad_check_many(
            |tp, v| {
                let s = tp.mul(v[0], v[1])?;
                weighted(tp, s, &w)
            },
            &[x.clone(), y.clone()],
            h,
        ),
    );
    push(
        "add_row",
        grad_check_many(
            |tp, v| {
                let s = tp.add_row(v[0], v[1])?;
                weighted(tp, s, &w)
            },
            &[x.clone(), row.clone()],
            h,
        ),
    );
    push(
        "mul_row",
        grad_check_many(
            |tp, v| {
                let s = tp.mul_row(v[0], v[1])?;
                weighted(tp, s, &w)
            },
            &[x.clone(), row.clone()],
            h,
        ),
    );
    push(
        "scale",
        grad_check(
            |tp, v| {
                let s = tp.scale(v, -1.7);
                weighted(tp, s, &w)
            },
            &x,
            h,
        ),
    );
    push(
        "relu",
        grad_check(
            |tp, v| {
                let s = tp.relu(v);
                weighted(tp, s, &w)
            },
            &off_kink,
            h,
        ),
    );
    push(
        "gelu",
        grad_check(
            |tp, v| {
                let s = tp.gelu(v);
                weighted(tp, s, &w)
            },
            &x,
            h,
        ),
    );
    push(
        "sigmoid",
        grad_check(
            |tp, v| {
                let s = tp.sigmoid(v);
                weighted(tp, s, &w)
            },
            &x,
            h,
        ),
    );
    push(
        "softplus",
        grad_check(
            |tp, v| {
                let s = tp.softplus(v);
                weighted(tp, s, &w)
            },
            &x,
            h,
        ),
    );
    push(
        "exp",
        grad_check(
            |tp, v| {
                let s = tp.exp(v);
                weighted(tp, s, &w)
            },
            &x,
            h,
        ),
    );
    push(
        "log",
        grad_check(
            |tp, v| {
                let s = tp.log(v)?;
                weighted(tp, s, &w)
            },
            &positive,
            h,
        ),
    );
    push("sum", grad_check(|tp, v| Ok(tp.sum(v)), &x, h));
    push(
        "mask_rows",
        grad_check(
            |tp, v| {
                let s = tp.mask_rows(v, &mask)?;
                weighted(tp, s, &w)
            },
            &x,
            h,
        ),
    );
    push(
        "matmul",
        grad_check_many(
            |tp, v| {
                let s = tp.matmul(v[0], v[1])?;
                weighted(tp, s, &w)
            },
            &[x.clone(), rhs.clone()],
            h,
        ),
    );
    for (name, stride) in [("conv1d", 1), ("conv1d_stride2", 2)] {
        push(
            name,
            grad_check_many(
                |tp, v| {
                    let s = tp.conv1d(v[0], v[1], stride)?;
                    weighted(tp, s, &w)
                },
                &[x.clone(), kernel.clone()],
                h,
            ),
        );
    }
    let gamma = random_tensor(&mut r, &[d], 1.0);
    let beta = random_tensor(&mut r, &[d], 1.0);
    if d > 1 {
        push(
            "layer_norm",
            grad_check_many(
                |tp, v| {
                    let s = tp.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    weighted(tp, s, &w)
                },
                &[x.clone(), gamma, beta],
                h,
            ),
        );
    }
    push(
        "softmax",
        grad_check(
            |tp, v| {
                let s = tp.softmax_lastdim(v, None)?;
                weighted(tp, s, &w)
            },
            &x,
            h,
        ),
    );
    let smask: Vec<bool> = (0..t * d)
        .map(|i| i % d == 0 || r.random_bool(0.6))
        .collect();
    push(
        "softmax_masked",
        grad_check(
            |tp, v| {
                let s = tp.softmax_lastdim(v, Some(&smask))?;
                weighted(tp, s, &w)
            },
            &x,
            h,
        ),
    );
    let heads = if d % 2 == 0 { 2 } else { 1 };
    let window = 2 * r.random_range(0..4) + 1;
    let v_in = random_tensor(&mut r, &[t, d], 1.0);
    let wmask = tsl_core::model::window_mask(&vec![true; t], window, heads);
    push(
        "window_attention",
        grad_check_many(
            |tp, v| {
                let s = tp.window_scores(v[0], v[1], heads, window, 0.7)?;
                let a = tp.softmax_lastdim(s, Some(&wmask))?;
                let m = tp.window_mix(a, v[2])?;
                weighted(tp, m, &w)
            },
            &[x.clone(), y.clone(), v_in],
            h,
        ),
    );
    out
}
