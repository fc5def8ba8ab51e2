//! Finite-difference verification of every differentiable op and every
//! block type, at 64-bit, over multiple seeds.
//!
//! Each case builds a scalar objective from trainable leaves, lets the
//! tape produce gradients, and compares against central differences
//! (eps = 1e-5) at relative tolerance 1e-4. Objectives weight the raw
//! outputs by a fixed random tensor so that no symmetry cancels gradients,
//! and the weights are frozen before checking so every probe evaluates the
//! same function.

use coca_core::attention::{CoordinatorMode, GcwaOp, GgcaOp, WsaOp};
use coca_core::backbone::{build_model, ConvGlu, MbConvBlock, ModelConfig};
use coca_core::coordinator::{
    anchor_loss, generate_coordinators, token_merge, GeneratorWeights, TokenMergeWeights,
};
use coca_core::gradcheck::{grad_check, GradCheckOpts, GradReport};
use coca_core::ops::Conv2dSpec;
use coca_core::{Result, Rng, Tensor64};

const SEEDS: [u64; 5] = [1, 2, 3, 5, 8];

fn assert_pass(report: &GradReport, what: &str, seed: u64) {
    assert!(
        report.pass,
        "{what} (seed {seed}): max rel err {:.3e} over {} points{}",
        report.max_rel_err,
        report.points,
        report
            .failure
            .as_ref()
            .map(|f| format!(" ({f})"))
            .unwrap_or_default()
    );
}

/// Flatten tensors to 1-D and concatenate, so multi-output objectives can
/// share one fixed weighting.
fn flatcat(parts: &[&Tensor64]) -> Result<Tensor64> {
    let flat: Vec<Tensor64> = parts
        .iter()
        .map(|t| t.reshape(&[t.numel()]))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor64> = flat.iter().collect();
    Tensor64::concat(&refs, 0)
}

/// Probe the output shape once, freeze a random weighting of that shape,
/// then finite-difference the weighted sum.
fn check_output<F>(what: &str, seed: u64, params: Vec<(String, Tensor64)>, f: F)
where
    F: Fn() -> Result<Tensor64>,
{
    let probe = f().unwrap();
    let mut wrng = Rng::new(seed ^ 0xDEAD_BEEF);
    let weights: Tensor64 = wrng.normal(&probe.shape(), 1.0);
    drop(probe);
    let objective = move || f()?.mul(&weights)?.sum_all();
    let report = grad_check(objective, &params, GradCheckOpts::default()).unwrap();
    assert_pass(&report, what, seed);
}

fn collect_params(
    seed_params: Vec<(String, Tensor64)>,
    visit: impl FnOnce(&mut dyn FnMut(&str, &Tensor64)),
) -> Vec<(String, Tensor64)> {
    let mut params = seed_params;
    visit(&mut |name: &str, t: &Tensor64| params.push((name.to_string(), t.clone())));
    params
}

#[test]
fn op_matmul() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let a: Tensor64 = rng.normal(&[2, 3, 4], 1.0);
        a.make_param();
        let b: Tensor64 = rng.normal(&[4, 5], 1.0);
        b.make_param();
        let (ac, bc) = (a.clone(), b.clone());
        check_output(
            "matmul",
            seed,
            vec![("a".into(), a), ("b".into(), b)],
            move || ac.matmul(&bc),
        );
    }
}

#[test]
fn op_conv2d_grouped_strided() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let x: Tensor64 = rng.normal(&[2, 4, 5, 5], 1.0);
        x.make_param();
        let w: Tensor64 = rng.normal(&[6, 2, 3, 3], 0.5);
        w.make_param();
        let spec = Conv2dSpec {
            stride: 2,
            padding: 1,
            groups: 2,
        };
        let (xc, wc) = (x.clone(), w.clone());
        check_output(
            "conv2d",
            seed,
            vec![("x".into(), x), ("w".into(), w)],
            move || xc.conv2d(&wc, spec),
        );
    }
}

#[test]
fn op_softmax_plain_and_masked() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let x: Tensor64 = rng.normal(&[4, 2, 3, 6], 2.0);
        x.make_param();
        let xc = x.clone();
        check_output("softmax", seed, vec![("x".into(), x.clone())], move || {
            xc.softmax_rows()
        });

        let mask = coca_core::ops::KeyMask::new(
            2,
            6,
            vec![
                true, true, false, true, false, true, // window 0
                true, false, true, true, true, false, // window 1
            ],
        )
        .unwrap();
        let xc = x.clone();
        check_output("softmax_masked", seed, vec![("x".into(), x)], move || {
            xc.softmax_rows_masked(&mask)
        });
    }
}

#[test]
fn op_layer_norm_and_l2_normalize() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let x: Tensor64 = rng.normal(&[3, 7], 1.5);
        x.make_param();
        let gamma: Tensor64 = rng.normal(&[7], 1.0);
        gamma.make_param();
        let beta: Tensor64 = rng.normal(&[7], 1.0);
        beta.make_param();
        let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
        check_output(
            "layer_norm",
            seed,
            vec![
                ("x".into(), x.clone()),
                ("gamma".into(), gamma),
                ("beta".into(), beta),
            ],
            move || xc.layer_norm(&gc, &bc, 1e-5),
        );

        let xc = x.clone();
        check_output("l2_normalize", seed, vec![("x".into(), x)], move || {
            xc.l2_normalize_rows(0.0)
        });
    }
}

#[test]
fn op_activations_and_elementwise() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let x: Tensor64 = rng.normal(&[3, 5], 1.0);
        x.make_param();
        let y: Tensor64 = rng.normal(&[5], 1.0);
        y.make_param();
        let (xc, yc) = (x.clone(), y.clone());
        check_output(
            "gelu/sigmoid/add/sub/mul/scale",
            seed,
            vec![("x".into(), x), ("y".into(), y)],
            move || {
                let a = xc.gelu()?.add(&yc.sigmoid()?)?; // broadcast add
                xc.mul(&a)?.sub(&yc)?.scale(0.7)
            },
        );
    }
}

#[test]
fn op_reductions_and_pools() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let x: Tensor64 = rng.normal(&[2, 3, 4, 4], 1.0);
        x.make_param();
        let xc = x.clone();
        check_output("reductions", seed, vec![("x".into(), x)], move || {
            let gap = xc.global_avg_pool()?; // [2,3]
            let mean = xc.mean_axis(1)?; // [2,4,4]
            let max = xc.max_axis(1)?; // [2,4,4]
            let all = xc.mean_all()?.reshape(&[1])?;
            flatcat(&[&gap, &mean, &max, &all])
        });
    }
}

#[test]
fn op_shape_movement() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let x: Tensor64 = rng.normal(&[2, 3, 4], 1.0);
        x.make_param();
        let t: Tensor64 = rng.normal(&[5, 3], 1.0);
        t.make_param();
        let (xc, tc) = (x.clone(), t.clone());
        check_output(
            "reshape/permute/concat/narrow/pad/broadcast/gather",
            seed,
            vec![("x".into(), x), ("table".into(), t)],
            move || {
                let a = xc.permute(&[1, 0, 2])?.reshape(&[3, 8])?;
                let b = a.narrow(1, 2, 4)?.pad_axis_end(1, 2)?; // [3,6]
                let c = Tensor64::concat(&[&b, &a.narrow(1, 0, 6)?], 0)?; // [6,6]
                let d = xc
                    .mean_axis(2)?
                    .reshape(&[2, 3, 1])?
                    .broadcast_to(&[2, 3, 4])?;
                let g = tc.gather_rows(&[0, 2, 2, 4])?;
                flatcat(&[&c, &d, &g])
            },
        );
    }
}

#[test]
fn op_cross_entropy() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let logits: Tensor64 = rng.normal(&[4, 5], 1.0);
        logits.make_param();
        let targets = vec![0, 3, 2, 4];
        let lc = logits.clone();
        let report = grad_check(
            move || lc.cross_entropy(&targets),
            &[("logits".into(), logits)],
            GradCheckOpts::default(),
        )
        .unwrap();
        assert_pass(&report, "cross_entropy", seed);
    }
}

// ---- block types -----------------------------------------------------------

#[test]
fn block_wsa() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let op = WsaOp::<f64>::init(&mut rng, 4, 2, 2).unwrap();
        let grid: Tensor64 = rng.normal(&[1, 4, 4, 4], 1.0);
        grid.make_param();
        let params = collect_params(vec![("grid".into(), grid.clone())], |f| op.visit("wsa", f));
        check_output("wsa block", seed, params, move || op.forward(&grid));
    }
}

#[test]
fn block_ggca_gcwa_composite() {
    // the coordinator update feeding the window attention, end to end
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let ggca = GgcaOp::<f64>::init(&mut rng, 4, 2).unwrap();
        let gcwa = GcwaOp::<f64>::init(&mut rng, 4, 2, 2).unwrap();
        let grid: Tensor64 = rng.normal(&[1, 4, 4, 4], 1.0);
        grid.make_param();
        let coords: Tensor64 = rng.normal(&[1, 3, 4], 1.0);
        coords.make_param();
        let params = collect_params(
            vec![("grid".into(), grid.clone()), ("coords".into(), coords.clone())],
            |f| {
                ggca.visit("ggca", f);
                gcwa.visit("gcwa", f);
            },
        );
        check_output("ggca+gcwa", seed, params, move || {
            let g = ggca.forward(&coords, &grid)?;
            let out = gcwa.forward(&grid, &g, CoordinatorMode::Active)?;
            flatcat(&[&out, &g])
        });
    }
}

#[test]
fn block_gcwa_padded_path() {
    // grid not divisible by the window: exercises pad + mask backward
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let gcwa = GcwaOp::<f64>::init(&mut rng, 4, 2, 4).unwrap();
        let grid: Tensor64 = rng.normal(&[1, 2, 2, 4], 1.0);
        grid.make_param();
        let coords: Tensor64 = rng.normal(&[1, 2, 4], 1.0);
        coords.make_param();
        let params = collect_params(
            vec![("grid".into(), grid.clone()), ("coords".into(), coords.clone())],
            |f| gcwa.visit("gcwa", f),
        );
        check_output("gcwa padded", seed, params, move || {
            gcwa.forward(&grid, &coords, CoordinatorMode::Active)
        });
    }
}

#[test]
fn block_conv_glu() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let glu = ConvGlu::<f64>::init(&mut rng, 4, 3).unwrap();
        let grid: Tensor64 = rng.normal(&[1, 3, 3, 4], 1.0);
        grid.make_param();
        let params = collect_params(vec![("grid".into(), grid.clone())], |f| glu.visit("glu", f));
        check_output("conv_glu", seed, params, move || glu.forward(&grid));
    }
}

#[test]
fn block_mbconv() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let block = MbConvBlock::<f64>::init(&mut rng, 4).unwrap();
        let x: Tensor64 = rng.normal(&[1, 4, 4, 4], 1.0);
        x.make_param();
        let params = collect_params(vec![("x".into(), x.clone())], |f| block.visit("mbconv", f));
        check_output("mbconv", seed, params, move || block.forward(&x));
    }
}

#[test]
fn block_generator() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let gen = GeneratorWeights::<f64>::init(&mut rng, 8, 2).unwrap();
        let x: Tensor64 = rng.normal(&[1, 8, 4, 4], 1.0);
        x.make_param();
        let params = collect_params(vec![("x".into(), x.clone())], |f| gen.visit("generator", f));
        check_output("generator", seed, params, move || {
            generate_coordinators(&x, &gen)
        });
    }
}

#[test]
fn block_token_merge() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let merge = TokenMergeWeights::<f64>::init(&mut rng, 3, 4, 6);
        let g: Tensor64 = rng.normal(&[2, 3, 4], 1.0);
        g.make_param();
        let params = collect_params(vec![("g".into(), g.clone())], |f| merge.visit("merge", f));
        check_output("token_merge", seed, params, move || token_merge(&g, &merge));
    }
}

#[test]
fn block_anchor_loss() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let g: Tensor64 = rng.normal(&[3, 4, 5], 1.0);
        g.make_param();
        let gc = g.clone();
        let report = grad_check(
            move || Ok(anchor_loss(&gc)?.total),
            &[("g".into(), g)],
            GradCheckOpts::default(),
        )
        .unwrap();
        assert_pass(&report, "anchor_loss", seed);
    }
}

#[test]
fn full_nano_model_end_to_end() {
    // cross-entropy + anchor loss through the whole nano model,
    // strided coordinate sampling to keep the probe count bounded
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let config = ModelConfig::variant("nano").unwrap();
        let model = build_model::<f64>(&config, &mut rng).unwrap();
        let images: Tensor64 = rng.uniform(&[2, 3, 32, 32], 0.0, 1.0);
        let targets = vec![rng.below(4), rng.below(4)];
        let params = model.named_params();
        let report = grad_check(
            || {
                let out = model.forward(&images)?;
                let ce = out.logits.cross_entropy(&targets)?;
                ce.add(&out.anchor.unwrap().total)
            },
            &params,
            GradCheckOpts {
                max_points_per_param: Some(4),
                ..Default::default()
            },
        )
        .unwrap();
        assert_pass(&report, "nano model", seed);
    }
}
