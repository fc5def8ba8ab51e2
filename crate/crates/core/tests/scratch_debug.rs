use coca_core::backbone::{build_model, ModelConfig};
use coca_core::gradcheck::{grad_check, GradCheckOpts};
use coca_core::{Rng, Tensor64};

#[test]
fn debug_nano_conditioned() {
    for seed in [1u64, 8] {
        let mut rng = Rng::new(seed);
        let config = ModelConfig::variant("nano").unwrap();
        let model = build_model::<f64>(&config, &mut rng).unwrap();
        // condition the coordinator scale: O(1) generator output bias
        for (name, t) in model.named_params() {
            if name == "generator.mlp_fc2.bias" {
                let d: Tensor64 = rng.normal(&t.shape(), 1.0);
                t.set_data(d.to_vec());
            }
        }
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
            GradCheckOpts { max_points_per_param: Some(4), ..Default::default() },
        ).unwrap();
        println!("seed {seed}: max {:.3e} pass {}", report.max_rel_err, report.pass);
    }
}
