use mose::model::{model_grad_check, ModelConfig};
use mose::numerics::GradCheckOptions;

fn focused(cfg: &ModelConfig) -> Vec<String> {
    let model = mose::Model64::new(cfg.clone(), 3).unwrap();
    model
        .params
        .names()
        .filter(|n| {
            n.starts_with("groups.0.blocks.1.")
                && !n.contains("experts")
                && !n.contains("qkv.weight")
                || n.contains("tau")
                || n.contains("lepe")
                || n.contains("gate")
                || n.contains("sm.")
                || n.starts_with("conv_last")
        })
        .map(str::to_owned)
        .collect()
}

#[test]
fn toy_model_attention_and_routing_gradients() {
    let cfg = ModelConfig::toy();
    let opts = GradCheckOptions {
        only: Some(focused(&cfg)),
        ..Default::default()
    };
    let r = model_grad_check(&cfg, 3, &opts).unwrap();
    assert!(r.probes > 1000);
    assert!(r.max_rel_error < 1e-4, "{} at {}[{}]", r.max_rel_error, r.worst_param, r.worst_index);
}

#[test]
fn corrupted_gradient_is_caught() {
    let cfg = ModelConfig::toy();
    let opts = GradCheckOptions {
        corrupt: true,
        only: Some(vec!["conv_first.bias".into()]),
    };
    let r = model_grad_check(&cfg, 3, &opts).unwrap();
    assert!(r.max_rel_error > 1e-3, "{}", r.max_rel_error);
}

#[test]
fn conditioned_point_has_live_attention_and_expert_gradients() {
    use mose::model::{condition_for_gradcheck, is_post_norm_gain, loss_and_grad, CONDITIONING_SCALE};
    use mose::numerics::{Rng, Tensor};
    let cfg = ModelConfig::toy();
    let mut model = mose::Model64::new(cfg.clone(), 3).unwrap();
    condition_for_gradcheck(&mut model.params, CONDITIONING_SCALE);
    let mut rng = Rng::new(5);
    let lr: Tensor<f64> = rng.uniform_tensor(&[1, 4, 16, 16], 0.0, 1.0);
    let hr: Tensor<f64> = rng.uniform_tensor(&[1, 4, 32, 32], 0.0, 1.0);
    loss_and_grad(&model.net, &mut model.params, &lr, &hr, &cfg.loss).unwrap();
    for (name, value, grad) in model.params.iter() {
        if is_post_norm_gain(name) {
            assert!(value.data().iter().all(|&v| v == 1.0), "{name}");
        }
        if name.contains("attn.qkv") || name.ends_with(".gate") {
            assert!(grad.data().iter().any(|&g| g != 0.0), "{name} has no gradient");
        }
    }
}
