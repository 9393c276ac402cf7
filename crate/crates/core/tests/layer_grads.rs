use mose::layers::{gelu, gelu_backward, Conv3x3, LayerNorm, Linear, Mlp};
use mose::numerics::{grad_check, FnObjective, ParamGrads, ParamValues, ParameterSet, Rng};
use mose::Result;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-7;

/// Checks `sum(f(x) * probe)` for a layer whose input is registered as
/// parameter `x`, so input gradients are probed with the weights.
fn check_layer<F, B>(ps: ParameterSet<f64>, out_len: usize, forward: F, backward: B) -> f64
where
    F: Fn(&ParamValues<'_, f64>, &[f64]) -> Vec<f64> + Sync,
    B: Fn(&ParamValues<'_, f64>, &mut ParamGrads<'_, f64>, &[f64], &[f64]) -> Vec<f64> + Sync,
{
    let x_id = ps.id("x").expect("input registered as x");
    let probe: Vec<f64> = Rng::new(99).uniform_tensor::<f64>(&[out_len], -1.0, 1.0).into_data();
    let dot = |y: &[f64]| y.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
    let obj = FnObjective {
        loss: |p: &ParameterSet<f64>| -> Result<f64> {
            let v = p.values();
            Ok(dot(&forward(&v, v.get(x_id))))
        },
        loss_and_grad: |p: &mut ParameterSet<f64>| -> Result<f64> {
            let (v, mut g) = p.split();
            let x = v.get(x_id);
            let y = forward(&v, x);
            let dx = backward(&v, &mut g, x, &probe);
            g.accumulate(x_id, &dx);
            Ok(dot(&y))
        },
    };
    let r = grad_check(&obj, &ps, EPS).unwrap();
    r.max_rel_error
}

fn input(ps: &mut ParameterSet<f64>, shape: &[usize], rng: &mut Rng) {
    ps.register("x", rng.uniform_tensor(shape, -1.0, 1.0)).unwrap();
}

#[test]
fn linear_gradients() {
    let mut rng = Rng::new(1);
    let mut ps = ParameterSet::new();
    let lin = Linear::new(&mut ps, "fc", 5, 3, true, &mut rng).unwrap();
    input(&mut ps, &[4, 5], &mut rng);
    let err = check_layer(
        ps,
        12,
        |p, x| lin.forward(p, x, 4),
        |p, g, x, dy| lin.backward(p, g, x, dy, 4),
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn layer_norm_gradients() {
    let mut rng = Rng::new(2);
    let mut ps = ParameterSet::new();
    let ln = LayerNorm::with_gain(&mut ps, "ln", 6, 0.7).unwrap();
    let b = ps.id("ln.bias").unwrap();
    ps.value_mut(b).data_mut().iter_mut().for_each(|v| *v = rng.uniform_in(-0.5, 0.5));
    input(&mut ps, &[3, 6], &mut rng);
    let err = check_layer(
        ps,
        18,
        |p, x| ln.forward(p, x).0,
        |p, g, x, dy| {
            let (_, cache) = ln.forward(p, x);
            ln.backward(p, g, &cache, dy)
        },
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn mlp_gradients() {
    let mut rng = Rng::new(3);
    let mut ps = ParameterSet::new();
    let mlp = Mlp::new(&mut ps, "mlp", 4, 7, &mut rng).unwrap();
    for n in ["mlp.fc1.weight", "mlp.fc2.weight"] {
        let id = ps.id(n).unwrap();
        ps.value_mut(id).data_mut().iter_mut().for_each(|v| *v *= 40.0);
    }
    input(&mut ps, &[3, 4], &mut rng);
    let err = check_layer(
        ps,
        12,
        |p, x| mlp.forward(p, x, 3).0,
        |p, g, x, dy| {
            let (_, cache) = mlp.forward(p, x, 3);
            mlp.backward(p, g, x, &cache, dy, 3)
        },
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn gelu_matches_tanh_form_and_derivative() {
    let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1).collect();
    let y = gelu(&xs);
    let c = (2.0 / std::f64::consts::PI).sqrt();
    for (&x, &v) in xs.iter().zip(&y) {
        let want = 0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh());
        assert!((v - want).abs() < 1e-15);
    }
    let d = gelu_backward(&xs, &vec![1.0; xs.len()]);
    for (i, &x) in xs.iter().enumerate() {
        let h = 1e-6;
        let fd = (gelu(&[x + h])[0] - gelu(&[x - h])[0]) / (2.0 * h);
        assert!((d[i] - fd).abs() < 1e-8, "x={x}");
    }
}

fn conv_reference(x: &[f64], w: &[f64], b: &[f64], c_in: usize, c_out: usize, h: usize, wd: usize) -> Vec<f64> {
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; c_out * h * wd];
    for co in 0..c_out {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[co];
                for ci in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = clamp(y as isize + ky as isize - 1, h);
                            let sx = clamp(xx as isize + kx as isize - 1, wd);
                            acc += w[((co * c_in + ci) * 3 + ky) * 3 + kx] * x[(ci * h + sy) * wd + sx];
                        }
                    }
                }
                out[(co * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_forward_replicates_edges() {
    let mut rng = Rng::new(4);
    for &(h, w) in &[(5, 7), (1, 4), (3, 1), (1, 1)] {
        let mut ps = ParameterSet::<f64>::new();
        let conv = Conv3x3::new(&mut ps, "conv", 2, 3, &mut rng).unwrap();
        let bid = ps.id("conv.bias").unwrap();
        ps.value_mut(bid).data_mut().iter_mut().for_each(|v| *v = rng.uniform_in(-1.0, 1.0));
        let x: Vec<f64> = rng.uniform_tensor::<f64>(&[2 * 2 * h * w], -1.0, 1.0).into_data();
        let v = ps.values();
        let (y, _) = conv.forward(&v, &x, 2, h, w);
        for e in 0..2 {
            let want = conv_reference(
                &x[e * 2 * h * w..(e + 1) * 2 * h * w],
                v.get(conv.w),
                v.get(conv.b),
                2,
                3,
                h,
                w,
            );
            let got = &y[e * 3 * h * w..(e + 1) * 3 * h * w];
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{h}x{w}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn conv_gradients_include_edges() {
    for &(h, w) in &[(4, 5), (1, 3), (2, 1)] {
        let mut rng = Rng::new(5);
        let mut ps = ParameterSet::new();
        let conv = Conv3x3::new(&mut ps, "conv", 2, 3, &mut rng).unwrap();
        input(&mut ps, &[2, 2, h, w], &mut rng);
        let err = check_layer(
            ps,
            2 * 3 * h * w,
            |p, x| conv.forward(p, x, 2, h, w).0,
            |p, g, x, dy| {
                let (_, cache) = conv.forward(p, x, 2, h, w);
                conv.backward(p, g, &cache, dy, true).unwrap()
            },
        );
        assert!(err < TOL, "{h}x{w}: {err}");
    }
}

#[test]
fn conv_without_input_gradient() {
    let mut rng = Rng::new(6);
    let mut ps = ParameterSet::<f64>::new();
    let conv = Conv3x3::new(&mut ps, "conv", 1, 1, &mut rng).unwrap();
    let x = vec![0.5; 9];
    let (v, mut g) = ps.split();
    let (_, cache) = conv.forward(&v, &x, 1, 3, 3);
    assert!(conv.backward(&v, &mut g, &cache, &[1.0; 9], false).is_none());
    let bias_grad = ps.grad(conv.b).data()[0];
    assert_eq!(bias_grad, 9.0);
}
