#![allow(dead_code)]

pub mod reference;

use dcsfn::gradcheck::{check_gradient, GradCheck};
use dcsfn::model::{dcsfn_forward, DcsfnParams, NetConfig};
use dcsfn::{Element, Result, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_MIN_STEP: f64 = 1e-7;
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Element>(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::of(rng.gen_range(lo..hi)))
}

/// Seeded weights plus small random biases, so bias paths are exercised.
pub fn random_params<T: Element>(cfg: &NetConfig, seed: u64) -> DcsfnParams<Tensor<T>> {
    let mut params = DcsfnParams::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for spec in params.convs_mut() {
        spec.bias = uniform(spec.bias.shape(), -0.1, 0.1, &mut r);
    }
    params
}

pub fn merge(reports: impl IntoIterator<Item = GradCheck>) -> GradCheck {
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        at_full_step: 0,
        refined: 0,
        unresolved: 0,
    };
    for r in reports {
        if r.max_rel_error >= out.max_rel_error {
            out.max_rel_error = r.max_rel_error;
            out.worst = r.worst;
        }
        out.at_full_step += r.at_full_step;
        out.refined += r.refined;
        out.unresolved += r.unresolved;
    }
    out
}

/// Checks the gradient of `sum(weights ⊙ build(inputs))` with respect to
/// every input, with a fixed random projection `weights`.
pub fn check_op(
    inputs: &[Tensor<f64>],
    seed: u64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> GradCheck {
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.shape(out).unwrap()
    };
    let projection: Tensor<f64> = uniform(shape, -1.0, 1.0, &mut rng(seed));
    let project = |tape: &mut Tape<f64>, out: Var| -> Result<Var> {
        let w = tape.constant(projection.clone());
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out).unwrap();
    let grads = tape.backward(loss).unwrap();

    merge((0..inputs.len()).map(|i| {
        let analytic = grads.get(vars[i]).expect("every input is an ancestor").clone();
        let eval = |t: &Tensor<f64>| -> Result<(f64, u64)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| tape.constant(if j == i { t.clone() } else { x.clone() }))
                .collect();
            let out = build(&mut tape, &vars)?;
            let loss = project(&mut tape, out)?;
            Ok((tape.value(loss)?.item()?, tape.branch_signature()))
        };
        check_gradient(eval, &inputs[i], &analytic, FD_STEP, FD_MIN_STEP, FD_FLOOR).unwrap()
    }))
}

/// Finite-difference check of the whole network with respect to every
/// parameter tensor and the input image.
pub fn check_model(cfg: &NetConfig, size: usize, seed: u64) -> GradCheck {
    let params = random_params::<f64>(cfg, seed);
    let mut r = rng(seed + 1);
    let image: Tensor<f64> = uniform(Shape::new(1, cfg.image_channels, size, size), 0.0, 1.0, &mut r);
    let projection: Tensor<f64> = uniform(image.shape(), -1.0, 1.0, &mut r);

    let run = |tape: &mut Tape<f64>, p: &DcsfnParams<Var>, x: Var| -> Result<Var> {
        let out = dcsfn_forward(tape, x, p)?;
        let w = tape.constant(projection.clone());
        let prod = tape.mul(out.rain, w)?;
        tape.sum(prod)
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.param(image.clone());
    let loss = run(&mut tape, &bound, x).unwrap();
    let grads = tape.backward(loss).unwrap();

    let vars: Vec<Var> = bound.named().into_iter().map(|(_, v)| *v).collect();
    let mut reports = Vec::new();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("parameter gradient").clone();
        let eval = |t: &Tensor<f64>| -> Result<(f64, u64)> {
            let mut p = params.clone();
            *p.tensors_mut()[i] = t.clone();
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, false);
            let x = tape.constant(image.clone());
            let loss = run(&mut tape, &b, x)?;
            Ok((tape.value(loss)?.item()?, tape.branch_signature()))
        };
        let current = params.named()[i].1.clone();
        reports.push(check_gradient(eval, &current, &analytic, FD_STEP, FD_MIN_STEP, FD_FLOOR).unwrap());
    }
    let analytic = grads.get(x).expect("input gradient").clone();
    let eval = |t: &Tensor<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let x = tape.constant(t.clone());
        let loss = run(&mut tape, &b, x)?;
        Ok((tape.value(loss)?.item()?, tape.branch_signature()))
    };
    reports.push(check_gradient(eval, &image, &analytic, FD_STEP, FD_MIN_STEP, FD_FLOOR).unwrap());
    merge(reports)
}

/// Every parameter of `bound` has a finite gradient that is not identically zero.
/// Returns the names that fail.
pub fn dead_parameters<T: Element>(bound: &DcsfnParams<Var>, grads: &dcsfn::Gradients<T>) -> Vec<String> {
    bound
        .named()
        .into_iter()
        .filter(|(_, v)| match grads.get(**v) {
            None => true,
            Some(g) => {
                !g.data().iter().all(|x| x.is_finite()) || g.data().iter().all(|x| *x == T::zero())
            }
        })
        .map(|(n, _)| n)
        .collect()
}

/// Finite-difference checks of every differentiable primitive on random
/// 64-bit inputs in `[−1, 1]` (images in `[0, 1]` for SSIM).
pub fn primitive_checks() -> Vec<(&'static str, GradCheck)> {
    use dcsfn::metrics::{ssim_loss, SsimConfig};
    use dcsfn::nn::{ConvGeometry, ConvSpec, GruParams};

    let mut r = rng(2024);
    let mut t = |n, c, h, w| -> Tensor<f64> { uniform(Shape::new(n, c, h, w), -1.0, 1.0, &mut r) };
    let mut out = Vec::new();

    let x = t(2, 4, 6, 6);
    for (name, g) in [
        ("conv2d 3x3", ConvGeometry::same(4, 6, 3, 1).unwrap()),
        ("conv2d 3x3 groups=2", ConvGeometry::same(4, 6, 3, 2).unwrap()),
        ("conv2d 3x3 groups=4", ConvGeometry::same(4, 4, 3, 4).unwrap()),
        ("conv2d 1x1", ConvGeometry::pointwise(4, 3).unwrap()),
        ("conv2d stride 2", ConvGeometry::new(4, 2, (2, 2), 2, 0, 2).unwrap()),
    ] {
        let w = t(g.weight_shape().n, g.weight_shape().c, g.kernel.0, g.kernel.1);
        let b = t(1, g.out_channels, 1, 1);
        out.push((name, check_op(&[x.clone(), w, b], 1, |tape, v| tape.conv2d(v[0], v[1], Some(v[2]), &g))));
    }
    out.push(("leaky_relu", check_op(&[t(2, 3, 5, 5)], 2, |tape, v| tape.leaky_relu(v[0], 0.2))));
    for k in [2, 4] {
        let name = if k == 2 { "strided_max_pool k=2" } else { "strided_max_pool k=4" };
        out.push((name, check_op(&[t(1, 3, 8, 8)], 3, move |tape, v| tape.strided_max_pool(v[0], k))));
    }
    out.push(("upsample_nearest", check_op(&[t(1, 3, 3, 4)], 4, |tape, v| tape.upsample_nearest(v[0], 2))));
    out.push(("avg_pool", check_op(&[t(1, 3, 4, 4)], 5, |tape, v| tape.avg_pool(v[0], 2))));
    out.push(("concat_channels", check_op(&[t(1, 2, 3, 3), t(1, 3, 3, 3)], 6, |tape, v| tape.concat_channels(v))));
    out.push(("add/sub/mul/div", check_op(&[t(1, 2, 3, 3), t(1, 2, 3, 3)], 7, |tape, v| {
        let s = tape.add(v[0], v[1])?;
        let d = tape.sub(v[0], v[1])?;
        let p = tape.mul(s, d)?;
        let den = tape.mul(v[1], v[1])?;
        let den = tape.affine(den, 1.0, 1.0)?;
        tape.div(p, den)
    })));
    out.push(("sigmoid/tanh/mean", check_op(&[t(1, 2, 3, 3)], 8, |tape, v| {
        let s = tape.sigmoid(v[0])?;
        let h = tape.tanh(s)?;
        let m = tape.mul(h, v[0])?;
        tape.mean(m)
    })));

    let (cin, hidden) = (3, 4);
    let g = GruParams::<()>::geometry(cin, hidden).unwrap();
    let ws = g.weight_shape();
    // Gate weights at fan-in scale.
    let mut wrng = rng(98);
    let mut tw = || uniform::<f64>(ws, -0.3, 0.3, &mut wrng);
    let (wz, wr, wh) = (tw(), tw(), tw());
    let tb = || uniform::<f64>(Shape::new(1, hidden, 1, 1), -1.0, 1.0, &mut rng(99));
    let (bz, br, bh) = (tb(), tb(), tb());
    let inputs = [t(1, cin, 5, 5), t(1, hidden, 5, 5), wz, bz, wr, br, wh, bh];
    out.push(("conv_gru_step", check_op(&inputs, 9, move |tape, v| {
        let spec = |w, b| ConvSpec { geometry: g, weight: w, bias: b };
        let p = GruParams {
            update: spec(v[2], v[3]),
            reset: spec(v[4], v[5]),
            candidate: spec(v[6], v[7]),
        };
        tape.conv_gru_step(v[0], v[1], &p)
    })));

    let target: Tensor<f64> = uniform(Shape::new(2, 3, 12, 12), 0.0, 1.0, &mut rng(10));
    let estimate: Tensor<f64> = uniform(Shape::new(2, 3, 12, 12), 0.0, 1.0, &mut rng(11));
    out.push(("ssim_loss", check_op(&[estimate], 12, move |tape, v| {
        let b = tape.constant(target.clone());
        ssim_loss(tape, v[0], b, &SsimConfig::default())
    })));
    out
}
