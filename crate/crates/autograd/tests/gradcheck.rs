//! Finite-difference checks for every op's backward implementation.
//!
//! Each case builds a small random graph twice: once for analytic
//! gradients, then repeatedly with perturbed inputs for central
//! differences. f64 everywhere, so agreement is expected to ~1e-6.

use dfgr_autograd::conv;
use dfgr_autograd::tape::{Arr, Tape, Var};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    Arr::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

/// Check d(scalar)/d(inputs[i]) for every input against central differences.
fn check<F>(name: &str, inputs: &[Arr], build: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |arrs: &[Arr]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = arrs.iter().map(|a| tape.leaf(a.clone())).collect();
        build(&tape, &vars).scalar_value()
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = build(&tape, &vars);
    assert_eq!(out.shape(), Vec::<usize>::new(), "{name}: output must be scalar");
    let grads = tape.backward(out);

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Arr::zeros(input.raw_dim()));
        for (idx, _) in input.indexed_iter() {
            let mut plus = inputs.to_vec();
            plus[k][&idx] += FD_H;
            let mut minus = inputs.to_vec();
            minus[k][&idx] -= FD_H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let a = analytic[&idx];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() / denom < TOL,
                "{name}: input {k} at {idx:?}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_arr(&mut rng, &[2, 3]);
    let b = rand_arr(&mut rng, &[2, 3]);
    check("add", &[a.clone(), b.clone()], |_, v| (v[0] + v[1]).sum_all());
    check("sub", &[a.clone(), b.clone()], |_, v| (v[0] - v[1]).sum_all());
    check("mul", &[a.clone(), b.clone()], |_, v| (v[0] * v[1]).sum_all());
    check("neg", &[a.clone()], |_, v| (-v[0]).sum_all());
    check("add_scalar", &[a.clone()], |_, v| (v[0] + 0.7).sum_all());
    check("mul_scalar", &[a.clone()], |_, v| (v[0] * -1.3).sum_all());
    check("rsub_scalar", &[a.clone()], |_, v| (2.0 - v[0]).sum_all());
    check("sqr", &[a.clone()], |_, v| v[0].sqr().sum_all());
    check("tanh", &[a.clone()], |_, v| v[0].tanh().sum_all());
    check("exp", &[a.clone()], |_, v| v[0].exp().sum_all());
    check("mean_all", &[a.clone()], |_, v| v[0].mean_all());
}

#[test]
fn guarded_ops_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // keep values away from 0 so relu/clamp/sqrt/ln are smooth at the probe
    let pos = rand_arr(&mut rng, &[2, 3]).mapv(|x| x.abs() + 0.5);
    let mixed = rand_arr(&mut rng, &[2, 3]).mapv(|x| if x.abs() < 0.2 { x + 0.4 } else { x });
    check("relu", &[mixed.clone()], |_, v| v[0].relu().sum_all());
    check("ln", &[pos.clone()], |_, v| v[0].ln().sum_all());
    check("sqrt", &[pos.clone()], |_, v| v[0].sqrt().sum_all());
    check("recip", &[pos.clone()], |_, v| v[0].recip().sum_all());
    check("clamp_min", &[mixed.clone()], |_, v| {
        v[0].clamp_min(0.1).sum_all()
    });
    check("pow_scalar", &[pos.clone()], |_, v| {
        v[0].pow_scalar(2.0).sum_all()
    });
    check("pow_scalar_zero", &[pos], |_, v| {
        v[0].pow_scalar(0.0).sum_all()
    });
}

#[test]
fn matrix_and_gather_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_arr(&mut rng, &[3, 4]);
    let b = rand_arr(&mut rng, &[4, 2]);
    let bias = rand_arr(&mut rng, &[4]);
    check("matmul", &[a.clone(), b.clone()], |_, v| {
        v[0].matmul(v[1]).sqr().sum_all()
    });
    check("add_rowvec", &[a.clone(), bias], |_, v| {
        v[0].add_rowvec(v[1]).sqr().sum_all()
    });
    check("reshape", &[a.clone()], |_, v| {
        v[0].reshape(&[2, 6]).sqr().sum_all()
    });
    check("gather_rows", &[a.clone()], |_, v| {
        v[0].gather_rows(&[2, 0, 2]).sqr().sum_all()
    });
    check("gather_label", &[a.clone()], |_, v| {
        v[0].gather_label(&[1, 3, 0]).sqr().sum_all()
    });
    check("mean_axis0", &[a.clone()], |_, v| {
        v[0].mean_axis0().sqr().sum_all()
    });
    check("log_softmax", &[a], |_, v| {
        v[0].log_softmax().gather_label(&[1, 3, 0]).sum_all()
    });
}

#[test]
fn conv_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_arr(&mut rng, &[2, 2, 5, 5]);
    let w = rand_arr(&mut rng, &[3, 2, 3, 3]);
    check("conv2d_s1", &[x.clone(), w.clone()], |_, v| {
        conv::conv2d(v[0], v[1], 1, 1).sqr().sum_all()
    });
    check("conv2d_s2_nopad", &[x.clone(), w.clone()], |_, v| {
        conv::conv2d(v[0], v[1], 2, 0).sqr().sum_all()
    });
    let w1 = rand_arr(&mut rng, &[4, 2, 1, 1]);
    check("conv2d_1x1_fast_path", &[x.clone(), w1], |_, v| {
        conv::conv2d(v[0], v[1], 1, 0).sqr().sum_all()
    });
    // 16x16 plane exercises the direct 3x3 same-padding path
    let x16 = rand_arr(&mut rng, &[1, 2, 16, 16]);
    let w16 = rand_arr(&mut rng, &[2, 2, 3, 3]);
    check("conv2d_3x3_direct_path", &[x16, w16], |_, v| {
        conv::conv2d(v[0], v[1], 1, 1).sqr().sum_all()
    });
    let x4 = rand_arr(&mut rng, &[2, 3, 4, 4]);
    check("upsample2x", &[x4.clone()], |_, v| {
        conv::upsample2x(v[0]).sqr().sum_all()
    });
    check("pad_reflect", &[x4.clone()], |_, v| {
        conv::pad_reflect(v[0], 1).sqr().sum_all()
    });
    check("pool_mean_hw", &[x4.clone()], |_, v| {
        conv::pool_mean_hw(v[0]).sqr().sum_all()
    });
    check("channel_mean", &[x4], |_, v| {
        conv::channel_mean(v[0]).sqr().sum_all()
    });
}

#[test]
fn channel_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_arr(&mut rng, &[2, 3, 3, 3]);
    let v3 = rand_arr(&mut rng, &[3]);
    let s = rand_arr(&mut rng, &[2, 3]);
    check("add_chan", &[x.clone(), v3.clone()], |_, v| {
        conv::add_chan(v[0], v[1]).sqr().sum_all()
    });
    check("sub_chan", &[x.clone(), v3.clone()], |_, v| {
        conv::sub_chan(v[0], v[1]).sqr().sum_all()
    });
    check("mul_chan", &[x.clone(), v3], |_, v| {
        conv::mul_chan(v[0], v[1]).sqr().sum_all()
    });
    check("add_nc", &[x.clone(), s.clone()], |_, v| {
        conv::add_nc(v[0], v[1]).sqr().sum_all()
    });
    check("mul_nc", &[x, s], |_, v| {
        conv::mul_nc(v[0], v[1]).sqr().sum_all()
    });
}

#[test]
fn batchnorm_composite_gradient() {
    // batch-norm as composed in the layers: verifies the whole chain
    // mean -> center -> variance -> rsqrt -> scale
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_arr(&mut rng, &[3, 2, 2, 2]).mapv(|v| v * 2.0);
    let gamma = rand_arr(&mut rng, &[2]).mapv(|v| v + 1.5);
    let beta = rand_arr(&mut rng, &[2]);
    check("batchnorm_train", &[x, gamma, beta], |_, v| {
        let mean = conv::channel_mean(v[0]);
        let centered = conv::sub_chan(v[0], mean);
        let var = conv::channel_mean(centered.sqr());
        let inv = var.add_scalar(1e-5).sqrt().recip();
        let xhat = conv::mul_chan(centered, inv);
        let y = conv::add_chan(conv::mul_chan(xhat, v[1]), v[2]);
        y.sqr().sum_all()
    });
}
