use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Compares the tape gradient of `f` at `x` with central differences.
/// `f` must reduce to a scalar and may close over constant inputs.
fn check(x: Tensor, f: impl Fn(&mut Tape, Var) -> Var, tol: f64) {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv);
    let grads = tape.backward(y);
    let analytic = grads.get(xv).unwrap().clone();

    let h = 1e-2f32;
    let mut num = vec![0.0f64; x.len()];
    for (i, n) in num.iter_mut().enumerate() {
        let eval = |delta: f32| {
            let mut xp = x.clone();
            xp.data_mut()[i] += delta;
            let mut t = Tape::new();
            let v = t.leaf(xp);
            let out = f(&mut t, v);
            t.value(out).data()[0] as f64
        };
        *n = (eval(h) - eval(-h)) / (2.0 * h as f64);
    }
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(&num)
        .map(|(&a, &n)| (a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-6);
    assert!(
        diff / scale < tol,
        "relative gradient error {} (analytic {:?}, numeric {:?})",
        diff / scale,
        &analytic.data()[..analytic.len().min(6)],
        &num[..num.len().min(6)]
    );
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

/// Weighted sum so every output element influences the scalar differently.
fn probe(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let wv = tape.constant(w);
    let p = tape.mul(v, wv).unwrap();
    tape.mean(p)
}

#[test]
fn conv_input_and_weight_gradients() {
    let mut r = rng();
    let w = Tensor::randn(&[4, 3, 3, 3], 0.3, &mut r);
    let b = Tensor::randn(&[4], 0.3, &mut r);
    let x = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut r);
    {
        let (w, b) = (w.clone(), b.clone());
        check(
            x.clone(),
            move |t, xv| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
                probe(t, y, 1)
            },
            1e-2,
        );
    }
    check(
        w,
        move |t, wv| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
            probe(t, y, 2)
        },
        1e-2,
    );
}

#[test]
fn conv_bias_gradient_is_spatial_sum() {
    let mut r = rng();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[2, 2, 4, 4], 1.0, &mut r));
    let w = tape.constant(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r));
    let b = tape.leaf(Tensor::zeros(&[3]));
    let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
    let m = tape.mean(y);
    let g = tape.backward(m);
    for &v in g.get(b).unwrap().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }
}

#[test]
fn instance_norm_gradient() {
    let x = Tensor::randn(&[2, 3, 4, 4], 2.0, &mut rng());
    check(
        x,
        |t, v| {
            let y = t.instance_norm(v, 1e-5).unwrap();
            probe(t, y, 3)
        },
        1e-2,
    );
}

#[test]
fn instance_norm_output_is_standardized() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[1, 2, 8, 8], 3.0, &mut rng()).map(|v| v + 5.0));
    let y = tape.instance_norm(x, 1e-5).unwrap();
    for plane in tape.value(y).data().chunks(64) {
        let m: f32 = plane.iter().sum::<f32>() / 64.0;
        let v: f32 = plane.iter().map(|a| (a - m) * (a - m)).sum::<f32>() / 64.0;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-3);
    }
}

#[test]
fn affine_linear_and_layout_gradients() {
    let mut r = rng();
    let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
    let g = Tensor::randn(&[2, 3], 1.0, &mut r);
    {
        let x = x.clone();
        check(
            g.clone(),
            move |t, gv| {
                let xv = t.constant(x.clone());
                let bv = t.constant(Tensor::zeros(&[2, 3]));
                let y = t.channel_affine(xv, gv, bv).unwrap();
                probe(t, y, 4)
            },
            1e-2,
        );
    }
    let w = Tensor::randn(&[5, 3], 1.0, &mut r);
    check(
        Tensor::randn(&[2, 3], 1.0, &mut r),
        move |t, v| {
            let wv = t.constant(w.clone());
            let bv = t.constant(Tensor::zeros(&[5]));
            let y = t.linear(v, wv, bv).unwrap();
            probe(t, y, 5)
        },
        1e-2,
    );
    check(
        x.clone(),
        |t, v| {
            let d = t.downsample2(v).unwrap();
            let c = t.concat_channels(&[v, v]).unwrap();
            let cr = t.crop(c, &[(1, 0), (0, 2)], 2).unwrap();
            let a = probe(t, d, 6);
            let b = probe(t, cr, 7);
            t.add(a, b).unwrap()
        },
        1e-2,
    );
    check(
        Tensor::randn(&[2, 3], 1.0, &mut r),
        |t, v| {
            let y = t.replicate_spatial(v, 3, 2).unwrap();
            let y = t.tanh(y);
            probe(t, y, 8)
        },
        1e-2,
    );
}

#[test]
fn gradients_route_to_param_store() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::full(&[3], 2.0));
    let mut tape = Tape::new();
    let a = tape.param(&store, id);
    let b = tape.param(&store, id);
    let s = tape.mul(a, b).unwrap();
    let m = tape.mean(s);
    let g = tape.backward(m).param_grads(&store);
    // d/dw mean(w²) = 2w/3, contributed once by each use.
    for &v in g[0].data() {
        assert!((v - 4.0 / 3.0).abs() < 1e-6);
    }

    store.set_frozen(true);
    let mut tape = Tape::new();
    let a = tape.param(&store, id);
    assert!(!tape.requires_grad(a));
}

#[test]
fn adam_moves_every_parameter_against_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::full(&[2], 1.0));
    let mut opt = Adam::new(AdamConfig::default(), &store);
    let norms = opt.step(
        &mut store,
        &[Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()],
    );
    assert!(norms[0] > 0.0);
    let w = store.value(id).data();
    // First bias-corrected Adam step has magnitude lr.
    assert!((w[0] - (1.0 - 2e-4)).abs() < 1e-6);
    assert!((w[1] - (1.0 + 2e-4)).abs() < 1e-6);
}
