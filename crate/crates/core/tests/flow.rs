mod common;

use common::{live_bundle, rng, small_data};
use flowfm_core::flow::{cfm_loss, flowfm_loss, flowfm_loss_on_path, interpolate, sample_path, PathSample};
use flowfm_core::model::{Bind, MaskPolicy, ModelBundle};
use flowfm_tensor::{Tape, Tensor};
use rand::Rng;

#[test]
fn path_hits_both_endpoints() {
    let mut r = rng(1);
    let x0 = Tensor::randn([2, 3, 300], 1.0, &mut r);
    let x1 = Tensor::randn([2, 3, 300], 1.0, &mut r);
    assert_eq!(interpolate(&x0, &x1, &[0.0, 0.0]), x0);
    assert_eq!(interpolate(&x0, &x1, &[1.0, 1.0]), x1);
    let p = PathSample::new(x0.clone(), x1.clone(), vec![0.0, 1.0]).unwrap();
    assert_eq!(p.x_t.rows(0, 1).unwrap(), x0.rows(0, 1).unwrap());
    assert_eq!(p.x_t.rows(1, 1).unwrap(), x1.rows(1, 1).unwrap());
}

#[test]
fn target_is_time_derivative_of_path() {
    let mut r = rng(2);
    let x0 = Tensor::randn([3, 3, 300], 1.0, &mut r);
    let x1 = Tensor::randn([3, 3, 300], 1.0, &mut r);
    let t = vec![0.2, 0.5, 0.9];
    let p = PathSample::new(x0.clone(), x1.clone(), t.clone()).unwrap();
    let h = 1e-6;
    let plus = interpolate(&x0, &x1, &t.iter().map(|v| v + h).collect::<Vec<_>>());
    let minus = interpolate(&x0, &x1, &t.iter().map(|v| v - h).collect::<Vec<_>>());
    let fd = plus.zip_map(&minus, |a, b| (a - b) / (2.0 * h)).unwrap();
    assert!(fd.max_abs_diff(&p.u_target).unwrap() < 1e-8);
}

#[test]
fn path_rejects_bad_inputs() {
    let a = Tensor::zeros([2, 4]);
    assert!(PathSample::new(a.clone(), Tensor::zeros([2, 5]), vec![0.1, 0.2]).is_err());
    assert!(PathSample::new(a.clone(), a.clone(), vec![0.1]).is_err());
    assert!(PathSample::new(a.clone(), a.clone(), vec![0.1, 1.5]).is_err());
    let mut bad = a.clone();
    bad.data_mut()[0] = f64::NAN;
    assert!(sample_path(&bad, &mut rng(0)).is_err());
}

#[test]
fn sampled_path_uses_standard_normal_prior() {
    let x1 = Tensor::zeros([400, 3, 300]);
    let p = sample_path(&x1, &mut rng(3)).unwrap();
    let n = p.x0.numel() as f64;
    let mean = p.x0.sum() / n;
    let var = p.x0.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var - 1.0).abs() < 0.01, "var {var}");
    assert!(p.t.iter().all(|t| (0.0..1.0).contains(t)));
    let mean_t = p.t.iter().sum::<f64>() / p.t.len() as f64;
    assert!((mean_t - 0.5).abs() < 0.05);
}

#[test]
fn cfm_loss_is_mean_squared_residual() {
    let mut r = rng(4);
    let x0 = Tensor::randn([2, 3, 300], 1.0, &mut r);
    let x1 = Tensor::randn([2, 3, 300], 1.0, &mut r);
    let p = PathSample::new(x0, x1, vec![0.3, 0.6]).unwrap();
    let v = Tensor::randn([2, 3, 300], 1.0, &mut r);

    let mut tape = Tape::new();
    let vv = tape.leaf(v.clone());
    let loss = cfm_loss(&mut tape, vv, &p).unwrap();
    let n = v.numel() as f64;
    let expected: f64 = v
        .data()
        .iter()
        .zip(p.u_target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-12);

    tape.backward(loss).unwrap();
    let g = tape.grad(vv).unwrap();
    for ((gi, a), b) in g.iter().zip(v.data()).zip(p.u_target.data()) {
        assert!((gi - 2.0 * (a - b) / n).abs() < 1e-15);
    }

    let mut tape = Tape::new();
    let exact = tape.leaf(p.u_target.clone());
    let zero = cfm_loss(&mut tape, exact, &p).unwrap();
    assert_eq!(tape.value(zero).item().unwrap(), 0.0);
}

/// Encoder gradient of the joint loss for a fixed path and mask.
fn encoder_grads(b: &ModelBundle, path: &PathSample, mask: &[bool]) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let ep = b.encoder_params.bind(&mut tape, true);
    let vp = b.velocity_params.bind(&mut tape, true);
    let enc = Bind { net: &b.encoder, params: &ep };
    let vel = Bind { net: &b.velocity, params: &vp };
    let loss = flowfm_loss_on_path(&mut tape, &vel, &enc, path, mask, None).unwrap();
    let value = tape.value(loss).item().unwrap();
    tape.backward(loss).unwrap();
    (value, b.encoder_params.grads(&tape, &ep))
}

fn fixed_path(rows: usize, seed: u64) -> PathSample {
    let data = small_data(seed);
    let x1 = data.tensor(&(0..rows).collect::<Vec<_>>());
    let mut r = rng(seed + 100);
    let x0 = Tensor::randn(x1.shape().to_vec(), 1.0, &mut r);
    let t = (0..rows).map(|_| r.random::<f64>()).collect();
    PathSample::new(x0, x1, t).unwrap()
}

#[test]
fn masked_rows_send_no_gradient_to_encoder() {
    let b = live_bundle(5);
    let path = fixed_path(3, 5);
    let (_, grads) = encoder_grads(&b, &path, &[true, true, true]);
    assert!(grads.iter().flatten().all(|&g| g == 0.0));
    let (_, grads) = encoder_grads(&b, &path, &[true, false, true]);
    assert!(grads.iter().flatten().any(|&g| g.abs() > 1e-10));
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let b = live_bundle(6);
    let path = fixed_path(2, 6);
    let mask = [false, false];
    let (_, grads) = encoder_grads(&b, &path, &mask);
    let h = 1e-5;
    let mut checked = 0;
    for (pi, g) in grads.iter().enumerate() {
        // A few entries from every parameter tensor.
        for j in [0, g.len() / 2, g.len() - 1] {
            let mut plus = b.clone();
            plus.encoder_params.values_mut()[pi].data_mut()[j] += h;
            let mut minus = b.clone();
            minus.encoder_params.values_mut()[pi].data_mut()[j] -= h;
            let fd = (encoder_grads(&plus, &path, &mask).0 - encoder_grads(&minus, &path, &mask).0) / (2.0 * h);
            let scale = g[j].abs().max(1e-6);
            assert!((fd - g[j]).abs() / scale < 1e-4, "param {pi}[{j}]: fd {fd} vs {}", g[j]);
            checked += 1;
        }
    }
    assert!(checked > 10);
}

#[test]
fn joint_loss_reports_mask_and_consumes_rng_in_order() {
    let b = live_bundle(7);
    let data = small_data(7);
    let x1 = data.tensor(&[0, 1, 2, 3]);
    let policy = MaskPolicy::new(0.5).unwrap();

    let mut tape = Tape::new();
    let ep = b.encoder_params.bind(&mut tape, true);
    let vp = b.velocity_params.bind(&mut tape, true);
    let enc = Bind { net: &b.encoder, params: &ep };
    let vel = Bind { net: &b.velocity, params: &vp };
    let joint = flowfm_loss(&mut tape, &vel, &enc, &x1, &policy, None, &mut rng(42)).unwrap();

    let mut r = rng(42);
    let mask = policy.draw(4, &mut r);
    let path = sample_path(&x1, &mut r).unwrap();
    assert_eq!(joint.mask, mask);
    let (value, _) = encoder_grads(&b, &path, &mask);
    assert!((tape.value(joint.loss).item().unwrap() - value).abs() < 1e-12);
    let frac = mask.iter().filter(|&&m| m).count() as f64 / 4.0;
    assert_eq!(joint.masked_fraction(), frac);
}

#[test]
fn mask_probability_extremes() {
    let mut r = rng(8);
    assert!(MaskPolicy::new(1.0).unwrap().draw(50, &mut r).iter().all(|&m| m));
    assert!(MaskPolicy::new(0.0).unwrap().draw(50, &mut r).iter().all(|&m| !m));
    assert!(MaskPolicy::new(1.2).is_err());
    assert!(MaskPolicy::new(-0.1).is_err());
    let frac = MaskPolicy::new(0.3).unwrap().draw(20_000, &mut r).iter().filter(|&&m| m).count() as f64 / 20_000.0;
    assert!((frac - 0.3).abs() < 0.015);
}

#[test]
fn empty_batch_is_rejected() {
    let b = live_bundle(9);
    let mut tape = Tape::new();
    let ep = b.encoder_params.bind(&mut tape, true);
    let vp = b.velocity_params.bind(&mut tape, true);
    let enc = Bind { net: &b.encoder, params: &ep };
    let vel = Bind { net: &b.velocity, params: &vp };
    let x1 = Tensor::zeros([0, 3, 300]);
    assert!(flowfm_loss(&mut tape, &vel, &enc, &x1, &MaskPolicy::default(), None, &mut rng(0)).is_err());
}
