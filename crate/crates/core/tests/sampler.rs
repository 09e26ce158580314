mod common;

use common::rng;
use flowfm_core::sampler::{integrate, BenchCase, OdeConfig, OdeMethod};
use flowfm_tensor::Tensor;

fn scalar(v: f64) -> Tensor {
    Tensor::from_vec(vec![v])
}

fn exp_error(method: OdeMethod, steps: usize) -> f64 {
    let traj = integrate(|x, _| Ok(x.clone()), &scalar(1.0), &OdeConfig::new(method, steps), false).unwrap();
    (traj.final_state.data()[0] - std::f64::consts::E).abs()
}

#[test]
fn euler_is_exact_on_constant_fields() {
    let x0 = Tensor::randn([2, 3, 300], 1.0, &mut rng(1));
    let c = Tensor::randn([2, 3, 300], 1.0, &mut rng(2));
    for steps in [1, 7, 20] {
        let traj = integrate(|_, _| Ok(c.clone()), &x0, &OdeConfig::new(OdeMethod::Euler, steps), false).unwrap();
        let expected = x0.zip_map(&c, |a, b| a + b).unwrap();
        assert!(traj.final_state.max_abs_diff(&expected).unwrap() < 1e-13);
    }
}

#[test]
fn exponential_growth_accuracy() {
    assert!(exp_error(OdeMethod::Rk4, 100) < 1e-8);
    assert!(exp_error(OdeMethod::Euler, 100) < 2e-2);
    assert!(exp_error(OdeMethod::Midpoint, 100) < 1e-4);
}

#[test]
fn error_falls_with_method_order() {
    for (method, order) in [(OdeMethod::Euler, 1), (OdeMethod::Midpoint, 2), (OdeMethod::Rk4, 4)] {
        let e1 = exp_error(method, 10);
        let e2 = exp_error(method, 40);
        // Two doublings of the step count.
        if order > 1 {
            assert!(e1 / e2 >= 10.0, "{method}: {e1} -> {e2}");
        }
        let observed = (e1 / e2).log2() / 2.0;
        assert!((observed - order as f64).abs() < 0.25, "{method}: order {observed}");
    }
}

#[test]
fn time_dependent_field_is_integrated_in_time() {
    // dx/dt = 3t², so x(1) = x(0) + 1; midpoint and RK4 are exact on quadratics.
    let field = |x: &Tensor, t: f64| Ok(x.map(|_| 3.0 * t * t));
    for method in [OdeMethod::Rk4] {
        let traj = integrate(field, &scalar(0.5), &OdeConfig::new(method, 5), false).unwrap();
        assert!((traj.final_state.data()[0] - 1.5).abs() < 1e-14);
    }
    let mid = integrate(field, &scalar(0.5), &OdeConfig::new(OdeMethod::Midpoint, 5), false).unwrap();
    // Midpoint underestimates ∫3t² by h²/4.
    assert!((mid.final_state.data()[0] - (1.5 - 0.04 / 4.0)).abs() < 1e-14);
}

#[test]
fn evaluation_counts_and_states() {
    for (method, per) in [(OdeMethod::Euler, 1), (OdeMethod::Midpoint, 2), (OdeMethod::Rk4, 4)] {
        let mut calls = 0;
        let cfg = OdeConfig::new(method, 20);
        let traj = integrate(
            |x, _| {
                calls += 1;
                Ok(x.clone())
            },
            &scalar(1.0),
            &cfg,
            true,
        )
        .unwrap();
        assert_eq!(calls, 20 * per);
        assert_eq!(traj.net_evals, 20 * per);
        assert_eq!(cfg.net_evals(), 20 * per);
        assert_eq!(traj.steps_taken, 20);
        let states = traj.states.unwrap();
        assert_eq!(states.len(), 21);
        assert_eq!(states[0], scalar(1.0));
        assert_eq!(states[20], traj.final_state);
    }
}

#[test]
fn zero_steps_and_blowups_are_errors() {
    assert!(integrate(|x, _| Ok(x.clone()), &scalar(1.0), &OdeConfig::new(OdeMethod::Euler, 0), false).is_err());
    let err = integrate(|x, _| Ok(x.map(|_| f64::NAN)), &scalar(1.0), &OdeConfig::default(), false).unwrap_err();
    assert!(matches!(err, flowfm_core::Error::NonFinite { .. }));
}

#[test]
fn config_parsing() {
    assert_eq!("rk4:20".parse::<OdeConfig>().unwrap(), OdeConfig::default());
    assert_eq!("Euler:5".parse::<OdeConfig>().unwrap(), OdeConfig::new(OdeMethod::Euler, 5));
    assert!("rk4".parse::<OdeConfig>().is_err());
    assert!("rk4:0".parse::<OdeConfig>().is_err());
    assert!("heun:10".parse::<OdeConfig>().is_err());
    assert_eq!("ancestral".parse::<BenchCase>().unwrap(), BenchCase::Ancestral);
    assert_eq!("ddim:50".parse::<BenchCase>().unwrap(), BenchCase::Ddim(50));
    assert_eq!(
        "midpoint:10".parse::<BenchCase>().unwrap(),
        BenchCase::Flow(OdeConfig::new(OdeMethod::Midpoint, 10))
    );
    assert!("ddim".parse::<BenchCase>().is_err());
}
