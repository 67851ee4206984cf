use lqg_prefix::control::{filter_prior_sequence, solve_control_dare, spectral_radius, PlantModel};
use lqg_prefix::rdf::{solve_rdf_mimo, solve_rdf_siso, DEFAULT_V};
use nalgebra::DMatrix;

fn ref1(x0: f64) -> PlantModel {
    PlantModel::scalar(2.0, 1.0, 1.0, x0, 1.0, 1.0, 5.6068884).unwrap()
}

#[test]
fn riccati_sequence_reaches_fixed_point() {
    let plant = ref1(1.0);
    let rdf = solve_rdf_siso(&plant, DEFAULT_V).unwrap();
    let gains = rdf.channel.as_ref().unwrap();
    let seq = filter_prior_sequence(&plant, gains, 50);
    // scalar Riccati map p -> 4 p v / (c^2 p + v) + 1 with fixed point phat_plus
    let c2 = gains.c[(0, 0)].powi(2);
    let mut p = 1.0;
    for t in 0..=50 {
        assert!((seq[t][(0, 0)] - p).abs() < 1e-12, "t={t}");
        p = 4.0 * p / (c2 * p + 1.0) + 1.0;
    }
    assert!((seq[50][(0, 0)] - 1.4).abs() < 1e-7);
    assert!((seq[50][(0, 0)] - rdf.phat_plus[(0, 0)]).abs() < 1e-9);
}

#[test]
fn riccati_sequence_constant_at_fixed_point() {
    let base = ref1(1.0);
    let rdf = solve_rdf_siso(&base, DEFAULT_V).unwrap();
    let plant = PlantModel::scalar(2.0, 1.0, 1.0, rdf.phat_plus[(0, 0)], 1.0, 1.0, 5.6068884).unwrap();
    let seq = filter_prior_sequence(&plant, rdf.channel.as_ref().unwrap(), 30);
    for p in &seq {
        assert!((p[(0, 0)] - rdf.phat_plus[(0, 0)]).abs() < 1e-12);
    }
}

#[test]
fn closed_loops_are_stable_and_covariances_ordered() {
    let a = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.0, 0.8]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let i2 = DMatrix::identity(2, 2);
    let probe = PlantModel::new(a, b, i2.clone(), i2.clone(), i2.clone(), DMatrix::identity(1, 1), 1.0).unwrap();
    let min_cost = solve_control_dare(&probe).unwrap().min_cost;
    let plant = probe.with_gamma(2.0 * min_cost);
    let ctl = solve_control_dare(&plant).unwrap();
    assert!(spectral_radius(&(&plant.a + &plant.b * &ctl.k)) < 1.0);
    let rdf = solve_rdf_mimo(&plant, DEFAULT_V).unwrap();
    let g = rdf.channel.as_ref().unwrap();
    assert!(spectral_radius(&g.rcl) < 1.0);
    let gap = &rdf.phat_plus - &rdf.phat;
    let eig = nalgebra::SymmetricEigen::new(gap).eigenvalues;
    assert!(eig.iter().all(|&e| e >= -1e-10));
    let seq = filter_prior_sequence(&plant, g, 400);
    assert!((&seq[400] - &rdf.phat_plus).norm() <= 1e-8);
}
