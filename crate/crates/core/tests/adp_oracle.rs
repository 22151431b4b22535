//! Data-driven learner checked against model-based quantities.

use nalgebra::{RowVector4, Vector4};

use costeer::adp::{self, exact, make_basis, AdpConfig, BasisSet, DataBatch, Excitation};
use costeer::cnf::validate;
use costeer::config::Config;
use costeer::linalg::{kleinman_iterate, Matrix, SymMatrix};
use costeer::plant::{build_matrices, Plant, PlantMatrices, VehicleState};

fn exact_batch(cfg: &AdpConfig, m: &PlantMatrices, basis: &BasisSet) -> DataBatch {
    let noise = cfg.noise();
    let road = cfg.road();
    let ex = Excitation {
        k0: cfg.k0(),
        noise: &noise,
        road: &road,
        speed: 15.0,
        samples: cfg.samples,
        dt_sample: cfg.dt_sample,
        h: 0.005,
        x0: VehicleState::default(),
        divergence_bound: cfg.divergence_bound,
        quadrature: cfg.quadrature,
    };
    exact::collect_exact(m, &ex, basis).unwrap()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    num / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}

#[test]
fn exact_data_reproduces_model_based_iterates() {
    let cfg = Config::default();
    let m = build_matrices(&cfg.plant).unwrap();
    let basis = make_basis(cfg.plant.l_s);
    let batch = exact_batch(&cfg.adp, &m, &basis);
    let it = adp::policy_iteration(
        &batch,
        &cfg.adp.k0(),
        &cfg.adp.q(),
        cfg.adp.r,
        &cfg.adp.tolerances(),
        cfg.adp.agreement_tol,
    )
    .unwrap();
    let k0 = Matrix::from_row_slice(1, 4, cfg.adp.k0().as_slice());
    let steps = kleinman_iterate(
        &m.a_dyn(),
        &m.b_dyn(),
        &cfg.adp.q(),
        &SymMatrix::from_diagonal(&[cfg.adp.r]),
        &k0,
        &cfg.adp.tolerances(),
    )
    .unwrap();
    assert!(it.iterates.len().abs_diff(steps.len()) <= 1);
    for ((p, k), s) in it.iterates.iter().zip(&steps) {
        assert!(rel(p.as_slice(), s.p.as_matrix().as_slice()) < 1e-8);
        assert!(rel(k.as_slice(), s.k_next.as_slice()) < 1e-8);
    }
    assert!(it.shifts_agree);
}

#[test]
fn exact_data_recovers_disturbance_and_feedforward() {
    let cfg = Config::default();
    let m = build_matrices(&cfg.plant).unwrap();
    let basis = make_basis(cfg.plant.l_s);
    let out = adp::learn_from_batch(&exact_batch(&cfg.adp, &m, &basis), &basis, &cfg.adp).unwrap();
    assert!((out.model.d - Vector4::new(0.0, 0.0, -15.0, 0.0)).norm() < 1e-6);
    assert!((out.model.b - m.b).norm() < 1e-6 * m.b.norm());
    let v = validate(&out.gains, &m, &cfg.adp.q(), cfg.adp.r);
    assert!(v.feedforward_residual < 1e-8, "{v:?}");
    assert!(v.output_residual < 1e-10, "{v:?}");
}

#[test]
fn simulated_data_properties() {
    let cfg = Config::default();
    let m = build_matrices(&cfg.plant).unwrap();
    let plant = Plant::new(cfg.plant).unwrap();
    let (out, _) = adp::learn(&plant, cfg.plant.l_s, cfg.plant.v_x, cfg.scenario.h, &cfg.adp).unwrap();

    for pair in out.iteration.iterates.windows(2) {
        let diff = SymMatrix::symmetrize(&Matrix::from_column_slice(4, 4, (pair[0].0 - pair[1].0).as_slice()));
        assert!(diff.min_eigenvalue() >= -1e-4);
    }

    let oracle = costeer::cnf::GainSet::from_model(&m, &cfg.adp.q(), cfg.adp.r, cfg.adp.cnf).unwrap();
    assert!(rel(out.gains.k.as_slice(), oracle.k.as_slice()) < 1e-3);

    let v = validate(&out.gains, &m, &cfg.adp.q(), cfg.adp.r);
    assert!(v.feedforward_residual < 1e-3, "{v:?}");
    assert!(v.l_identity_residual < 1e-8, "{v:?}");
    assert!(v.closed_loop_hurwitz && v.p_positive_definite);
    assert!(out.iteration.shifts_agree);
}

#[test]
fn learned_gains_do_not_depend_on_basis() {
    let cfg = Config::default();
    let plant = Plant::new(cfg.plant).unwrap();
    let c = RowVector4::new(0.0, 0.0, -cfg.plant.l_s, 1.0);
    let other = BasisSet::from_vectors(
        &c,
        [
            Vector4::new(2.0, 1.0, 0.0, 0.0),
            Vector4::new(-1.0, 3.0, 0.0, 0.0),
            Vector4::new(0.5, 0.0, 0.2, 0.2 * cfg.plant.l_s),
        ],
    )
    .unwrap();

    let (a, batch_a) = adp::learn(&plant, cfg.plant.l_s, cfg.plant.v_x, cfg.scenario.h, &cfg.adp).unwrap();
    let noise = cfg.adp.noise();
    let road = cfg.adp.road();
    let ex = Excitation {
        k0: cfg.adp.k0(),
        noise: &noise,
        road: &road,
        speed: cfg.plant.v_x,
        samples: cfg.adp.samples,
        dt_sample: cfg.adp.dt_sample,
        h: cfg.scenario.h,
        x0: VehicleState::default(),
        divergence_bound: cfg.adp.divergence_bound,
        quadrature: cfg.adp.quadrature,
    };
    let batch_b = adp::collect(&plant, &ex, &other).unwrap();
    assert_eq!(batch_a.rows(), batch_b.rows());
    let b = adp::learn_from_batch(&batch_b, &other, &cfg.adp).unwrap();

    let (ga, gb) = (&a.gains, &b.gains);
    assert!(rel(gb.k.as_slice(), ga.k.as_slice()) < 1e-6);
    assert!(rel(gb.p.as_slice(), ga.p.as_slice()) < 1e-6);
    assert!(rel(gb.x.as_slice(), ga.x.as_slice()) < 1e-6);
    assert!((gb.u - ga.u).abs() < 1e-6 * ga.u.abs());
    assert!((gb.l - ga.l).abs() < 1e-6 * ga.l.abs());
}
