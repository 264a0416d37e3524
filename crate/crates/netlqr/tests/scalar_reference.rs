//! Literal-transcription oracle for the scalar reference instance.
//!
//! The production backward pass is matrix code over views and offsets; this
//! test re-derives the whole schedule for the scalar instance (one plant,
//! `A = 1`, `B = [1 1]`, identity stage cost, `p = 0.5`, `T = 2`) in plain
//! scalar arithmetic, one recursion step at a time, and also pins the exact
//! rational values those recursions produce. Any index/offset/transpose slip
//! in the production path shows up here.

use nalgebra::DVector;
use netlqr::controller::compute_actions;
use netlqr::estimator::CommonEstimate;
use netlqr::model::ModelSpec;
use netlqr::synthesis::{synthesize, BeliefSummary};

/// 2x2 symmetric solve by the adjugate formula.
fn inv2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ]
}

/// One global recursion step for the scalar instance: state dimension 1,
/// two action slots, `R = I`, `R_xu = 0`.
/// Returns (next value coefficient, gain pair).
fn global_step(p_next: f64, a: f64, b: [f64; 2]) -> (f64, [f64; 2]) {
    // inner = I + p * b b', rhs = p * b * a
    let inner = [
        [1.0 + p_next * b[0] * b[0], p_next * b[0] * b[1]],
        [p_next * b[1] * b[0], 1.0 + p_next * b[1] * b[1]],
    ];
    let inv = inv2(inner);
    let rhs = [p_next * b[0] * a, p_next * b[1] * a];
    let k = [
        -(inv[0][0] * rhs[0] + inv[0][1] * rhs[1]),
        -(inv[1][0] * rhs[0] + inv[1][1] * rhs[1]),
    ];
    // value = r_xx + a p a - (p a b) inv (p b a)
    let cross = [p_next * a * b[0], p_next * a * b[1]];
    let quad = cross[0] * (inv[0][0] * rhs[0] + inv[0][1] * rhs[1])
        + cross[1] * (inv[1][0] * rhs[0] + inv[1][1] * rhs[1]);
    (1.0 + a * p_next * a - quad, k)
}

/// One drop-branch recursion step: everything scalar.
fn drop_step(blend: f64, a: f64, b_local: f64) -> (f64, f64) {
    let inner = 1.0 + blend * b_local * b_local;
    let k = -(blend * b_local * a) / inner;
    let value = 1.0 + a * blend * a - (blend * a * b_local) * (blend * b_local * a) / inner;
    (value, k)
}

struct Transcribed {
    p: [f64; 4],
    k: [[f64; 2]; 3],
    p_drop: [f64; 4],
    k_drop: [f64; 3],
    e: [f64; 4],
}

fn transcribe() -> Transcribed {
    let (a, b, fail, sigma_w) = (1.0, [1.0, 1.0], 0.5, 1.0);
    let mut p = [0.0; 4];
    let mut k = [[0.0; 2]; 3];
    let mut p_drop = [0.0; 4];
    let mut k_drop = [0.0; 3];
    let mut e = [0.0; 4];
    for t in (0..=2).rev() {
        let (pv, kv) = global_step(p[t + 1], a, b);
        let blend = (1.0 - fail) * p[t + 1] + fail * p_drop[t + 1];
        let (pd, kd) = drop_step(blend, a, b[1]);
        p[t] = pv;
        k[t] = kv;
        p_drop[t] = pd;
        k_drop[t] = kd;
        e[t] = e[t + 1] + blend * sigma_w;
    }
    Transcribed {
        p,
        k,
        p_drop,
        k_drop,
        e,
    }
}

#[test]
fn transcription_matches_exact_rationals() {
    let tr = transcribe();
    let expect_p = [15.0 / 11.0, 4.0 / 3.0, 1.0, 0.0];
    let expect_p_drop = [46.0 / 29.0, 1.5, 1.0, 0.0];
    let expect_k = [[-4.0 / 11.0; 2], [-1.0 / 3.0; 2], [0.0; 2]];
    let expect_k_drop = [-17.0 / 29.0, -0.5, 0.0];
    let expect_e = [29.0 / 12.0, 1.0, 0.0, 0.0];
    for t in 0..4 {
        assert!((tr.p[t] - expect_p[t]).abs() < 1e-14, "p[{t}]");
        assert!((tr.p_drop[t] - expect_p_drop[t]).abs() < 1e-14, "p_drop[{t}]");
        assert!((tr.e[t] - expect_e[t]).abs() < 1e-14, "e[{t}]");
    }
    for t in 0..3 {
        assert!((tr.k[t][0] - expect_k[t][0]).abs() < 1e-14, "k[{t}]");
        assert!((tr.k[t][1] - expect_k[t][1]).abs() < 1e-14, "k[{t}]");
        assert!((tr.k_drop[t] - expect_k_drop[t]).abs() < 1e-14, "k_drop[{t}]");
    }
}

#[test]
fn synthesized_schedule_matches_the_transcription() {
    let model = ModelSpec::scalar_reference();
    let schedule = synthesize(&model).unwrap();
    let tr = transcribe();
    for t in 0..4 {
        assert!((schedule.p[t][(0, 0)] - tr.p[t]).abs() < 1e-12, "p[{t}]");
        assert!(
            (schedule.p_drop[0][t][(0, 0)] - tr.p_drop[t]).abs() < 1e-12,
            "p_drop[{t}]"
        );
        assert!((schedule.noise_offset[t] - tr.e[t]).abs() < 1e-12, "e[{t}]");
    }
    for t in 0..3 {
        assert!((schedule.k[t][(0, 0)] - tr.k[t][0]).abs() < 1e-12);
        assert!((schedule.k[t][(1, 0)] - tr.k[t][1]).abs() < 1e-12);
        assert!((schedule.k_drop[0][t][(0, 0)] - tr.k_drop[t]).abs() < 1e-12);
    }
}

#[test]
fn actions_match_the_transcribed_gains() {
    let model = ModelSpec::scalar_reference();
    let schedule = synthesize(&model).unwrap();
    let tr = transcribe();
    let (xhat, x) = (0.7, 1.3);
    for t in 0..=2 {
        let est = CommonEstimate {
            xhat: vec![DVector::from_element(1, xhat)],
            t,
        };
        let profile =
            compute_actions(&schedule, t, &est, &[DVector::from_element(1, x)]).unwrap();
        let u0 = tr.k[t][0] * xhat;
        let ubar = tr.k[t][1] * xhat;
        let u1 = ubar + tr.k_drop[t] * (x - xhat);
        assert!((profile.remote[0] - u0).abs() < 1e-12, "t = {t}");
        assert!((profile.common_local[0][0] - ubar).abs() < 1e-12, "t = {t}");
        assert!((profile.local[0][0] - u1).abs() < 1e-12, "t = {t}");
    }
}

#[test]
fn scalar_value_and_expected_cost_are_the_frozen_rational() {
    let model = ModelSpec::scalar_reference();
    let schedule = synthesize(&model).unwrap();
    // sigma0 = 0, so the value at the prior and the expected closed-loop
    // cost coincide: P_0 * mu0^2 + e_0 = 15/11 + 29/12 = 499/132
    let frozen = 499.0 / 132.0;
    let v0 = schedule
        .value_function(0, &BeliefSummary::initial(&model.noise))
        .unwrap();
    assert!((v0 - frozen).abs() < 1e-12, "{v0}");
    let expected = schedule.expected_total_cost(&model).unwrap();
    assert!((expected - frozen).abs() < 1e-12, "{expected}");
}
