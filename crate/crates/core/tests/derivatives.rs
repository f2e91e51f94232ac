use svv_core::malliavin::{explosion_first, first_bump_check, first_field, second_entries};
use svv_core::sandwich::{second_drift_derivative, simulate_path};
use svv_core::{AFn, BoundFunctions, KernelSpec, ModelSpec, PathBundle, SandwichDrift, SandwichModel, TimeFn};

fn model(steps: usize, a: AFn, theta2: f64) -> SandwichModel {
    let mut drift = SandwichDrift::symmetric(0.01, 3.0);
    drift.theta2 = TimeFn::constant(theta2);
    drift.a = a;
    SandwichModel::new(ModelSpec {
        kernel: KernelSpec::single_power(0.3, 0.3).unwrap(),
        bounds: BoundFunctions::constant(0.05, 1.0),
        drift,
        y0: 0.525,
        x0: 0.0,
        r: 0.0,
        rho: 0.0,
        horizon: 1.0,
        steps,
    })
    .unwrap()
}

/// First and second variations of the implicit recursion
/// `Y_i - dt b(Y_i) = y0 + Z_i + dt sum_{k<i} b(Y_k)`, differentiated by hand.
fn scheme_variations(m: &SandwichModel, p: &PathBundle, r: usize, s: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = m.grid().steps();
    let dt = m.grid().dt();
    let w = m.weights();
    let b1 = &p.bprime;
    let b2 = second_drift_derivative(m, p);
    let first = |j: usize| {
        let mut e = vec![0.0; n + 1];
        let mut acc = 0.0;
        for i in 1..=n {
            let wij = if j < i { w.weight(i, j) } else { 0.0 };
            e[i] = (wij + acc) / (1.0 - dt * b1[i]);
            acc += dt * b1[i] * e[i];
        }
        e
    };
    let (er, es) = (first(r), first(s));
    let mut f = vec![0.0; n + 1];
    let mut acc = 0.0;
    for i in 1..=n {
        let q = b2[i] * er[i] * es[i];
        f[i] = (dt * q + acc) / (1.0 - dt * b1[i]);
        acc += dt * (b1[i] * f[i] + q);
    }
    (er, es, f)
}

#[test]
fn second_entries_match_hand_expanded_scheme_at_n4() {
    let m = model(4, AFn::Affine { c0: 0.2, c1: -0.5 }, 0.01);
    for idx in 0..5 {
        let p = simulate_path(&m, 31, idx).unwrap();
        let field = first_field(&p, &m).unwrap();
        for t in 1..=4 {
            for r in 0..t {
                for s in 0..t {
                    let (er, _, f) = scheme_variations(&m, &p, r, s);
                    assert!((field.get(t, r) - er[t]).abs() < 1e-13 * er[t].abs().max(1.0));
                    let e = second_entries(&p, &m, &field, &[(r, s, t)]).unwrap()[0].value;
                    assert!((e - f[t]).abs() < 1e-11 * f[t].abs().max(1.0), "({r},{s},{t}): {e} vs {}", f[t]);
                }
            }
        }
    }
}

#[test]
fn second_entries_match_scheme_variation_on_long_grid() {
    let m = model(256, AFn::Zero, 0.01);
    let p = simulate_path(&m, 8, 3).unwrap();
    let field = first_field(&p, &m).unwrap();
    for &(r, s, t) in &[(3, 40, 200), (100, 20, 256), (5, 5, 60), (150, 149, 190)] {
        let (_, _, f) = scheme_variations(&m, &p, r, s);
        let e = second_entries(&p, &m, &field, &[(r, s, t)]).unwrap()[0].value;
        assert!((e - f[t]).abs() < 1e-10 * f[t].abs().max(1e-3), "({r},{s},{t}): {e} vs {}", f[t]);
    }
}

#[test]
fn disabled_drift_second_entries_vanish() {
    let mut spec = model(64, AFn::Zero, 0.01).spec().clone();
    spec.drift = SandwichDrift::disabled(AFn::MeanReversion { speed: 1.0, level: 0.3 });
    let m = SandwichModel::new(spec).unwrap();
    let p = simulate_path(&m, 1, 0).unwrap();
    let field = first_field(&p, &m).unwrap();
    let e = second_entries(&p, &m, &field, &[(1, 2, 30), (10, 3, 64)]).unwrap();
    assert!(e.iter().all(|x| x.value == 0.0));
}

/// `O(n^3)` reference: for each `i` the growth factors of all `k` by one backward product.
fn cubic_reference(m: &SandwichModel, p: &PathBundle) -> Vec<Vec<f64>> {
    let n = m.grid().steps();
    let dt = m.grid().dt();
    let w = m.weights();
    let mut out = vec![Vec::new(); n + 1];
    for i in 1..=n {
        let mut growth = vec![0.0; i + 1];
        let mut prod = 1.0;
        for k in (1..=i).rev() {
            prod /= 1.0 - dt * p.bprime[k];
            growth[k] = prod;
        }
        for j in 0..i {
            let mut v = w.weight(i, j);
            for k in j + 1..=i {
                v += w.weight(k, j) * p.bprime[k] * dt * growth[k];
            }
            out[i].push(v);
        }
    }
    out
}

#[test]
fn quadratic_field_equals_cubic_reference_at_n512() {
    let m = model(512, AFn::Zero, 0.01);
    let p = simulate_path(&m, 2, 9).unwrap();
    let field = first_field(&p, &m).unwrap();
    let reference = cubic_reference(&m, &p);
    for i in 1..=512 {
        for (j, r) in reference[i].iter().enumerate() {
            let v = field.get(i, j);
            // relative to the leading summand; the field itself can cancel to O(1e-3)
            let scale = r.abs().max(m.weights().weight(i, j));
            assert!((v - r).abs() <= 1e-12 * scale, "({i},{j}) {v} vs {r}");
        }
    }
}

#[test]
fn bump_deviation_shrinks_with_eps() {
    let m = model(512, AFn::Zero, 0.01);
    let a = first_bump_check(&m, 17, 60, 1e-4, 11).unwrap().median_relative;
    let b = first_bump_check(&m, 17, 60, 5e-5, 11).unwrap().median_relative;
    assert!(b <= 1.5 * a, "{a} -> {b}");
}

#[test]
fn explosion_statistic_stable_under_path_doubling() {
    let m = model(128, AFn::Zero, 0.01);
    let a = explosion_first(&m, 4, 1000).unwrap().max_first();
    let b = explosion_first(&m, 4, 2000).unwrap().max_first();
    assert!(a.is_finite() && (b / a - 1.0).abs() < 0.25, "{a} {b}");
}

#[test]
fn explosion_statistic_bounded_for_pure_kernel() {
    // drift off: the statistic is deterministic and its maximum sits on the diagonal
    let mut spec = model(64, AFn::Zero, 0.01).spec().clone();
    spec.drift = SandwichDrift::disabled(AFn::Zero);
    let coarse = SandwichModel::new(spec.clone()).unwrap();
    spec.steps = 128;
    let fine = SandwichModel::new(spec).unwrap();
    let a = explosion_first(&coarse, 1, 100).unwrap().max_first();
    let b = explosion_first(&fine, 1, 100).unwrap().max_first();
    assert!(b <= 1.1 * a, "{a} {b}");
}
