use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;

use super::*;
use crate::geometry::RandomStream;

const RT: f64 = 1e-10;
const AT: f64 = 1e-12;

fn reference_start(x: f64) -> GeodesicState {
    state_from_constants(
        &GeodesicConstants::reference(x),
        1.0,
        FRAC_PI_2,
        Sign::Minus,
        Sign::Plus,
    )
    .unwrap()
}

fn circular(a: f64, x: f64) -> (GeodesicConstants, f64) {
    let p = (1.0 - x * x / a).sqrt();
    let c = GeodesicConstants::new(p, x, a, 1.0).unwrap();
    (c, (a - x * x) / (p * x))
}

/// A random state with consistent constants.
fn random_state(rng: &mut RandomStream) -> GeodesicState {
    loop {
        let a = 1.0 + 4.0 * rng.uniform();
        let x = (2.0 * rng.uniform() - 1.0) * a.sqrt() * 0.9;
        let p = 0.5 + 5.0 * rng.uniform();
        let c = GeodesicConstants { p, x, a, w: 1.0 };
        let r0 = 0.3 + 5.0 * rng.uniform();
        let theta0 = 0.4 + (PI - 0.8) * rng.uniform();
        let su = if rng.coin() { Sign::Plus } else { Sign::Minus };
        let st = if rng.coin() { Sign::Plus } else { Sign::Minus };
        if let Ok(y) = state_from_constants(&c, r0, theta0, su, st) {
            return y;
        }
    }
}

#[test]
fn constants_of_a_static_equatorial_state() {
    let y = GeodesicState {
        s: 0.0,
        t: 0.0,
        r: 1.0,
        theta: FRAC_PI_2,
        phi: 0.0,
        ut: 1.0,
        ur: 0.0,
        utheta: 0.0,
        uphi: 0.0,
    };
    let c = constants_from_state(&y);
    assert!(c.p.abs() < 1e-15 && c.w.abs() < 1e-15);
    assert!((c.x - 1.0).abs() < 1e-15 && (c.a - 1.0).abs() < 1e-15);
}

#[test]
fn equatorial_states_have_a_equal_x_squared() {
    let c = GeodesicConstants::new(5.0, 1.2, 1.44, 1.0).unwrap();
    let y = state_from_constants(&c, 1.0, FRAC_PI_2, Sign::Plus, Sign::Plus).unwrap();
    assert_eq!(y.utheta, 0.0);
    let back = constants_from_state(&y);
    assert!((back.a - back.x * back.x).abs() < 1e-12);
}

#[test]
fn reference_state_components() {
    let y = state_from_constants(
        &GeodesicConstants::reference(1.2),
        1.0,
        FRAC_PI_2,
        Sign::Plus,
        Sign::Plus,
    )
    .unwrap();
    assert!((y.ut - 6.2).abs() < 1e-12);
    assert!((y.uphi - 5.0).abs() < 1e-12);
    assert!((y.utheta - 1.6).abs() < 1e-12);
    assert!((y.ur - 33.44f64.sqrt()).abs() < 1e-12);
    assert!((y.ur - 5.78273).abs() < 1e-5);
    assert_eq!((y.t, y.phi, y.s), (0.0, 0.0, 0.0));
}

#[test]
fn forbidden_starts() {
    let c = GeodesicConstants::reference(1.2);
    match state_from_constants(&c, 1.0, PI / 6.0, Sign::Plus, Sign::Plus) {
        Err(GeodesicError::LatitudeForbidden { bound, .. }) => assert!((bound - 0.6).abs() < 1e-12),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        state_from_constants(&c, 0.1, FRAC_PI_2, Sign::Plus, Sign::Plus),
        Err(GeodesicError::RadiusForbidden { .. })
    ));
    assert!(state_from_constants(&c, -1.0, FRAC_PI_2, Sign::Plus, Sign::Plus).is_err());
}

#[test]
fn constant_validation() {
    assert!(GeodesicConstants::new(1.0, 0.0, -1.0, 1.0).is_err());
    assert!(GeodesicConstants::new(1.0, 3.0, 4.0, 1.0).is_err());
    assert!(GeodesicConstants::new(1.0, 1.0, 4.0, 0.5).is_err());
    assert!(GeodesicConstants::new(1.0, 2.0, 4.0, -1.0).is_ok());
}

#[test]
fn eom_matches_first_integral_derivative() {
    let y = state_from_constants(
        &GeodesicConstants::reference(1.2),
        1.0,
        FRAC_PI_2,
        Sign::Plus,
        Sign::Plus,
    )
    .unwrap();
    let d = eom_rhs(&y);
    assert!((d[4] - (-1.2 * y.ur)).abs() < 1e-12);
    assert!((d[4] + 6.93928).abs() < 1e-5);
    assert_eq!(&d[..4], &[y.ut, y.ur, y.utheta, y.uphi]);
}

#[test]
fn equatorial_geodesics_stay_equatorial() {
    let c = GeodesicConstants::new(5.0, 1.2, 1.44, 1.0).unwrap();
    let y = state_from_constants(&c, 1.0, FRAC_PI_2, Sign::Plus, Sign::Plus).unwrap();
    assert!(eom_rhs(&y)[6].abs() < 1e-12);
}

#[test]
fn first_integrals_are_stationary_along_the_flow() {
    let mut rng = RandomStream::new(1);
    for _ in 0..10 {
        let y = random_state(&mut rng);
        let d = eom_rhs(&y);
        let h = 1e-6;
        let shift = |sgn: f64| {
            let mut a = y.to_array();
            for i in 0..8 {
                a[i] += sgn * h * d[i];
            }
            constants_from_state(&GeodesicState::from_array(0.0, &a))
        };
        let (p, m) = (shift(1.0), shift(-1.0));
        let scale = y.to_array().iter().map(|v| v.abs()).fold(1.0, f64::max);
        for (cp, cm) in [(p.p, m.p), (p.x, m.x), (p.a, m.a), (p.w, m.w)] {
            assert!(((cp - cm) / (2.0 * h)).abs() <= 1e-6 * scale.powi(4));
        }
    }
}

#[test]
fn velocity_derivatives_agree_with_closed_forms() {
    let mut rng = RandomStream::new(2);
    for _ in 0..100 {
        let y = random_state(&mut rng);
        let c = constants_from_state(&y);
        let d = eom_rhs(&y);
        let (st, ct) = y.theta.sin_cos();
        let cot = ct / st;
        let (r, ur, uth) = (y.r, y.ur, y.utheta);
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);

        assert!(rel(d[4], -c.x * ur / (r * r)) <= 1e-8);
        let dcot2 = -2.0 * cot / (st * st) * uth;
        let duphi = -c.p * ur / (r * r) - c.x * (dcot2 / (r * r) - 2.0 * cot * cot * ur / r.powi(3));
        assert!(rel(d[7], duphi) <= 1e-8);
        let duth2 =
            2.0 * c.x * c.x * ct / st.powi(3) * uth / r.powi(4) - 4.0 * (c.a - c.x * c.x / (st * st)) / r.powi(5) * ur;
        assert!(rel(2.0 * uth * d[6], duth2) <= 1e-8);
        let dur2 = (2.0 * (c.a - c.x * c.x) / r.powi(3) - 2.0 * c.p * c.x / (r * r)) * ur;
        assert!(rel(2.0 * ur * d[5], dur2) <= 1e-8);
    }
}

#[test]
fn unbound_reference_orbit_turns_once_at_r_min() {
    let traj = integrate(&reference_start(1.2), 3.0, RT, AT).unwrap();
    assert_eq!(traj.status, TrajectoryStatus::Completed);
    let r_min = 2.56 / (6.0 + 97.44f64.sqrt());
    assert!((traj.min_r() - r_min).abs() <= 1e-6, "{}", traj.min_r());
    assert!((traj.min_r() - 0.161298).abs() <= 1e-6);
    assert_eq!(traj.count(|k| *k == EventKind::RadialTurning), 1);
    assert!((traj.min_sin_theta() - 0.6).abs() <= 1e-6, "{}", traj.min_sin_theta());
    for w in traj.samples.windows(2) {
        assert!(w[0].s < w[1].s);
    }
    let (first, last) = (traj.samples[0].s, traj.last().s);
    assert!(traj.events.iter().all(|e| e.state.s > first && e.state.s <= last));
}

#[test]
fn circular_orbit_keeps_its_radius() {
    let (c, r) = circular(4.0, 1.2);
    assert!((r - 8.0 / 3.0).abs() < 1e-12 && (c.p - 0.8).abs() < 1e-12);
    let y = state_from_constants(&c, r, FRAC_PI_2, Sign::Plus, Sign::Plus).unwrap();
    let traj = integrate(&y, 700.0, RT, AT).unwrap();
    assert!(traj.last().phi >= 40.0 * PI, "{}", traj.last().phi);
    let dev = traj.samples.iter().map(|y| (y.r - r).abs()).fold(0.0, f64::max);
    assert!(dev <= 1e-6, "{dev}");
    for y in &traj.samples {
        assert!(energy_residual(y) <= 1e-10);
    }
}

#[test]
fn drift_bounds_and_convergence() {
    let y0 = reference_start(1.2);
    let mut prev = f64::INFINITY;
    for rt in [1e-6, 1e-8, 1e-10] {
        let d = conserved_drift(&integrate(&y0, 10.0, rt, rt * 1e-2).unwrap());
        assert!(d.max() < prev, "{rt}: {d:?}");
        prev = d.max();
    }
    assert!(prev <= 1e-8, "{prev}");
    let single = integrate(&y0, 0.0, RT, AT).unwrap();
    assert_eq!(single.samples.len(), 1);
    assert_eq!(conserved_drift(&single), Drift::default());
}

#[test]
fn norm_is_conserved_within_ten_rel_tol() {
    for x in [1.2, -1.2] {
        let traj = integrate(&reference_start(x), 10.0, RT, AT).unwrap();
        let w = traj
            .samples
            .iter()
            .map(|y| (constants_from_state(y).w - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(w <= 10.0 * RT, "X = {x}: {w}");
    }
}

#[test]
fn integrate_rejects_bad_arguments() {
    let y = reference_start(1.2);
    assert!(integrate(&y, 1.0, 1e-14, AT).is_err());
    assert!(integrate(&y, 1.0, RT, 1e-2).is_err());
    assert!(integrate(&y, -1.0, RT, AT).is_err());
    let mut bad = y;
    bad.r = -1.0;
    assert!(integrate(&bad, 1.0, RT, AT).is_err());
}

#[test]
fn orbit_classes() {
    match classify_orbit(&GeodesicConstants::reference(1.2)).unwrap() {
        OrbitClass::Unbound { r_min } => {
            assert!((1.0 / r_min - (6.0 + 97.44f64.sqrt()) / 2.56).abs() < 1e-12);
            assert!((1.0 / r_min - 6.19969).abs() < 2e-5);
        }
        other => panic!("{other:?}"),
    }
    match classify_orbit(&GeodesicConstants::reference(-1.2)).unwrap() {
        OrbitClass::Unbound { r_min } => assert!((r_min - 2.56 / (97.44f64.sqrt() - 6.0)).abs() < 1e-12),
        other => panic!("{other:?}"),
    }
    let circ = GeodesicConstants::new(0.8, 1.2, 4.0, 1.0).unwrap();
    match classify_orbit(&circ).unwrap() {
        OrbitClass::Circular { r } => assert!((r - 8.0 / 3.0).abs() < 1e-9),
        other => panic!("{other:?}"),
    }
    let bound = GeodesicConstants::new(0.9, 1.2, 4.0, 1.0).unwrap();
    let root = 0.68f64.sqrt();
    match classify_orbit(&bound).unwrap() {
        OrbitClass::Bound { r_min, r_max } => {
            assert!((r_min - 2.56 / (1.08 + root)).abs() < 1e-12);
            assert!((r_max - 2.56 / (1.08 - root)).abs() < 1e-9);
        }
        other => panic!("{other:?}"),
    }
    let barely = GeodesicConstants::new(1.0, 1.2, 4.0, 1.0).unwrap();
    assert!(matches!(
        classify_orbit(&barely).unwrap(),
        OrbitClass::BarelyUnbound { .. }
    ));
    let slow = GeodesicConstants::new(0.5, 1.2, 4.0, 1.0).unwrap();
    assert_eq!(classify_orbit(&slow), Err(GeodesicError::NoTurningPoint));
    for p in [0.01, 0.3, 2.0, 7.0] {
        let light = GeodesicConstants::new(p, 1.2, 4.0, 0.0).unwrap();
        assert!(classify_orbit(&light).is_ok());
    }
    let equatorial = GeodesicConstants::new(-5.0, 1.2, 1.44, 1.0).unwrap();
    match classify_orbit(&equatorial).unwrap() {
        OrbitClass::Unbound { r_min } => assert!((r_min - 12.0 / 24.0).abs() < 1e-9),
        other => panic!("{other:?}"),
    }
    let circle = classify_orbit(&circ).unwrap();
    assert_eq!(circle.r_max(), Some(circle.r_min()));
    assert_eq!(
        classify_orbit(&GeodesicConstants::reference(1.2)).unwrap().r_max(),
        None
    );
}

#[test]
fn bound_orbits_stay_between_turning_radii() {
    let c = GeodesicConstants::new(0.9, 1.2, 4.0, 1.0).unwrap();
    let OrbitClass::Bound { r_min, r_max } = classify_orbit(&c).unwrap() else {
        panic!()
    };
    let y = state_from_constants(&c, 3.0, FRAC_PI_2, Sign::Plus, Sign::Plus).unwrap();
    let traj = integrate(&y, 400.0, RT, AT).unwrap();
    let eps = 1e-6 * r_min;
    assert!(traj.min_r() >= r_min - eps && traj.max_r() <= r_max + eps);
    let turns: Vec<f64> = traj
        .events
        .iter()
        .filter(|e| e.kind == EventKind::RadialTurning)
        .map(|e| e.state.r)
        .collect();
    assert!(turns.len() >= 3, "{turns:?}");
    for w in turns.windows(2) {
        let near = |r: f64, target: f64| (r - target).abs() <= 1e-6 * target;
        assert!(
            near(w[0], r_max) && near(w[1], r_min) || near(w[0], r_min) && near(w[1], r_max),
            "{w:?}"
        );
    }
    for e in traj.events.iter().filter(|e| e.kind == EventKind::RadialTurning) {
        assert!(e.state.ur.abs() < 1e-6);
        assert!(energy_residual(&e.state) <= 1e-10);
    }
}

#[test]
fn latitude_is_confined() {
    for x in [1.2, -1.2] {
        let traj = integrate(&reference_start(x), 10.0, RT, AT).unwrap();
        let s = tilt(&traj.constants).unwrap().abs();
        assert!(traj.samples.iter().all(|y| y.theta.sin() >= s - 1e-9));
        assert!(traj.samples.iter().all(|y| energy_residual(y) <= 1e-10));
    }
}

#[test]
fn tilt_values() {
    assert!((tilt(&GeodesicConstants::reference(1.2)).unwrap() - 0.6).abs() < 1e-15);
    assert!((tilt(&GeodesicConstants::reference(-1.2)).unwrap() + 0.6).abs() < 1e-15);
    assert_eq!(
        tilt(&GeodesicConstants {
            p: 1.0,
            x: 2.0,
            a: 4.0,
            w: 1.0
        })
        .unwrap(),
        1.0
    );
    assert_eq!(
        tilt(&GeodesicConstants {
            p: 1.0,
            x: 0.0,
            a: 0.0,
            w: 1.0
        }),
        Err(GeodesicError::UndefinedTilt)
    );
}

#[test]
fn node_rate_of_circular_orbits() {
    let mut rates = Vec::new();
    for x in [1.6, 1.2] {
        let (c, r) = circular(4.0, x);
        let y = state_from_constants(&c, r, FRAC_PI_2, Sign::Plus, Sign::Plus).unwrap();
        let traj = integrate(&y, 300.0, RT, AT).unwrap();
        let nodes = node_precession(&traj).unwrap();
        assert!(!nodes.is_empty());
        for n in &nodes {
            assert!((n.measured * r - 1.0).abs() <= 1e-3, "{n:?}");
            assert!((n.mean_r - r).abs() < 1e-6);
        }
        rates.push((r, nodes[0].measured));
    }
    assert!(rates[0].0 < rates[1].0 && rates[0].1 > rates[1].1);
    assert!((rates[1].1 - 0.375).abs() <= 1e-3);
}

#[test]
fn equatorial_orbit_has_no_nodes() {
    let c = GeodesicConstants::new(5.0, 1.2, 1.44, 1.0).unwrap();
    let y = state_from_constants(&c, 1.0, FRAC_PI_2, Sign::Plus, Sign::Plus).unwrap();
    let traj = integrate(&y, 5.0, RT, AT).unwrap();
    assert_eq!(node_precession(&traj), Err(GeodesicError::NoNodes));
    assert_eq!(traj.count(|k| matches!(k, EventKind::Equatorial { .. })), 0);
}

#[test]
fn spin_convention() {
    assert_eq!(spin_outcome(&GeodesicConstants::reference(1.2)), Ok(Spin::Up));
    assert_eq!(spin_outcome(&GeodesicConstants::reference(-1.2)), Ok(Spin::Down));
    let reversed = GeodesicConstants {
        p: -5.0,
        ..GeodesicConstants::reference(1.2)
    };
    assert_eq!(spin_outcome(&reversed), Err(GeodesicError::TimeReversed));
    assert!(matches!(
        spin_outcome(&GeodesicConstants::reference(0.0)),
        Err(GeodesicError::Degenerate(_))
    ));
}

#[test]
fn cartesian_and_stereo_exports() {
    let y = GeodesicState {
        s: 0.0,
        t: 0.0,
        r: 1.0,
        theta: FRAC_PI_2,
        phi: 0.0,
        ut: 1.0,
        ur: 0.0,
        utheta: 0.0,
        uphi: 0.0,
    };
    let single = Trajectory {
        samples: vec![y],
        events: vec![],
        constants: constants_from_state(&y),
        status: TrajectoryStatus::Completed,
    };
    let p = export_cartesian(&single)[0];
    assert!((p[0] - 1.0).abs() < 1e-15 && p[1].abs() < 1e-15 && p[2].abs() < 1e-15);

    let traj = integrate(&reference_start(1.2), 3.0, RT, AT).unwrap();
    assert_eq!(export_cartesian(&traj).len(), traj.samples.len());
    let stereo = export_stereogram(&traj, DEFAULT_STEREO_OFFSET_DEG);
    assert_eq!(stereo.len(), traj.samples.len());
    assert!(stereo.iter().any(|q| (q.left[0] - q.right[0]).abs() > 1e-6));
    assert!(stereo.iter().all(|q| q.left[1] == q.right[1]));
    let svg = stereogram_svg(&stereo);
    assert!(svg.starts_with("<svg") && svg.matches("<polyline").count() == 2);

    let csv = trajectory_csv(&traj);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("s,t,r,theta,phi,Ut,Ur,Utheta,Uphi,drift_P,drift_X,drift_A,drift_W")
    );
    assert_eq!(lines.count(), traj.samples.len());
}

#[test]
fn sign_of_x_separates_attraction_from_repulsion() {
    let up = integrate(&reference_start(1.2), 3.0, RT, AT).unwrap();
    let down = integrate(&reference_start(-1.2), 3.0, RT, AT).unwrap();
    assert!((up.min_r() - 0.161298).abs() < 1e-6);
    assert!((down.min_r() - 0.66130).abs() < 1e-5, "{}", down.min_r());
    assert_eq!(up.last().s, down.last().s);
    assert!((up.last().r - down.last().r).abs() > 0.1);
    assert_ne!(export_cartesian(&up), export_cartesian(&down));
}

#[test]
fn report_json_fields() {
    let c = GeodesicConstants::reference(1.2);
    let traj = integrate(&reference_start(1.2), 3.0, RT, AT).unwrap();
    let report = GeodesicReport::new(&c, &traj);
    let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(v["constants"]["A"], 4.0);
    assert_eq!(v["orbit_class"], "unbound");
    assert!((v["r_min"].as_f64().unwrap() - 0.161298).abs() < 1e-6);
    assert!(v["r_max"].is_null());
    assert_eq!(v["spin"], "Up");
    assert_eq!(v["radial_turning_points"], 1);
    assert!(v["node_rates"].is_array());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn constants_round_trip(
        a in 0.5f64..6.0,
        frac in -0.95f64..0.95,
        p in 0.2f64..6.0,
        w in prop::sample::select(vec![-1.0, 0.0, 1.0]),
        r0 in 0.2f64..8.0,
        lat in 0.0f64..1.0,
        up in any::<bool>(),
    ) {
        let x = frac * a.sqrt();
        let c = GeodesicConstants::new(p, x, a, w).unwrap();
        let s = tilt(&c).unwrap().abs();
        // sin ϑ0 spread over the admissible band.
        let theta0 = (s + (1.0 - s) * lat).clamp(1e-3, 1.0).asin();
        let theta0 = if up { theta0 } else { PI - theta0 };
        if let Ok(y) = state_from_constants(&c, r0, theta0, Sign::Plus, Sign::Minus) {
            let back = constants_from_state(&y);
            for (u, v) in [(c.p, back.p), (c.x, back.x), (c.a, back.a), (c.w, back.w)] {
                prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0), "{c:?} vs {back:?}");
            }
        }
    }
}
