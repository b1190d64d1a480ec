//! Integration invariants of the coupled flow and its supporting operators
//! that need a real (moderate-resolution) run to exercise.

use bubbleflow::bubbles::CutoffBubble;
use bubbleflow::fields::{dirichlet_energy, local_energy, SphereField};
use bubbleflow::flow::{
    find_concentration, init_flow, ConcentrationOpts, FlowStops, InitialData,
};
use bubbleflow::metric::{AnisoGrid, ConstantProfile, MetricState, Representation};
use bubbleflow::numerics::pairwise_sum;
use bubbleflow::sphere::{degree, dot3, Rotation3};
use bubbleflow::torus::{ball_mask, wrap_delta, TorusSpec};
use std::f64::consts::PI;

fn desk(n: usize) -> (TorusSpec, ConstantProfile) {
    let spec = TorusSpec::new(2.0, n).unwrap();
    (spec, ConstantProfile::desk(&spec))
}

#[test]
fn ledger_bounds_endpoint_distance_and_core_energy_stays_stable() {
    let (spec, profile) = desk(256);
    let lam = 40.0;
    let cb = CutoffBubble::new(spec, lam, [1.0, 1.0], 0.5).unwrap();
    let field = cb.field();
    let opts = ConcentrationOpts {
        mu_floor: Some(profile.mu_star),
        ..Default::default()
    };
    let (b, mu0) = find_concentration(&field, &opts).unwrap();
    let value = |p: [f64; 2]| cb.value(p);
    let mut state =
        init_flow(InitialData::Analytic(&value), spec, profile, b, mu0, true).unwrap();
    let u_start = state.u.clone();
    let core_start = state.core_energy();

    // a fixed test cutoff supported in the frozen core
    let phi_mask = ball_mask(&spec, b, 0.8 * profile.r3, 4).unwrap();
    let e_phi_start = local_energy(&state.u, &phi_mask);

    let stops = FlowStops {
        mu_stop: mu0 * 4.0,
        grad_tol: 1e-9,
        coupled_exit_factor: 1.25,
        t_max: 1.0,
        max_steps: 800,
        eps2: 0.1,
        cfl: 0.2,
    };
    for _ in 0..800 {
        state.step(1.0, &stops).unwrap();
    }

    // endpoint distance in the final metric against the travelled ledger;
    // the family ordering constant bounds the norm comparison
    let aniso = AnisoGrid::build(&state.ms);
    let n = spec.grid_n;
    let mut acc = Vec::with_capacity(n);
    for j in 0..n {
        let mut row = 0.0;
        for i in 0..n {
            let idx = j * n + i;
            let d = [
                state.u.data[idx][0] - u_start.data[idx][0],
                state.u.data[idx][1] - u_start.data[idx][1],
                state.u.data[idx][2] - u_start.data[idx][2],
            ];
            row += dot3(d, d) * aniso.rho_sq[idx];
        }
        acc.push(row);
    }
    let endpoint_dist = (pairwise_sum(&acc) * spec.cell_area()).sqrt();
    let bound = state.dist_u * (1.5f64).exp();
    assert!(
        endpoint_dist <= bound,
        "endpoint distance {endpoint_dist} exceeds ledger bound {bound} (ledger {})",
        state.dist_u
    );

    // core protection: the half-mass level is preserved along the run
    let core_end = state.core_energy();
    assert!(
        (core_end - core_start).abs() < 0.2,
        "core energy drifted {core_start} -> {core_end}"
    );

    // local-energy stability: change of the windowed energy controlled by
    // the travelled distance times the cutoff steepness
    let e_phi_end = local_energy(&state.u, &phi_mask);
    let sqrt_defect = cb.defect_exact().sqrt();
    let grad_phi_sup = 1.0 / (0.2 * profile.r3); // ramp width of the mask scale
    let cap = 10.0 * (1.0 + grad_phi_sup) * sqrt_defect;
    assert!(
        (e_phi_end - e_phi_start).abs() <= cap,
        "local energy moved {} vs cap {cap}",
        (e_phi_end - e_phi_start).abs()
    );

    // energy decay remains monotone across the run records
    for w in state.history.windows(2) {
        assert!(w[1].energy <= w[0].energy * (1.0 + 1e-9) + 1e-12);
    }
}

#[test]
fn projected_norm_scale_sanity() {
    // |P(k)| <= C E mu on assorted fields
    let (spec, profile) = desk(128);
    let ms = MetricState::new(
        spec,
        profile,
        [1.0, 1.0],
        1.5 * profile.mu_star,
        Representation::PulledBack,
    )
    .unwrap();
    for seed in 0..3u64 {
        let u = SphereField::from_fn(spec, |x, y| {
            let k = 1.0 + seed as f64;
            bubbleflow::sphere::normalize3([
                (PI * k * x).cos() + 0.3,
                (PI * x + 2.0 * PI * y).sin(),
                1.0 + 0.4 * (PI * k * y).cos(),
            ])
        });
        let grad = bubbleflow::projection::gradient_norm(&u, &ms).unwrap();
        let e = dirichlet_energy(&u);
        assert!(
            grad.proj_norm <= 10.0 * e * ms.mu,
            "proj {} vs C E mu = {}",
            grad.proj_norm,
            10.0 * e * ms.mu
        );
    }
}

#[test]
fn cylinder_chart_ring_mapping_and_roundtrip() {
    let (spec, profile) = desk(256);
    let ms = MetricState::new(
        spec,
        profile,
        [1.0, 1.0],
        1.4 * profile.mu_star,
        Representation::PulledBack,
    )
    .unwrap();
    let chart = ms.cylinder_chart(0.02, 256);
    let x_mu = ms.diffeo.x_mu();
    // the ring at s = X_mu sits at the zoom boundary radius r1
    let k_top = chart
        .s_values
        .iter()
        .position(|s| (*s - x_mu).abs() < 1e-9)
        .expect("lattice contains X_mu");
    assert!((chart.ring_radii[k_top] - profile.r1).abs() < 1e-9 * profile.r1);
    // the ring at s = X_mu - a sits at the inner edge of the ramp support
    let k_bot = chart
        .s_values
        .iter()
        .position(|s| (*s - (x_mu - profile.psi_gap_a)).abs() < 1e-9)
        .expect("lattice contains X_mu - a");
    let r_g = ms.diffeo.r_g();
    assert!(
        (chart.ring_radii[k_bot] - r_g).abs() < 1e-6 * r_g,
        "inner ring {} vs frozen radius {}",
        chart.ring_radii[k_bot],
        r_g
    );

    // resampling a smooth field commutes with evaluation at second order
    let mut errs = Vec::new();
    for n in [128usize, 256] {
        let spec_n = TorusSpec::new(2.0, n).unwrap();
        let profile_n = ConstantProfile::desk(&spec_n);
        let ms_n = MetricState::new(
            spec_n,
            profile_n,
            [1.0, 1.0],
            1.4 * profile_n.mu_star,
            Representation::PulledBack,
        )
        .unwrap();
        let f = |p: [f64; 2]| -> [f64; 3] {
            let d = wrap_delta(&spec_n, [1.0, 1.0], p);
            bubbleflow::sphere::normalize3([
                (2.0 * PI * d[0]).cos(),
                (2.0 * PI * d[1]).sin(),
                1.3,
            ])
        };
        let u = SphereField::from_fn(spec_n, |x, y| f([x, y]));
        let chart_n = ms_n.cylinder_chart(0.02, 128);
        let sampled = chart_n.resample(&u, ms_n.b);
        // compare against direct evaluation on the lattice
        let direct = chart_n.resample_fn(&spec_n, ms_n.b, f);
        let mut worst: f64 = 0.0;
        for (a, b) in sampled.data.iter().zip(&direct.data) {
            let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            worst = worst.max(dot3(d, d).sqrt());
        }
        errs.push(worst);
    }
    assert!(
        errs[1] < errs[0] * 0.35,
        "resample errors {errs:?} not second order"
    );
}

#[test]
fn pulled_back_area_matches_weighted_area() {
    let (spec, profile) = desk(256);
    let mu = 2.2 * profile.mu_star;
    let pulled =
        MetricState::new(spec, profile, [1.0, 1.0], mu, Representation::PulledBack).unwrap();
    let weighted =
        MetricState::new(spec, profile, [1.0, 1.0], mu, Representation::Weighted).unwrap();
    let area = |ms: &MetricState| -> f64 {
        let aniso = AnisoGrid::build(ms);
        pairwise_sum(&aniso.rho_sq) * spec.cell_area()
    };
    let a_p = area(&pulled);
    let a_w = area(&weighted);
    assert!(
        ((a_p - a_w) / a_w).abs() < 5e-3,
        "areas differ: pulled {a_p} vs weighted {a_w}"
    );
}

#[test]
fn energy_lower_bound_tightens_under_refinement() {
    // degree-1 fields stay above the area bound up to a grid defect that
    // shrinks under refinement
    let mut shortfalls = Vec::new();
    for n in [128usize, 256, 512] {
        let spec = TorusSpec::new(2.0, n).unwrap();
        let cb = CutoffBubble::new(spec, 20.0, [1.0, 1.0], 0.5).unwrap();
        let e = dirichlet_energy(&cb.field());
        shortfalls.push((4.0 * PI - e).max(0.0));
    }
    assert!(shortfalls[2] < 0.05);
    assert!(
        shortfalls[2] <= shortfalls[0] + 1e-12,
        "shortfalls {shortfalls:?} do not shrink"
    );
}

#[test]
fn degree_is_rotation_invariant() {
    let spec = TorusSpec::new(2.0, 256).unwrap();
    let cb = CutoffBubble::new(spec, 32.0, [1.0, 1.0], 0.5).unwrap();
    let field = cb.field();
    let base = degree(&field).unwrap().degree;
    for (axis, angle) in [([1.0, 0.0, 0.0], 0.9), ([0.2, -1.0, 0.5], 2.2), ([0.0, 0.3, 1.0], -1.1)]
    {
        let r = Rotation3::from_axis_angle(axis, angle);
        let rotated = field.map(|v| r.apply(v));
        assert_eq!(degree(&rotated).unwrap().degree, base);
    }
}
