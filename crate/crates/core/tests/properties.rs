//! Randomised invariants across the public API.

use arz_core::calibration::AggregatedGrid;
use arz_core::control::{Controller, KernelController, LawForm, OpenLoop, PiController};
use arz_core::fd::{Equilibrium, FundamentalDiagram, GreenshieldsFD, ThreeParamFD};
use arz_core::kernel::{solve_kernels, TriangularGrid};
use arz_core::metrics::{l2_deviation, mse_vs_baseline};
use arz_core::sim::{step, Grid1D, SimConfig, TrafficState};
use arz_core::units::*;
use proptest::prelude::*;

fn greenshields(vf_kmh: f64, rho_m_km: f64) -> FundamentalDiagram {
    GreenshieldsFD::new(kmh_to_ms(vf_kmh), per_km_to_per_m(rho_m_km), 1.0).unwrap().into()
}

fn reference_eq(rho_star_km: f64) -> Equilibrium {
    greenshields(144.0, 160.0).equilibrium(per_km_to_per_m(rho_star_km)).unwrap()
}

/// Deviation state built in `(q, v)` so that scaling the amplitude scales
/// the flow and speed deviations exactly.
fn deviation(eq: &Equilibrium, n: usize, amp: f64, phase: f64) -> TrafficState {
    let grid = Grid1D::new(500.0, n).unwrap();
    let mut rho = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for x in grid.centers() {
        let s = (std::f64::consts::PI * x / 500.0 + phase).cos();
        let vi = eq.v_star * (1.0 - amp * 0.5 * s);
        let qi = eq.q_star * (1.0 + amp * s);
        rho.push(qi / vi);
        v.push(vi);
    }
    TrafficState { rho, v, t: 0.0 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn greenshields_flow_is_density_times_speed_and_concave(
        vf in 30.0f64..160.0, rho_m in 100.0f64..400.0, frac in 0.01f64..0.99
    ) {
        let fd = greenshields(vf, rho_m);
        let rho = frac * per_km_to_per_m(rho_m);
        prop_assert!((fd.flow(rho) - rho * fd.speed(rho)).abs() <= 1e-12 * fd.flow(rho).abs().max(1e-12));
        let h = 1e-4 * per_km_to_per_m(rho_m);
        let lo = (rho - h).max(0.0);
        let second = fd.flow(lo) - 2.0 * fd.flow(lo + h) + fd.flow(lo + 2.0 * h);
        prop_assert!(second < 0.0);
    }

    #[test]
    fn three_param_flow_vanishes_at_zero_and_is_concave(
        zeta in 500.0f64..3000.0, kappa in 2.0f64..40.0, p in 0.1f64..0.6, frac in 0.02f64..0.98
    ) {
        let fd = ThreeParamFD::new(per_h_to_per_s(zeta), kappa, p, per_km_to_per_m(800.0)).unwrap();
        prop_assert!(fd.flow(0.0).abs() < 1e-12);
        prop_assert!(fd.flow_second_derivative(frac * fd.rho_m) < 0.0);
        prop_assert!((fd.a() - (1.0 + kappa * kappa * p * p).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_speed_is_consistent(rho_star in 85.0f64..155.0) {
        let fd = greenshields(144.0, 160.0);
        let eq = fd.equilibrium(per_km_to_per_m(rho_star)).unwrap();
        prop_assert_eq!(fd.speed(eq.rho_star), eq.v_star);
        prop_assert!(eq.lambda2 > 0.0);
        let back = fd.equilibrium_for_lambda2(eq.lambda2).unwrap();
        prop_assert!((back.rho_star - eq.rho_star).abs() < 1e-9 * eq.rho_star);
    }

    #[test]
    fn uniform_equilibrium_is_stationary(rho_star in 95.0f64..150.0, n in 20usize..120) {
        let fd = greenshields(144.0, 160.0);
        let eq = fd.equilibrium(per_km_to_per_m(rho_star)).unwrap();
        let cfg = SimConfig::new(Grid1D::new(500.0, n).unwrap(), 300.0, 60.0, fd, eq);
        let mut s = TrafficState::uniform(n, eq.rho_star, eq.v_star);
        for _ in 0..20 {
            s = step(&s, &cfg, 0.0).unwrap();
        }
        for (r, v) in s.rho.iter().zip(&s.v) {
            prop_assert!((r - eq.rho_star).abs() <= 1e-12 * eq.rho_star);
            prop_assert!((v - eq.v_star).abs() <= 1e-12 * eq.v_star);
        }
    }

    #[test]
    fn kernel_law_is_zero_at_equilibrium_and_linear(
        rho_star in 95.0f64..150.0, amp in 0.005f64..0.05, phase in 0.0f64..6.28
    ) {
        let eq = reference_eq(rho_star);
        let grid = Grid1D::new(500.0, 80).unwrap();
        let mut c = KernelController::backstepping(eq, 60.0, grid, &TriangularGrid::new(31, 500.0).unwrap()).unwrap();
        let u0 = c.compute(0.0, &TrafficState::uniform(80, eq.rho_star, eq.v_star), &eq);
        prop_assert!(u0.abs() < 1e-12);
        let u1 = c.compute(0.0, &deviation(&eq, 80, amp, phase), &eq);
        let u2 = c.compute(0.0, &deviation(&eq, 80, 2.0 * amp, phase), &eq);
        prop_assert!((u2 - 2.0 * u1).abs() <= 1e-10 * u1.abs().max(1e-12), "{} vs {}", u2, 2.0 * u1);
    }

    #[test]
    fn law_assemblies_agree(rho_star in 95.0f64..150.0, amp in 0.005f64..0.1, phase in 0.0f64..6.28) {
        let eq = reference_eq(rho_star);
        let grid = Grid1D::new(500.0, 60).unwrap();
        let mut a = KernelController::backstepping(eq, 60.0, grid, &TriangularGrid::new(31, 500.0).unwrap()).unwrap();
        let mut b = a.clone().with_form(LawForm::Transformed);
        let s = deviation(&eq, 60, amp, phase);
        let (ua, ub) = (a.compute(0.0, &s, &eq), b.compute(0.0, &s, &eq));
        prop_assert!((ua - ub).abs() <= 1e-8 * ua.abs().max(1e-12));
    }

    #[test]
    fn pi_and_open_loop_vanish_at_equilibrium(rho_star in 95.0f64..150.0) {
        let eq = reference_eq(rho_star);
        let s = TrafficState::uniform(40, eq.rho_star, eq.v_star);
        let mut pi = PiController::default();
        // absolute actuation: at equilibrium PI commands v⋆, i.e. U = 0
        let u = pi.compute(0.0, &s, &eq);
        prop_assert!(u.abs() < 1e-12);
        prop_assert_eq!(OpenLoop.compute(0.0, &s, &eq), 0.0);
    }

    #[test]
    fn kv_is_constant_along_diagonals(rho_star in 95.0f64..150.0) {
        let eq = reference_eq(rho_star);
        let g = TriangularGrid::new(21, 500.0).unwrap();
        let f = solve_kernels(&eq, 60.0, &g).unwrap();
        for i in 1..21 {
            for j in 1..=i {
                let (a, b) = (f.kv_at(i, j), f.kv_at(i - 1, j - 1));
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn l2_and_mse_are_nonnegative_and_vanish_on_self(
        rho_star in 95.0f64..125.0, amp in 0.0f64..0.1, n in 8usize..50
    ) {
        let eq = reference_eq(rho_star);
        let s = deviation(&eq, n, amp, 0.3);
        let d = l2_deviation(&s.rho, &s.v, &eq, 500.0 / n as f64);
        prop_assert!(d >= 0.0);
        prop_assert!(l2_deviation(&vec![eq.rho_star; n], &vec![eq.v_star; n], &eq, 1.0) == 0.0);
        let fd = greenshields(144.0, 160.0);
        let cfg = SimConfig::new(Grid1D::new(500.0, n).unwrap(), 5.0, 60.0, fd, eq);
        let ic = arz_core::sim::InitialCondition::SinusoidalPi { amplitude: amp.max(1e-3) };
        let r = arz_core::sim::run_closed_loop(&ic, &cfg, &mut OpenLoop).unwrap();
        let (mr, mv) = mse_vs_baseline(&r, &r).unwrap();
        prop_assert_eq!((mr, mv), (0.0, 0.0));
    }

    #[test]
    fn unit_conversions_round_trip(x in -1e4f64..1e4) {
        prop_assert!((ms_to_kmh(kmh_to_ms(x)) - x).abs() <= 1e-12 * x.abs().max(1.0));
        prop_assert!((per_m_to_per_km(per_km_to_per_m(x)) - x).abs() <= 1e-12 * x.abs().max(1.0));
        prop_assert!((per_s_to_per_h(per_h_to_per_s(x)) - x).abs() <= 1e-12 * x.abs().max(1.0));
    }

    #[test]
    fn aggregated_grid_csv_round_trips(seed in 0u64..1000, n in 1usize..40) {
        let fd = ThreeParamFD::new(per_h_to_per_s(1339.38), 16.53, 0.28, per_km_to_per_m(800.0)).unwrap();
        let g = AggregatedGrid::synthetic(&fd, n, 0.01, seed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        g.write_csv(&p).unwrap();
        let back = AggregatedGrid::read_csv(&p, Some(fd.rho_m)).unwrap();
        // files hold veh/km and veh/h, so SI values may differ in the last ulp
        prop_assert_eq!(back.len(), g.len());
        for (a, b) in back.cells.iter().zip(&g.cells) {
            prop_assert_eq!((a.x_index, a.t_index), (b.x_index, b.t_index));
            prop_assert!((a.density - b.density).abs() <= 1e-12 * b.density);
            prop_assert!((a.flow - b.flow).abs() <= 1e-12 * b.flow.max(1e-12));
        }
    }
}
