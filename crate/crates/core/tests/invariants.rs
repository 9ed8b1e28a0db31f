use marq::experiment::{run_reproduce, Experiment};
use marq::linalg::{norm2, sub, SymBand};
use marq::problems::analytic;
use marq::*;
use proptest::prelude::*;

fn band_matrix(n: usize, bw: usize, entries: &[f64]) -> SymBand<f64> {
    let mut b = SymBand::zeros(n, bw);
    let mut it = entries.iter().cycle();
    for i in 0..n {
        for j in i.saturating_sub(bw)..=i {
            b.set(i, j, *it.next().unwrap());
        }
    }
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn grid_prolongation_is_four_times_restriction_transpose(nc in 1usize..12) {
        let pair = build_grid_transfer::<f64>(nc).unwrap();
        prop_assert_eq!(pair.fine_dim(), 4 * nc * nc);
        prop_assert_eq!(pair.coarse_dim(), nc * nc);
        prop_assert_eq!(pair.adjoint_defect(), 0.0);
    }

    #[test]
    fn coarse_model_matches_fine_derivatives_at_its_start(
        seed in 0u64..1000,
        a in 0.1f64..3.0,
        dirs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 16), 5),
    ) {
        let fine = GridProblemF64::assemble(8, RhsMode::Discrete).unwrap();
        let coarse = GridProblemF64::assemble(4, RhsMode::Discrete).unwrap();
        let pair = build_grid_transfer::<f64>(4).unwrap();
        let x: Vec<f64> = random_init(64, a, seed).unwrap();
        let g = fine.gradient(&x).unwrap();
        let b = fine.hessian(&x).unwrap();
        let cm = build_coarse_model(&g, Some(&b), &x, &pair, &coarse, Order::Second).unwrap();

        let d1 = norm2(&sub(&cm.gradient(cm.start()).unwrap(), &pair.restrict(&g)));
        prop_assert!(d1 <= 1e-12 * (1.0 + norm2(&g)), "first-order defect {d1:e}");

        let hc = cm.hessian(cm.start()).unwrap();
        for s in &dirs {
            let lhs = hc.quad_form(s);
            let rhs: f64 = pair.restrict(&b.matvec(&pair.prolong(s))).iter().zip(s).map(|(u, v)| u * v).sum();
            let scale = norm2(s).powi(2) * (1.0 + b.norm_inf());
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale, "second-order defect {:e}", (lhs - rhs).abs());
        }
    }

    #[test]
    fn second_order_step_meets_its_exit_rule(
        n in 1usize..10,
        bw in 0usize..3,
        entries in prop::collection::vec(-3.0f64..3.0, 40),
        g in prop::collection::vec(-2.0f64..2.0, 10),
        lambda in 0.05f64..5.0,
    ) {
        let b = band_matrix(n, bw, &entries);
        let g = &g[..n];
        let opts = SubproblemOptions::<f64>::default();
        let r = solve_q2(g, &b, lambda, &opts).unwrap();
        let m = RegularizedModel::second_order(0.0, g.to_vec(), b.clone(), lambda).unwrap();

        // The reported decrease is that of the unregularized Taylor model.
        let taylor = m.taylor_value(&r.step).unwrap();
        prop_assert!((r.model_decrease + taylor).abs() <= 1e-10 * (1.0 + taylor.abs()));
        prop_assert!(m.regularized_value(&r.step).unwrap() <= 1e-12);

        if !r.hard_case {
            let ns = norm2(&r.step);
            let resid = norm2(&m.regularized_grad(&r.step).unwrap());
            let floor = 64.0 * f64::EPSILON * (norm2(g) + (b.norm_inf() + r.sigma) * ns);
            prop_assert!(resid <= (opts.theta * ns * ns).max(floor) * (1.0 + 1e-6), "residual {resid:e}");
        }
    }

    #[test]
    fn lambda_update_respects_its_floor_and_growth(rho in -2.0f64..2.0, lambda in 1e-9f64..1e3) {
        let cfg = SolverConfigF64::default();
        let next = update_lambda(Some(rho), lambda, &cfg);
        if rho >= cfg.eta1 {
            prop_assert!(next >= cfg.lambda_min);
            prop_assert!(next <= lambda.max(cfg.lambda_min));
        } else {
            prop_assert_eq!(next, cfg.gamma3 * lambda);
        }
        prop_assert_eq!(update_lambda(None, lambda, &cfg), cfg.gamma3 * lambda);
    }

    #[test]
    fn random_init_stays_in_range(n in 1usize..200, a in 0.01f64..10.0, seed in any::<u64>()) {
        let x: Vec<f64> = random_init(n, a, seed).unwrap();
        prop_assert!(x.iter().all(|&v| (0.0..=a).contains(&v)));
        prop_assert_eq!(x, random_init::<f64>(n, a, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn quartic_runs_descend_and_terminate(n in 2usize..20, seed in 0u64..500, q in 1u32..=2) {
        let f = analytic::convex_quartic::<f64>(n, seed);
        let x0: Vec<f64> = random_init(n, 2.0, seed).unwrap();
        let cfg = SolverConfigF64 { max_outer_iters: 5000, ..Default::default() };
        let r = arq_minimize(&f, &x0, &cfg, Order::from_q(q).unwrap()).unwrap();
        prop_assert!(r.converged);
        prop_assert!(norm2(&f.gradient(&r.solution).unwrap()) <= cfg.epsilon);
        for (i, t) in r.trace.iter().enumerate() {
            let next = r.trace.get(i + 1).map_or(r.final_value, |n| n.f_value);
            // Stored values carry the rounding error of one evaluation of f.
            prop_assert!(next <= t.f_value + 1e-14 * (1.0 + t.f_value.abs()));
            if t.successful && t.pred > 1e-10 * (1.0 + t.f_value.abs()) {
                prop_assert!(next < t.f_value);
            }
            prop_assert_eq!(t.successful, t.rho.is_some_and(|v| v >= cfg.eta1));
        }
    }

    #[test]
    fn multilevel_reports_are_consistent(seed in 0u64..100, a in 0.5f64..4.0, levels in 1usize..=3) {
        let desc = ProblemDescriptor { n1d: 8, levels, seed, a, rhs: RhsMode::Discrete };
        let h: LevelHierarchyF64 = desc.hierarchy().unwrap();
        let x0: Vec<f64> = desc.initial_guess().unwrap();
        let cfg = SolverConfigF64::default();
        let r = marq_minimize(&h, &x0, &cfg, Order::Second).unwrap();

        prop_assert_eq!(r.trace.len(), r.it_t);
        prop_assert!(r.it_f <= r.it_t);
        prop_assert_eq!(r.it_f, r.trace.iter().filter(|t| t.model_kind == ModelKind::Taylor).count());
        prop_assert_eq!(r.per_level_flops.len(), levels);
        // Top-level iterations account for every flop, recursive work included.
        let summed: u64 = r.trace.iter().map(|t| t.flops_this_iter).sum();
        prop_assert_eq!(summed, r.total_flops());
        prop_assert!(r.coarse_trace.iter().all(|t| t.level < levels));
        if levels == 1 {
            prop_assert!(r.coarse_trace.is_empty());
        }

        let again = marq_minimize(&h, &x0, &cfg, Order::Second).unwrap();
        prop_assert!(r.same_outcome(&again));
    }
}

#[test]
fn reproduce_does_not_depend_on_thread_count() {
    let exp = Experiment { n1d: 8, levels: 3, a: 2.0, reps: 4, base_seed: 3, rhs: RhsMode::Discrete, q: 2 };
    let cfg = SolverConfigF64::default();
    let (one, s1) = run_reproduce(&exp, &cfg, 1).unwrap();
    let (three, s3) = run_reproduce(&exp, &cfg, 3).unwrap();
    assert_eq!(one.len(), 4);
    for (a, b) in one.iter().zip(&three) {
        assert_eq!(a.seed, b.seed);
        assert!(a.arc.same_outcome(&b.arc));
        assert!(a.marc.same_outcome(&b.marc));
    }
    assert_eq!(s1.saves, s3.saves);
}

#[test]
fn audit_mode_runs_pass_every_check() {
    let desc = ProblemDescriptor { n1d: 16, levels: 3, seed: 5, a: 2.0, rhs: RhsMode::Discrete };
    let h: LevelHierarchyF64 = desc.hierarchy().unwrap();
    let x0: Vec<f64> = desc.initial_guess().unwrap();
    let cfg = SolverConfigF64 { audit: true, ..Default::default() };
    let r = marq_minimize(&h, &x0, &cfg, Order::Second).unwrap();
    let failures: Vec<_> = r.audit.iter().filter(|a| !a.passed).collect();
    assert!(r.converged);
    assert!(failures.is_empty(), "{failures:?}");
    assert!(lambda_ceiling_check(&r, r.lipschitz.as_ref().unwrap(), &cfg));
}

#[test]
fn single_precision_grid_run_converges_to_a_looser_tolerance() {
    let desc = ProblemDescriptor { n1d: 8, levels: 2, seed: 1, a: 1.0, rhs: RhsMode::Discrete };
    let h: LevelHierarchy<f32> = desc.hierarchy().unwrap();
    let x0: Vec<f32> = desc.initial_guess().unwrap();
    let cfg = SolverConfigF32 { epsilon: 1e-2, ..Default::default() };
    let r = marq_minimize(&h, &x0, &cfg, Order::Second).unwrap();
    assert!(r.converged);
    assert!(r.rmse_final.is_none());
    let p = GridProblemF32::assemble(8, RhsMode::Discrete).unwrap();
    let sol: Vec<f32> = r.solution.iter().map(|&v| v as f32).collect();
    assert!(p.rmse(&sol).unwrap() < 1e-3);
}
