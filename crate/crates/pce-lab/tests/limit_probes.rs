use pce_lab::limit::{
    effective_processes, run_study, strictly_decreasing, DriftPlan, Estimate, LimitSampler,
    LimitSpec, StudyConfig, TimeGrid,
};

/// `B^N = B - int theta^N` has increments orthogonal to bounded functions of
/// the enlarged information at `s`; `B` alone does not.
#[test]
fn compensated_brownian_increments_are_unpredictable() {
    let spec = LimitSpec::reference();
    let level = 4;
    let grid = TimeGrid::new(spec.tau, 10);
    let eff = effective_processes(&spec, level).unwrap();
    let sampler = LimitSampler::new(&spec, grid.clone(), level).unwrap();
    let ks = grid.nearest(0.25);
    let kt = grid.nearest(0.5);
    let plan = DriftPlan::new(&spec.ou, &eff, &grid, kt).unwrap();
    let stage_s = eff.stage_at(grid.times()[ks]);
    let mut compensated = Vec::new();
    let mut raw = Vec::new();
    for i in 0..20_000u64 {
        let noise = sampler.sample(9, i);
        let h = eff.signals(&grid, &noise).unwrap();
        let j = eff.effective_signals(&h).unwrap();
        let w = (j[stage_s - 1][0] - noise.x[ks][0]).tanh();
        let db: f64 = noise.db[ks..kt].iter().map(|v| v[0]).sum();
        let path = plan.integrate(&noise, &j);
        let drift = path.cumulative[kt][0] - path.cumulative[ks][0];
        compensated.push(w * (db - drift));
        raw.push(w * db);
    }
    let c = Estimate::from_samples(&compensated);
    let r = Estimate::from_samples(&raw);
    assert!(c.mean.abs() <= 4.0 * c.se, "compensated {c:?}");
    assert!(r.mean.abs() > 8.0 * r.se, "uncompensated {r:?}");
}

#[test]
fn pre_limit_drifts_and_signals_approach_their_limits() {
    let cfg = StudyConfig {
        samples: 3000,
        energy_samples: 600,
        grid_level: 10,
        mc_levels: vec![4, 6, 8],
        threads: Some(2),
        ..StudyConfig::default()
    };
    let mut spec = LimitSpec::reference();
    spec.n_range = vec![4, 6, 8, 10];
    let study = run_study(&spec, &cfg).unwrap();
    let theta: Vec<f64> = study.levels.iter().map(|l| l.theta_median).collect();
    let j: Vec<f64> = study.levels.iter().map(|l| l.j_l2.mean).collect();
    let f: Vec<f64> = study.f_sup.iter().map(|x| x.1).collect();
    assert!(strictly_decreasing(&theta), "{theta:?}");
    assert!(strictly_decreasing(&j), "{j:?}");
    assert!(strictly_decreasing(&f), "{f:?}");
    assert!(study.ell_outliers(4.0).is_empty());
    for l in &study.levels {
        assert!(
            (l.energy_mc.mean - l.energy_closed).abs() <= 4.0 * l.energy_mc.se,
            "level {}",
            l.level
        );
        assert!(l.energy_closed <= study.energy_limit + 1e-12);
    }
    // The first insider's weight converges to its limit.
    let w: Vec<f64> = study.first_weight.iter().map(|x| x.1).collect();
    let limit = 1.0 - spec.omega0 - 0.4;
    let errs: Vec<f64> = w.iter().map(|v| (v - limit).abs()).collect();
    assert!(
        strictly_decreasing(&errs) || errs.iter().all(|e| *e < 1e-12),
        "{w:?}"
    );
}

#[test]
fn studies_do_not_depend_on_worker_count() {
    let mut spec = LimitSpec::power_law(0.75);
    spec.n_range = vec![4];
    let run = |threads| {
        let cfg = StudyConfig {
            samples: 200,
            energy_samples: 50,
            grid_level: 8,
            mc_levels: vec![4, 6],
            threads: Some(threads),
            ..StudyConfig::default()
        };
        run_study(&spec, &cfg).unwrap().rows()
    };
    assert_eq!(run(1), run(3));
}
