use psd_online::bench::{
    gen_adversarial, gen_random, prepare_arms, run_arm, run_experiment, write_csv, Arm, DesignGrid,
    ExperimentConfig,
};
use psd_online::budget::{BudgetSmoother, Variant};
use psd_online::designer::{design_hs, DesignSpec};
use psd_online::oracle::{dual_eval, kkt_dual, offline_continuous_opt, offline_integer_opt};
use psd_online::{Execution, TraceObjective};

const SMALL: &str = r#"
objective = "d-optimal"
family = "random"
density = 0.6
n = 4
m = 16
b = 4
gammas = [1, 2]
repeats = 3
seed = 21
q = 40
d = 80
"#;

fn csv_bytes(exec: Execution) -> Vec<u8> {
    let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    let reports = run_experiment(&cfg, exec).unwrap();
    let mut out = Vec::new();
    write_csv(&reports, &mut out).unwrap();
    out
}

#[test]
fn experiment_output_does_not_depend_on_execution() {
    let seq = csv_bytes(Execution::Sequential);
    assert_eq!(seq, csv_bytes(Execution::Sequential));
    assert_eq!(seq, csv_bytes(Execution::Parallel));
    // header plus 2 variants x 2 gammas x 2 arms x 3 repeats
    assert_eq!(String::from_utf8(seq).unwrap().lines().count(), 1 + 24);
}

#[test]
fn every_run_of_a_small_sweep_passes_its_audit() {
    let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    for r in run_experiment(&cfg, Execution::default()).unwrap() {
        assert!(r.audit_pass, "{r:?}");
        assert!(r.budget_used <= r.b_prime + 1e-9);
        assert!(!r.design_flagged);
    }
}

#[test]
fn tampered_decisions_fail_the_audit() {
    let inst = gen_adversarial(4, 20, 4.0, 9).unwrap();
    let obj = TraceObjective::DOptimal;
    let p_star = offline_continuous_opt(&inst, &obj).unwrap().value;
    for variant in [Variant::Sequential, Variant::Simultaneous] {
        let setups = prepare_arms(obj, variant, 2.0, inst.b, &inst.stats, DesignGrid::default()).unwrap();
        let (_, artifact, audit) = run_arm(&inst, &setups[0], p_star, 0, true).unwrap();
        assert!(audit.passed, "{:?}", audit.failures());

        let t = artifact.trace.steps.iter().position(|s| s.x > 0.5).expect("something is accepted");
        let mut flipped = artifact.clone();
        flipped.trace.steps[t].x = 0.0;
        if let Ok(report) = flipped.audit() {
            assert!(!report.passed, "{variant}: flipped decision was not caught");
        }

        let mut cheaper = artifact.clone();
        cheaper.setup.smoother.b *= 0.25;
        if let Ok(report) = cheaper.audit() {
            assert!(!report.passed, "{variant}: mismatched budget was not caught");
        }
    }
}

#[test]
fn sequential_runs_satisfy_the_rho_bound() {
    for seed in 0..5 {
        let inst = gen_random(4, 24, 1.0, 5.0, seed).unwrap();
        let obj = TraceObjective::AOptimal;
        let p_star = offline_continuous_opt(&inst, &obj).unwrap().value;
        let grid = DesignGrid { q: 40, d: 80, u_max: None };
        let setups = prepare_arms(obj, Variant::Sequential, 2.0, inst.b, &inst.stats, grid).unwrap();
        assert_eq!(setups.len(), 1, "A-optimal has no unsmoothed arm");
        let (_, _, audit) = run_arm(&inst, &setups[0], p_star, 0, false).unwrap();
        let check = audit.check("rho-bound").expect("sequential audits check the rho bound");
        assert!(check.passed, "seed {seed}: slack {}", check.slack);
    }
}

#[test]
fn unsmoothed_arm_is_added_only_for_psd_dr_objectives() {
    let inst = gen_adversarial(3, 10, 2.0, 1).unwrap();
    let grid = DesignGrid { q: 30, d: 60, u_max: None };
    for (obj, arms) in [(TraceObjective::DOptimal, 2), (TraceObjective::AOptimal, 1), (TraceObjective::Linear, 2)] {
        let setups = prepare_arms(obj, Variant::Simultaneous, 1.0, inst.b, &inst.stats, grid).unwrap();
        assert_eq!(setups.len(), arms, "{obj}");
        assert_eq!(setups[0].arm, Arm::Smoothed);
    }
}

#[test]
fn kkt_dual_closes_the_gap_at_the_offline_optimum() {
    for seed in 0..4 {
        let inst = gen_random(4, 14, 1.0, 3.0, seed).unwrap();
        for obj in [TraceObjective::DOptimal, TraceObjective::AOptimal] {
            let opt = offline_continuous_opt(&inst, &obj).unwrap();
            assert!(opt.converged);
            let (y, z, dual) = kkt_dual(&inst, &obj, &opt.x).unwrap();
            assert!(z <= 0.0);
            assert!((dual - opt.value).abs() <= 1e-5 * (1.0 + opt.value), "{obj}: {dual} vs {}", opt.value);
            assert_eq!(dual, dual_eval(&inst, &obj, &y, z).unwrap());
            let integer = offline_integer_opt(&inst, &obj, Execution::default()).unwrap();
            assert!(integer.value <= opt.value + 1e-9);
            assert!(inst.cost(&integer.x) <= inst.b + 1e-12);
        }
    }
}

#[test]
fn gs_identity_holds_across_gammas_and_objectives() {
    // the residual is absolute, so keep r u moderate enough that G_S stays O(1e3)
    let grid: Vec<f64> = (0..=40).map(|k| 0.3 * k as f64).collect();
    for obj in [TraceObjective::Linear, TraceObjective::DOptimal, TraceObjective::AOptimal] {
        for variant in [Variant::Simultaneous, Variant::Sequential] {
            let rho1 = if variant == Variant::Sequential { 0.7 } else { 0.0 };
            for gamma in [1.0, 1.5, 3.0, 4.0] {
                let sm = BudgetSmoother::new(obj, variant, gamma, 6.0, 1.3, 2.0, rho1).unwrap();
                let residual = sm.gs_gamma_identity_check(&grid).unwrap();
                assert!(residual <= 1e-6, "{obj} {variant} gamma {gamma}: {residual}");
            }
        }
    }
}

#[test]
fn designed_beta_grows_with_gamma_and_stays_below_the_unsmoothed_value() {
    for obj in [TraceObjective::DOptimal, TraceObjective::AOptimal] {
        let mut last = 0.0;
        for gamma in [1.0, 2.0, 3.0, 4.0] {
            let spec = DesignSpec::new(obj, gamma, 5.0, Variant::Simultaneous, 0.0).with_grid(60, 120);
            let r = design_hs(&spec).unwrap();
            assert!(!r.flagged, "{obj} gamma {gamma}");
            assert!(r.beta >= last - 1e-6, "{obj}: beta {} after {last}", r.beta);
            assert!(r.lower_bound <= r.beta + 1e-9);
            if obj == TraceObjective::DOptimal {
                assert!(r.beta <= gamma + 1.0 + 1e-6);
            }
            last = r.beta;
        }
    }
}
