use std::ffi::{CStr, CString};
use std::ptr;

use spo_ffi::*;

fn last_error() -> String {
    let p = spo_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn two_grid(budget: f64) -> *mut SpoInstance {
    let supply = [4.0, 0.0];
    let target = [2.0, 2.0];
    let tt = [0.0, 5.0, 5.0, 0.0];
    let cost = [0.0, 1.0, 1.0, 0.0];
    let mut inst = ptr::null_mut();
    let s = unsafe {
        spo_instance_new(2, supply.as_ptr(), target.as_ptr(), tt.as_ptr(), cost.as_ptr(), budget, 15.0, ptr::null(), &mut inst)
    };
    assert_eq!(s, SpoStatus::Ok);
    inst
}

fn tight() -> SpoAdmmOptions {
    SpoAdmmOptions { xi: 1e-8, ..spo_admm_options_default() }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(spo_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn solve_moves_half_the_supply() {
    let inst = two_grid(10.0);
    assert_eq!(unsafe { spo_instance_n_grids(inst) }, 2);
    let opts = tight();
    let mut sol = ptr::null_mut();
    assert_eq!(unsafe { spo_solve(inst, &opts, &mut sol) }, SpoStatus::Ok);
    unsafe {
        assert!(spo_solution_converged(sol));
        assert!(spo_solution_iterations(sol) > 0);
        assert_eq!(spo_solution_len(sol), 4);
        let mut flows = [0.0; 4];
        assert_eq!(spo_solution_flows(sol, flows.as_mut_ptr(), 4), SpoStatus::Ok);
        assert!((flows[0] - 2.0).abs() < 1e-3, "{flows:?}");
        assert!((flows[1] - 2.0).abs() < 1e-3, "{flows:?}");
        assert!(flows[2].abs() < 1e-3 && flows[3].abs() < 1e-3);
        assert!(spo_solution_objective(sol) < 1e-6);
        assert!((spo_solution_spend(sol) - 2.0).abs() < 1e-3);
        assert!(spo_solution_max_violation(sol) < 1e-4);

        let mut short = [0.0; 3];
        assert_eq!(spo_solution_flows(sol, short.as_mut_ptr(), 3), SpoStatus::Invalid);
        assert!(last_error().contains("flows"));
        spo_solution_free(sol);
        spo_instance_free(inst);
    }
}

#[test]
fn budget_caps_the_move() {
    let inst = two_grid(1.0);
    let opts = tight();
    let mut sol = ptr::null_mut();
    unsafe {
        assert_eq!(spo_solve(inst, &opts, &mut sol), SpoStatus::Ok);
        assert!(spo_solution_spend(sol) <= 1.0 + 1e-4);
        spo_solution_free(sol);
        spo_instance_free(inst);
    }
}

#[test]
fn iteration_cap_reports_not_converged_with_a_plan() {
    let inst = two_grid(10.0);
    let opts = SpoAdmmOptions { k_max: 2, ..tight() };
    let mut sol = ptr::null_mut();
    unsafe {
        assert_eq!(spo_solve(inst, &opts, &mut sol), SpoStatus::NotConverged);
        assert!(!sol.is_null());
        assert!(!spo_solution_converged(sol));
        assert_eq!(spo_solution_iterations(sol), 2);
        spo_solution_free(sol);
        spo_instance_free(inst);
    }
}

#[test]
fn json_round_trip_matches_arrays() {
    let json = CString::new(
        r#"{"n_grids":2,"supply":[4,0],"target":[2,2],"travel_time":[[0,5],[5,0]],
            "cost":[[0,1],[1,0]],"budget":10,"interval":15}"#,
    )
    .unwrap();
    let mut a = ptr::null_mut();
    unsafe {
        assert_eq!(spo_instance_from_json(json.as_ptr(), &mut a), SpoStatus::Ok);
    }
    let b = two_grid(10.0);
    let mut fa = [0.0; 4];
    let mut fb = [0.0; 4];
    for (inst, f) in [(a, &mut fa), (b, &mut fb)] {
        let mut sol = ptr::null_mut();
        unsafe {
            assert_eq!(spo_solve(inst, ptr::null(), &mut sol), SpoStatus::Ok);
            spo_solution_flows(sol, f.as_mut_ptr(), 4);
            spo_solution_free(sol);
            spo_instance_free(inst);
        }
    }
    assert_eq!(fa, fb);
}

#[test]
fn bad_inputs_are_rejected() {
    let mut inst = ptr::null_mut();
    let bad = CString::new(r#"{"n_grids":2,"supply":[4,0]}"#).unwrap();
    unsafe {
        assert_eq!(spo_instance_from_json(bad.as_ptr(), &mut inst), SpoStatus::Invalid);
        assert!(inst.is_null());
        assert!(last_error().contains("malformed"));

        assert_eq!(spo_instance_from_json(ptr::null(), &mut inst), SpoStatus::NullPointer);
        assert!(last_error().contains("json"));

        let neg = [-1.0, 0.0];
        let z = [0.0; 4];
        let s = spo_instance_new(2, neg.as_ptr(), neg.as_ptr(), z.as_ptr(), z.as_ptr(), 1.0, 15.0, ptr::null(), &mut inst);
        assert_eq!(s, SpoStatus::Invalid);
        assert!(last_error().contains("supply"));

        let s = spo_instance_new(0, z.as_ptr(), z.as_ptr(), z.as_ptr(), z.as_ptr(), 1.0, 15.0, ptr::null(), &mut inst);
        assert_eq!(s, SpoStatus::Invalid);

        let inst = two_grid(1.0);
        let opts = SpoAdmmOptions { rho: -1.0, ..spo_admm_options_default() };
        let mut sol = ptr::null_mut();
        assert_eq!(spo_solve(inst, &opts, &mut sol), SpoStatus::Invalid);
        assert!(sol.is_null());
        spo_instance_free(inst);

        spo_instance_free(ptr::null_mut());
        spo_solution_free(ptr::null_mut());
        assert!(spo_solution_objective(ptr::null()).is_nan());
    }
}

#[test]
fn success_clears_the_error() {
    let mut out = 0.0;
    unsafe {
        assert_eq!(spo_rmse(ptr::null(), ptr::null(), 0, &mut out), SpoStatus::NullPointer);
        assert!(!spo_last_error_message().is_null());
        let a = [1.0, 2.0];
        assert_eq!(spo_rmse(a.as_ptr(), a.as_ptr(), 2, &mut out), SpoStatus::Ok);
    }
    assert!(spo_last_error_message().is_null());
}

#[test]
fn metrics_match_hand_values() {
    let d = [1.0, 2.0, 3.0];
    let t = [1.0, 4.0, 0.0];
    let mut out = 0.0;
    unsafe {
        assert_eq!(spo_rmse(d.as_ptr(), t.as_ptr(), 3, &mut out), SpoStatus::Ok);
        assert!((out - (13.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(spo_smape(d.as_ptr(), t.as_ptr(), 3, &mut out), SpoStatus::Ok);
        let expected = 100.0 / 3.0 * (0.0 + 2.0 / 3.0 + 2.0);
        assert!((out - expected).abs() < 1e-12);
        assert_eq!(spo_smape(d.as_ptr(), t.as_ptr(), 0, &mut out), SpoStatus::Invalid);
        assert!(last_error().contains("empty"));
    }
}
