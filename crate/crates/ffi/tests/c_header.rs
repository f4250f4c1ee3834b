//! Compiles a small C client against the generated header and, when the
//! static library is present next to the test binary, links and runs it.

use std::path::{Path, PathBuf};
use std::process::Command;

const CLIENT: &str = r#"
#include <math.h>
#include <stdio.h>
#include "spo_ffi.h"

int main(void) {
    double supply[2] = {4, 0}, target[2] = {2, 2};
    double tt[4] = {0, 5, 5, 0}, cost[4] = {0, 1, 1, 0};
    SpoInstance *inst = NULL;
    if (spo_instance_new(2, supply, target, tt, cost, 10, 15, NULL, &inst) != SPO_STATUS_OK) return 10;
    SpoAdmmOptions opts = spo_admm_options_default();
    opts.xi = 1e-8;
    SpoSolution *sol = NULL;
    if (spo_solve(inst, &opts, &sol) != SPO_STATUS_OK) return 11;
    double flows[4];
    if (spo_solution_flows(sol, flows, spo_solution_len(sol)) != SPO_STATUS_OK) return 12;
    if (fabs(flows[1] - 2.0) > 1e-3) return 13;
    spo_solution_free(sol);
    spo_instance_free(inst);
    if (spo_instance_from_json("{", &inst) != SPO_STATUS_INVALID) return 14;
    if (spo_last_error_message() == NULL) return 15;
    printf("%s\n", spo_version());
    return 0;
}
"#;

fn compiler() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
}

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn static_lib() -> Option<PathBuf> {
    // target/<profile>/deps/<test> -> target/<profile>/libspo_ffi.a
    let exe = std::env::current_exe().ok()?;
    let lib = exe.parent()?.parent()?.join("libspo_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn header_compiles_and_client_runs() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    let dir = std::env::temp_dir().join(format!("spo-ffi-c-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let src = dir.join("client.c");
    std::fs::write(&src, CLIENT).unwrap();

    let syntax = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header_dir())
        .arg(&src)
        .output()
        .unwrap();
    assert!(syntax.status.success(), "{}", String::from_utf8_lossy(&syntax.stderr));

    let Some(lib) = static_lib() else {
        eprintln!("libspo_ffi.a not built, link step skipped");
        return;
    };
    let bin = dir.join("client");
    let link = Command::new(cc)
        .args(["-std=c99", "-I"])
        .arg(header_dir())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(link.status.success(), "{}", String::from_utf8_lossy(&link.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
    std::fs::remove_dir_all(&dir).ok();
}
