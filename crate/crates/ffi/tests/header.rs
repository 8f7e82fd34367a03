use std::path::Path;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stddef.h>
#include "bvsmooth.h"

int smooth(const double *ys, size_t n, double *mean) {
    BvModel *model = NULL;
    BvSmoothed *s = NULL;
    char msg[256];
    if (bv_model_new_scalar(0.0, 1.0, 0.9, 0.1, 1.0, 0.5, &model) != BV_STATUS_OK) {
        bv_last_error_message(msg, sizeof msg);
        return -1;
    }
    BvStatus st = bv_kalman_smooth(model, ys, n, &s);
    if (st == BV_STATUS_OK) {
        st = bv_smoothed_mean(s, 0, mean, 1);
        bv_smoothed_free(s);
    }
    bv_model_free(model);
    return (int)st;
}
"#;

/// Compiles (without linking) a small C client against the generated header.
#[test]
fn header_compiles_as_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler ({cc}); skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-c"])
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg("-o")
        .arg(dir.path().join("client.o"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
