//! Compiles and runs a small C program against the committed header and the
//! built shared library, exercising the whole surface from the C side.

use std::path::PathBuf;
use std::process::Command;

const C_SMOKE: &str = r#"
#include "pgn.h"
#include <stdio.h>
#include <stdlib.h>

int main(void) {
    if (!pgn_version()) return 10;

    PgnTeacher *teacher = NULL;
    if (pgn_teacher_create_tiny(7, &teacher) != PGN_STATUS_OK) return 11;

    enum { B = 1, H = 16, W = 16, N = B * 3 * H * W };
    static float yhat[N], y[N], grad[N];
    for (int i = 0; i < N; i++) {
        yhat[i] = (float)(i % 17) / 17.0f - 0.5f;
        y[i] = (float)(i % 13) / 13.0f - 0.5f;
    }
    float loss = 0.0f;
    if (pgn_teacher_loss(teacher, yhat, y, B, H, W, &loss) != PGN_STATUS_OK) return 12;
    if (!(loss > 0.0f)) return 13;
    if (pgn_teacher_grad(teacher, yhat, y, B, H, W, grad) != PGN_STATUS_OK) return 14;

    /* identical inputs: zero loss */
    if (pgn_teacher_loss(teacher, y, y, B, H, W, &loss) != PGN_STATUS_OK) return 15;
    if (loss != 0.0f) return 16;

    /* invalid size must fail with a message */
    if (pgn_teacher_loss(teacher, yhat, y, B, 10, 10, &loss) == PGN_STATUS_OK) return 17;
    if (!pgn_last_error_message()) return 18;

    pgn_teacher_destroy(teacher);

    PgnModelHandle *model = NULL;
    if (pgn_model_load("/nonexistent.ckpt", &model) != PGN_STATUS_FAILED) return 19;

    printf("c smoke ok\n");
    return 0;
}
"#;

#[test]
fn c_program_links_against_the_header_and_library() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let include = manifest.join("include");
    // a plain build puts the cdylib in target/debug, a test build in deps/
    let target = ["../../target/debug", "../../target/debug/deps"]
        .iter()
        .map(|p| manifest.join(p))
        .find(|p| p.join("libpgn_ffi.so").exists())
        .expect("libpgn_ffi.so not built");

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_SMOKE).unwrap();
    let exe = dir.path().join("smoke");

    let cc = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg("-L")
        .arg(&target)
        .arg("-lpgn_ffi")
        .arg(format!("-Wl,-rpath,{}", target.display()))
        .arg("-o")
        .arg(&exe)
        .output()
        .expect("cc available");
    assert!(
        cc.status.success(),
        "compile failed: {}",
        String::from_utf8_lossy(&cc.stderr)
    );

    let run = Command::new(&exe).output().unwrap();
    assert!(
        run.status.success(),
        "smoke exited {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stdout)
    );
}
