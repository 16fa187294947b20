//! Compiles and runs a small C program against the generated header and
//! the static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "vc_intervene.h"

int main(int argc, char **argv) {
    VciDataset *ds = NULL;
    if (vci_dataset_load(NULL, VCI_FORMAT_TSV, &ds) != VCI_STATUS_NULL_POINTER) return 10;
    if (strlen(vci_last_error_message()) == 0) return 11;
    if (vci_dataset_load(argv[1], VCI_FORMAT_TSV, &ds) != VCI_STATUS_OK) return 12;
    VciCounts *c = NULL;
    if (vci_counts_from_dataset(ds, 3, &c) != VCI_STATUS_OK) return 13;
    VciTable *t = NULL;
    if (vci_table_conditional(c, &t) != VCI_STATUS_OK) return 14;
    double p = -1.0;
    if (vci_table_get(t, 0, 1, &p) != VCI_STATUS_OK) return 15;
    printf("%.17g\n", p);
    vci_table_free(t);
    vci_counts_free(c);
    vci_dataset_free(ds);
    return argc == 2 ? 0 : 16;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("vc_intervene.h").exists(), "header not generated");
    // target/<profile>/deps/<this test> → target/<profile>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libvc_intervene_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("C compiler available");
    assert!(status.success(), "C build failed");

    let tsv = dir.path().join("a.tsv");
    std::fs::write(&tsv, "1\tA\n1\tB\n1\tC\n2\tA\n2\tC\n2\tD\n").unwrap();
    let out = Command::new(&bin).arg(&tsv).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    // A,B,C and A,C,D: row A has 4 ordered (y, z) events, one with y = B.
    let p: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(p == 0.25, "{p}");
}
