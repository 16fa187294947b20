//! Exercises the exported functions through their C signatures.

use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use vc_intervene::annot::{self, Format};
use vc_intervene::fmat::{write_fmat, RegionFeatureSet, RegionKey};
use vc_intervene::head::{Checkpoint, HeadParams, TrainConfig};
use vc_intervene::stats;
use vc_intervene_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(vci_last_error_message()) }.to_string_lossy().into_owned()
}

const TSV: &str = "1\tA\n1\tB\n1\tC\n2\tA\n2\tC\n2\tD\n3\tB\n3\tC\n3\tD\n4\tA\n4\tB\n4\tC\n4\tD\n";

#[test]
fn null_pointers_are_reported() {
    let mut out: *mut VciDataset = ptr::null_mut();
    let st = unsafe { vci_dataset_load(ptr::null(), VciFormat::Tsv as u32, &mut out) };
    assert_eq!(st, VciStatus::NullPointer);
    assert!(out.is_null());
    assert!(last_error().contains("path"));
    let mut n = 0usize;
    assert_eq!(unsafe { vci_table_size(ptr::null(), &mut n) }, VciStatus::NullPointer);
    // Freeing null is a no-op.
    unsafe {
        vci_dataset_free(ptr::null_mut());
        vci_features_free(ptr::null_mut());
        vci_head_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(vci_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn tables_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.tsv");
    std::fs::write(&path, TSV).unwrap();
    let p = cstr(&path);

    let mut bad: *mut VciDataset = ptr::null_mut();
    assert_eq!(unsafe { vci_dataset_load(p.as_ptr(), 9, &mut bad) }, VciStatus::InvalidArgument);

    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { vci_dataset_load(p.as_ptr(), VciFormat::Tsv as u32, &mut ds) }, VciStatus::Ok);
    assert_eq!(last_error(), "");
    let (mut images, mut cats) = (0usize, 0usize);
    assert_eq!(unsafe { vci_dataset_shape(ds, &mut images, &mut cats) }, VciStatus::Ok);
    assert_eq!((images, cats), (4, 4));

    let mut counts = ptr::null_mut();
    assert_eq!(unsafe { vci_counts_from_dataset(ds, 3, &mut counts) }, VciStatus::Ok);
    let mut total = 0u64;
    assert_eq!(unsafe { vci_counts_total(counts, &mut total) }, VciStatus::Ok);

    let lib_ds = annot::read_annotations(&path, Format::Tsv).unwrap();
    let sets: Vec<_> = annot::presence_sets(&lib_ds, 3).into_iter().map(|(_, s)| s).collect();
    let lib = stats::count_triples(4, &sets).unwrap();
    assert_eq!(total, lib.total());
    let want = stats::intervention_smoothed(&lib, 0.5);

    let mut table = ptr::null_mut();
    assert_eq!(unsafe { vci_table_intervention(counts, 0.5, &mut table) }, VciStatus::Ok);
    for x in 0..4 {
        for y in 0..4 {
            let mut v = f64::NAN;
            assert_eq!(unsafe { vci_table_get(table, x, y, &mut v) }, VciStatus::Ok);
            assert_eq!(v.to_bits(), want.get(x, y).to_bits());
        }
    }
    let mut v = 0.0;
    assert_eq!(unsafe { vci_table_get(table, 4, 0, &mut v) }, VciStatus::OutOfRange);
    let mut neg = ptr::null_mut();
    assert_eq!(unsafe { vci_table_intervention(counts, -1.0, &mut neg) }, VciStatus::InvalidArgument);
    assert!(neg.is_null());

    let mut cond = ptr::null_mut();
    assert_eq!(unsafe { vci_table_conditional(counts, &mut cond) }, VciStatus::Ok);
    let lib_cond = stats::conditional(&lib);
    unsafe { vci_table_get(cond, 0, 1, &mut v) };
    assert_eq!(v, lib_cond.get(0, 1));

    unsafe {
        vci_table_free(table);
        vci_table_free(cond);
        vci_counts_free(counts);
        vci_dataset_free(ds);
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let p = CString::new("/nonexistent/x.fmat").unwrap();
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { vci_features_read(p.as_ptr(), &mut f) }, VciStatus::Io);
    assert!(!last_error().is_empty());
}

fn features(rows: usize, dim: usize, offset: f32) -> RegionFeatureSet {
    let data = (0..rows * dim).map(|i| i as f32 * 0.5 + offset).collect();
    let index = (0..rows).map(|r| RegionKey::new(r as u64 / 2, r as u32 % 2, (r % 3) as u32)).collect();
    RegionFeatureSet::new(dim, data, index).unwrap()
}

#[test]
fn features_round_trip_and_concat() {
    let dir = tempfile::tempdir().unwrap();
    let a_path = dir.path().join("a.fmat");
    let b_path = dir.path().join("b.fmat");
    let short_path = dir.path().join("short.fmat");
    write_fmat(&a_path, &features(6, 3, 0.0)).unwrap();
    write_fmat(&b_path, &features(6, 2, 100.0)).unwrap();
    write_fmat(&short_path, &features(4, 2, 0.0)).unwrap();

    let load = |p: &Path| {
        let mut f = ptr::null_mut();
        assert_eq!(unsafe { vci_features_read(cstr(p).as_ptr(), &mut f) }, VciStatus::Ok);
        f
    };
    let (a, b, short) = (load(&a_path), load(&b_path), load(&short_path));

    let mut joined = ptr::null_mut();
    assert_eq!(unsafe { vci_features_concat(a, b, &mut joined) }, VciStatus::Ok);
    let (mut rows, mut dim) = (0, 0);
    unsafe { vci_features_shape(joined, &mut rows, &mut dim) };
    assert_eq!((rows, dim), (6, 5));
    let mut buf = [0f32; 5];
    assert_eq!(unsafe { vci_features_row(joined, 1, buf.as_mut_ptr(), buf.len()) }, VciStatus::Ok);
    assert_eq!(buf, [1.5, 2.0, 2.5, 101.0, 101.5]);
    assert_eq!(unsafe { vci_features_row(joined, 1, buf.as_mut_ptr(), 2) }, VciStatus::InvalidArgument);
    assert_eq!(unsafe { vci_features_row(joined, 6, buf.as_mut_ptr(), 5) }, VciStatus::OutOfRange);

    let mut nope = ptr::null_mut();
    assert_eq!(unsafe { vci_features_concat(a, short, &mut nope) }, VciStatus::ShapeMismatch);
    assert!(nope.is_null());

    let out_path = dir.path().join("joined.fmat");
    assert_eq!(unsafe { vci_features_write(joined, cstr(&out_path).as_ptr()) }, VciStatus::Ok);
    let back = load(&out_path);
    let mut again = [0f32; 5];
    unsafe { vci_features_row(back, 1, again.as_mut_ptr(), 5) };
    assert_eq!(again, buf);

    unsafe {
        for f in [a, b, short, joined, back] {
            vci_features_free(f);
        }
    }
}

#[test]
fn head_extracts_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let params = HeadParams::init(3, 3, 4, 1);
    let ck = Checkpoint { params: params.clone(), step: 0, config: TrainConfig::default() };
    let ck_dir = dir.path().join("ck");
    ck.save(&ck_dir).unwrap();
    let f_path = dir.path().join("f.fmat");
    let feats = features(6, 3, 0.25);
    write_fmat(&f_path, &feats).unwrap();

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { vci_head_load(cstr(&ck_dir).as_ptr(), &mut h) }, VciStatus::Ok);
    let (mut n, mut d, mut sigma) = (0, 0, 0);
    unsafe { vci_head_shape(h, &mut n, &mut d, &mut sigma) };
    assert_eq!((n, d, sigma), (3, 3, 4));

    let mut f = ptr::null_mut();
    unsafe { vci_features_read(cstr(&f_path).as_ptr(), &mut f) };
    let mut vc = ptr::null_mut();
    assert_eq!(unsafe { vci_head_extract(h, f, 7, &mut vc) }, VciStatus::InvalidArgument);
    assert_eq!(unsafe { vci_head_extract(h, f, VciFeatureMode::Direct as u32, &mut vc) }, VciStatus::Ok);

    let loaded = Checkpoint::load(&ck_dir).unwrap().params;
    let want = vc_intervene::head::extract_features(&feats, &loaded, vc_intervene::head::FeatureMode::Direct).unwrap();
    let mut row = [0f32; 3];
    unsafe { vci_features_row(vc, 2, row.as_mut_ptr(), 3) };
    assert_eq!(&row, want.row_f32(2));

    unsafe {
        vci_features_free(vc);
        vci_features_free(f);
        vci_head_free(h);
    }
}
