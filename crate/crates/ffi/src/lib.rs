//! C interface to `vc-intervene`.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `vci_*_load` / `vci_*_new`-style call and released with the matching
//! `vci_*_free`. Functions return a [`VciStatus`]; on failure
//! [`vci_last_error_message`] describes the error for the calling thread.
//! Results are written through out-pointers, which are left untouched on
//! failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use vc_intervene::annot::{self, AnnotationDataset, Format};
use vc_intervene::fmat::{self, RegionFeatureSet};
use vc_intervene::head::{self, Checkpoint, FeatureMode, HeadParams};
use vc_intervene::stats::{self, CoocCounts, ProbTable};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VciStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    ShapeMismatch = 5,
    OutOfRange = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VciFormat {
    Coco = 0,
    Tsv = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VciFeatureMode {
    Direct = 0,
    Passthrough = 1,
    Logits = 2,
}

pub struct VciDataset(AnnotationDataset);
pub struct VciCounts(CoocCounts);
pub struct VciTable(ProbTable);
pub struct VciFeatures(RegionFeatureSet);
pub struct VciHead(HeadParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("nul bytes removed"));
}

struct Fail(VciStatus, String);

impl Fail {
    fn null(what: &str) -> Self {
        Fail(VciStatus::NullPointer, format!("{what} is null"))
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VciStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VciStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            VciStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(VciStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail::null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_val<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::null("out"));
    }
    *out = value;
    Ok(())
}

fn fmat_fail(e: fmat::FmatError) -> Fail {
    let code = match e {
        fmat::FmatError::Io { .. } => VciStatus::Io,
        fmat::FmatError::IndexMismatch(_) | fmat::FmatError::DimensionMismatch(_) => VciStatus::ShapeMismatch,
        _ => VciStatus::Parse,
    };
    Fail(code, e.to_string())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next `vci_*` call on the same thread.
#[no_mangle]
pub extern "C" fn vci_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vci_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `format` is a `VciFormat` value.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vci_dataset_load(path: *const c_char, format: u32, out: *mut *mut VciDataset) -> VciStatus {
    guard(|| {
        let path = path_arg(path)?;
        let f = match format {
            x if x == VciFormat::Coco as u32 => Format::Coco,
            x if x == VciFormat::Tsv as u32 => Format::Tsv,
            other => return Err(Fail(VciStatus::InvalidArgument, format!("unknown format {other}"))),
        };
        let ds = annot::read_annotations(&path, f).map_err(|e| {
            let code = if matches!(e, annot::AnnotError::Io { .. }) { VciStatus::Io } else { VciStatus::Parse };
            Fail(code, e.to_string())
        })?;
        put(out, VciDataset(ds))
    })
}

/// # Safety
/// `ds` must come from `vci_dataset_load` or be null.
#[no_mangle]
pub unsafe extern "C" fn vci_dataset_free(ds: *mut VciDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_dataset_shape(ds: *const VciDataset, images: *mut usize, categories: *mut usize) -> VciStatus {
    guard(|| {
        let d = &obj(ds, "dataset")?.0;
        put_val(images, d.images.len())?;
        put_val(categories, d.n_categories())
    })
}

/// Triple counts over images with at least `min_distinct` (≥ 3) categories.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_counts_from_dataset(
    ds: *const VciDataset,
    min_distinct: usize,
    out: *mut *mut VciCounts,
) -> VciStatus {
    guard(|| {
        let d = &obj(ds, "dataset")?.0;
        let sets: Vec<_> = annot::presence_sets(d, min_distinct).into_iter().map(|(_, s)| s).collect();
        let counts = stats::count_triples(d.n_categories(), &sets)
            .map_err(|e| Fail(VciStatus::InvalidArgument, e.to_string()))?;
        put(out, VciCounts(counts))
    })
}

/// # Safety
/// `c` must come from `vci_counts_from_dataset` or be null.
#[no_mangle]
pub unsafe extern "C" fn vci_counts_free(c: *mut VciCounts) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_counts_total(c: *const VciCounts, out: *mut u64) -> VciStatus {
    guard(|| put_val(out, obj(c, "counts")?.0.total()))
}

/// `P(y|x)` table.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_table_conditional(c: *const VciCounts, out: *mut *mut VciTable) -> VciStatus {
    guard(|| put(out, VciTable(stats::conditional(&obj(c, "counts")?.0))))
}

/// `P(y|do(x))` table with Laplace smoothing `alpha` (0 for none).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_table_intervention(c: *const VciCounts, alpha: f64, out: *mut *mut VciTable) -> VciStatus {
    guard(|| {
        if !(alpha >= 0.0) {
            return Err(Fail(VciStatus::InvalidArgument, format!("alpha must be >= 0, got {alpha}")));
        }
        put(out, VciTable(stats::intervention_smoothed(&obj(c, "counts")?.0, alpha)))
    })
}

/// # Safety
/// `t` must come from a `vci_table_*` constructor or be null.
#[no_mangle]
pub unsafe extern "C" fn vci_table_free(t: *mut VciTable) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_table_size(t: *const VciTable, out: *mut usize) -> VciStatus {
    guard(|| put_val(out, obj(t, "table")?.0.n))
}

/// Entry `(x, y)`. Rows with no support fail with `OutOfRange`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_table_get(t: *const VciTable, x: usize, y: usize, out: *mut f64) -> VciStatus {
    guard(|| {
        let t = &obj(t, "table")?.0;
        if x >= t.n || y >= t.n {
            return Err(Fail(VciStatus::OutOfRange, format!("({x}, {y}) outside a {} table", t.n)));
        }
        if !t.support[x] {
            return Err(Fail(VciStatus::OutOfRange, format!("row {x} has no support")));
        }
        put_val(out, t.get(x, y))
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_features_read(path: *const c_char, out: *mut *mut VciFeatures) -> VciStatus {
    guard(|| {
        let path = path_arg(path)?;
        put(out, VciFeatures(fmat::read_fmat(&path).map_err(fmat_fail)?))
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_features_write(f: *const VciFeatures, path: *const c_char) -> VciStatus {
    guard(|| {
        let f = &obj(f, "features")?.0;
        fmat::write_fmat(&path_arg(path)?, f).map_err(fmat_fail)
    })
}

/// # Safety
/// `f` must come from a `vci_features_*` constructor or be null.
#[no_mangle]
pub unsafe extern "C" fn vci_features_free(f: *mut VciFeatures) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_features_shape(f: *const VciFeatures, rows: *mut usize, dim: *mut usize) -> VciStatus {
    guard(|| {
        let f = &obj(f, "features")?.0;
        put_val(rows, f.len())?;
        put_val(dim, f.dim())
    })
}

/// Copies row `row` into `buf`, which must hold `len >= dim` floats.
///
/// # Safety
/// `buf` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn vci_features_row(f: *const VciFeatures, row: usize, buf: *mut f32, len: usize) -> VciStatus {
    guard(|| {
        let f = &obj(f, "features")?.0;
        if row >= f.len() {
            return Err(Fail(VciStatus::OutOfRange, format!("row {row} of {}", f.len())));
        }
        if buf.is_null() {
            return Err(Fail::null("buf"));
        }
        if len < f.dim() {
            return Err(Fail(VciStatus::InvalidArgument, format!("buffer of {len} floats, need {}", f.dim())));
        }
        ptr::copy_nonoverlapping(f.row_f32(row).as_ptr(), buf, f.dim());
        Ok(())
    })
}

/// Row-wise concatenation; the two index tables must match.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_features_concat(
    base: *const VciFeatures,
    vc: *const VciFeatures,
    out: *mut *mut VciFeatures,
) -> VciStatus {
    guard(|| {
        let joined = fmat::concat_features(&obj(base, "base")?.0, &obj(vc, "vc")?.0).map_err(fmat_fail)?;
        put(out, VciFeatures(joined))
    })
}

/// Loads a head checkpoint directory.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_head_load(dir: *const c_char, out: *mut *mut VciHead) -> VciStatus {
    guard(|| {
        let ck = Checkpoint::load(&path_arg(dir)?).map_err(|e| Fail(VciStatus::Parse, e.to_string()))?;
        put(out, VciHead(ck.params))
    })
}

/// # Safety
/// `h` must come from `vci_head_load` or be null.
#[no_mangle]
pub unsafe extern "C" fn vci_head_free(h: *mut VciHead) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_head_shape(h: *const VciHead, n: *mut usize, d: *mut usize, sigma: *mut usize) -> VciStatus {
    guard(|| {
        let p = &obj(h, "head")?.0;
        put_val(n, p.n())?;
        put_val(d, p.dim())?;
        put_val(sigma, p.sigma())
    })
}

/// Per-region VC features; `mode` is a `VciFeatureMode` value.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vci_head_extract(
    h: *const VciHead,
    f: *const VciFeatures,
    mode: u32,
    out: *mut *mut VciFeatures,
) -> VciStatus {
    guard(|| {
        let mode = match mode {
            x if x == VciFeatureMode::Direct as u32 => FeatureMode::Direct,
            x if x == VciFeatureMode::Passthrough as u32 => FeatureMode::Passthrough,
            x if x == VciFeatureMode::Logits as u32 => FeatureMode::Logits,
            other => return Err(Fail(VciStatus::InvalidArgument, format!("unknown feature mode {other}"))),
        };
        let vc = head::extract_features(&obj(f, "features")?.0, &obj(h, "head")?.0, mode)
            .map_err(|e| Fail(VciStatus::ShapeMismatch, e.to_string()))?;
        put(out, VciFeatures(vc))
    })
}
