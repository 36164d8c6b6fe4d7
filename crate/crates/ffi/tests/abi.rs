use std::ffi::{c_char, CString};
use std::ptr;
use turbstoch::diffcore::Tensor3;
use turbstoch::unet::{build_model, save_checkpoint, Mode};
use turbstoch_ffi::*;

fn last_error() -> String {
    let need = unsafe { ts_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0u8; need];
    unsafe { ts_last_error(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    String::from_utf8(buf[..need - 1].to_vec()).unwrap()
}

fn checkpoint(dir: &std::path::Path) -> CString {
    let mut m = build_model(4);
    let x = Tensor3::new(2, 1, 256, (0..512).map(|i| (i as f64 * 0.61).cos()).collect()).unwrap();
    m.run(&x, Mode::Train).unwrap();
    let path = dir.join("m.nntb");
    save_checkpoint(&path, &m, None, None).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn model_lifecycle_and_generation() {
    let dir = tempfile::tempdir().unwrap();
    let path = checkpoint(dir.path());
    let mut model: *mut TsModel = ptr::null_mut();
    assert_eq!(unsafe { ts_model_load(path.as_ptr(), &mut model) }, TsStatus::Ok);
    assert!(!model.is_null());

    let mut count = 0usize;
    assert_eq!(unsafe { ts_model_param_count(model, &mut count) }, TsStatus::Ok);
    assert_eq!(count, 1_241_267);

    let mut field = vec![0.0; 512];
    assert_eq!(unsafe { ts_generate_field(model, 3, 512, field.as_mut_ptr()) }, TsStatus::Ok);
    let mut ens: *mut TsEnsemble = ptr::null_mut();
    assert_eq!(unsafe { ts_generate_ensemble(model, 3, 2, 512, &mut ens) }, TsStatus::Ok);
    let (mut r, mut n) = (0usize, 0usize);
    assert_eq!(unsafe { ts_fields_shape(ens, &mut r, &mut n) }, TsStatus::Ok);
    assert_eq!((r, n), (2, 512));
    let mut second = vec![0.0; 512];
    assert_eq!(unsafe { ts_fields_copy(ens, 1, second.as_mut_ptr()) }, TsStatus::Ok);
    let expected = turbstoch::fieldgen::generate_field(
        &turbstoch::unet::load_checkpoint(std::path::Path::new(path.to_str().unwrap())).unwrap().model,
        turbstoch::fieldgen::derive_seed(3, 1),
        512,
    )
    .unwrap();
    assert_eq!(second, expected);
    assert_eq!(unsafe { ts_fields_copy(ens, 2, second.as_mut_ptr()) }, TsStatus::InvalidArgument);

    unsafe {
        ts_fields_free(ens);
        ts_model_free(model);
        ts_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut model: *mut TsModel = ptr::null_mut();
    assert_eq!(unsafe { ts_model_load(ptr::null(), &mut model) }, TsStatus::NullPointer);
    assert!(last_error().contains("path"));

    let missing = CString::new("/nonexistent/m.nntb").unwrap();
    assert_eq!(unsafe { ts_model_load(missing.as_ptr(), &mut model) }, TsStatus::Io);
    assert!(model.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.nntb");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ts_model_load(junk.as_ptr(), &mut model) }, TsStatus::Format);
    assert!(!last_error().is_empty());

    let field = [0.0, 1.0, 3.0];
    let mut v = 0.0;
    assert_eq!(unsafe { ts_structure_function(field.as_ptr(), 3, 3, 2, &mut v) }, TsStatus::Shape);
    assert_eq!(unsafe { ts_structure_function(field.as_ptr(), 3, 1, 2, &mut v) }, TsStatus::Ok);
    assert_eq!(v, 2.5);
    assert!(last_error().is_empty());
}

#[test]
fn statistics_match_the_library() {
    let field: Vec<f64> = (0..400).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
    let lags = [1usize, 5, 20];
    let (mut a, mut b, mut c) = ([0.0; 3], [0.0; 3], [0.0; 3]);
    let status = unsafe {
        ts_field_statistics(
            field.as_ptr(),
            field.len(),
            lags.as_ptr(),
            3,
            a.as_mut_ptr(),
            b.as_mut_ptr(),
            c.as_mut_ptr(),
        )
    };
    assert_eq!(status, TsStatus::Ok);
    let scales = turbstoch::mstats::ScaleSet::from_lags(&lags).unwrap();
    let f = [&field[..]];
    assert_eq!(a.to_vec(), turbstoch::mstats::log_s2_curve(&f, &scales).unwrap().values);
    assert_eq!(c.to_vec(), turbstoch::mstats::flatness_curve(&f, &scales).unwrap().values);

    let s = [1.0, 10.0, 100.0];
    assert_eq!(
        unsafe { ts_reference_curves(s.as_ptr(), 3, a.as_mut_ptr(), b.as_mut_ptr(), c.as_mut_ptr()) },
        TsStatus::Ok
    );
    assert!(a[0] < a[1] && a[1] < a[2]);
    assert!(b.iter().all(|&x| x < 0.0));
    let bad = [10.0, 1.0];
    assert_eq!(
        unsafe { ts_reference_curves(bad.as_ptr(), 2, a.as_mut_ptr(), b.as_mut_ptr(), c.as_mut_ptr()) },
        TsStatus::InvalidArgument
    );
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { std::ffi::CStr::from_ptr(ts_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
