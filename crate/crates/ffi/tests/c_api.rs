use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use softdrop_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sd_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn entropy_and_errors() {
    let mut out = 0.0;
    let p = [0.8, 0.2];
    assert_eq!(unsafe { sd_entropy(p.as_ptr(), 2, &mut out) }, SdStatus::Ok);
    assert!((out - 0.721928).abs() < 1e-6);

    let bad = [1.5, -0.5];
    assert_eq!(unsafe { sd_entropy(bad.as_ptr(), 2, &mut out) }, SdStatus::Domain);
    assert!(last_error().contains("negative"));

    assert_eq!(unsafe { sd_entropy(ptr::null(), 2, &mut out) }, SdStatus::NullPointer);
    assert_eq!(
        unsafe { sd_entropy(p.as_ptr(), 2, ptr::null_mut()) },
        SdStatus::NullPointer
    );
}

#[test]
fn mutual_information_worked_example() {
    let passes = [0.8, 0.2, 0.6, 0.4];
    let mut mi = 0.0;
    assert_eq!(
        unsafe { sd_mutual_information(passes.as_ptr(), 2, 2, &mut mi) },
        SdStatus::Ok
    );
    assert!((mi - 0.0349).abs() < 5e-5);
    assert_eq!(
        unsafe { sd_mutual_information(passes.as_ptr(), 0, 2, &mut mi) },
        SdStatus::Domain
    );
}

#[test]
fn dice_and_idx() {
    let a = [1u8, 1, 1, 1, 0, 0, 0, 0];
    let b = [0u8, 0, 1, 1, 1, 1, 0, 0];
    let mut d = 0.0;
    assert_eq!(
        unsafe { sd_dice_score(a.as_ptr(), b.as_ptr(), 8, &mut d) },
        SdStatus::Ok
    );
    assert_eq!(d, 0.5);

    let idx = [0u8, 0, 8, 1, 0, 0, 0, 3, 7, 2, 9];
    let mut dims = [0usize; 4];
    let mut rank = 0;
    assert_eq!(
        unsafe { sd_idx_dims(idx.as_ptr(), idx.len(), dims.as_mut_ptr(), 4, &mut rank) },
        SdStatus::Ok
    );
    assert_eq!((rank, dims[0]), (1, 3));
    assert_eq!(
        unsafe { sd_idx_dims(idx.as_ptr(), idx.len() - 1, dims.as_mut_ptr(), 4, &mut rank) },
        SdStatus::Data
    );
    assert!(last_error().contains("expected 11"));
}

#[test]
fn model_handle_lifecycle() {
    let method = CString::new("sdc_weak").unwrap();
    let mut model: *mut SdModel = ptr::null_mut();
    assert_eq!(
        unsafe { sd_model_new_mnist(method.as_ptr(), 0.5, 7, &mut model) },
        SdStatus::Ok
    );
    assert!(!model.is_null());
    assert_eq!(unsafe { sd_model_input_len(model) }, 784);
    assert_eq!(unsafe { sd_model_num_classes(model) }, 10);

    let x = vec![0.5; 2 * 784];
    let mut mean = vec![0.0; 20];
    let mut mi = vec![0.0; 2];
    let mut vote = vec![0usize; 2];
    let status = unsafe {
        sd_mc_predict(
            model,
            x.as_ptr(),
            2,
            5,
            3,
            mean.as_mut_ptr(),
            mi.as_mut_ptr(),
            vote.as_mut_ptr(),
        )
    };
    assert_eq!(status, SdStatus::Ok);
    assert!((mean[..10].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(mean[..10], mean[10..]);
    assert!(mi[0] >= 0.0 && vote[0] < 10);

    let status = unsafe {
        sd_mc_predict(
            model,
            x.as_ptr(),
            2,
            0,
            3,
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(status, SdStatus::InvalidArgument);
    unsafe { sd_model_free(model) };
    unsafe { sd_model_free(ptr::null_mut()) };

    let unknown = CString::new("nope").unwrap();
    assert_eq!(
        unsafe { sd_model_new_mnist(unknown.as_ptr(), 0.5, 7, &mut model) },
        SdStatus::Config
    );
    let missing = CString::new("/nonexistent/checkpoint.sdcn").unwrap();
    assert_eq!(unsafe { sd_model_load(missing.as_ptr(), &mut model) }, SdStatus::Io);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(sd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/softdrop.h");
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
