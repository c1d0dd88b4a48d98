use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ykd::model::checkpoint::save_checkpoint;
use ykd::model::{build_model_with_domain, expand_head, ArchConfig};
use ykd_ffi::*;

fn saved_model(dir: &Path) {
    let mut s = build_model_with_domain(&[1, 2, 3], &ArchConfig::default()).unwrap();
    s.backbone_frozen = true;
    s.clone_branch(0).unwrap();
    let h = expand_head(s.last_head(), &[4], 1).unwrap();
    s.heads[0].frozen = true;
    s.heads.push(h);
    save_checkpoint(&s, dir).unwrap();
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = ykd_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_query_infer_free() {
    let dir = tempfile::tempdir().unwrap();
    saved_model(dir.path());
    let path = cstr(dir.path());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(ykd_model_load(path.as_ptr(), false, &mut model), YkdStatus::Ok);
        assert!(ykd_last_error_message().is_null());
        let mut n = 0usize;
        assert_eq!(ykd_model_num_branches(model, &mut n), YkdStatus::Ok);
        assert_eq!(n, 2);
        assert_eq!(ykd_model_current_step(model, &mut n), YkdStatus::Ok);
        assert_eq!(n, 1);

        let mut ids = [0u32; 2];
        let mut written = 0usize;
        assert_eq!(ykd_model_class_ids(model, ids.as_mut_ptr(), 2, &mut written), YkdStatus::BufferTooSmall);
        assert_eq!(written, 4);
        let mut ids = [0u32; 4];
        assert_eq!(ykd_model_class_ids(model, ids.as_mut_ptr(), 4, &mut written), YkdStatus::Ok);
        assert_eq!(ids, [1, 2, 3, 4]);

        let pixels = vec![0.5f32; 3 * 32 * 32];
        let mut dets = ptr::null_mut();
        assert_eq!(ykd_infer(model, pixels.as_ptr(), 3, 32, 32, 0.0, &mut dets), YkdStatus::Ok);
        let mut len = 0usize;
        assert_eq!(ykd_detections_len(dets, &mut len), YkdStatus::Ok);
        for i in 0..len {
            let mut d = YkdDetection::default();
            assert_eq!(ykd_detection_get(dets, i, &mut d), YkdStatus::Ok);
            assert!((1..=4).contains(&d.class_id));
            assert_eq!((d.mask_width, d.mask_height), (32, 32));
            let mut mask = vec![0u8; 32 * 32];
            assert_eq!(ykd_detection_mask(dets, i, mask.as_mut_ptr(), mask.len()), YkdStatus::Ok);
            assert_eq!(mask.iter().filter(|&&v| v != 0).count(), d.mask_area);
        }
        let mut d = YkdDetection::default();
        assert_eq!(ykd_detection_get(dets, len, &mut d), YkdStatus::OutOfRange);
        ykd_detections_free(dets);

        assert_eq!(ykd_infer(model, pixels.as_ptr(), 1, 32, 32, 0.0, &mut dets), YkdStatus::Shape);
        assert!(last_error().contains("3 x H x W"));
        ykd_model_free(model);
    }
}

#[test]
fn averaging_endpoint_and_save() {
    let dir = tempfile::tempdir().unwrap();
    saved_model(dir.path());
    let path = cstr(dir.path());
    unsafe {
        let mut later = ptr::null_mut();
        let mut earlier = ptr::null_mut();
        assert_eq!(ykd_model_load(path.as_ptr(), false, &mut later), YkdStatus::Ok);
        assert_eq!(ykd_model_load(path.as_ptr(), false, &mut earlier), YkdStatus::Ok);
        // the earlier head of this checkpoint is head 0; use a fresh step-0 model
        let base_dir = tempfile::tempdir().unwrap();
        let base = build_model_with_domain(&[1, 2, 3], &ArchConfig::default()).unwrap();
        save_checkpoint(&base, base_dir.path()).unwrap();
        let base_path = cstr(base_dir.path());
        ykd_model_free(earlier);
        assert_eq!(ykd_model_load(base_path.as_ptr(), false, &mut earlier), YkdStatus::Ok);

        let mut avg = ptr::null_mut();
        assert_eq!(ykd_average_heads(earlier, later, 0.0, 1.0, &mut avg), YkdStatus::Ok);
        let out_dir = tempfile::tempdir().unwrap();
        let out_path = cstr(out_dir.path());
        assert_eq!(ykd_model_save(avg, out_path.as_ptr()), YkdStatus::Ok);
        let a = ykd::model::checkpoint::load_checkpoint(out_dir.path()).unwrap();
        let b = ykd::model::checkpoint::load_checkpoint(dir.path()).unwrap();
        assert_eq!(a.last_head().params, b.last_head().params);

        assert_eq!(ykd_average_heads(earlier, later, 2.0, 0.0, &mut avg), YkdStatus::InvalidInput);
        assert!(last_error().contains("[0, 1]"));
        ykd_model_free(avg);
        ykd_model_free(earlier);
        ykd_model_free(later);
    }
}

#[test]
fn error_codes() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(ykd_model_load(ptr::null(), false, &mut model), YkdStatus::NullPointer);
        let missing = CString::new("/definitely/not/here").unwrap();
        assert_eq!(ykd_model_load(missing.as_ptr(), true, &mut model), YkdStatus::Io);
        assert!(last_error().contains("manifest.json"));
        assert!(model.is_null());
        let mut n = 0usize;
        assert_eq!(ykd_model_num_branches(ptr::null(), &mut n), YkdStatus::NullPointer);
        ykd_model_free(ptr::null_mut());
        ykd_detections_free(ptr::null_mut());
        let v = CStr::from_ptr(ykd_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn cka_through_c_abi() {
    let x = [1.0, 2.0, 3.0, 1.0, 0.0, 5.0, 2.0, 2.0];
    let y: Vec<f64> = x.iter().map(|v| v * 3.0 + 1.0).collect();
    let mut out = 0.0;
    unsafe {
        assert_eq!(ykd_linear_cka(x.as_ptr(), y.as_ptr(), 4, 2, 2, &mut out), YkdStatus::Ok);
        assert!((out - 1.0).abs() < 1e-12);
        let flat = [1.0; 4];
        assert_eq!(ykd_linear_cka(flat.as_ptr(), y.as_ptr(), 2, 2, 2, &mut out), YkdStatus::InvalidInput);
    }
}

#[test]
fn generated_header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ykd.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "typedef struct YkdModel YkdModel",
        "typedef struct YkdDetections YkdDetections",
        "YKD_STATUS_OK = 0",
        "YKD_STATUS_PANIC",
        "ykd_model_load",
        "ykd_infer",
        "ykd_detection_mask",
        "ykd_average_heads",
        "ykd_linear_cka",
        "ykd_last_error_message",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"ykd.h\"\n\
         int probe(const char *path) {\n\
           YkdModel *m = NULL; size_t n = 0;\n\
           if (ykd_model_load(path, true, &m) != YKD_STATUS_OK) return -1;\n\
           YkdStatus s = ykd_model_num_branches(m, &n);\n\
           ykd_model_free(m);\n\
           return s == YKD_STATUS_OK ? (int)n : -1;\n\
         }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success(), "header does not compile as C99");
}
