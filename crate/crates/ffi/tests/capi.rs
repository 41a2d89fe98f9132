use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use tsl_core::data::Modality;
use tsl_core::data::{Predictions, SyntheticSpec};
use tsl_core::model::Localizer;
use tsl_core::pipeline::{feature_path, gen_data, load_fused_from, predict_video};
use tsl_core::train::TrainConfig;
use tsl_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    checkpoint: PathBuf,
    cfg: TrainConfig,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = SyntheticSpec {
        num_videos: 3,
        duration_sec: 32.0,
        ..SyntheticSpec::default()
    };
    gen_data(&spec, &root.join("data"), false).unwrap();
    let mut cfg = TrainConfig::desk(spec.d_visual + spec.d_audio, spec.num_classes);
    cfg.model.backbone.d_model = 16;
    cfg.model.backbone.num_blocks = 3;
    cfg.model.backbone.stride_schedule = vec![1, 2, 2];
    let config = root.join("model.toml");
    std::fs::write(&config, cfg.to_toml()).unwrap();
    let checkpoint = root.join("model.ckpt");
    Localizer::new(cfg.model.clone(), 3)
        .unwrap()
        .params()
        .save(&checkpoint)
        .unwrap();
    Fixture {
        _dir: dir,
        root,
        config,
        checkpoint,
        cfg,
    }
}

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = tsl_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

#[test]
fn predict_matches_core() {
    let fx = fixture();
    let features = fx.root.join("data/features");
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            tsl_model_load(
                c(&fx.config).as_ptr(),
                c(&fx.checkpoint).as_ptr(),
                &mut model
            ),
            TslStatus::Ok
        );
        assert_eq!(tsl_model_input_dim(model), 40);
        assert_eq!(tsl_model_num_classes(model), 5);

        let mut feats = ptr::null_mut();
        let v = c(&feature_path(&features, "vid_0001", Modality::Visual));
        let a = c(&feature_path(&features, "vid_0001", Modality::Audio));
        assert_eq!(
            tsl_features_load(v.as_ptr(), a.as_ptr(), &mut feats),
            TslStatus::Ok
        );
        assert_eq!((tsl_features_len(feats), tsl_features_dim(feats)), (32, 40));

        let mut json = ptr::null_mut();
        assert_eq!(
            tsl_model_predict_json(model, feats, &mut json),
            TslStatus::Ok
        );
        let got: Predictions =
            serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        tsl_string_free(json);

        let core_model = Localizer::from_params(
            fx.cfg.model.clone(),
            tsl_core::model::ParamStore::load(&fx.checkpoint).unwrap(),
        )
        .unwrap();
        let fused = load_fused_from(&features, "vid_0001").unwrap();
        let want = Predictions::from_intervals(
            &predict_video(&core_model, &fused, &fx.cfg.decode).unwrap(),
        );
        assert_eq!(got, want);

        tsl_features_free(feats);
        tsl_model_free(model);
    }
}

#[test]
fn features_from_raw_data() {
    let data = [0.5f32; 6 * 4];
    let id = CString::new("raw").unwrap();
    unsafe {
        let mut f = ptr::null_mut();
        assert_eq!(
            tsl_features_from_data(id.as_ptr(), 1.0, 6, 4, data.as_ptr(), &mut f),
            TslStatus::Ok
        );
        assert_eq!(tsl_features_len(f), 6);
        tsl_features_free(f);
        assert_eq!(
            tsl_features_from_data(id.as_ptr(), 1.0, 6, 4, ptr::null(), &mut f),
            TslStatus::NullPointer
        );
        assert!(f.is_null());
        let bad = [f32::NAN; 4];
        assert_eq!(
            tsl_features_from_data(id.as_ptr(), 1.0, 1, 4, bad.as_ptr(), &mut f),
            TslStatus::Validation
        );
    }
}

#[test]
fn predict_dir_and_evaluate() {
    let fx = fixture();
    let out = fx.root.join("preds.json");
    let ann = fx.root.join("data/annotations.json");
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            tsl_model_new(c(&fx.config).as_ptr(), 9, &mut model),
            TslStatus::Ok
        );
        assert_eq!(
            tsl_predict_dir(
                model,
                c(&fx.root.join("data/features")).as_ptr(),
                c(&out).as_ptr()
            ),
            TslStatus::Ok
        );
        tsl_model_free(model);

        let mut report = ptr::null_mut();
        assert_eq!(
            tsl_evaluate_files(c(&out).as_ptr(), c(&ann).as_ptr(), &mut report),
            TslStatus::Ok
        );
        assert_eq!(tsl_report_num_thresholds(report), 5);
        let (mut tau, mut map) = (0.0, 0.0);
        assert_eq!(
            tsl_report_map_at(report, 0, &mut tau, &mut map),
            TslStatus::Ok
        );
        assert_eq!(tau, 0.1);
        assert!((0.0..=1.0).contains(&map));
        let avg = tsl_report_average_map(report);
        assert!((0.0..=1.0).contains(&avg));
        assert_eq!(
            tsl_report_map_at(report, 5, &mut tau, &mut map),
            TslStatus::OutOfRange
        );
        assert!(last_error().contains("out of range"));

        let label = CString::new("ffi").unwrap();
        let mut table = ptr::null_mut();
        assert_eq!(
            tsl_report_table(report, label.as_ptr(), &mut table),
            TslStatus::Ok
        );
        assert!(CStr::from_ptr(table).to_str().unwrap().contains("@0.5"));
        tsl_string_free(table);
        let mut json = ptr::null_mut();
        assert_eq!(tsl_report_json(report, &mut json), TslStatus::Ok);
        let parsed: serde_json::Value =
            serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(parsed["average_map"].as_f64().unwrap(), avg);
        tsl_string_free(json);
        tsl_report_free(report);
    }
}

#[test]
fn error_codes() {
    let fx = fixture();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            tsl_model_load(ptr::null(), ptr::null(), &mut model),
            TslStatus::NullPointer
        );
        assert!(model.is_null());
        assert_eq!(
            tsl_model_load(
                c(&fx.config).as_ptr(),
                c(&fx.checkpoint).as_ptr(),
                ptr::null_mut()
            ),
            TslStatus::NullPointer
        );

        let missing = c(&fx.root.join("missing.ckpt"));
        assert_eq!(
            tsl_model_load(c(&fx.config).as_ptr(), missing.as_ptr(), &mut model),
            TslStatus::Io
        );
        assert!(last_error().starts_with("error[E_IO]"));

        let mut other = fx.cfg.clone();
        other.model.backbone.d_model = 8;
        let other_path = fx.root.join("other.toml");
        std::fs::write(&other_path, other.to_toml()).unwrap();
        assert_eq!(
            tsl_model_load(
                c(&other_path).as_ptr(),
                c(&fx.checkpoint).as_ptr(),
                &mut model
            ),
            TslStatus::Validation
        );
        assert!(
            last_error().contains("embed.conv0.weight"),
            "{}",
            last_error()
        );

        let bad_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(
            tsl_model_load(
                bad_utf8.as_ptr().cast(),
                c(&fx.checkpoint).as_ptr(),
                &mut model
            ),
            TslStatus::InvalidUtf8
        );

        let mut json = ptr::null_mut();
        assert_eq!(
            tsl_model_predict_json(ptr::null(), ptr::null(), &mut json),
            TslStatus::NullPointer
        );
        assert!(json.is_null());

        tsl_model_free(ptr::null_mut());
        tsl_features_free(ptr::null_mut());
        tsl_report_free(ptr::null_mut());
        tsl_string_free(ptr::null_mut());
        assert_eq!(tsl_model_input_dim(ptr::null()), 0);
        assert!(tsl_report_average_map(ptr::null()).is_nan());
    }
    let version = unsafe { CStr::from_ptr(tsl_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

fn target_dir() -> PathBuf {
    // the test binary lives in <target>/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/tsl.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "tsl_model_load",
        "tsl_model_new",
        "tsl_model_save",
        "tsl_model_free",
        "tsl_features_load",
        "tsl_features_from_data",
        "tsl_features_free",
        "tsl_model_predict_json",
        "tsl_predict_dir",
        "tsl_evaluate_files",
        "tsl_report_map_at",
        "tsl_report_free",
        "tsl_last_error_message",
        "tsl_string_free",
        "TSL_STATUS_VALIDATION = 2",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }

    let lib = target_dir().join("libtsl_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping C link check: no C compiler or static library");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "tsl.h"
int main(void) {
    TslModel *m = NULL;
    TslStatus s = tsl_model_load("/nonexistent.toml", "/nonexistent.ckpt", &m);
    if (s != TSL_STATUS_IO || m != NULL) return 1;
    if (strncmp(tsl_last_error_message(), "error[E_IO]", 11) != 0) return 2;
    float data[8] = {0};
    TslFeatures *f = NULL;
    if (tsl_features_from_data("c", 1.0, 2, 4, data, &f) != TSL_STATUS_OK) return 3;
    if (tsl_features_len(f) != 2) return 4;
    tsl_features_free(f);
    printf("%s\n", tsl_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "C smoke exited with {:?}",
        out.status.code()
    );
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        env!("CARGO_PKG_VERSION")
    );
}
