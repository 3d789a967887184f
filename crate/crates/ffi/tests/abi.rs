use std::ffi::{CStr, CString};
use std::ptr;
use std::sync::Arc;

use eve_core::backbone::{BackboneConfig, Model};
use eve_core::data::EmbeddingTable;
use eve_core::objective::{RegulatorConfig, RegulatorState};
use eve_core::retention::{save_checkpoint, Checkpoint, EpochRecord};
use eve_ffi::*;

fn last_error() -> String {
    let p = eve_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn thresholds(g: f64, o: f64, r: f64) -> EveThresholds {
    EveThresholds {
        uq_green: g,
        uq_orange: o,
        uq_red: r,
    }
}

#[test]
fn controller_routes_half_open_bands() {
    let mut ctl = ptr::null_mut();
    assert_eq!(unsafe { eve_controller_new(thresholds(0.5, 0.75, 0.9), &mut ctl) }, EveStatus::Ok);
    let mut action = EveAction::Answer;
    for (u, want) in [
        (0.0, EveAction::Answer),
        (0.5, EveAction::DeliberateMore),
        (0.75, EveAction::RetrieveOrResample),
        (0.9, EveAction::AbstainOrEscalate),
        (1.0, EveAction::AbstainOrEscalate),
    ] {
        assert_eq!(unsafe { eve_controller_route(ctl, u, &mut action) }, EveStatus::Ok);
        assert_eq!(action, want, "u = {u}");
    }
    assert_eq!(unsafe { eve_controller_route(ctl, 1.5, &mut action) }, EveStatus::InvalidArgument);
    assert!(last_error().contains("outside"));
    unsafe { eve_controller_free(ctl) };
}

#[test]
fn score_matches_known_values() {
    let mut ctl = ptr::null_mut();
    assert_eq!(unsafe { eve_controller_new(thresholds(0.5, 0.75, 0.9), &mut ctl) }, EveStatus::Ok);
    let mut s = -1.0;
    let zero = EveReadout {
        confidence: 1.0,
        ..Default::default()
    };
    assert_eq!(unsafe { eve_controller_score(ctl, &zero, &mut s) }, EveStatus::Ok);
    assert_eq!(s, 0.0);
    let half = EveReadout {
        predictive_entropy: 1.75,
        conditional_entropy: 1.5,
        mutual_information: 0.25,
        flip_rate: 0.175,
        confidence: 0.9,
        ..Default::default()
    };
    assert_eq!(unsafe { eve_controller_score(ctl, &half, &mut s) }, EveStatus::Ok);
    assert!((s - 0.5).abs() < 1e-12);
    unsafe { eve_controller_free(ctl) };
}

#[test]
fn calibrate_basic_on_uniform_grid() {
    let scores: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
    let mut t = EveThresholds::default();
    let st = unsafe { eve_calibrate_basic(scores.as_ptr(), scores.len(), 0.5, 0.75, 0.9, &mut t) };
    assert_eq!(st, EveStatus::Ok);
    assert_eq!((t.uq_green, t.uq_orange, t.uq_red), (0.5, 0.75, 0.9));
    assert!(eve_last_error_message().is_null());
    let st = unsafe { eve_calibrate_basic(ptr::null(), 0, 0.5, 0.75, 0.9, &mut t) };
    assert_eq!(st, EveStatus::InvalidArgument);
}

#[test]
fn null_and_bad_arguments_are_reported() {
    let mut ctl = ptr::null_mut();
    assert_eq!(unsafe { eve_controller_new(thresholds(0.9, 0.5, 0.2), &mut ctl) }, EveStatus::InvalidArgument);
    assert!(ctl.is_null());
    let mut t = EveThresholds::default();
    assert_eq!(unsafe { eve_controller_thresholds(ptr::null(), &mut t) }, EveStatus::NullPointer);
    assert!(last_error().contains("controller"));
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { eve_model_load(ptr::null(), ptr::null(), &mut model) }, EveStatus::NullPointer);
    let missing = CString::new("/nonexistent/x.ckpt").unwrap();
    assert_eq!(unsafe { eve_model_load(missing.as_ptr(), missing.as_ptr(), &mut model) }, EveStatus::Format);
    unsafe {
        eve_model_free(ptr::null_mut());
        eve_controller_free(ptr::null_mut());
    }
}

#[test]
fn model_predicts_through_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = BackboneConfig {
        vocab_size: 12,
        context_len: 4,
        embed_dim: 4,
        hidden_dim: 8,
        latent_dim: 3,
        ..Default::default()
    };
    let table = EmbeddingTable::seeded(12, 4, 5);
    let emb_path = dir.path().join("embedding.bin");
    table.save(&emb_path).unwrap();
    let model = Model::init(config.clone(), Arc::new(table), 9).unwrap();
    let ckpt_path = dir.path().join("m.ckpt");
    save_checkpoint(
        &Checkpoint {
            params: model.params.clone(),
            config: config.clone(),
            regulator: RegulatorState::new(3, &RegulatorConfig::default()),
            record: EpochRecord::new(1, 1, 2.0, 0.1, 0.5, 0.0, 0.1, 0.2),
            selection_reason: String::new(),
        },
        &ckpt_path,
    )
    .unwrap();

    let (c, e) = (
        CString::new(ckpt_path.to_str().unwrap()).unwrap(),
        CString::new(emb_path.to_str().unwrap()).unwrap(),
    );
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { eve_model_load(c.as_ptr(), e.as_ptr(), &mut m) }, EveStatus::Ok);
    let (mut v, mut l) = (0usize, 0usize);
    assert_eq!(unsafe { eve_model_shape(m, &mut v, &mut l) }, EveStatus::Ok);
    assert_eq!((v, l), (12, 4));

    let tokens = [1u32, 5, 7, 2];
    let mut r = EveReadout::default();
    let mut probs = vec![0.0; 12];
    let st = unsafe { eve_model_predict(m, tokens.as_ptr(), 4, 0, 8, 3, &mut r, probs.as_mut_ptr(), 12) };
    assert_eq!(st, EveStatus::Ok);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(r.mutual_information >= 0.0 && r.mutual_information <= r.predictive_entropy);
    assert!((0.0..=1.0).contains(&r.flip_rate));
    assert_eq!(r.confidence, probs[r.predicted as usize]);

    let mut again = EveReadout::default();
    unsafe { eve_model_predict(m, tokens.as_ptr(), 4, 0, 8, 3, &mut again, ptr::null_mut(), 0) };
    assert_eq!(r, again);

    let st = unsafe { eve_model_predict(m, tokens.as_ptr(), 3, 0, 8, 3, &mut r, ptr::null_mut(), 0) };
    assert_eq!(st, EveStatus::InvalidArgument);
    unsafe { eve_model_free(m) };
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/eve.h")).unwrap();
    for f in [
        "eve_last_error_message",
        "eve_model_load",
        "eve_model_free",
        "eve_model_shape",
        "eve_model_predict",
        "eve_controller_new",
        "eve_controller_load",
        "eve_controller_free",
        "eve_controller_thresholds",
        "eve_controller_score",
        "eve_controller_route",
        "eve_calibrate_basic",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from eve.h");
    }
}

const C_SMOKE: &str = r#"
#include "eve.h"
#include <stdio.h>
int main(void) {
    EveThresholds t = {0.5, 0.75, 0.9};
    EveController *ctl = NULL;
    if (eve_controller_new(t, &ctl) != EVE_STATUS_OK) return 1;
    EveAction a;
    if (eve_controller_route(ctl, 0.8, &a) != EVE_STATUS_OK) return 2;
    eve_controller_free(ctl);
    if (eve_controller_route(NULL, 0.1, &a) != EVE_STATUS_NULL_POINTER) return 3;
    printf("%d %s\n", (int)a, eve_last_error_message());
    return 0;
}
"#;

#[test]
fn c_program_links_against_static_library() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    let lib = lib_dir.join("libeve_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_SMOKE).unwrap();
    let bin = dir.path().join("smoke");
    let status = std::process::Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "2 controller is null\n");
}
