use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use evprobe::synth::{planted_signal, PlantedSignalConfig};
use evprobe::trace::read_labels;
use evprobe_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = evp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn scalar_functions() {
    let mut out = 0.0;
    unsafe {
        assert_eq!(evp_digamma(2.0, &mut out), EvpStatus::Ok);
        assert!((out - 0.422_784_335_098_467_1).abs() < 1e-12);
        assert_eq!(evp_digamma(-1.0, &mut out), EvpStatus::Domain);
        assert!(last_error().contains("domain"));
        assert_eq!(evp_digamma(1.0, ptr::null_mut()), EvpStatus::NullPointer);

        let mut s = EvpTokenScores::default();
        let row = [3.0f32, 1.0, -2.0];
        assert_eq!(evp_token_scores(row.as_ptr(), 3, 2, &mut s), EvpStatus::Ok);
        assert!((s.au - 11.0 / 24.0).abs() < 1e-9);
        assert!((s.eu - 2.0 / 6.0).abs() < 1e-12);
        assert!((s.reliability + s.au * s.eu).abs() < 1e-15);
        assert_eq!(evp_token_scores(row.as_ptr(), 3, 4, &mut s), EvpStatus::Shape);

        let scores = [0.2, 0.2, 0.9];
        let labels = [0u8, 1, 1];
        assert_eq!(evp_auroc(scores.as_ptr(), labels.as_ptr(), 3, &mut out), EvpStatus::Ok);
        assert_eq!(out, 0.75);
        assert_eq!(evp_auroc(scores.as_ptr(), [1u8; 3].as_ptr(), 3, &mut out), EvpStatus::Metric);
    }
}

#[test]
fn fallback_labels_match_the_sidecar_format() {
    let dir = tempfile::tempdir().unwrap();
    let (qid, resp, gold) = (cstr("q-7"), cstr("It was Marie Curie"), cstr("Marie Curie"));
    let mut json = ptr::null_mut();
    let mut z = 0u8;
    unsafe {
        let st = evp_fallback_label(qid.as_ptr(), 1, 4, resp.as_ptr(), gold.as_ptr(), 0.5, &mut z, &mut json);
        assert_eq!(st, EvpStatus::Ok);
        let line = CStr::from_ptr(json).to_str().unwrap().to_owned();
        evp_string_free(json);
        assert_eq!(z, 1);
        let path = dir.path().join("l.jsonl");
        std::fs::write(&path, line + "\n").unwrap();
        let set = read_labels(&path).unwrap();
        let label = set.iter().next().unwrap();
        assert_eq!((label.question_id.as_str(), label.sample_index, label.z), ("q-7", 4, 1));

        let st = evp_fallback_label(qid.as_ptr(), 3, 0, resp.as_ptr(), gold.as_ptr(), 0.5, ptr::null_mut(), &mut json);
        assert_eq!(st, EvpStatus::InvalidArgument);
        let st = evp_fallback_label(qid.as_ptr(), 0, 0, resp.as_ptr(), gold.as_ptr(), 2.0, ptr::null_mut(), &mut json);
        assert_eq!(st, EvpStatus::InvalidArgument);
    }
}

#[test]
fn dataset_handles() {
    let dir = tempfile::tempdir().unwrap();
    let ds = planted_signal(&PlantedSignalConfig { n_questions: 4, ..Default::default() }).unwrap();
    let path = dir.path().join("p.evpt");
    ds.write(&path).unwrap();
    let c_path = cstr(path.to_str().unwrap());
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(evp_dataset_open(c_path.as_ptr(), &mut h), EvpStatus::Ok);
        assert_eq!(evp_dataset_len(h), 20);
        let mut findings = 9;
        assert_eq!(evp_dataset_validate(h, &mut findings), EvpStatus::Ok);
        assert_eq!(findings, 0);
        evp_dataset_free(h);
        assert_eq!(evp_dataset_len(ptr::null()), 0);

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert_eq!(evp_dataset_open(c_path.as_ptr(), &mut h), EvpStatus::Ok);
        assert_eq!(evp_dataset_validate(h, &mut findings), EvpStatus::Ok);
        assert_eq!(findings, 1);
        assert!(last_error().contains("integrity"));
        evp_dataset_free(h);

        let missing = cstr(dir.path().join("none.evpt").to_str().unwrap());
        assert_eq!(evp_dataset_open(missing.as_ptr(), &mut h), EvpStatus::Io);
    }
}

#[test]
fn writer_rejects_bad_manifests_and_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(dir.path().join("w.evpt").to_str().unwrap());
    let mut w = ptr::null_mut();
    unsafe {
        assert_eq!(evp_writer_create(path.as_ptr(), cstr("{").as_ptr(), &mut w), EvpStatus::Schema);
        let manifest = cstr(r#"{"model_name":"m","k_store":2,"layer_indices":[0],"hidden_dim":1,"m_samples":1}"#);
        assert_eq!(evp_writer_create(path.as_ptr(), manifest.as_ptr(), &mut w), EvpStatus::Ok);
        let qid = cstr("q");
        let (ids, lp, tk_ids, tk) = ([1u32], [-0.5f32], [1u32, 2], [1.0f32, 0.5]);
        let h = [0.0f32];
        let blocks = [h.as_ptr()];
        let mut view = EvpTraceView {
            question_id: qid.as_ptr(),
            condition: 0,
            sample_index: 0,
            n_tokens: 1,
            token_ids: ids.as_ptr(),
            chosen_logprobs: lp.as_ptr(),
            topk_ids: tk_ids.as_ptr(),
            topk_logits: tk.as_ptr(),
            n_layers: 1,
            layer_indices: [7u32].as_ptr(),
            hidden: blocks.as_ptr(),
            has_p_true: false,
            p_true: 0.0,
            response_text: ptr::null(),
        };
        assert_ne!(evp_writer_append(w, &view), EvpStatus::Ok);
        view.layer_indices = [0u32].as_ptr();
        view.topk_ids = ptr::null();
        assert_eq!(evp_writer_append(w, &view), EvpStatus::NullPointer);
        view.topk_ids = tk_ids.as_ptr();
        assert_eq!(evp_writer_append(w, &view), EvpStatus::Ok);
        assert_eq!(evp_writer_finish(w), EvpStatus::Ok);
    }
}

#[test]
fn probe_handles_accept_sweep_output() {
    let line = r#"{"layer_index":3,"selection":"EOS","chosen":null,"weights":[1.0,-1.0],"bias":0.5,"feature_mean":[0.0,1.0],"feature_std":[2.0,1.0],"train_meta":{"split_seed":0,"iterations":3,"final_loss":0.4,"converged":true,"n_train":70}}"#;
    let json = cstr(line);
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(evp_probe_from_json(json.as_ptr(), &mut p), EvpStatus::Ok);
        assert_eq!(evp_probe_dim(p), 2);
        let x = [2.0, 1.0];
        let mut out = 0.0;
        assert_eq!(evp_probe_predict(p, x.as_ptr(), 2, &mut out), EvpStatus::Ok);
        assert!((out - 1.0 / (1.0 + (-1.5f64).exp())).abs() < 1e-15);
        assert_eq!(evp_probe_predict(p, x.as_ptr(), 1, &mut out), EvpStatus::Schema);
        evp_probe_free(p);
        assert_eq!(evp_probe_from_json(cstr("[]").as_ptr(), &mut p), EvpStatus::Schema);
    }
}

fn profile_dir() -> PathBuf {
    // tests run from <target>/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = profile_dir().join("libevprobe_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).arg(dir.path().join("c.evpt")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
