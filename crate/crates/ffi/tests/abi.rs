use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use diffcap::checkpoint::Checkpoint;
use diffcap::denoiser::{DenoiserConfig, DenoiserParams};
use diffcap::diffusion::TrainConfig;
use diffcap::rng::rng_from_seed;
use diffcap::synthdata::{feature_space, generate_corpus, CaptionGrammar, ViewSpec};
use diffcap::train::TrainState;
use diffcap_ffi::*;

fn last_error() -> String {
    let p = dc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn schedule_handles() {
    unsafe {
        let mut s = ptr::null_mut();
        let kind = CString::new("sqrt").unwrap();
        assert_eq!(dc_schedule_new(kind.as_ptr(), 100, &mut s), DcStatus::Ok);
        assert_eq!(dc_schedule_steps(s), 100);
        assert!(dc_last_error_message().is_null());

        let mut ab = 0.0;
        assert_eq!(dc_schedule_alpha_bar(s, 0, &mut ab), DcStatus::Ok);
        let mut end = 0.0;
        assert_eq!(dc_schedule_alpha_bar(s, 100, &mut end), DcStatus::Ok);
        assert!(0.0 < end && end < ab && ab < 1.0);
        assert_eq!(dc_schedule_alpha_bar(s, 101, &mut ab), DcStatus::OutOfRange);
        assert!(last_error().contains("101"));

        let mut r = ptr::null_mut();
        assert_eq!(dc_schedule_respace(s, 10, &mut r), DcStatus::Ok);
        assert_eq!(dc_schedule_steps(r), 10);
        let (mut a, mut b, mut v) = (0.0, 0.0, 0.0);
        assert_eq!(dc_schedule_posterior(r, 5, &mut a, &mut b, &mut v), DcStatus::Ok);
        assert!(a > 0.0 && b > 0.0 && v > 0.0);

        dc_schedule_free(r);
        dc_schedule_free(s);
        dc_schedule_free(ptr::null_mut());
    }
}

#[test]
fn bad_arguments_report_status() {
    unsafe {
        let mut s = ptr::null_mut();
        let kind = CString::new("quadratic").unwrap();
        assert_eq!(dc_schedule_new(kind.as_ptr(), 100, &mut s), DcStatus::InvalidArgument);
        assert!(last_error().contains("quadratic"));
        assert!(s.is_null());
        assert_eq!(dc_schedule_new(ptr::null(), 100, &mut s), DcStatus::NullPointer);
        assert_eq!(dc_schedule_steps(ptr::null()), 0);

        let mut m = ptr::null_mut();
        let dir = CString::new("/nonexistent/checkpoint").unwrap();
        assert_eq!(dc_model_load(dir.as_ptr(), &mut m), DcStatus::Io);
    }
}

#[test]
fn bleu_matches_library() {
    let cand = CString::new("the cat sat on the mat").unwrap();
    let r1 = CString::new("the cat sat on the mat").unwrap();
    let r2 = CString::new("a dog").unwrap();
    let refs = [r1.as_ptr(), r2.as_ptr()];
    let mut score = 0.0;
    unsafe {
        assert_eq!(dc_bleu(cand.as_ptr(), refs.as_ptr(), 2, 4, &mut score), DcStatus::Ok);
    }
    assert!((score - 1.0).abs() < 1e-12);
}

#[test]
fn caption_through_a_saved_model() {
    let grammar = CaptionGrammar::default();
    let vocab = grammar.vocabulary();
    let config = DenoiserConfig {
        embed_dim: 8,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        ff_mult: 2,
        img_len: 16,
        cap_len: 8,
        t_max: 20,
        dropout: 0.0,
        vocab_size: vocab.len(),
        features: feature_space(),
    };
    let params = DenoiserParams::init(config, &mut rng_from_seed(5)).unwrap();
    let ck = Checkpoint {
        state: TrainState::fresh(&params),
        params,
        train: TrainConfig { diffusion_steps: 20, ..TrainConfig::default() },
        vocab,
        config_hash: "test".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();

    let ds = generate_corpus(1, &ViewSpec::standard(2).unwrap(), &grammar, 1).unwrap();
    let views = CString::new(serde_json::to_string(&ds.records[0].views).unwrap()).unwrap();
    let pooling = CString::new("mean").unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(dc_model_load(path.as_ptr(), &mut m), DcStatus::Ok);
        let mut first = ptr::null_mut();
        assert_eq!(dc_model_caption(m, views.as_ptr(), 2, pooling.as_ptr(), 5, 9, &mut first), DcStatus::Ok);
        let mut second = ptr::null_mut();
        assert_eq!(dc_model_caption(m, views.as_ptr(), 2, pooling.as_ptr(), 5, 9, &mut second), DcStatus::Ok);
        assert_eq!(CStr::from_ptr(first), CStr::from_ptr(second));

        let broken = CString::new("[[{\"part\": 1}]").unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(dc_model_caption(m, broken.as_ptr(), 2, pooling.as_ptr(), 5, 9, &mut none), DcStatus::Format);
        assert!(none.is_null());

        dc_string_free(first);
        dc_string_free(second);
        dc_model_free(m);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/diffcap.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["dc_schedule_new", "dc_model_caption", "dc_bleu", "dc_last_error_message", "DC_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).output() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/abi-* -> target/<profile>
    let lib_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    // `cargo test` only builds the rlib; make sure the shared library is current.
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let built = Command::new(cargo)
        .args(["build", "--quiet", "--profile", "test", "--lib", "-p", "diffcap-ffi"])
        .current_dir(manifest)
        .status()
        .unwrap();
    assert!(built.success());
    assert!(lib_dir.join("libdiffcap_ffi.so").exists(), "no shared library in {}", lib_dir.display());
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let Ok(build) = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .args(["-ldiffcap_ffi", "-lm", "-o"])
        .arg(&exe)
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
