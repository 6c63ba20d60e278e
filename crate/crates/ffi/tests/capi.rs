use std::ffi::{CStr, CString};
use std::ptr;

use lpt_seqopt_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = lpt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const TABLE: &str = r#"{"kind": "table", "length": 4, "seed": 2}"#;

#[test]
fn oracle_round_trip() {
    unsafe {
        let mut o = ptr::null_mut();
        assert_eq!(lpt_oracle_new(c(TABLE).as_ptr(), &mut o), LptStatus::Ok);
        let mut n = 0usize;
        assert_eq!(lpt_oracle_n_objectives(o, &mut n), LptStatus::Ok);
        assert_eq!(n, 1);
        let mut y = [0.0f64; 2];
        let mut len = 0usize;
        assert_eq!(lpt_oracle_query(o, c("ACGT").as_ptr(), y.as_mut_ptr(), 2, &mut len), LptStatus::Ok);
        assert_eq!(len, 1);
        let first = y[0];
        assert_eq!(lpt_oracle_query(o, c("ACGT").as_ptr(), y.as_mut_ptr(), 2, &mut len), LptStatus::Ok);
        assert_eq!(y[0], first);
        let mut q = 0u64;
        assert_eq!(lpt_oracle_queries(o, &mut q), LptStatus::Ok);
        assert_eq!(q, 1);
        lpt_oracle_free(o);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut o = ptr::null_mut();
        assert_eq!(lpt_oracle_new(c("{").as_ptr(), &mut o), LptStatus::Parse);
        assert!(last_error().contains("json"));
        assert_eq!(lpt_oracle_new(ptr::null(), &mut o), LptStatus::NullPointer);
        assert_eq!(lpt_oracle_new(c(TABLE).as_ptr(), &mut o), LptStatus::Ok);
        let mut y = [0.0f64; 1];
        let mut len = 0usize;
        assert_eq!(
            lpt_oracle_query(o, c("ACGX").as_ptr(), y.as_mut_ptr(), 1, &mut len),
            LptStatus::InvalidSequence
        );
        assert!(last_error().contains("unknown_symbol"));
        assert_eq!(lpt_oracle_query(o, c("ACG").as_ptr(), y.as_mut_ptr(), 1, &mut len), LptStatus::InvalidSequence);
        assert_eq!(
            lpt_oracle_query(o, c("ACGT").as_ptr(), ptr::null_mut(), 0, &mut len),
            LptStatus::BufferTooSmall
        );
        assert_eq!(len, 1);
        let mut q = 0u64;
        assert_eq!(lpt_oracle_queries(ptr::null(), &mut q), LptStatus::NullPointer);
        lpt_oracle_free(o);
        lpt_oracle_free(ptr::null_mut());
        lpt_string_free(ptr::null_mut());
    }
}

fn run_config() -> String {
    r#"{
        "schema_version": 1,
        "oracle": {"kind": "table", "length": 4, "seed": 2},
        "model": {"k_tokens": 2, "k_dim": 2, "prior_hidden": 8, "embed": 8, "ff_hidden": 16, "blocks": 1, "attn_heads": 2},
        "offline": {"kind": "random", "n": 40, "below_quantile": 0.5},
        "pretrain": {"mode": "pretrain", "lr_max": 0.001, "lr_min": 0.0001, "batch_size": 16, "epochs": 1},
        "finetune": {"mode": "finetune", "lr_max": 0.001, "lr_min": 0.0001, "batch_size": 16, "epochs": 1},
        "dso": {
            "m_proposals": 8, "capacity": 16, "max_iters": 3, "oracle_budget": 100, "initial_epochs": 1,
            "train": {"mode": "online", "lr_max": 0.0003, "lr_min": 0.000075, "batch_size": 8, "epochs": 1,
                      "weights": {"kind": "top_n", "n": 8}}
        }
    }"#
    .to_string()
}

#[test]
fn run_lifecycle() {
    unsafe {
        let mut r = ptr::null_mut();
        let status = lpt_run_new(c(&run_config()).as_ptr(), 3, &mut r);
        assert_eq!(status, LptStatus::Ok, "{}", last_error());
        let mut done = 0;
        assert_eq!(lpt_run_step(r, &mut done), LptStatus::Ok);
        assert_eq!(done, 0);
        assert_eq!(lpt_run_to_end(r), LptStatus::Ok);
        assert_eq!(lpt_run_step(r, &mut done), LptStatus::Ok);
        assert_eq!(done, 1);
        let mut used = 0u64;
        assert_eq!(lpt_run_queries_used(r, &mut used), LptStatus::Ok);
        assert!(used > 0 && used <= 100);
        let mut best = f64::NAN;
        assert_eq!(lpt_run_best(r, &mut best), LptStatus::Ok);
        assert!(best.is_finite());

        let mut json = ptr::null_mut();
        assert_eq!(lpt_run_report_json(r, &mut json), LptStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(report["queries_used"].as_u64(), Some(used));
        assert_eq!(report["iterations"].as_array().unwrap().len(), 3);
        lpt_string_free(json);

        let mut m = ptr::null_mut();
        assert_eq!(lpt_run_model(r, &mut m), LptStatus::Ok);
        lpt_run_free(r);

        let mut d = 0usize;
        assert_eq!(lpt_model_latent_dim(m, &mut d), LptStatus::Ok);
        assert_eq!(d, 4);
        let z0 = vec![0.1; d];
        let mut seq = ptr::null_mut();
        assert_eq!(lpt_model_generate(m, z0.as_ptr(), d, 1, 1.0, &mut seq), LptStatus::Ok);
        assert_eq!(CStr::from_ptr(seq).to_bytes().len(), 4);
        lpt_string_free(seq);
        assert_eq!(
            lpt_model_generate(m, z0.as_ptr(), d - 1, 1, 1.0, &mut seq),
            LptStatus::DimensionMismatch
        );
        let mut y = [0.0; 4];
        let mut len = 0;
        assert_eq!(lpt_model_predict(m, z0.as_ptr(), d, y.as_mut_ptr(), 4, &mut len), LptStatus::Ok);
        assert_eq!(len, 1);

        let dir = tempfile::tempdir().unwrap();
        let path = c(dir.path().join("m.ckpt").to_str().unwrap());
        assert_eq!(lpt_model_save(m, path.as_ptr()), LptStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(lpt_model_load(path.as_ptr(), &mut back), LptStatus::Ok);
        let mut y2 = [0.0; 4];
        assert_eq!(lpt_model_predict(back, z0.as_ptr(), d, y2.as_mut_ptr(), 4, &mut len), LptStatus::Ok);
        assert!((y[0] - y2[0]).abs() < 1e-4);
        lpt_model_free(m);
        lpt_model_free(back);
    }
}

#[test]
fn bad_run_config_is_rejected() {
    unsafe {
        let mut r = ptr::null_mut();
        let bad = run_config().replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert_eq!(lpt_run_new(c(&bad).as_ptr(), 0, &mut r), LptStatus::Config);
        assert!(r.is_null());
        assert!(last_error().contains("schema_version"));
    }
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(lpt_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/lpt_seqopt.h")).unwrap();
    let src = std::fs::read_to_string(dir.join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() > 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct LptRun LptRun;"));
}

#[test]
fn header_compiles_as_c() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"lpt_seqopt.h\"\nint main(void) { LptStatus s = LPT_STATUS_OK; LptOracle *o = 0; (void)o; return (int)s; }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = match std::process::Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(e) => {
            eprintln!("skipping: no C compiler ({cc}): {e}");
            return;
        }
    };
    assert!(status.success());
}
