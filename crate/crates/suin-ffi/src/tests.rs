use std::ffi::{CStr, CString};
use std::ptr;

use super::*;

const TINY_TOML: &str = r#"
seed = 3
threads = 1

[synthetic]
users = 60
items = 30
clusters = 2
len_min = 2
len_max = 10

[encoder]
d_prime = 4
max_len = 8
epochs = 1

[retrieval]
k_retrieve = 6

[model]
d = 4
d_item = 4
l = 6
k = 2
mlp_hidden = [8]
adapter_hidden = 4

[train]
epochs = 2
batch_size = 32
"#;

fn last_error_string() -> String {
    let mut buf = vec![0u8; 1024];
    let needed = unsafe { suin_last_error(buf.as_mut_ptr() as *mut c_char, buf.len()) };
    if needed == 0 {
        return String::new();
    }
    assert!(needed <= buf.len(), "error message longer than {}", buf.len());
    CStr::from_bytes_until_nul(&buf).unwrap().to_str().unwrap().to_string()
}

fn write_tiny_config(dir: &std::path::Path) -> *mut SuinConfig {
    let path = dir.join("config.toml");
    std::fs::write(&path, TINY_TOML).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut cfg: *mut SuinConfig = ptr::null_mut();
    let status = unsafe { suin_config_load(cpath.as_ptr(), &mut cfg) };
    assert_eq!(status, SuinStatus::Ok, "{}", last_error_string());
    assert!(!cfg.is_null());
    cfg
}

#[test]
fn version_is_a_dotted_triple() {
    let v = unsafe { CStr::from_ptr(suin_version()) }.to_str().unwrap();
    assert_eq!(v.split('.').count(), 3, "{v}");
    assert!(v.split('.').all(|part| part.parse::<u32>().is_ok()), "{v}");
}

#[test]
fn null_and_malformed_arguments_are_rejected() {
    let mut out: *mut SuinConfig = ptr::null_mut();
    let status = unsafe { suin_config_load(ptr::null(), &mut out) };
    assert_eq!(status, SuinStatus::NullArgument);
    assert!(last_error_string().contains("path"), "{}", last_error_string());

    let cpath = CString::new("anything.toml").unwrap();
    let status = unsafe { suin_config_load(cpath.as_ptr(), ptr::null_mut()) };
    assert_eq!(status, SuinStatus::NullArgument);

    let bad_utf8 = [0xFFu8 as c_char, 0xFEu8 as c_char, 0];
    let status = unsafe { suin_config_load(bad_utf8.as_ptr(), &mut out) };
    assert_eq!(status, SuinStatus::InvalidUtf8);

    assert_eq!(
        unsafe { suin_config_validate(ptr::null()) },
        SuinStatus::NullArgument
    );
    assert_eq!(
        unsafe { suin_config_set_seed(ptr::null_mut(), 1) },
        SuinStatus::NullArgument
    );

    let cfg = suin_config_new();
    assert_eq!(
        unsafe { suin_config_set_threads(cfg, 0) },
        SuinStatus::InvalidConfig
    );
    assert_eq!(
        unsafe { suin_config_set_threads(cfg, 2) },
        SuinStatus::Ok
    );

    let stage = CString::new("compile").unwrap();
    let out_dir = CString::new("/tmp/unused").unwrap();
    let status = unsafe { suin_run_stage(cfg, out_dir.as_ptr(), stage.as_ptr()) };
    assert_eq!(status, SuinStatus::InvalidConfig);
    assert!(
        last_error_string().contains("unknown stage"),
        "{}",
        last_error_string()
    );

    unsafe { suin_config_free(cfg) };
    unsafe { suin_config_free(ptr::null_mut()) };
    unsafe { suin_session_free(ptr::null_mut()) };
}

#[test]
fn config_load_reports_missing_file_and_bad_content() {
    let dir = tempfile::tempdir().unwrap();
    let mut out: *mut SuinConfig = ptr::null_mut();

    let missing = CString::new(dir.path().join("nope.toml").to_str().unwrap()).unwrap();
    let status = unsafe { suin_config_load(missing.as_ptr(), &mut out) };
    assert_eq!(status, SuinStatus::InvalidConfig);
    assert!(last_error_string().contains("nope.toml"), "{}", last_error_string());

    let garbled = dir.path().join("garbled.toml");
    std::fs::write(&garbled, "seed = \"not a number\"\n").unwrap();
    let cpath = CString::new(garbled.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { suin_config_load(cpath.as_ptr(), &mut out) },
        SuinStatus::InvalidConfig
    );

    let invalid = dir.path().join("invalid.toml");
    std::fs::write(&invalid, "threads = 0\n").unwrap();
    let cpath = CString::new(invalid.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { suin_config_load(cpath.as_ptr(), &mut out) },
        SuinStatus::InvalidConfig
    );
    assert!(last_error_string().contains("threads"), "{}", last_error_string());
}

#[test]
fn last_error_reports_capacity_and_truncates() {
    assert_eq!(
        unsafe { suin_config_set_seed(ptr::null_mut(), 0) },
        SuinStatus::NullArgument
    );
    let needed = unsafe { suin_last_error(ptr::null_mut(), 0) };
    assert!(needed > 8, "{needed}");

    let mut small = vec![0u8; 8];
    let reported = unsafe { suin_last_error(small.as_mut_ptr() as *mut c_char, small.len()) };
    assert_eq!(reported, needed);
    assert_eq!(small[7], 0, "buffer must stay NUL-terminated");
    let prefix = CStr::from_bytes_until_nul(&small).unwrap().to_str().unwrap();
    assert!(last_error_string().starts_with(prefix));
}

#[test]
fn full_pipeline_runs_through_the_c_interface() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    assert_eq!(unsafe { suin_config_set_seed(cfg, 11) }, SuinStatus::Ok);
    assert_eq!(unsafe { suin_config_validate(cfg) }, SuinStatus::Ok);

    let run_root = dir.path().join("run");
    let out_dir = CString::new(run_root.to_str().unwrap()).unwrap();

    // Stages must come in order: training first is refused.
    let train = CString::new("train").unwrap();
    let status = unsafe { suin_run_stage(cfg, out_dir.as_ptr(), train.as_ptr()) };
    assert_eq!(status, SuinStatus::MissingArtifact);
    assert!(last_error_string().contains("suin"), "{}", last_error_string());

    assert_eq!(
        unsafe { suin_run_all(cfg, out_dir.as_ptr()) },
        SuinStatus::Ok,
        "{}",
        last_error_string()
    );
    assert!(run_root.join("train").join("model.tnsr").is_file());

    let split = CString::new("test").unwrap();
    let mut auc = f64::NAN;
    let mut logloss = f64::NAN;
    let status = unsafe {
        suin_evaluate(cfg, out_dir.as_ptr(), split.as_ptr(), &mut auc, &mut logloss)
    };
    assert_eq!(status, SuinStatus::Ok, "{}", last_error_string());
    assert!((0.0..=1.0).contains(&auc), "{auc}");
    assert!(logloss.is_finite() && logloss > 0.0, "{logloss}");

    let bad_split = CString::new("holdout").unwrap();
    let status = unsafe {
        suin_evaluate(cfg, out_dir.as_ptr(), bad_split.as_ptr(), &mut auc, &mut logloss)
    };
    assert_eq!(status, SuinStatus::InvalidData);
    assert!(
        last_error_string().contains("unknown split"),
        "{}",
        last_error_string()
    );

    let mut session: *mut SuinSession = ptr::null_mut();
    let status = unsafe { suin_session_open(cfg, out_dir.as_ptr(), &mut session) };
    assert_eq!(status, SuinStatus::Ok, "{}", last_error_string());
    assert!(!session.is_null());

    // Score the first user/item pair the model accepts; scores must be
    // probabilities and repeatable.
    let mut scored = None;
    'outer: for user in 0..60u64 {
        for item in 1..=30u64 {
            let mut p = f64::NAN;
            if unsafe { suin_session_score(session, user, item, &mut p) } == SuinStatus::Ok {
                scored = Some((user, item, p));
                break 'outer;
            }
        }
    }
    let (user, item, p) = scored.expect("no scorable user/item pair");
    assert!(p > 0.0 && p < 1.0, "{p}");
    let mut again = f64::NAN;
    assert_eq!(
        unsafe { suin_session_score(session, user, item, &mut again) },
        SuinStatus::Ok
    );
    assert_eq!(again, p);

    let mut p = f64::NAN;
    let status = unsafe { suin_session_score(session, 999_999, item, &mut p) };
    assert_eq!(status, SuinStatus::InvalidConfig);
    assert!(
        last_error_string().contains("not in the dataset"),
        "{}",
        last_error_string()
    );
    let status = unsafe { suin_session_score(session, user, 0, &mut p) };
    assert_eq!(status, SuinStatus::InvalidConfig);
    assert_eq!(
        unsafe { suin_session_score(session, user, item, ptr::null_mut()) },
        SuinStatus::NullArgument
    );
    assert_eq!(
        unsafe { suin_session_score(ptr::null(), user, item, &mut p) },
        SuinStatus::NullArgument
    );

    unsafe { suin_session_free(session) };
    unsafe { suin_config_free(cfg) };
}

#[test]
fn session_open_requires_a_trained_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let empty = CString::new(dir.path().join("empty").to_str().unwrap()).unwrap();
    let mut session: *mut SuinSession = ptr::null_mut();
    let status = unsafe { suin_session_open(cfg, empty.as_ptr(), &mut session) };
    assert_eq!(status, SuinStatus::MissingArtifact);
    assert!(session.is_null());
    assert!(
        last_error_string().contains("run `suin train` first"),
        "{}",
        last_error_string()
    );
    unsafe { suin_config_free(cfg) };
}

#[test]
fn null_out_dir_uses_the_configured_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("from-config");
    let toml = format!("out_dir = \"{}\"\n{}", root.to_str().unwrap(), TINY_TOML);
    let path = dir.path().join("with-out-dir.toml");
    std::fs::write(&path, toml).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut cfg: *mut SuinConfig = ptr::null_mut();
    assert_eq!(
        unsafe { suin_config_load(cpath.as_ptr(), &mut cfg) },
        SuinStatus::Ok,
        "{}",
        last_error_string()
    );

    let stage = CString::new("generate").unwrap();
    let status = unsafe { suin_run_stage(cfg, ptr::null(), stage.as_ptr()) };
    assert_eq!(status, SuinStatus::Ok, "{}", last_error_string());
    assert!(root.join("data").join("interactions.csv").is_file());
    unsafe { suin_config_free(cfg) };
}
