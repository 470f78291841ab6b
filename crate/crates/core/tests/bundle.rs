use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use gusl_core::bundle::{load_model, save_model, F32_BLOB, I32_BLOB, MANIFEST};
use gusl_core::pipeline::{infer, phantom_cases, train, CascadeModel, PipelineConfig};
use gusl_core::Error;

fn model() -> &'static CascadeModel {
    static M: OnceLock<CascadeModel> = OnceLock::new();
    M.get_or_init(|| {
        let cases = phantom_cases(5, 31).unwrap();
        let (m, _) = train(&cases, &PipelineConfig::for_profile("phantom").unwrap(), 2).unwrap();
        m
    })
}

fn saved() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    save_model(model(), dir.path()).unwrap();
    dir
}

fn bits(p: &gusl_core::volume::ProbMap) -> Vec<u64> {
    p.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn load_of_save_predicts_identically() {
    let dir = saved();
    let loaded = load_model(dir.path()).unwrap();
    assert_eq!(&loaded, model());
    for c in phantom_cases(3, 32).unwrap() {
        let a = infer(model(), &c.volume).unwrap();
        let b = infer(&loaded, &c.volume).unwrap();
        assert_eq!(bits(&a.gland), bits(&b.gland));
        assert_eq!(a.tz.as_ref().map(bits), b.tz.as_ref().map(bits));
        assert_eq!(a.pz.as_ref().map(bits), b.pz.as_ref().map(bits));
    }
}

#[test]
fn saving_twice_gives_identical_files() {
    let (a, b) = (saved(), saved());
    for f in [MANIFEST, F32_BLOB, I32_BLOB] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn manifest_describes_the_model() {
    let dir = saved();
    let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(m["format_version"], 1);
    assert_eq!(m["profile"], "phantom");
    assert_eq!(m["grids"]["stage2"], serde_json::json!([48, 48, 24]));
    assert!(m["stage1_encoder"]["levels"][0]["channel_tree"].is_array());
    assert!(m["gland"]["features"][0]["selected"].is_array());
    assert!(m["gland"]["features"][0]["lnt_subsets"].is_array());
    assert_eq!(m["f32_blob"]["sha256"].as_str().unwrap().len(), 64);
}

fn expect_corrupt(dir: &Path) {
    match load_model(dir) {
        Err(Error::Corrupt(_)) => {}
        other => panic!("expected a corruption error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn missing_blob_is_corruption() {
    let dir = saved();
    fs::remove_file(dir.path().join(I32_BLOB)).unwrap();
    expect_corrupt(dir.path());
}

#[test]
fn flipped_byte_is_corruption() {
    let dir = saved();
    let p = dir.path().join(F32_BLOB);
    let mut bytes = fs::read(&p).unwrap();
    bytes[10] ^= 0x40;
    fs::write(&p, bytes).unwrap();
    expect_corrupt(dir.path());
}

#[test]
fn version_bump_is_rejected() {
    let dir = saved();
    let p = dir.path().join(MANIFEST);
    let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
    m["format_version"] = serde_json::json!(2);
    fs::write(&p, serde_json::to_vec(&m).unwrap()).unwrap();
    assert!(matches!(load_model(dir.path()), Err(Error::Incompatible { found: 2, expected: 1 })));
}

#[test]
fn missing_manifest_is_io() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_model(dir.path()), Err(Error::Io { .. })));
}
