mod common;

use std::fs;

use compt::compt_core::checkpoint::PromptCheckpoint;
use compt::compt_core::{train, BackboneParams, CompositionMethod, TrainConfig};
use compt::data::Dataset;
use compt::files::{
    flat_values, load_backbone, load_checkpoint, read_sidecar, save_checkpoint, sidecar_path, write_sidecar,
};
use compt::{presets, Error};
use tempfile::tempdir;

fn trained(method: CompositionMethod) -> (BackboneParams, PromptCheckpoint) {
    let data = Dataset::generate(presets::world(), presets::family(presets::SPREAD), 1).unwrap();
    let bb = BackboneParams::init(&presets::model_config(&presets::world()), 3).unwrap().freeze();
    let cfg = TrainConfig { method, k_shot: 4, epochs: 1, source_len: 4, ..TrainConfig::default() };
    let (model, _) = train(&cfg, &bb, &data.tasks).unwrap();
    let ck = PromptCheckpoint::from_model(&model, &bb.fingerprint(), 0);
    (bb, ck)
}

#[test]
fn checkpoints_round_trip_bit_for_bit() {
    let dir = tempdir().unwrap();
    for method in [CompositionMethod::Pt, CompositionMethod::Msum, CompositionMethod::Mcat] {
        let (bb, ck) = trained(method);
        let path = dir.path().join(format!("{}.json", method.as_str()));
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path, Some(&bb.fingerprint())).unwrap();
        let bits = |c: &PromptCheckpoint| flat_values(c).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ck));
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), ck.to_model().unwrap());
    }
}

#[test]
fn sidecars_carry_every_float() {
    let dir = tempdir().unwrap();
    let (_, ck) = trained(CompositionMethod::Ssum);
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, &ck).unwrap();
    let bin = sidecar_path(&path);
    assert_eq!(bin, dir.path().join("ck.bin"));
    write_sidecar(&bin, &ck).unwrap();
    assert_eq!(fs::metadata(&bin).unwrap().len() as usize, 16 + 8 * flat_values(&ck).len());

    let mut zeroed = ck.clone();
    for s in &mut zeroed.sources {
        s.iter_mut().flatten().for_each(|x| *x = 0.0);
    }
    read_sidecar(&bin, &mut zeroed).unwrap();
    assert_eq!(zeroed, ck);

    let mut smaller = ck.clone();
    smaller.sources.pop();
    assert!(matches!(read_sidecar(&bin, &mut smaller), Err(Error::Sidecar { .. })));
    fs::write(&bin, b"garbage").unwrap();
    assert!(matches!(read_sidecar(&bin, &mut ck.clone()), Err(Error::Parse { .. })));
}

#[test]
fn checkpoint_errors_are_distinguished() {
    let dir = tempdir().unwrap();
    let (bb, ck) = trained(CompositionMethod::Ssum);
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, &ck).unwrap();
    let kind = |r: compt::Result<PromptCheckpoint>| r.unwrap_err().kind();

    assert_eq!(kind(load_checkpoint(&path, Some("0000"))), "fingerprint_mismatch");
    load_checkpoint(&path, Some(&bb.fingerprint())).unwrap();

    let mut value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    value["format_version"] = 7.into();
    value["sources"] = "not rows".into();
    fs::write(&path, value.to_string()).unwrap();
    assert_eq!(kind(load_checkpoint(&path, None)), "checkpoint_version");

    value["format_version"] = 1.into();
    fs::write(&path, value.to_string()).unwrap();
    assert_eq!(kind(load_checkpoint(&path, None)), "malformed_checkpoint");

    fs::write(&path, "{\"sources\": []}").unwrap();
    assert_eq!(kind(load_checkpoint(&path, None)), "malformed_checkpoint");
    fs::write(&path, "not json").unwrap();
    assert_eq!(kind(load_checkpoint(&path, None)), "malformed_checkpoint");
}

#[test]
fn backbone_files_detect_tampering() {
    let dir = tempdir().unwrap();
    let (_, path) = common::fixture(dir.path());
    let file = load_backbone(&path).unwrap();
    assert_eq!(file.backbone_sha256, file.params.fingerprint());

    let mut tampered = file.clone();
    tampered.params.token_embedding.data_mut()[0] += 1.0;
    compt::files::save_backbone(&path, &tampered).unwrap();
    assert_eq!(load_backbone(&path).unwrap_err().kind(), "fingerprint_mismatch");
}

#[test]
fn datasets_round_trip_through_disk() {
    let dir = tempdir().unwrap();
    let data = Dataset::generate(presets::world(), presets::family(0.3), 9).unwrap();
    data.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), data);
    let first = fs::read_to_string(dir.path().join("a-0/test.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(line["tokens"].as_array().unwrap().len(), 16);
    assert!(line["label"].is_u64());
}

#[test]
fn error_lines_are_single_json_objects() {
    let e = Error::Usage("bad \"input\"\nhere".into());
    let line = e.to_line();
    assert!(!line.contains('\n'));
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["error"], "usage");
}
