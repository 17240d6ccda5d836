#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use compt::compt_core::pretrain::CertificationReport;
use compt::compt_core::BackboneParams;
use compt::data::Dataset;
use compt::files::{save_backbone, BackboneFile};
use compt::presets;

/// Writes the standard dataset and a random frozen backbone of the standard
/// shape into `dir`; returns `(tasks dir, backbone file)`.
pub fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let tasks = dir.join("tasks");
    let data = Dataset::generate(presets::world(), presets::family(presets::SPREAD), presets::FAMILY_SEED).unwrap();
    data.save(&tasks).unwrap();
    let params = BackboneParams::init(&presets::model_config(&presets::world()), 3).unwrap().freeze();
    let report = CertificationReport {
        backbone_sha256: params.fingerprint(),
        finetune_accuracy: vec![],
        prompt_accuracy: vec![],
        mean_finetune: 0.0,
        mean_prompt: 0.0,
        passed: false,
    };
    let file = BackboneFile::new(params, presets::world(), presets::pretrain_config(), report);
    let backbone = dir.join("backbone.json");
    save_backbone(&backbone, &file).unwrap();
    (tasks, backbone)
}

pub fn compt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compt")).args(args).output().unwrap()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn error_kind(out: &Output) -> String {
    let line = stderr(out);
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap_or_else(|_| panic!("not an error line: {line}"));
    v["error"].as_str().unwrap().to_string()
}
