use compt::compt_core::pretrain::{certify_backbone, CertifyConfig};
use compt::compt_core::BackboneParams;
use compt::data::Dataset;
use compt::presets;

#[test]
fn an_untrained_backbone_is_not_certified() {
    let data = Dataset::generate(presets::world(), presets::family(presets::SPREAD), presets::FAMILY_SEED).unwrap();
    let random = BackboneParams::init(&presets::model_config(&data.manifest.world), 9).unwrap().freeze();
    let cfg = CertifyConfig { tasks: 1, ..CertifyConfig::default() };
    let report = certify_backbone(&random, &data.world, &cfg, &data.rules()).unwrap();
    assert!(!report.passed);
    assert!(report.mean_prompt < cfg.min_prompt_accuracy, "prompt accuracy {}", report.mean_prompt);
    assert_eq!(report.backbone_sha256, random.fingerprint());
}
