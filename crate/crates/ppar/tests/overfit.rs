//! End-to-end sanity: the trainer can memorize a small clean dataset, and
//! full-image evaluation reflects that with a near-perfect score.

use ppar::data::{ensure_toy_domain, toy_catalog, ToyDomainSpec, ToyStyleParams};
use ppar::eval::evaluate_model;
use ppar::train::{FitOptions, TrainConfig, TrainMode, Trainer};

#[test]
fn overfitting_ten_images_scores_nearly_perfect_miou_on_them() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = ToyDomainSpec {
        domain_id: "overfit".into(),
        seed: 11,
        style: ToyStyleParams::neutral(),
    };
    let ds = ensure_toy_domain(&spec, 10, 64, tmp.path()).unwrap();
    let samples = ds.load_all().unwrap();
    let catalog = toy_catalog();

    let cfg = TrainConfig {
        max_iters: 1500,
        mode: TrainMode::Ppar {
            ppa_lt: false,
            ppa_c: false,
            pr: false,
        },
        ..Default::default()
    };
    let mut trainer = Trainer::new(cfg, catalog.clone(), None, None).unwrap();
    trainer.fit(&samples, &FitOptions::default()).unwrap();

    let (_, miou) = evaluate_model(&trainer.backbone, &samples, &catalog).unwrap();
    assert!(miou >= 0.95, "memorization should be nearly perfect, got {miou:.4}");
}
