use std::time::Instant;

use hoi_core::data::CategorySpace;
use hoi_core::eval::{evaluate, gt_boxes, to_predictions, ImageEval, Setting};
use hoi_core::model::{prepare_image, training_targets, Model, ModelConfig};
use hoi_core::synth::SynthDataset;
use hoi_core::train::{Sequential, TrainConfig, TrainSample, Trainer};

#[test]
fn overfits_synthetic_set() {
    let start = Instant::now();
    let data = SynthDataset::new(64, 0);
    let config = ModelConfig {
        dim: 64,
        ffn_hidden: 256,
        temperature: 0.1,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config, &data.table, &data.object_text, &data.verb_text, 0).unwrap();
    let samples: Vec<TrainSample> = data
        .images
        .iter()
        .map(|img| {
            let image = prepare_image(&img.detection, Some(&img.clip), &data.table, &model.config).unwrap().unwrap();
            let (labels, mask) = training_targets(&image, &img.gt, &data.table, CategorySpace::Verbs, None);
            TrainSample { image, labels, mask }
        })
        .collect();
    let tc = TrainConfig {
        epochs: 100,
        lr: 1e-3,
        decay_epoch: 80,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&model, tc).unwrap();
    let logs = trainer.fit(&mut model, &samples, &Sequential, Some(500)).unwrap();
    assert_eq!(logs.len(), 500);
    let last_epoch: Vec<f64> = logs.iter().rev().take(5).map(|l| l.loss).collect();
    let mean = last_epoch.iter().sum::<f64>() / last_epoch.len() as f64;
    assert!(mean < 1e-2, "final epoch loss {mean}");

    let evals: Vec<ImageEval> = data
        .images
        .iter()
        .zip(&samples)
        .map(|(img, s)| ImageEval {
            predictions: to_predictions(&model.predict(&s.image, &data.table, 0.26, 100).unwrap()),
            ground_truth: gt_boxes(&data.table, &img.gt),
        })
        .collect();
    let full = evaluate(&evals, &data.table, Setting::Default, &[]).aggregate("full").unwrap();
    assert!(full >= 99.0, "train-set mAP {full}");
    assert!(start.elapsed().as_secs() < 300);
}
