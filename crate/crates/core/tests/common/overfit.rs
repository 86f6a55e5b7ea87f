use freqpriv::config::{ExperimentConfig, Variant};
use freqpriv::data::{generate_scene, scene_rng, CountLaw};
use freqpriv::detector::{total_loss, train, DetectorModel, Sample, TrainConfig};

pub fn overfit_sample(cfg: &ExperimentConfig) -> Sample {
    let scene_cfg = freqpriv::data::SceneConfig {
        objects: CountLaw::Fixed { n: 3 },
        ..cfg.scene_config(cfg.seed)
    };
    let scene = generate_scene(&scene_cfg, &mut scene_rng(cfg.seed, 0)).unwrap();
    Sample {
        image: scene.image.to_feature_map(),
        boxes: scene.boxes,
    }
}

/// Returns `(initial L_det, final L_det, final parameters)`.
pub fn overfit(variant: Variant, seed: u64) -> (f64, f64, DetectorModel) {
    let cfg = ExperimentConfig { seed, ..ExperimentConfig::default() }.with_variant(variant);
    let sample = overfit_sample(&cfg);
    let mut model = DetectorModel::new(cfg.model_config(), seed).unwrap();
    let loss = cfg.loss_config();
    let initial = total_loss(&model, &sample.image, &sample.boxes, &loss).unwrap().det.total;
    let train_cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        ..cfg.train_config()
    };
    train(&mut model, std::slice::from_ref(&sample), &train_cfg, &loss).unwrap();
    let last = total_loss(&model, &sample.image, &sample.boxes, &loss).unwrap().det.total;
    (initial, last, model)
}
