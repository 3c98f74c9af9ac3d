use mf3d_core::detector::{detect, propose, DetectConfig};
use mf3d_core::evaluation::{match_detections, roc_points, MatchMode, ScoredRegion, TruthRegion};
use mf3d_core::gradcheck::small_config;
use mf3d_core::proposals::rank_cmp;
use mf3d_core::training::{synth_dataset, synth_scene, train, TrainConfig};
use mf3d_core::{FeatureMap, MeanFace3D, Model, ModelConfig, NUM_CLASSES};

fn short_run() -> TrainConfig {
    TrainConfig { epochs: 2, lr_start: 0.05, lr_end: 0.01, ..TrainConfig::default() }
}

#[test]
fn dense_outputs_cover_the_half_resolution_grid() {
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    let fwd = model.forward(&FeatureMap::zeros(3, 32, 48)).unwrap();
    assert_eq!((fwd.dense.width, fwd.dense.height), (24, 16));
    for probs in &fwd.dense.class_probs {
        assert_eq!(probs.len(), NUM_CLASSES);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn forward_rejects_wrong_shapes() {
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    assert!(model.forward(&FeatureMap::zeros(1, 32, 32)).is_err());
    assert!(model.forward(&FeatureMap::zeros(3, 30, 32)).is_err());
}

#[test]
fn training_is_reproducible() {
    let data: Vec<_> = synth_dataset(5, 3, 32, (1, 1)).unwrap().iter().map(|s| s.to_annotated().unwrap()).collect();
    let run = || {
        let mut model = Model::new(small_config(), 2).unwrap();
        let log = train(&data, &mut model, &short_run()).unwrap();
        (log, model.params().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.0.len(), 6);
    assert!(a.0.iter().all(|r| r.terms.total().is_finite()));
}

#[test]
fn proposals_are_ranked_and_bounded() {
    let scene = synth_scene(3, 64, 2).unwrap().to_annotated().unwrap();
    let mut model = Model::new(ModelConfig::default(), 4).unwrap();
    train(std::slice::from_ref(&scene), &mut model, &TrainConfig { epochs: 30, lr_start: 0.1, lr_end: 0.03, ..TrainConfig::default() })
        .unwrap();
    let config = DetectConfig { max_detections: 5, ..DetectConfig::default() };
    let face = MeanFace3D::default();
    let props = propose(&model, &face, &scene.image, &config).unwrap();
    assert!(props.len() <= 5);
    assert!(props.windows(2).all(|w| rank_cmp(&w[0], &w[1]).is_le()));
    assert!(props.iter().all(|p| p.score <= 0.0 && p.bbox.is_valid()));

    let found = detect(&model, &face, &scene.image, &config).unwrap();
    assert_eq!(found.len(), props.len());
    let images = [(found.iter().map(ScoredRegion::from).collect(), scene.faces.iter().map(TruthRegion::from).collect())];
    let roc = roc_points(&match_detections(&images, MatchMode::Discrete, 0.5).unwrap());
    assert!(roc.iter().all(|p| (0.0..=1.0).contains(&p.recall)));
}

#[test]
fn untrained_background_model_finds_nothing() {
    let mut model = Model::new(ModelConfig::default(), 1).unwrap();
    model.params_mut().cls_head.bias.data[0] = 20.0;
    let scene = synth_scene(8, 64, 1).unwrap();
    assert!(detect(&model, &MeanFace3D::default(), &scene.image, &DetectConfig::default()).unwrap().is_empty());
}
