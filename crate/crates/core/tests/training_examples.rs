use mmlora_core::autodiff::Matrix;
use mmlora_core::nn::{hash_params, Architecture, ModalityModel};
use mmlora_core::synthdata::{generate, MultiModalDataset, Split, Splits, SynthConfig};
use mmlora_core::training::*;
use mmlora_core::Error;
use proptest::prelude::*;

fn small_laziness(seed: u64) -> SynthConfig {
    SynthConfig {
        n_train: 600,
        n_val: 200,
        n_test: 400,
        ..SynthConfig::laziness(seed)
    }
}

fn mlp(cfg: &SynthConfig) -> Architecture {
    Architecture::mlp(cfg.dim, 32, 8, cfg.classes)
}

fn quick(epochs: usize) -> OptimizerConfig {
    OptimizerConfig {
        epochs,
        learning_rate: 3e-3,
        ..Default::default()
    }
}

fn pretrained(cfg: &SynthConfig) -> TrainedBundle {
    let a = mlp(cfg);
    TrainedBundle::pretrained_analog(&[a, a], &[11, 12], Provenance::default()).unwrap()
}

fn umft(cfg: &SynthConfig, splits: &Splits) -> TrainedBundle {
    umft_bundle(&pretrained(cfg), &splits.train, &splits.val, &quick(8)).unwrap()
}

#[test]
fn noiseless_umft_fits_training_set_within_30_epochs() {
    let cfg = SynthConfig::noiseless(2);
    let s = generate(&cfg).unwrap();
    let model = ModalityModel::new(1, Architecture::mlp(cfg.dim, 128, 16, cfg.classes), 5).unwrap();
    let opt = OptimizerConfig {
        epochs: 30,
        ..Default::default()
    };
    let (trained, _) = train_umft(&model, &s.train, &s.val, &opt).unwrap();
    assert_eq!(evaluate(Predictor::Single(&trained), &s.train).unwrap(), 1.0);
}

#[test]
fn zero_learning_rate_returns_initial_weights() {
    let cfg = small_laziness(1);
    let s = generate(&cfg).unwrap();
    let model = ModalityModel::new(2, mlp(&cfg), 9).unwrap();
    let opt = OptimizerConfig {
        learning_rate: 0.0,
        epochs: 2,
        ..Default::default()
    };
    let (trained, _) = train_umft(&model, &s.train, &s.val, &opt).unwrap();
    assert_eq!(trained, model);

    let base = umft(&cfg, &s);
    let (full, _) = joint_full_finetune(&base, &s.train, &s.val, &opt).unwrap();
    let ume = ume_predict(&base.models, s.test.inputs()).unwrap();
    assert!(ume_predict(&full.models, s.test.inputs()).unwrap().bit_eq(&ume));
    let (lora, _) = mmlora_train(&base, &MmloraOptions::default(), &s.train, &s.val, &opt).unwrap();
    assert!(ume_predict(&lora.models, s.test.inputs()).unwrap().bit_eq(&ume));
}

#[test]
fn weak_modality_learns_above_chance() {
    let cfg = small_laziness(2);
    let s = generate(&cfg).unwrap();
    let model = ModalityModel::new(2, mlp(&cfg), 3).unwrap();
    let (_, summary) = train_umft(&model, &s.train, &s.val, &quick(8)).unwrap();
    assert!(summary.best_val_accuracy > 1.0 / cfg.classes as f64);
}

#[test]
fn mmlora_starts_at_the_ume_objective() {
    let cfg = small_laziness(3);
    let s = generate(&cfg).unwrap();
    let base = umft(&cfg, &s);
    let attached = attach_adapters(&base.models, &MmloraOptions::default(), 17).unwrap();
    let start = mixture_objective(&attached, &s.train).unwrap();
    assert_eq!(start.to_bits(), ume_nll(&base.models, &s.train).unwrap().to_bits());
}

#[test]
fn mmlora_checks_stage_and_snapshot() {
    let cfg = small_laziness(4);
    let s = generate(&cfg).unwrap();
    let opts = MmloraOptions::default();
    let err = mmlora_train(&pretrained(&cfg), &opts, &s.train, &s.val, &quick(1)).unwrap_err();
    assert!(matches!(err, Error::Stage { .. }));

    let mut tampered = umft(&cfg, &s);
    let name = tampered.models[0].head_bias_name();
    tampered.models[0].set_param(&name, Matrix::filled(1, cfg.classes, 0.5)).unwrap();
    let err = mmlora_train(&tampered, &opts, &s.train, &s.val, &quick(1)).unwrap_err();
    assert!(matches!(err, Error::Integrity { .. }));
}

#[test]
fn full_finetune_trains_every_parameter() {
    let cfg = small_laziness(5);
    let s = generate(&cfg).unwrap();
    let base = umft(&cfg, &s);
    let (full, _) = joint_full_finetune(&base, &s.train, &s.val, &quick(1)).unwrap();
    assert_eq!(full.trainable_count(), full.param_count());
    let (lora, _) = mmlora_train(&base, &MmloraOptions::default(), &s.train, &s.val, &quick(1)).unwrap();
    assert!(lora.trainable_count() * 10 < full.trainable_count());
    assert_eq!(lora.frozen_hash(), hash_params(base.models.iter().flat_map(|m| m.all_params())));
}

#[test]
fn divergence_reports_the_step() {
    let cfg = small_laziness(6);
    let s = generate(&cfg).unwrap();
    let model = ModalityModel::new(1, mlp(&cfg), 3).unwrap();
    let opt = OptimizerConfig {
        kind: OptimizerKind::Sgd,
        learning_rate: 1e12,
        ..quick(3)
    };
    match train_umft(&model, &s.train, &s.val, &opt) {
        Err(Error::Divergence { stage, step }) => {
            assert_eq!(stage, "umft/m1");
            assert!(step >= 1);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn late_fusion_separates_noiseless_data() {
    let cfg = SynthConfig::noiseless(7);
    let s = generate(&cfg).unwrap();
    let a = Architecture::mlp(cfg.dim, 64, 16, cfg.classes);
    let pre = TrainedBundle::pretrained_analog(&[a, a], &[1, 2], Provenance::default()).unwrap();
    let head = FusionHead::new(&[16, 16], cfg.classes, 4);
    let (lf, _) = train_late_fusion(&pre.models, head, &s.train, &s.val, &quick(10)).unwrap();
    let predictor = Predictor::LateFusion {
        models: &lf.models,
        head: lf.fusion_head.as_ref().unwrap(),
    };
    assert_eq!(evaluate(predictor, &s.test).unwrap(), 1.0);
}

/// With modality 2 zeroed and its fusion block zero, that branch receives no
/// gradient, so late fusion must retrace unimodal training of modality 1
/// under the fusion head's first block.
#[test]
fn late_fusion_with_one_live_modality_reduces_to_umft() {
    let cfg = small_laziness(8);
    let s = generate(&cfg).unwrap();
    let (train, val) = (s.train.with_zeroed(2), s.val.with_zeroed(2));
    let pre = pretrained(&cfg);
    let width = pre.models[0].feature_width();
    let mut head = FusionHead::new(&[width, width], cfg.classes, 21);
    let w = &head.weight.value;
    head.weight.value = Matrix::from_fn(w.rows(), w.cols(), |r, c| if c < width { w.get(r, c) } else { 0.0 });

    let mut solo = pre.models[0].clone();
    let w = &head.weight.value;
    solo.set_param(&solo.head_weight_name(), Matrix::from_fn(w.rows(), width, |r, c| w.get(r, c))).unwrap();
    solo.set_param(&solo.head_bias_name(), head.bias.value.clone()).unwrap();

    let opt = quick(4);
    let (solo, solo_fit) = train_umft(&solo, &train, &val, &opt).unwrap();
    let (joint, joint_fit) = train_late_fusion(&pre.models, head, &train, &val, &opt).unwrap();
    assert_eq!(solo_fit.best_epoch, joint_fit.best_epoch);
    for p in solo.base_params().filter(|p| p.name.contains("/encoder/")) {
        let q = joint.models[0].base_params().find(|q| q.name == p.name).unwrap();
        assert!(p.value.bit_eq(&q.value), "{} differs", p.name);
    }
    let inert = joint.models[1].extract_features(train.input(2)).unwrap();
    assert!(inert.data().iter().all(|&v| v == 0.0));
    let fused = &joint.fusion_head.as_ref().unwrap().weight.value;
    let solo_head = solo.base_params().find(|p| p.name == solo.head_weight_name()).unwrap();
    assert!(Matrix::from_fn(fused.rows(), width, |r, c| fused.get(r, c)).bit_eq(&solo_head.value));
}

/// Encoder whose features equal its input: fc1 = [I; -I], fc2 = [I, -I].
fn identity_encoder(dim: usize, classes: usize) -> ModalityModel {
    let mut m = ModalityModel::new(1, Architecture::mlp(dim, 2 * dim, dim, classes), 0).unwrap();
    let fc1 = Matrix::from_fn(2 * dim, dim, |r, c| match (r < dim, r % dim == c) {
        (true, true) => 1.0,
        (false, true) => -1.0,
        _ => 0.0,
    });
    let fc2 = Matrix::from_fn(dim, 2 * dim, |r, c| match (c < dim, c % dim == r) {
        (true, true) => 1.0,
        (false, true) => -1.0,
        _ => 0.0,
    });
    m.set_param("m1/encoder/fc1.weight", fc1).unwrap();
    m.set_param("m1/encoder/fc2.weight", fc2).unwrap();
    m
}

#[test]
fn linear_eval_examples() {
    let cfg = SynthConfig::noiseless(9);
    let s = generate(&cfg).unwrap();
    let enc = identity_encoder(cfg.dim, cfg.classes);
    let x = s.test.input(1);
    assert!(enc.extract_features(x).unwrap().sub(x).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    let before = hash_params(enc.all_params());
    let acc = linear_eval(&enc, &s.train, &s.val, &s.test, &OptimizerConfig::linear_eval()).unwrap();
    assert_eq!(acc, 1.0);
    assert_eq!(hash_params(enc.all_params()), before);

    let chance_cfg = SynthConfig {
        strengths: vec![0.0, 0.0],
        paired: 0.0,
        ..SynthConfig::laziness(9)
    };
    let s = generate(&chance_cfg).unwrap();
    let random = ModalityModel::new(1, mlp(&chance_cfg), 4).unwrap();
    let acc = linear_eval(&random, &s.train, &s.val, &s.test, &OptimizerConfig::linear_eval()).unwrap();
    let chance = 1.0 / chance_cfg.classes as f64;
    let sd = (chance * (1.0 - chance) / chance_cfg.n_test as f64).sqrt();
    assert!((acc - chance).abs() <= 3.0 * sd, "{acc}");
}

#[test]
fn uniform_predictor_scores_class_zero_frequency() {
    let labels = vec![0, 2, 1, 0, 0, 3, 2, 0];
    let ds = MultiModalDataset::new(Split::Test, vec![Matrix::zeros(8, 2), Matrix::zeros(8, 2)], labels.clone(), 4).unwrap();
    let probs = Matrix::filled(8, 4, 0.25);
    let zeros = labels.iter().filter(|&&y| y == 0).count() as f64 / 8.0;
    assert_eq!(accuracy(&probs, ds.labels()).unwrap(), zeros);
    assert!(matches!(accuracy(&Matrix::zeros(0, 4), &[]), Err(Error::EmptyDataset(_))));
}

proptest! {
    #[test]
    fn accuracy_is_invariant_under_increasing_maps(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 5), 1..30),
        labels_seed in any::<u64>(),
        factor in 0.01f64..100.0,
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.concat();
        let probs = Matrix::from_vec(n, 5, flat).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| ((labels_seed >> (i % 60)) as usize + i) % 5).collect();
        let base = accuracy(&probs, &labels).unwrap();
        let scaled = probs.map(|p| p * factor);
        let cubed = probs.map(|p| p * p * p + 2.0 * p);
        prop_assert_eq!(accuracy(&scaled, &labels).unwrap(), base);
        prop_assert_eq!(accuracy(&cubed, &labels).unwrap(), base);
    }

    #[test]
    fn ume_output_is_a_distribution(seed in any::<u64>()) {
        let a = Architecture::mlp(6, 5, 4, 3);
        let models = vec![ModalityModel::new(1, a, seed).unwrap(), ModalityModel::new(2, a, seed ^ 1).unwrap()];
        let x = Matrix::from_fn(4, 6, |r, c| ((r * 6 + c) as f64 * 0.7 + seed as f64 * 1e-9).sin() * 3.0);
        let p = ume_predict(&models, &[x.clone(), x]).unwrap();
        for r in 0..p.rows() {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
