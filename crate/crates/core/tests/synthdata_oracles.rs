use mmlora_core::synthdata::{bayes_probe, batch_iter, generate, SynthConfig};
use proptest::prelude::*;

#[test]
fn noiseless_config_is_linearly_separable() {
    let cfg = SynthConfig::noiseless(4);
    for subset in [&[1][..], &[2], &[1, 2]] {
        let r = bayes_probe(&cfg, subset).unwrap();
        assert_eq!(r.train_accuracy, 1.0, "subset {subset:?}");
        assert_eq!(r.test_accuracy, 1.0, "subset {subset:?}");
    }
}

#[test]
fn signal_free_modality_sits_at_chance() {
    let cfg = SynthConfig {
        strengths: vec![2.0, 0.0],
        paired: 0.0,
        ..SynthConfig::laziness(8)
    };
    let r = bayes_probe(&cfg, &[2]).unwrap();
    let chance = 1.0 / cfg.classes as f64;
    let sd = (chance * (1.0 - chance) / cfg.n_test as f64).sqrt();
    assert!((r.test_accuracy - chance).abs() <= 3.0 * sd, "{} vs {chance} ± {}", r.test_accuracy, 3.0 * sd);
}

#[test]
fn paired_features_need_both_modalities() {
    let cfg = SynthConfig::laziness(0);
    let one = bayes_probe(&cfg, &[1]).unwrap().test_accuracy;
    let two = bayes_probe(&cfg, &[2]).unwrap().test_accuracy;
    let both = bayes_probe(&cfg, &[1, 2]).unwrap().test_accuracy;
    assert!(both - one.max(two) > 0.0, "both {both} m1 {one} m2 {two}");
}

#[test]
fn generation_is_a_pure_function_of_the_config() {
    let a = generate(&SynthConfig::laziness(3)).unwrap();
    let b = generate(&SynthConfig::laziness(3)).unwrap();
    let c = generate(&SynthConfig::laziness(4)).unwrap();
    for (x, y) in a.train.inputs().iter().zip(b.train.inputs()) {
        assert!(x.bit_eq(y));
    }
    assert_eq!(a.test.labels(), b.test.labels());
    assert!(!a.train.input(1).bit_eq(c.train.input(1)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batches_partition_and_stay_aligned(n in 1usize..90, batch in 1usize..40, epoch_seed in any::<u64>()) {
        let cfg = SynthConfig { n_train: n, ..SynthConfig::laziness(1) };
        let ds = generate(&cfg).unwrap().train;
        let mut seen = vec![0usize; n];
        let mut order = Vec::new();
        for b in batch_iter(&ds, batch, epoch_seed).unwrap() {
            prop_assert!(b.indices.len() <= batch && !b.indices.is_empty());
            for (row, &i) in b.indices.iter().enumerate() {
                seen[i] += 1;
                prop_assert_eq!(b.labels[row], ds.labels()[i]);
                for m in 1..=ds.modality_count() {
                    prop_assert_eq!(b.inputs[m - 1].row(row), ds.input(m).row(i));
                }
            }
            order.extend(b.indices);
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let again: Vec<usize> = batch_iter(&ds, batch, epoch_seed).unwrap().flat_map(|b| b.indices).collect();
        prop_assert_eq!(order, again);
    }
}
