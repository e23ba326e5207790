//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mmlora_core::autodiff::{grad_check, Matrix};
use mmlora_core::checkpoint::{self, Dtype};
use mmlora_core::harness::{self, emit_report, ExperimentConfig, Format, RunReport};
use mmlora_core::nn::{hash_params, Architecture, BindMode, Bindings, ModalityModel, Placement};
use mmlora_core::synthdata::generate;
use mmlora_core::training::*;
use nalgebra::DMatrix;

const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn load_config(name: &str, root: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::load(&Path::new(CONFIGS).join(format!("{name}.json"))).unwrap();
    c.output_dir = Some(root.to_path_buf());
    c
}

fn mean(report: &RunReport, pipeline: &str, metric: &str) -> f64 {
    report
        .mean(pipeline, metric)
        .unwrap_or_else(|| panic!("no {pipeline}/{metric} rows"))
}

fn checkpoint_path(config: &ExperimentConfig, seed: u64, name: &str) -> PathBuf {
    config.run_dir().join("checkpoints").join(format!("seed{seed}")).join(format!("{name}.mmlf"))
}

fn seeded_matrix(rows: usize, cols: usize, seed: u64, spread: f64) -> Matrix {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Matrix::from_fn(rows, cols, |_, _| {
        state = state.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
        ((state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * spread
    })
}

fn max_gap(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let (dim, classes, rows) = (8, 3, 6);
    let arch = Architecture::tiny_transformer(dim, 2, 4, 6, classes);
    let models: Vec<ModalityModel> = (1..=2)
        .map(|id| {
            let mut m = ModalityModel::new(id, arch, 40 + id as u64)
                .unwrap()
                .lora_attach(Placement::EncoderAndHead, 1, 0.3, 1.0, id as u64)
                .unwrap();
            let targets: Vec<(String, (usize, usize))> = m.adapters().map(|a| (a.b.name.clone(), a.b.value.shape())).collect();
            for (i, (name, (r, c))) in targets.into_iter().enumerate() {
                m.set_param(&name, seeded_matrix(r, c, 100 + i as u64 + 10 * id as u64, 0.4)).unwrap();
            }
            m
        })
        .collect();
    let names: Vec<String> = models
        .iter()
        .flat_map(|m| m.adapters().flat_map(|a| [a.a.name.clone(), a.b.name.clone()]))
        .collect();
    let values: Vec<Matrix> = models
        .iter()
        .flat_map(|m| m.adapters().flat_map(|a| [a.a.value.clone(), a.b.value.clone()]))
        .collect();
    let xs = [seeded_matrix(rows, dim, 1, 1.5), seeded_matrix(rows, dim, 2, 1.5)];
    let labels = [0, 2, 1, 1, 0, 2];
    let report = grad_check(&values, 1e-5, |tape, ids| {
        let mut b = Bindings::new();
        for (name, &id) in names.iter().zip(ids) {
            b.insert(name.clone(), id);
        }
        let mut logits = Vec::new();
        for (m, x) in models.iter().zip(&xs) {
            m.bind(tape, BindMode::Inference, &mut b);
            let x = tape.constant(x.clone());
            logits.push(m.logits(tape, &b, x)?);
        }
        tape.mixture_nll(&logits, &labels)
    })
    .unwrap();
    let elapsed = start.elapsed();
    Verdict::new(
        report.max_rel_error < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "max rel error {:.2e} over {} coordinates in {:.1?}",
            report.max_rel_error, report.coordinates, elapsed
        ),
    )
}

fn zero_delta_start(config: &ExperimentConfig) -> Verdict {
    let mut worst = 0usize;
    for &seed in &config.seeds {
        let umft = checkpoint::load(&checkpoint_path(config, seed, "umft")).unwrap();
        let test = generate(&config.data.resolve(seed).unwrap()).unwrap().test;
        let attached = attach_adapters(&umft.models, &config.mmlora, seed).unwrap();
        let ume = ume_predict(&umft.models, test.inputs()).unwrap();
        let start = ume_predict(&attached, test.inputs()).unwrap();
        worst += ume.data().iter().zip(start.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    }
    Verdict::new(worst == 0, format!("{worst} differing probabilities across {} seeds", config.seeds.len()))
}

fn merge_equivalence(config: &ExperimentConfig, dir: &Path) -> Verdict {
    let seed = config.seeds[0];
    let trained = checkpoint::load(&checkpoint_path(config, seed, "mmlora")).unwrap();
    let umft = checkpoint::load(&checkpoint_path(config, seed, "umft")).unwrap();
    let out = dir.join("merged.mmlf");
    checkpoint::export_merged(&trained, &out).unwrap();
    let merged = checkpoint::load(&out).unwrap();

    let dim = config.data.resolve(seed).unwrap().dim;
    let xs = [seeded_matrix(100, dim, 7, 3.0), seeded_matrix(100, dim, 8, 3.0)];
    let gap = max_gap(
        &ume_predict(&trained.models, &xs).unwrap(),
        &ume_predict(&merged.models, &xs).unwrap(),
    );

    let mut excess = 0.0f64;
    let mut nonzero = 0;
    for (m, (base, adapted)) in merged.models.iter().zip(umft.models.iter().zip(&trained.models)) {
        for ad in adapted.adapters() {
            let w0 = base.base_params().find(|p| p.name == ad.base_name).unwrap();
            let w = m.base_params().find(|p| p.name == ad.base_name).unwrap();
            let delta = w.value.sub(&w0.value).unwrap();
            let na = DMatrix::from_row_slice(delta.rows(), delta.cols(), delta.data());
            let mut sv: Vec<f64> = na.singular_values().iter().copied().collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            nonzero += usize::from(sv[0] > 1e-10);
            excess = sv.iter().skip(ad.rank).fold(excess, |m, &s| m.max(s));
        }
    }
    Verdict::new(
        gap <= 1e-8 && excess < 1e-10 && nonzero > 0,
        format!("max prediction gap {gap:.2e}; largest singular value beyond r {excess:.2e}; {nonzero} nonzero deltas"),
    )
}

fn freeze_integrity(config: &ExperimentConfig) -> Verdict {
    let mut checked = 0;
    let mut broken = Vec::new();
    for &seed in &config.seeds {
        let umft = checkpoint::load(&checkpoint_path(config, seed, "umft")).unwrap();
        let trained = checkpoint::load(&checkpoint_path(config, seed, "mmlora")).unwrap();
        for (before, after) in umft.models.iter().zip(&trained.models) {
            for p in after.base_params().filter(|p| p.frozen) {
                let q = before.base_params().find(|q| q.name == p.name).unwrap();
                checked += 1;
                if hash_params([p]) != hash_params([q]) {
                    broken.push(format!("seed{seed}/{}", p.name));
                }
            }
        }
        if trained.frozen_hash() != umft.base_hash() {
            broken.push(format!("seed{seed} bundle hash"));
        }
    }
    Verdict::new(broken.is_empty() && checked > 0, format!("{checked} frozen params checked, mismatches {broken:?}"))
}

fn parameter_efficiency() -> Verdict {
    let mut details = Vec::new();
    let mut pass = true;
    let mut shipped: Vec<PathBuf> = std::fs::read_dir(CONFIGS)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    shipped.sort();
    for path in shipped {
        let mut config = ExperimentConfig::load(&path).unwrap();
        config.mmlora.rank = 1;
        let archs = config.architectures(&config.data.resolve(0).unwrap());
        let base = TrainedBundle::pretrained_analog(&archs, &vec![0; archs.len()], Provenance::default()).unwrap();
        let attached = attach_adapters(&base.models, &config.mmlora, 0).unwrap();
        let expected: usize = attached
            .iter()
            .flat_map(|m| m.adapters())
            .map(|a| {
                let (d, k) = a.base_shape();
                d + k
            })
            .sum();
        let trainable: usize = attached.iter().map(|m| m.trainable_count()).sum();
        let total = base.param_count();
        let share = trainable as f64 / total as f64;
        pass &= trainable == expected && share < 0.05;
        details.push(format!(
            "{}: {trainable}/{total} = {:.2}%",
            path.file_stem().unwrap().to_string_lossy(),
            100.0 * share
        ));
    }
    Verdict::new(pass, details.join("; "))
}

fn laziness(report: &RunReport, elapsed: Duration) -> Verdict {
    let umft = mean(report, "umft", "linear_eval_m2");
    let fused = mean(report, "late_fusion", "linear_eval_m2");
    Verdict::new(
        umft - fused >= 2.0 && elapsed < Duration::from_secs(300),
        format!("weak-modality linear eval: umft {umft:.2} vs late fusion {fused:.2} (gap {:.2}); run took {elapsed:.1?}", umft - fused),
    )
}

fn ordering(report: &RunReport, mmlora: &str, ume: f64, late: f64) -> (bool, String) {
    let ours = mean(report, mmlora, "accuracy");
    (
        ours >= ume + 0.5 && ours >= late,
        format!("{mmlora} {ours:.2} vs ume {ume:.2} (+{:.2}) and late fusion {late:.2}", ours - ume),
    )
}

fn beats_ume(report: &RunReport, elapsed: Duration) -> Verdict {
    let (ok, detail) = ordering(
        report,
        "mmlora",
        mean(report, "ume", "accuracy"),
        mean(report, "late_fusion", "accuracy"),
    );
    Verdict::new(ok && elapsed < Duration::from_secs(600), detail)
}

fn encoder_preservation(report: &RunReport) -> Verdict {
    let mut pass = true;
    let mut details = Vec::new();
    for m in 1..=2 {
        let metric = format!("linear_eval_m{m}");
        let (ours, base) = (mean(report, "mmlora", &metric), mean(report, "umft", &metric));
        pass &= ours >= base - 1.0;
        details.push(format!("m{m}: mmlora {ours:.2} vs umft {base:.2}"));
    }
    Verdict::new(pass, details.join("; "))
}

fn umft_necessity(ablation: &RunReport) -> Verdict {
    let with = mean(ablation, "mmlora_both", "accuracy");
    let without = mean(ablation, "mmlora_wo_umft", "accuracy");
    Verdict::new(
        with - without >= 2.0,
        format!("with umft {with:.2} vs without {without:.2} (gap {:.2})", with - without),
    )
}

fn placement(ablation: &RunReport, main: &RunReport) -> Verdict {
    let ume = mean(ablation, "ume", "accuracy");
    let head = mean(ablation, "mmlora_head_only", "accuracy");
    let (ok, detail) = ordering(ablation, "mmlora_both", ume, mean(main, "late_fusion", "accuracy"));
    Verdict::new(
        (head - ume).abs() < 0.5 && ok,
        format!("head only {head:.2} vs ume {ume:.2}; encoder placement: {detail}"),
    )
}

fn rank_sweep(sweep: &RunReport, main: &RunReport, ranks: &[usize]) -> Verdict {
    let ume = mean(sweep, "ume", "accuracy");
    let (ok, detail) = ordering(sweep, "mmlora_r1", ume, mean(main, "late_fusion", "accuracy"));
    let mut cells = Vec::new();
    let mut emitted = true;
    for r in ranks {
        let name = format!("mmlora_r{r}");
        match sweep.mean(&name, "accuracy") {
            Some(v) => cells.push(format!("r{r} {v:.2}")),
            None => {
                let noted = sweep.notes.iter().any(|n| n.contains(&format!("rank {r}")));
                emitted &= noted;
                cells.push(format!("r{r} infeasible (noted: {noted})"));
            }
        }
    }
    Verdict::new(ok && emitted, format!("{detail}; sweep {}", cells.join(", ")))
}

fn persistence(config: &ExperimentConfig, first_csv: &[u8], rerun_root: &Path) -> Verdict {
    let mut files = 0;
    let mut broken = Vec::new();
    for &seed in &config.seeds {
        let dir = config.run_dir().join("checkpoints").join(format!("seed{seed}"));
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let bytes = std::fs::read(&path).unwrap();
            let bundle = checkpoint::decode(&bytes).unwrap();
            files += 1;
            if checkpoint::encode(&bundle, Dtype::F64).unwrap() != bytes {
                broken.push(path.display().to_string());
            }
        }
    }
    let archs = config.architectures(&config.data.resolve(0).unwrap());
    let pretrained = TrainedBundle::pretrained_analog(&archs, &[1, 2], Provenance::default()).unwrap();
    let bytes = checkpoint::encode(&pretrained, Dtype::F64).unwrap();
    if checkpoint::encode(&checkpoint::decode(&bytes).unwrap(), Dtype::F64).unwrap() != bytes {
        broken.push("pretrained analog".into());
    }

    let mut again = config.clone();
    again.output_dir = Some(rerun_root.to_path_buf());
    let report = harness::run(&again).unwrap();
    let csv = report.to_csv().unwrap();
    let identical = csv == first_csv;
    Verdict::new(
        broken.is_empty() && files > 0 && identical,
        format!("{files} checkpoints re-encode identically (failures {broken:?}); rerun CSV identical: {identical}"),
    )
}

#[test]
fn acceptance() {
    let root = tempfile::tempdir().unwrap();
    let mut verdicts: Vec<(u8, &str, Verdict)> = Vec::new();

    verdicts.push((1, "gradient correctness", gradient_correctness()));
    verdicts.push((5, "parameter efficiency", parameter_efficiency()));

    let config = load_config("laziness", &root.path().join("main"));
    let start = Instant::now();
    let main = harness::run(&config).unwrap();
    let elapsed = start.elapsed();
    let csv = main.to_csv().unwrap();
    emit_report(&main, &config.run_dir(), "results", &Format::ALL).unwrap();

    let mut shared = config.clone();
    shared.umft_from = Some(config.run_dir());
    shared.output_dir = Some(root.path().join("ablate"));
    let ablation = harness::ablation_suite(&shared).unwrap();
    let ranks = [1, 2, 4, 8, 64];
    shared.output_dir = Some(root.path().join("sweep"));
    let sweep = harness::rank_sweep(&shared, &ranks).unwrap();
    print!("{}\n{}\n{}", main.to_markdown(), ablation.to_markdown(), sweep.to_markdown());

    verdicts.push((2, "zero-delta start", zero_delta_start(&config)));
    verdicts.push((3, "merge equivalence", merge_equivalence(&config, root.path())));
    verdicts.push((4, "freeze integrity", freeze_integrity(&config)));
    verdicts.push((6, "modality laziness", laziness(&main, elapsed)));
    verdicts.push((7, "mmlora over ume and late fusion", beats_ume(&main, elapsed)));
    verdicts.push((8, "encoder preservation", encoder_preservation(&main)));
    verdicts.push((9, "umft necessity", umft_necessity(&ablation)));
    verdicts.push((10, "adapter placement", placement(&ablation, &main)));
    verdicts.push((11, "rank sweep", rank_sweep(&sweep, &main, &ranks)));
    verdicts.push((12, "persistence", persistence(&config, &csv, &root.path().join("rerun"))));
    verdicts.sort_by_key(|(id, ..)| *id);

    println!();
    for (id, name, v) in &verdicts {
        println!("{} {id:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed: Vec<u8> = verdicts.iter().filter(|(.., v)| !v.pass).map(|(id, ..)| *id).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
