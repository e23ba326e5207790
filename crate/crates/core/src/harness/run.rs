use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Pipeline};
use crate::harness::report::{RunReport, Section, Timing};
use crate::nn::{LoraSelection, Placement};
use crate::seed::derive_seed;
use crate::synthdata::{generate, Splits};
use crate::training::{
    evaluate, joint_full_finetune, linear_eval, mmlora_train, train_late_fusion, umft_bundle, FitSummary, FusionHead,
    MmloraOptions, OptimizerConfig, Predictor, Provenance, Stage, TrainedBundle,
};

fn pct(fraction: f64) -> f64 {
    fraction * 100.0
}

/// Optimizer settings for one pipeline and run seed. The configured seed is
/// mixed in so it still selects among runs.
fn seeded(opt: &OptimizerConfig, seed: u64, name: &str) -> OptimizerConfig {
    opt.clone().with_seed(derive_seed(seed, &format!("optim/{name}/{}", opt.seed)))
}

/// Per-seed state shared by every pipeline of that seed.
struct SeedContext<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    splits: Splits,
    pretrained: TrainedBundle,
    ckpt_dir: PathBuf,
    report: RunReport,
}

impl<'a> SeedContext<'a> {
    fn new(config: &'a ExperimentConfig, seed: u64) -> Result<Self> {
        let data = config.data.resolve(seed)?;
        let splits = generate(&data)?;
        let archs = config.architectures(&data);
        let init: Vec<u64> = (1..=archs.len()).map(|id| derive_seed(seed, &format!("init/m{id}"))).collect();
        let provenance = Provenance {
            config_hash: config.hash(),
            seeds: vec![seed],
            note: config.name.clone(),
        };
        let pretrained = TrainedBundle::pretrained_analog(&archs, &init, provenance)?;
        Ok(Self {
            config,
            seed,
            splits,
            pretrained,
            ckpt_dir: config.run_dir().join("checkpoints").join(format!("seed{seed}")),
            report: RunReport::default(),
        })
    }

    fn timed<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        info!("seed {}: {name}", self.seed);
        let out = f(self)?;
        self.report.timings.push(Timing {
            pipeline: name.to_string(),
            seed: self.seed,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn save(&self, name: &str, bundle: &TrainedBundle) -> Result<()> {
        checkpoint::save(bundle, &self.ckpt_dir.join(format!("{name}.mmlf")))
    }

    fn push(&mut self, pipeline: &str, metric: &str, value: f64) {
        self.report.push(pipeline, self.seed, metric, value);
    }

    fn record_fit(&mut self, name: &str, bundle: &TrainedBundle, summary: &FitSummary) {
        self.push(name, "trainable_params", bundle.trainable_count() as f64);
        self.push(name, "best_epoch", summary.best_epoch as f64);
    }

    fn record_per_modality(&mut self, name: &str, bundle: &TrainedBundle) -> Result<()> {
        for m in &bundle.models {
            let acc = evaluate(Predictor::Single(m), &self.splits.test)?;
            self.push(name, &format!("accuracy_m{}", m.modality()), pct(acc));
        }
        Ok(())
    }

    fn umft(&mut self) -> Result<TrainedBundle> {
        let name = Pipeline::Umft.as_str();
        if let Some(prior) = &self.config.umft_from {
            let path = prior.join("checkpoints").join(format!("seed{}", self.seed)).join("umft.mmlf");
            let bundle = checkpoint::load(&path)?;
            bundle.expect_stage(Stage::Umft)?;
            info!("seed {}: umft loaded from {}", self.seed, path.display());
            return Ok(bundle);
        }
        let opt = seeded(&self.config.optim.umft, self.seed, name);
        self.timed(name, |ctx| {
            let bundle = umft_bundle(&ctx.pretrained, &ctx.splits.train, &ctx.splits.val, &opt)?;
            ctx.save(name, &bundle)?;
            ctx.record_per_modality(name, &bundle)?;
            ctx.push(name, "trainable_params", bundle.trainable_count() as f64);
            Ok(bundle)
        })
    }

    fn ume(&mut self, name: &str, umft: &TrainedBundle) -> Result<()> {
        let acc = evaluate(Predictor::Ensemble(&umft.models), &self.splits.test)?;
        self.push(name, "accuracy", pct(acc));
        Ok(())
    }

    fn late_fusion(&mut self) -> Result<TrainedBundle> {
        let name = Pipeline::LateFusion.as_str();
        let opt = seeded(&self.config.optim.late_fusion, self.seed, name);
        self.timed(name, |ctx| {
            let widths: Vec<usize> = ctx.pretrained.models.iter().map(|m| m.feature_width()).collect();
            let head = FusionHead::new(&widths, ctx.pretrained.classes(), derive_seed(ctx.seed, "fusion/head"));
            let (mut bundle, summary) =
                train_late_fusion(&ctx.pretrained.models, head, &ctx.splits.train, &ctx.splits.val, &opt)?;
            bundle.provenance = ctx.pretrained.provenance.clone();
            let predictor = Predictor::LateFusion {
                models: &bundle.models,
                head: bundle.fusion_head.as_ref().expect("late fusion has a head"),
            };
            let acc = evaluate(predictor, &ctx.splits.test)?;
            ctx.push(name, "accuracy", pct(acc));
            ctx.record_fit(name, &bundle, &summary);
            ctx.save(name, &bundle)?;
            Ok(bundle)
        })
    }

    fn mmlora(&mut self, name: &str, source: &TrainedBundle, opts: &MmloraOptions) -> Result<TrainedBundle> {
        let opt = seeded(&self.config.optim.mmlora, self.seed, Pipeline::Mmlora.as_str());
        self.timed(name, |ctx| {
            let (bundle, summary) = mmlora_train(source, opts, &ctx.splits.train, &ctx.splits.val, &opt)?;
            let acc = evaluate(Predictor::Ensemble(&bundle.models), &ctx.splits.test)?;
            ctx.push(name, "accuracy", pct(acc));
            ctx.record_per_modality(name, &bundle)?;
            ctx.record_fit(name, &bundle, &summary);
            ctx.save(name, &bundle)?;
            Ok(bundle)
        })
    }

    fn joint_full_ft(&mut self, umft: &TrainedBundle) -> Result<TrainedBundle> {
        let name = Pipeline::JointFullFt.as_str();
        let opt = seeded(&self.config.optim.joint_full_ft, self.seed, name);
        self.timed(name, |ctx| {
            let (bundle, summary) = joint_full_finetune(umft, &ctx.splits.train, &ctx.splits.val, &opt)?;
            let acc = evaluate(Predictor::Ensemble(&bundle.models), &ctx.splits.test)?;
            ctx.push(name, "accuracy", pct(acc));
            ctx.record_per_modality(name, &bundle)?;
            ctx.record_fit(name, &bundle, &summary);
            ctx.save(name, &bundle)?;
            Ok(bundle)
        })
    }

    /// Linear probes of every encoder in every bundle trained so far, reported
    /// under the bundle's own pipeline name.
    fn linear_eval_suite(&mut self, bundles: &[(&str, &TrainedBundle)]) -> Result<()> {
        let opt = self.config.optim.linear_eval.clone();
        self.timed(Pipeline::LinearEvalSuite.as_str(), |ctx| {
            for (name, bundle) in bundles {
                for m in &bundle.models {
                    let id = m.modality();
                    let probe = opt.clone().with_seed(derive_seed(ctx.seed, &format!("probe/m{id}/{}", opt.seed)));
                    let acc = linear_eval(m, &ctx.splits.train, &ctx.splits.val, &ctx.splits.test, &probe)?;
                    ctx.push(name, &format!("linear_eval_m{id}"), pct(acc));
                }
            }
            Ok(())
        })
    }
}

/// Runs `cell` once per seed, concurrently, and merges the per-seed reports
/// in seed order.
fn per_seed(config: &ExperimentConfig, title: &str, cell: impl Fn(&mut SeedContext) -> Result<()> + Sync) -> Result<RunReport> {
    config.validate()?;
    let run_dir = config.run_dir();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    write_config_echo(config, &run_dir)?;
    let results: Vec<Result<RunReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = config
            .seeds
            .iter()
            .map(|&seed| {
                let cell = &cell;
                scope.spawn(move || {
                    let mut ctx = SeedContext::new(config, seed)?;
                    cell(&mut ctx)?;
                    Ok(ctx.report)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    let mut report = RunReport::new(title);
    report.config = serde_json::to_value(config).map_err(|source| Error::Json {
        context: "config echo".into(),
        source,
    })?;
    report.run_dir = run_dir;
    for r in results {
        report.merge(r?);
    }
    report.group_by_pipeline();
    Ok(report)
}

fn write_config_echo(config: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let path = run_dir.join("config.json");
    let text = serde_json::to_string_pretty(config).map_err(|source| Error::Json {
        context: "config echo".into(),
        source,
    })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Executes the configured pipelines for every seed in dependency order.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    let schedule = config.schedule();
    per_seed(config, &config.name, |ctx| {
        let mut umft = None;
        let mut trained: Vec<(&str, TrainedBundle)> = Vec::new();
        let needs_umft = schedule.iter().any(|p| p.needs_umft() || *p == Pipeline::Umft);
        if needs_umft {
            let b = ctx.umft()?;
            if schedule.contains(&Pipeline::Umft) {
                trained.push((Pipeline::Umft.as_str(), b.clone()));
            }
            umft = Some(b);
        }
        for &p in &schedule {
            match p {
                Pipeline::Umft => {}
                Pipeline::LateFusion => trained.push((p.as_str(), ctx.late_fusion()?)),
                Pipeline::Ume => ctx.ume(p.as_str(), umft.as_ref().expect("scheduled"))?,
                Pipeline::Mmlora => {
                    let opts = ctx.config.mmlora.clone();
                    let b = ctx.mmlora(p.as_str(), umft.as_ref().expect("scheduled"), &opts)?;
                    trained.push((p.as_str(), b));
                }
                Pipeline::JointFullFt => trained.push((p.as_str(), ctx.joint_full_ft(umft.as_ref().expect("scheduled"))?)),
                Pipeline::LinearEvalSuite => {
                    if trained.is_empty() {
                        if let Some(b) = &umft {
                            trained.push((Pipeline::Umft.as_str(), b.clone()));
                        }
                    }
                    let refs: Vec<(&str, &TrainedBundle)> = trained.iter().map(|(n, b)| (*n, b)).collect();
                    ctx.linear_eval_suite(&refs)?;
                }
            }
        }
        Ok(())
    })
}

/// Ranks as given, minus repeats.
pub fn dedupe_ranks(ranks: &[usize]) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &r in ranks {
        if seen.insert(r) {
            out.push(r);
        } else {
            warn!("rank {r} listed more than once; running it once");
        }
    }
    out
}

/// One MMLoRA run per rank on shared UMFT bundles, plus the UME reference.
/// Ranks no adapted matrix can hold are reported as notes, not failures.
pub fn rank_sweep(config: &ExperimentConfig, ranks: &[usize]) -> Result<RunReport> {
    if ranks.is_empty() {
        return Err(Error::config("ranks", "must list at least one rank"));
    }
    if ranks.contains(&0) {
        return Err(Error::config("ranks", "every rank must be at least 1"));
    }
    let ranks = dedupe_ranks(ranks);
    let mut report = per_seed(config, &format!("{} rank sweep", config.name), |ctx| {
        let umft = ctx.umft()?;
        ctx.ume("ume", &umft)?;
        for &rank in &ranks {
            let opts = MmloraOptions {
                rank,
                ..ctx.config.mmlora.clone()
            };
            match ctx.mmlora(&format!("mmlora_r{rank}"), &umft, &opts) {
                Ok(_) => {}
                Err(Error::RankTooLarge { name, bound, .. }) => {
                    ctx.report.notes.push(format!(
                        "seed {}: rank {rank} not run, `{name}` allows at most rank {bound}",
                        ctx.seed
                    ));
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    })?;
    collapse_notes(&mut report);
    Ok(report)
}

/// Ablation arm names, in table order.
pub const ABLATION_CELLS: [&str; 7] = [
    "ume",
    "mmlora_m1",
    "mmlora_m2",
    "mmlora_both",
    "mmlora_wo_umft",
    "mmlora_head_only",
    "mmlora_encoder_and_head",
];

/// Modality selection, with and without unimodal fine-tuning, and adapter
/// placement, all on shared UMFT bundles. `mmlora_both` is the configured
/// placement applied to every modality.
pub fn ablation_suite(config: &ExperimentConfig) -> Result<RunReport> {
    let data = config.data.resolve(0)?;
    if data.modalities != 2 {
        return Err(Error::config("data.modalities", "ablations need exactly two modalities"));
    }
    let mut report = per_seed(config, &format!("{} ablations", config.name), |ctx| {
        let umft = ctx.umft()?;
        ctx.ume("ume", &umft)?;
        let base = ctx.config.mmlora.clone();
        let placement = base.selection.placement;
        let with = |modalities: &[usize], placement: Placement| MmloraOptions {
            selection: LoraSelection::new(modalities.iter().copied(), placement),
            ..base.clone()
        };
        ctx.mmlora("mmlora_m1", &umft, &with(&[1], placement))?;
        ctx.mmlora("mmlora_m2", &umft, &with(&[2], placement))?;
        ctx.mmlora("mmlora_both", &umft, &with(&[1, 2], placement))?;
        let pretrained = ctx.pretrained.clone();
        let wo = MmloraOptions {
            allow_pretrained: true,
            ..with(&[1, 2], placement)
        };
        ctx.mmlora("mmlora_wo_umft", &pretrained, &wo)?;
        ctx.mmlora("mmlora_head_only", &umft, &with(&[1, 2], Placement::HeadOnly))?;
        ctx.mmlora("mmlora_encoder_and_head", &umft, &with(&[1, 2], Placement::EncoderAndHead))?;
        Ok(())
    })?;
    let cells = |names: &[&str]| names.iter().map(|n| n.to_string()).collect::<Vec<_>>();
    report.sections = vec![
        Section {
            title: "Modality selection".into(),
            pipelines: cells(&ABLATION_CELLS[..4]),
        },
        Section {
            title: "Unimodal fine-tuning".into(),
            pipelines: cells(&["mmlora_both", "mmlora_wo_umft"]),
        },
        Section {
            title: "Adapter placement".into(),
            pipelines: cells(&["mmlora_head_only", "mmlora_both", "mmlora_encoder_and_head"]),
        },
    ];
    Ok(report)
}

/// Identical per-seed notes become one note.
fn collapse_notes(report: &mut RunReport) {
    let mut seen = BTreeSet::new();
    let mut notes = Vec::new();
    for n in report.notes.drain(..) {
        let key = n.split_once(": ").map_or(n.clone(), |(_, rest)| rest.to_string());
        if seen.insert(key.clone()) {
            notes.push(key);
        }
    }
    report.notes = notes;
}
