//! The six subcommands. Each validates its configuration, runs, writes CSV
//! and JSON results plus a manifest into the output directory, and returns
//! the rows it wrote.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use splitguard::attacks::{evaluate_attack_suite, AttackReport, AttackTarget};
use splitguard::benchmark::{
    checkpoint_records, export_run, load_checkpoint, read_benchmark, to_bytes, BenchmarkRecord,
};
use splitguard::data::{generate_synthetic, load_cifar_binary, Dataset};
use splitguard::mi::{check_dpi_chain, check_post_pruning_bound, DiscreteSystem, DpiReport, EntropyReport, PruneMode};
use splitguard::pipeline::{DefenseMode, SplitPipeline};
use splitguard::training::{
    evaluate_utility, phase1_train_utility, phase2_train_filter, sweep_pruning_ratio, Retrain, SweepRow, TrainReport,
};

use crate::config::{kind_name, Command, DataConfig, DataSource, ExperimentConfig, RawConfig};
use crate::output::{Manifest, RunOutput};

/// What a command wrote: its manifest and result rows.
#[derive(Clone, Debug)]
pub struct Outcome<T> {
    pub manifest: Manifest,
    pub rows: T,
}

/// Train, auxiliary (attacker) and test partitions, in that order.
pub struct Splits {
    pub train: Dataset,
    pub aux: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &DataConfig) -> Result<Splits> {
    let total = cfg.train + cfg.aux + cfg.test;
    let all = match &cfg.source {
        DataSource::Synthetic(s) => generate_synthetic(s, total)?,
        DataSource::Cifar(path) => {
            load_cifar_binary(path).with_context(|| format!("loading {}", path.display()))?
        }
    };
    if all.len() < total {
        bail!("dataset has {} samples, the split needs {total}", all.len());
    }
    let (train, rest) = all.split_at(cfg.train);
    let (aux, rest) = rest.split_at(cfg.aux);
    let (test, _) = rest.split_at(cfg.test);
    Ok(Splits { train, aux, test })
}

/// Fraction of the most frequent task label.
pub fn chance_level(data: &Dataset) -> f64 {
    let mut counts = vec![0usize; data.task_classes];
    for &y in data.task_labels() {
        counts[y] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0);
    if data.is_empty() {
        0.0
    } else {
        top as f64 / data.len() as f64
    }
}

fn train_pipeline(cfg: &ExperimentConfig, data: &Dataset) -> Result<(SplitPipeline, TrainReport)> {
    let mut p = SplitPipeline::new(cfg.pipeline.clone())?;
    let mut report = phase1_train_utility(&mut p, data, &cfg.train).context("phase 1")?;
    if cfg.train.phase2_epochs > 0 {
        let (r, _) = phase2_train_filter(&mut p, data, &cfg.train).context("phase 2")?;
        report.extend(r);
    }
    Ok((p, report))
}

/// Loads the configured checkpoint, or trains from scratch without one.
fn prepare_pipeline(cfg: &ExperimentConfig, splits: &Splits, out: &mut RunOutput) -> Result<SplitPipeline> {
    match &cfg.checkpoint {
        Some(path) => {
            let mut p = SplitPipeline::new(cfg.pipeline.clone())?;
            let records = read_benchmark(path).with_context(|| format!("reading {}", path.display()))?;
            load_checkpoint(&mut p, &records)?;
            out.record_input(path)?;
            Ok(p)
        }
        None => Ok(train_pipeline(cfg, &splits.train)?.0),
    }
}

fn begin(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(Splits, RunOutput)> {
    let data = cfg
        .data
        .as_ref()
        .context("this command needs a dataset; set data.source")?;
    let mut out = RunOutput::create(out_dir)?;
    if let DataSource::Cifar(path) = &data.source {
        out.record_input(path)?;
    }
    Ok((load_data(data)?, out))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub chance: f64,
    pub utility_none: f64,
    /// Utility under the configured defense and ratio.
    pub utility_defended: f64,
    pub defense: String,
    pub ratio: f64,
    pub epochs: usize,
}

pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Outcome<TrainSummary>> {
    let (splits, mut out) = begin(cfg, out_dir)?;
    let (p, report) = train_pipeline(cfg, &splits.train)?;
    let summary = TrainSummary {
        chance: chance_level(&splits.test),
        utility_none: evaluate_utility(&p, &splits.test, DefenseMode::None, p.cfg.ratio, cfg.seed)?,
        utility_defended: evaluate_utility(&p, &splits.test, p.cfg.defense, p.cfg.ratio, cfg.seed)?,
        defense: p.cfg.defense.to_string(),
        ratio: p.cfg.ratio,
        epochs: report.epochs.len(),
    };
    out.write_text("train_epochs.csv", &report.epochs_csv())?;
    let mut steps = String::from("phase,epoch,step,l_util,l_priv,l_joint\n");
    for s in &report.steps {
        steps.push_str(&format!(
            "{},{},{},{:.9},{:.9},{:.9}\n",
            s.phase, s.epoch, s.step, s.l_util, s.l_priv, s.l_joint
        ));
    }
    out.write_text("train_steps.csv", &steps)?;
    out.write_json("train_summary.json", &summary)?;
    out.write("checkpoint.dibm", &to_bytes(&checkpoint_records(&p))?)?;
    Ok(Outcome {
        manifest: out.finish(cfg)?,
        rows: summary,
    })
}

const ATTACK_HEADER: &str = "kind,mode,defense,ratio,ssim_mean,ssim_std,psnr_mean,psnr_std,l1_mean,l1_std,accuracy\n";

fn attack_line(r: &AttackReport) -> String {
    let recon = !r.samples.is_empty();
    let m = |v: f64| if recon { format!("{v:.9}") } else { String::new() };
    format!(
        "{},{},{},{:.4},{},{},{},{},{},{},{}\n",
        kind_name(r.kind),
        r.mode,
        r.defense,
        r.ratio,
        m(r.ssim_mean),
        m(r.ssim_std),
        m(r.psnr_mean),
        m(r.psnr_std),
        m(r.l1_mean),
        m(r.l1_std),
        opt(r.accuracy)
    )
}

pub fn cmd_attack(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Outcome<Vec<AttackReport>>> {
    let (splits, mut out) = begin(cfg, out_dir)?;
    let p = prepare_pipeline(cfg, &splits, &mut out)?;
    let target = AttackTarget {
        pipeline: &p,
        defense: p.cfg.defense,
        ratio: p.cfg.ratio,
        aux: &splits.aux,
        test: &splits.test,
        seed: cfg.seed,
    };
    let reports = evaluate_attack_suite(&target, &cfg.attacks)?;
    let mut csv = String::from(ATTACK_HEADER);
    let mut jsonl = String::new();
    for r in &reports {
        csv.push_str(&attack_line(r));
        jsonl.push_str(&r.to_json_line());
        jsonl.push('\n');
        let kind = kind_name(r.kind);
        for (i, img) in r.reconstructions.iter().take(cfg.images).enumerate() {
            out.write_image(&format!("{kind}_x{i}.ppm"), &splits.test.get(i).image)?;
            out.write_image(&format!("{kind}_recon{i}.ppm"), img)?;
        }
    }
    out.write_text("attack.csv", &csv)?;
    out.write_text("attack.jsonl", &jsonl)?;
    Ok(Outcome {
        manifest: out.finish(cfg)?,
        rows: reports,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSummary {
    pub chance: f64,
    pub rows: Vec<SweepRow>,
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Outcome<SweepSummary>> {
    let (splits, mut out) = begin(cfg, out_dir)?;
    let p = prepare_pipeline(cfg, &splits, &mut out)?;
    let retrain = Retrain {
        data: &splits.train,
        epochs: cfg.sweep_retrain_epochs,
        cfg: &cfg.train,
    };
    let rows = sweep_pruning_ratio(
        &p,
        &splits.aux,
        &splits.test,
        &cfg.sweep_ratios,
        &cfg.attacks,
        (cfg.sweep_retrain_epochs > 0).then_some(&retrain),
        cfg.seed,
    )?;
    let mut csv = format!("{}\n", SweepRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    let summary = SweepSummary {
        chance: chance_level(&splits.test),
        rows,
    };
    out.write_text("sweep.csv", &csv)?;
    out.write_json("sweep_summary.json", &summary)?;
    Ok(Outcome {
        manifest: out.finish(cfg)?,
        rows: summary,
    })
}

/// One analysed discrete system.
#[derive(Clone, Debug, Serialize)]
pub struct MiRecord {
    pub seed: u64,
    pub system: DiscreteSystem,
    pub dpi: DpiReport,
    pub pruning: EntropyReport,
}

impl MiRecord {
    pub fn passed(&self) -> bool {
        self.dpi.passed() && self.pruning.passed()
    }
}

pub fn cmd_mi(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Outcome<Vec<MiRecord>>> {
    let mi = cfg.mi.as_ref().context("set mi.systems")?;
    let mut out = RunOutput::create(out_dir)?;
    let mut records = Vec::new();
    let mut csv = String::from(
        "seed,x_size,layers,prune_mode,keep_prob,i_x_f,i_x_fp,decrease,stated_bound,passed,stated_bound_holds\n",
    );
    let mut jsonl = String::new();
    for k in 0..mi.systems {
        let seed = cfg.seed.wrapping_add(k);
        let mut system = DiscreteSystem::random(seed, mi.max_x, mi.max_layers);
        if let Some(p) = mi.keep_prob {
            system.keep_prob = p;
        }
        let rec = MiRecord {
            seed,
            dpi: check_dpi_chain(&system),
            pruning: check_post_pruning_bound(&system),
            system,
        };
        let mode = match rec.system.mode {
            PruneMode::WholeLayer => "whole_layer",
            PruneMode::PerChannel { .. } => "per_channel",
        };
        csv.push_str(&format!(
            "{},{},{},{},{:.9},{:.12},{:.12},{:.12},{:.12},{},{}\n",
            seed,
            rec.system.pmf.len(),
            rec.system.layers.len(),
            mode,
            rec.system.keep_prob,
            rec.pruning.i_x_f,
            rec.pruning.i_x_fp,
            rec.pruning.decrease,
            rec.pruning.stated_bound,
            rec.passed(),
            rec.pruning.stated_bound_holds
        ));
        jsonl.push_str(&serde_json::to_string(&rec)?);
        jsonl.push('\n');
        records.push(rec);
    }
    out.write_text("mi.csv", &csv)?;
    out.write_text("mi.jsonl", &jsonl)?;
    Ok(Outcome {
        manifest: out.finish(cfg)?,
        rows: records,
    })
}

pub const BENCHMARK_FILE: &str = "benchmark.dibm";

/// Writes the pipeline weights followed by `export.n` encoded test samples.
pub fn cmd_export(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Outcome<Vec<BenchmarkRecord>>> {
    let (splits, mut out) = begin(cfg, out_dir)?;
    let p = prepare_pipeline(cfg, &splits, &mut out)?;
    let samples = export_run(
        &p,
        &splits.test,
        cfg.export_n,
        p.cfg.defense,
        p.cfg.ratio,
        cfg.seed,
        &cfg.export_dataset_id,
    )?;
    let mut csv = String::from("id,defense,y,y_hat\n");
    for r in &samples {
        csv.push_str(&format!("{},{},{},{}\n", r.id, r.defense_id, r.y, r.y_hat));
    }
    let mut records = checkpoint_records(&p);
    records.extend(samples);
    out.write(BENCHMARK_FILE, &to_bytes(&records)?)?;
    out.write_text("export.csv", &csv)?;
    Ok(Outcome {
        manifest: out.finish(cfg)?,
        rows: records,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub defense: String,
    pub ratio: f64,
    pub noise_std: Option<f32>,
    pub utility: f64,
    pub leakage: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub ssim_std: Option<f64>,
    pub psnr_mean: Option<f64>,
    pub psnr_std: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub chance: f64,
    pub rows: Vec<EvalRow>,
}

/// Utility and attack metrics for every configured defense. With
/// `eval.noise_stds`, the Gaussian baseline is evaluated once per value.
/// Metric columns come from the first leakage and first reconstruction
/// attack listed.
pub fn cmd_eval(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Outcome<EvalSummary>> {
    let (splits, mut out) = begin(cfg, out_dir)?;
    let p = prepare_pipeline(cfg, &splits, &mut out)?;
    let mut rows = Vec::new();
    for &defense in &cfg.eval_defenses {
        let stds: Vec<Option<f32>> = if defense == DefenseMode::GaussianNoise && !cfg.eval_noise_stds.is_empty() {
            cfg.eval_noise_stds.iter().map(|&s| Some(s)).collect()
        } else {
            vec![None]
        };
        for std in stds {
            let mut q = p.clone();
            if let Some(s) = std {
                q.cfg.noise.std = s;
            }
            let ratio = q.cfg.ratio;
            let utility = evaluate_utility(&q, &splits.test, defense, ratio, cfg.seed)?;
            let target = AttackTarget {
                pipeline: &q,
                defense,
                ratio,
                aux: &splits.aux,
                test: &splits.test,
                seed: cfg.seed,
            };
            let mut row = EvalRow {
                defense: defense.to_string(),
                ratio,
                noise_std: (defense == DefenseMode::GaussianNoise).then_some(q.cfg.noise.std),
                utility,
                leakage: None,
                ssim_mean: None,
                ssim_std: None,
                psnr_mean: None,
                psnr_std: None,
            };
            for r in evaluate_attack_suite(&target, &cfg.attacks)? {
                match r.accuracy {
                    Some(a) => row.leakage = row.leakage.or(Some(a)),
                    None if row.ssim_mean.is_none() => {
                        row.ssim_mean = Some(r.ssim_mean);
                        row.ssim_std = Some(r.ssim_std);
                        row.psnr_mean = Some(r.psnr_mean);
                        row.psnr_std = Some(r.psnr_std);
                    }
                    None => {}
                }
            }
            rows.push(row);
        }
    }
    let mut csv = String::from("defense,ratio,noise_std,utility,leakage,ssim_mean,ssim_std,psnr_mean,psnr_std\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.4},{},{:.9},{},{},{},{},{}\n",
            r.defense,
            r.ratio,
            r.noise_std.map(|s| s.to_string()).unwrap_or_default(),
            r.utility,
            opt(r.leakage),
            opt(r.ssim_mean),
            opt(r.ssim_std),
            opt(r.psnr_mean),
            opt(r.psnr_std)
        ));
    }
    let summary = EvalSummary {
        chance: chance_level(&splits.test),
        rows,
    };
    out.write_text("eval.csv", &csv)?;
    out.write_json("eval_summary.json", &summary)?;
    Ok(Outcome {
        manifest: out.finish(cfg)?,
        rows: summary,
    })
}

/// Resolves `raw` for `command` and runs it, returning the manifest.
pub fn run(command: Command, raw: &RawConfig, out_dir: &Path) -> Result<Manifest> {
    let cfg = ExperimentConfig::resolve(raw, command)?;
    Ok(match command {
        Command::Train => cmd_train(&cfg, out_dir)?.manifest,
        Command::Attack => cmd_attack(&cfg, out_dir)?.manifest,
        Command::Sweep => cmd_sweep(&cfg, out_dir)?.manifest,
        Command::Mi => cmd_mi(&cfg, out_dir)?.manifest,
        Command::Export => cmd_export(&cfg, out_dir)?.manifest,
        Command::Eval => cmd_eval(&cfg, out_dir)?.manifest,
    })
}
