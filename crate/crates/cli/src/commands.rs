use std::path::Path;
use std::process::ExitCode;

use rayon::prelude::*;

use pcgans_core::autodiff::gradcheck::GradReport;
use pcgans_core::checkpoint::Checkpoint;
use pcgans_core::dataset::{self, ManifestEntry, Split as DataSplit};
use pcgans_core::error::{Error, Result};
use pcgans_core::gradsuite::{self, Settings as GradSettings};
use pcgans_core::io::{read_psr, write_composite_png, write_error_png, write_log_csv, write_metrics_csv, write_psr};
use pcgans_core::metrics::{self, MetricReport, NoReference, Reduced, DEFAULT_WINDOW};
use pcgans_core::model::{average_fusion, FuseMode};
use pcgans_core::raster::{error_map, Raster, Sample};
use pcgans_core::resample::{binomial5, exp_kernel, exp_upsample, kernel_table_csv, mtf_gaussian_kernel, MtfGains};
use pcgans_core::synth::SceneSpec;
use pcgans_core::trainer::{TrainConfig, Trainer};

use crate::config::{resolve, write_resolved, RESOLVED};
use crate::{
    Baseline, Cli, Command, DegradeArgs, EvalArgs, FuseArgs, GradcheckArgs, Mode, Precision, RefineArgs, Resolution,
    Settings, Split, SynthArgs, TrainArgs,
};

/// Nyquist gain of the simulated MS sensor.
const MS_GAIN: f64 = 0.30;
/// Bands shown in PNG composites (1-based).
const RGB: [usize; 3] = [3, 2, 1];
const CHECKPOINT: &str = "checkpoint.pcgk";

pub fn dispatch(cli: Cli) -> Result<ExitCode> {
    let out_dir = match &cli.command {
        Some(Command::Synth(a)) => Some(a.out.clone()),
        Some(Command::Degrade(a)) => Some(a.out.clone()),
        Some(Command::Train(a) | Command::Ablate(a)) => Some(a.out.clone()),
        Some(Command::Fuse(a)) => Some(a.out.clone()),
        Some(Command::Refine(a)) => Some(a.out.clone()),
        Some(Command::Eval(a)) => Some(a.out.clone()),
        Some(Command::Gradcheck(a)) => a.out.clone(),
        None => None,
    };
    if cli.dump_kernels {
        dump_kernels(out_dir.as_deref())?;
    }
    let outcome = match cli.command {
        None if cli.dump_kernels => Ok(()),
        None => Err(Error::InvalidArgument("no command given; see --help".into()).into()),
        Some(Command::Synth(a)) => synth(a),
        Some(Command::Degrade(a)) => degrade(a),
        Some(Command::Train(a)) => train(a),
        Some(Command::Fuse(a)) => fuse(a),
        Some(Command::Refine(a)) => refine(a),
        Some(Command::Eval(a)) => eval(a),
        Some(Command::Ablate(a)) => ablate(a),
        Some(Command::Gradcheck(a)) => gradcheck(a),
    };
    match outcome {
        Ok(()) => Ok(ExitCode::SUCCESS),
        Err(Failure::Error(e)) => Err(e),
        Err(Failure::Status(code)) => Ok(ExitCode::from(code)),
    }
}

/// A command either fails with an error or finishes with a nonzero status.
enum Failure {
    Error(Error),
    Status(u8),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn dump_kernels(out: Option<&Path>) -> Result<()> {
    let exp = exp_kernel();
    let binomial = binomial5();
    let ms = mtf_gaussian_kernel(MS_GAIN, 4)?;
    let pan = mtf_gaussian_kernel(0.15, 4)?;
    let csv = kernel_table_csv(&[("exp", &exp), ("binomial5", &binomial), ("mtf_ms", &ms), ("mtf_pan", &pan)]);
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("kernels.csv"), csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Outcome {
    let spec = SceneSpec { size: a.size, seed: a.seed, ..SceneSpec::default() };
    spec.validate()?;
    let entries = dataset::plan(a.seed, a.train, a.test);
    dataset::write_corpus(&a.out, &spec, &entries)?;
    eprintln!("wrote {} scenes to {}", entries.len(), a.out.display());
    Ok(())
}

fn degrade(a: DegradeArgs) -> Outcome {
    let cfg = TrainConfig::default();
    dataset::write_degraded(&a.data, &a.out, cfg.model.ratio, &gains(&cfg))?;
    Ok(())
}

fn gains(cfg: &TrainConfig) -> MtfGains {
    MtfGains { pan: cfg.model.pan_gain, ms: vec![MS_GAIN; cfg.model.bands] }
}

/// Overrides in precedence order: `--set` pairs first, dedicated flags last.
fn overrides(s: &Settings) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &s.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    flag("seed", s.seed.map(|v| v.to_string()));
    flag("epochs", s.epochs.map(|v| v.to_string()));
    flag("batch", s.batch.map(|v| v.to_string()));
    flag("lr", s.lr.map(|v| v.to_string()));
    flag("lambda1", s.lambda1.map(|v| v.to_string()));
    flag("lambda2", s.lambda2.map(|v| v.to_string()));
    flag("radius", s.radius.map(|v| v.to_string()));
    flag("guided_lambda", s.guided_lambda.map(|v| v.to_string()));
    flag("nblocks", s.nblocks.map(|v| v.to_string()));
    flag("case", s.case.map(|v| v.to_string()));
    flag("dmg_adv_joint", s.dmg_adv_joint.then(|| "true".to_string()));
    Ok(out)
}

fn settings(s: &Settings) -> Result<TrainConfig> {
    resolve(s.config.as_deref(), &overrides(s)?)
}

/// Settings that accompany a checkpoint: the given file, or the
/// `config.resolved` written next to it by `train`.
fn checkpoint_settings(explicit: Option<&Path>, checkpoint: &Path) -> Result<TrainConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(RESOLVED),
    };
    resolve(Some(&path), &[])
}

fn load_trainer(explicit: Option<&Path>, checkpoint: &Path) -> Result<Trainer> {
    let cfg = checkpoint_settings(explicit, checkpoint)?;
    Trainer::resume(cfg, &Checkpoint::load(checkpoint)?)
}

fn wanted(split: Split, e: &ManifestEntry) -> bool {
    match split {
        Split::All => true,
        Split::Train => e.split == DataSplit::Train,
        Split::Test => e.split == DataSplit::Test,
    }
}

/// Named samples of one split at the requested resolution.
fn load(data: &Path, split: Split, resolution: Resolution, cfg: &TrainConfig) -> Result<Vec<(String, Sample)>> {
    let ratio = cfg.model.ratio;
    let g = gains(cfg);
    dataset::read_manifest(data)?
        .into_iter()
        .filter(|e| wanted(split, e))
        .map(|e| {
            let s = match resolution {
                Resolution::Reduced => dataset::read_reduced(data, &e.id, ratio, &g)?,
                Resolution::Full => {
                    let s = dataset::read_scene(data, &e.id, ratio)?;
                    if s.reference.is_some() {
                        return Err(Error::InvalidArgument(format!(
                            "{} is a degraded corpus; full-resolution assessment needs the original scenes",
                            data.display()
                        )));
                    }
                    s
                }
            };
            Ok((e.id, s))
        })
        .collect()
}

fn fuse_mode(m: Mode) -> FuseMode {
    match m {
        Mode::Dmg => FuseMode::Prefusion,
        Mode::Full => FuseMode::Full,
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Dmg => "dmg",
        Mode::Full => "full",
    }
}

fn train(a: TrainArgs) -> Outcome {
    let cfg = settings(&a.settings)?;
    run_training(&a, cfg, "train")
}

fn ablate(a: TrainArgs) -> Outcome {
    let case = a.settings.case.ok_or_else(|| Error::InvalidArgument("ablate needs --case 1..4".into()))?;
    if !(1..=4).contains(&case) {
        return Err(Error::InvalidArgument(format!("ablation case must be 1..4, got {case}")).into());
    }
    let cfg = settings(&a.settings)?;
    run_training(&a, cfg, "ablate")
}

fn run_training(a: &TrainArgs, cfg: TrainConfig, label: &str) -> Outcome {
    std::fs::create_dir_all(&a.out)?;
    write_resolved(&a.out, &cfg)?;
    let train: Vec<Sample> =
        load(&a.data, Split::Train, Resolution::Reduced, &cfg)?.into_iter().map(|(_, s)| s).collect();
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(cfg.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let ckpt_path = a.out.join(CHECKPOINT);
    let result = trainer.run(&train, |t| {
        let (p, j) = t.progress();
        eprintln!("{label}: pretrain {p}/{} joint {j}/{}", cfg.pretrain_epochs, cfg.epochs);
        t.checkpoint().save(&ckpt_path)
    });
    write_log_csv(&a.out.join("train_log.csv"), trainer.log())?;
    result?;
    trainer.checkpoint().save(&ckpt_path)?;

    let test = load(&a.data, Split::Test, Resolution::Reduced, &cfg)?;
    if test.is_empty() {
        return Ok(());
    }
    let (names, samples): (Vec<String>, Vec<Sample>) = test.into_iter().unzip();
    let method = if label == "ablate" { cfg.case.to_string() } else { "full".to_string() };
    let fused = trainer.fuse(&samples, FuseMode::Full)?;
    let mut rows = reduced_rows(&names, &method, &fused, &samples)?;
    let exp = samples.iter().map(|s| exp_upsample(&s.ms, s.ratio)).collect::<Result<Vec<_>>>()?;
    rows.extend(reduced_rows(&names, "exp", &exp, &samples)?);
    write_metrics_csv(&a.out.join("metrics.csv"), &rows)?;
    print_means(&rows);
    Ok(())
}

fn reduced_rows(names: &[String], method: &str, products: &[Raster], samples: &[Sample]) -> Result<Vec<MetricReport>> {
    let indices: Vec<Reduced> = products
        .par_iter()
        .zip(samples)
        .map(|(p, s)| {
            let reference = s.reference.as_ref().ok_or_else(|| Error::InvalidArgument("sample lacks a reference".into()))?;
            metrics::reduced(p, reference, s.ratio, DEFAULT_WINDOW)
        })
        .collect::<Result<_>>()?;
    Ok(names
        .iter()
        .zip(indices)
        .map(|(n, r)| MetricReport { sample: n.clone(), method: method.into(), reduced: Some(r), no_reference: None })
        .collect())
}

fn full_rows(
    names: &[String],
    method: &str,
    products: &[Raster],
    samples: &[Sample],
    pan_gain: f64,
) -> Result<Vec<MetricReport>> {
    let indices: Vec<NoReference> = products
        .par_iter()
        .zip(samples)
        .map(|(p, s)| {
            let pan_low = metrics::pan_to_ms_scale(&s.pan, s.ratio, pan_gain)?;
            metrics::no_reference(p, &s.ms, &s.pan, &pan_low, s.ratio, DEFAULT_WINDOW)
        })
        .collect::<Result<_>>()?;
    Ok(names
        .iter()
        .zip(indices)
        .map(|(n, q)| MetricReport { sample: n.clone(), method: method.into(), reduced: None, no_reference: Some(q) })
        .collect())
}

/// Prints the per-method average of every computed index.
fn print_means(rows: &[MetricReport]) {
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.dedup();
    for m in methods {
        let red: Vec<Reduced> = rows.iter().filter(|r| r.method == m).filter_map(|r| r.reduced).collect();
        if let Some(r) = metrics::mean_reduced(&red) {
            println!("{m}: q4={:.4} sam={:.4} ergas={:.4}", r.q4, r.sam, r.ergas);
        }
        let nr: Vec<NoReference> = rows.iter().filter(|r| r.method == m).filter_map(|r| r.no_reference).collect();
        if !nr.is_empty() {
            let n = nr.len() as f64;
            let mean = |f: fn(&NoReference) -> f64| nr.iter().map(f).sum::<f64>() / n;
            println!(
                "{m}: d_lambda={:.4} d_s={:.4} qnr={:.4}",
                mean(|q| q.d_lambda),
                mean(|q| q.d_s),
                mean(|q| q.qnr)
            );
        }
    }
}

/// Writes PSR products and PNG composites, plus error maps against the
/// references when those exist. Error maps share one scale.
fn write_products(out: &Path, names: &[String], products: &[Raster], samples: &[Sample]) -> Result<()> {
    for sub in ["fused", "png"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    let mut stretch = String::from("image,low,high\n");
    for (n, p) in names.iter().zip(products) {
        write_psr(&out.join("fused").join(format!("{n}.psr")), p)?;
        let s = write_composite_png(&out.join("png").join(format!("{n}.png")), p, RGB)?;
        stretch.push_str(&format!("{n},{:.10},{:.10}\n", s.low, s.high));
    }
    std::fs::write(out.join("png").join("stretch.csv"), stretch)?;
    let maps = products
        .iter()
        .zip(samples)
        .filter_map(|(p, s)| s.reference.as_ref().map(|r| error_map(p, r)))
        .collect::<Result<Vec<_>>>()?;
    if maps.len() == products.len() && !maps.is_empty() {
        std::fs::create_dir_all(out.join("error"))?;
        let peak = maps.iter().flat_map(|m| m.data().iter().copied()).fold(0.0f64, f64::max);
        let scale = if peak > 0.0 { peak } else { 1.0 };
        for (n, m) in names.iter().zip(&maps) {
            write_error_png(&out.join("error").join(format!("{n}.png")), m, scale)?;
        }
    }
    Ok(())
}

fn fuse(a: FuseArgs) -> Outcome {
    let trainer = load_trainer(a.config.as_deref(), &a.checkpoint)?;
    let cfg = trainer.config().clone();
    std::fs::create_dir_all(&a.out)?;
    write_resolved(&a.out, &cfg)?;
    let (names, samples): (Vec<String>, Vec<Sample>) = load(&a.data, a.split, a.resolution, &cfg)?.into_iter().unzip();
    let products = trainer.fuse(&samples, fuse_mode(a.mode))?;
    write_products(&a.out, &names, &products, &samples)?;
    let rows = match a.resolution {
        Resolution::Reduced => reduced_rows(&names, mode_name(a.mode), &products, &samples)?,
        Resolution::Full => full_rows(&names, mode_name(a.mode), &products, &samples, cfg.model.pan_gain)?,
    };
    write_metrics_csv(&a.out.join("metrics.csv"), &rows)?;
    print_means(&rows);
    Ok(())
}

fn refine(a: RefineArgs) -> Outcome {
    let trainer = load_trainer(a.config.as_deref(), &a.checkpoint)?;
    std::fs::create_dir_all(&a.out)?;
    write_resolved(&a.out, trainer.config())?;
    for input in &a.input {
        let fused = read_psr(input)?;
        let refined = trainer.model().refine(trainer.store(), &[&fused])?.remove(0);
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("refined");
        write_psr(&a.out.join(format!("{stem}.psr")), &refined)?;
        write_composite_png(&a.out.join(format!("{stem}.png")), &refined, RGB)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let cfg = match (&a.checkpoint, &a.config) {
        (Some(c), explicit) => checkpoint_settings(explicit.as_deref(), c)?,
        (None, Some(p)) => resolve(Some(p), &[])?,
        (None, None) => TrainConfig::default(),
    };
    std::fs::create_dir_all(&a.out)?;
    write_resolved(&a.out, &cfg)?;
    let (names, samples): (Vec<String>, Vec<Sample>) = load(&a.data, a.split, a.resolution, &cfg)?.into_iter().unzip();
    let (method, products): (String, Vec<Raster>) = match (&a.fused, &a.checkpoint, a.method) {
        (Some(dir), _, _) => ("fused".into(), read_products(dir, &names)?),
        (None, Some(c), _) => {
            let t = Trainer::resume(cfg.clone(), &Checkpoint::load(c)?)?;
            (mode_name(a.mode).into(), t.fuse(&samples, fuse_mode(a.mode))?)
        }
        (None, None, Some(Baseline::Average)) => {
            ("average".into(), samples.par_iter().map(average_fusion).collect::<Result<_>>()?)
        }
        (None, None, _) => {
            ("exp".into(), samples.par_iter().map(|s| exp_upsample(&s.ms, s.ratio)).collect::<Result<_>>()?)
        }
    };
    let rows = match a.resolution {
        Resolution::Reduced => reduced_rows(&names, &method, &products, &samples)?,
        Resolution::Full => full_rows(&names, &method, &products, &samples, cfg.model.pan_gain)?,
    };
    write_metrics_csv(&a.out.join("metrics.csv"), &rows)?;
    print_means(&rows);
    Ok(())
}

fn read_products(dir: &Path, names: &[String]) -> Result<Vec<Raster>> {
    names.iter().map(|n| read_psr(&dir.join(format!("{n}.psr")))).collect()
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let mut reports: Vec<(&str, GradReport, f64)> = Vec::new();
    let double = gradsuite::run_f64()?;
    if matches!(a.precision, Precision::F32 | Precision::Both) {
        let tol = GradSettings::for_precision::<f32>().tol;
        reports.extend(gradsuite::run_f32(&double)?.into_iter().map(|r| ("f32", r, tol)));
    }
    if matches!(a.precision, Precision::F64 | Precision::Both) {
        let tol = GradSettings::for_precision::<f64>().tol;
        let mut all: Vec<_> = double.into_iter().map(|r| ("f64", r, tol)).collect();
        all.append(&mut reports);
        reports = all;
    }
    let mut csv = String::from("precision,check,probes,skipped,max_abs_err,rel_err,tolerance,pass\n");
    let mut failed = 0;
    for (p, r, tol) in &reports {
        let v = r.assess(*tol);
        failed += usize::from(!v.pass);
        let flag = if v.pass { "ok  " } else { "FAIL" };
        println!("{flag} {p} {:<32} rel_err={:.3e} skipped={}/{}", r.name, v.rel_err, v.skipped, r.probes.len());
        csv.push_str(&format!(
            "{p},{},{},{},{:e},{:e},{:e},{}\n",
            r.name,
            r.probes.len(),
            v.skipped,
            v.max_abs_err,
            v.rel_err,
            tol,
            v.pass
        ));
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("gradcheck.csv"), csv)?;
    }
    println!("{} checks, {failed} failed", reports.len());
    if failed > 0 {
        return Err(Failure::Status(4));
    }
    Ok(())
}
