//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use cleftnet::autodiff::gradcheck::GradCheckConfig;
use cleftnet::checkpoint;
use cleftnet::data::{read_vol1, synthesize, train_val_split, volume_paths, write_vol1, Sampler, Vol1, Vol1Data, Volume};
use cleftnet::infer::sliding_window;
use cleftnet::metrics::MetricReport;
use cleftnet::model::Model;
use cleftnet::train::Trainer;
use cleftnet::verify::{all_targets, run_check_with_fault};
use cleftnet::Tensor;

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::pgm::{slice_indices, write_panels};
use crate::{CliError, Common, EvalArgs, GradcheckArgs, ImportArgs, InferArgs, TrainArgs};

/// Iterations between progress log lines.
const LOG_EVERY: u64 = 50;

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf, CliError> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn print_config(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    cfg.validate()?;
    print!("{}", cfg.to_toml());
    Ok(())
}

pub fn synth(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    cfg.validate()?;
    if cfg.synth.n_clefts == 0 {
        warn!("n_clefts = 0: the synthetic volume contains no clefts");
    }
    let mut volume = synthesize(&cfg.synth)?;
    if let Some(s) = common.spacing {
        volume.spacing = s;
    }
    let (train, val) = train_val_split(&volume)?;
    let out = out_dir(common, "data")?;
    let mut manifest = Manifest::new("synth", &cfg);
    for (stem, v) in [("train", &train), ("val", &val)] {
        let (rp, lp) = v.save(&out.join(stem))?;
        info!("{stem}: {:?} voxels, cleft fraction {:.4}", v.extent(), v.cleft_fraction());
        manifest.outputs([&rp, &lp])?;
    }
    manifest.write(&out)?;
    Ok(())
}

pub fn train(common: &Common, args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve(common)?;
    if let Some(v) = args.variant {
        cfg.model = cfg.model.clone().with_variant(v);
    }
    if let Some(n) = args.iterations {
        cfg.train.iterations = n;
    }
    if let Some(lr) = args.lr {
        cfg.train.adam.lr = lr;
    }
    cfg.validate()?;
    let mut manifest = Manifest::new("train", &cfg);

    let train_stem = args.data.join("train");
    let val_stem = args.data.join("val");
    let train = Volume::load(&train_stem)?;
    let (rp, lp) = volume_paths(&train_stem);
    manifest.input(&rp)?;
    manifest.input(&lp)?;
    let val = if volume_paths(&val_stem).0.exists() {
        let (vr, vl) = volume_paths(&val_stem);
        manifest.input(&vr)?;
        manifest.input(&vl)?;
        Some(Volume::load(&val_stem)?)
    } else {
        warn!("no validation volume at {}; best-checkpoint selection disabled", val_stem.display());
        None
    };

    let resumed = match &args.resume {
        Some(path) => {
            manifest.input(path)?;
            let ck = checkpoint::load(path)?;
            if ck.model.config != cfg.model {
                warn!("resuming with the model configuration stored in {}", path.display());
            }
            Some(ck)
        }
        None => None,
    };
    let patch = resumed.as_ref().map_or(cfg.model.patch, |c| c.model.config.patch);
    let sampler = Sampler::new(train, patch, cfg.train.rejection, cfg.train.augment, cfg.train.seed)?;
    let mut trainer = match resumed {
        Some(ck) => Trainer::resume(ck, cfg.train.clone(), sampler)?,
        None => Trainer::new(Model::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone(), sampler)?,
    };
    info!(
        "{} parameters, iterations {}..{}",
        trainer.model.parameter_count(),
        trainer.iteration,
        cfg.train.iterations
    );

    let out = out_dir(common, "run")?;
    let best_path = out.join("best.ckpt1");
    let history_path = out.join("history.tsv");
    let mut saved_best = false;
    let mut outcome = Ok(());
    while trainer.iteration < cfg.train.iterations {
        let until = (trainer.iteration + LOG_EVERY).min(cfg.train.iterations);
        outcome = trainer.run(until, val.as_ref(), |t| {
            checkpoint::save(&best_path, &t.model, Some(&t.training_state()))?;
            info!("iteration {}: new best CREMI-score {:.4}", t.iteration, t.best_score.unwrap_or(f64::NAN));
            saved_best = true;
            Ok(())
        });
        if outcome.is_err() {
            break;
        }
        if let Some(cleftnet::train::HistoryLine::Step { losses, .. }) =
            trainer.history.iter().rev().find(|l| matches!(l, cleftnet::train::HistoryLine::Step { .. }))
        {
            info!("iteration {}: loss {:.4}", trainer.iteration, losses.total);
        }
    }
    trainer.write_history(&history_path)?;
    if let Err(e) = outcome {
        let dump = out.join("failure.txt");
        write_text(&dump, &format!("{e}\n"))?;
        return Err(e.into());
    }

    let last = out.join("checkpoint.ckpt1");
    checkpoint::save(&last, &trainer.model, Some(&trainer.training_state()))?;
    manifest.outputs([&last, &history_path])?;
    if saved_best {
        manifest.output(&best_path)?;
    }
    manifest.write(&out)?;
    Ok(())
}

fn read_field(path: &Path) -> Result<(Tensor<f32>, [f32; 3]), CliError> {
    let v = read_vol1(path)?;
    match v.data {
        Vol1Data::Field(t) => Ok((t, v.spacing)),
        _ => Err(CliError::Data(format!("{} does not hold a probability field", path.display()))),
    }
}

pub fn infer(common: &Common, args: &InferArgs) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    cfg.validate()?;
    let overlap = args.overlap.unwrap_or(cfg.infer.overlap);
    let mut manifest = Manifest::new("infer", &cfg);
    manifest.input(&args.checkpoint)?;
    let model = checkpoint::load(&args.checkpoint)?.model;
    let raw_path = volume_paths(&args.volume).0;
    manifest.input(&raw_path)?;
    let raw = read_vol1(&raw_path)?;
    let Vol1Data::Raw(intensity) = &raw.data else {
        return Err(CliError::Data(format!("{} does not hold raw intensities", raw_path.display())));
    };
    let input = intensity.map(|v| v as f32 / 255.0);
    let pred = sliding_window(&model, &input, overlap)?;
    if !pred.segmentation.all_finite() {
        return Err(CliError::Numerical("prediction contains non-finite values".into()));
    }

    let out = out_dir(common, "pred")?;
    let seg_path = out.join("segmentation.vol1");
    let field = |t: Tensor<f32>| Vol1 {
        data: Vol1Data::Field(t),
        spacing: raw.spacing,
    };
    write_vol1(&seg_path, &field(pred.segmentation))?;
    manifest.output(&seg_path)?;
    if let Some(b) = pred.boundary {
        let path = out.join("boundary.vol1");
        write_vol1(&path, &field(b))?;
        manifest.output(&path)?;
    }
    manifest.write(&out)?;
    Ok(())
}

pub fn eval(common: &Common, args: &EvalArgs) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    cfg.validate()?;
    let mut manifest = Manifest::new("eval", &cfg);
    let (pred, _) = read_field(&args.pred)?;
    manifest.input(&args.pred)?;
    let gt = Volume::load(&args.gt)?;
    let (rp, lp) = volume_paths(&args.gt);
    manifest.input(&rp)?;
    manifest.input(&lp)?;
    if pred.shape() != gt.labels.shape() {
        return Err(CliError::Data(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.labels.shape()
        )));
    }
    let spacing = common.spacing.or(cfg.eval.spacing).unwrap_or(gt.spacing);
    let threshold = args.threshold.unwrap_or(cfg.eval.threshold);
    let sweep = if args.sweep.is_empty() { cfg.eval.sweep.clone() } else { args.sweep.clone() };

    let out = out_dir(common, "eval")?;
    let mut written = Vec::new();
    let report = MetricReport::compute(&pred, &gt.labels, threshold, spacing, None)?;
    print!("{}", report.to_text());
    for (stem, r) in std::iter::once(("report".to_string(), report)).chain(
        sweep
            .iter()
            .map(|&t| Ok((format!("report_t{t}"), MetricReport::compute(&pred, &gt.labels, t, spacing, None)?)))
            .collect::<Result<Vec<_>, CliError>>()?,
    ) {
        let json = out.join(format!("{stem}.json"));
        let text = out.join(format!("{stem}.txt"));
        write_text(&json, &(r.to_json() + "\n"))?;
        write_text(&text, &r.to_text())?;
        written.extend([json, text]);
    }

    let n_slices = args.slices.unwrap_or(cfg.eval.slices);
    if n_slices > 0 {
        let dir = out.join("slices");
        fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let raw = gt.raw.map(|v| v as f32);
        let labels = gt.labels.map(|m| if m { 1.0f32 } else { 0.0 });
        for z in slice_indices(gt.extent()[0], n_slices) {
            let path = dir.join(format!("z{z:04}.pgm"));
            write_panels(&path, &[(&raw, 1.0), (&labels, 255.0), (&pred, 255.0)], z)?;
            written.push(path);
        }
    }
    manifest.outputs(&written)?;
    manifest.write(&out)?;
    Ok(())
}

pub fn gradcheck(common: &Common, args: &GradcheckArgs) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let gc = GradCheckConfig {
        eps: args.eps,
        tol: args.tol,
        seed: cfg.train.seed,
        ..GradCheckConfig::default()
    };
    let mut text = String::new();
    let mut failed = Vec::new();
    for target in all_targets() {
        let r = run_check_with_fault(target, &gc, args.fault.map(|f| f.kind()))?;
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        let line = format!("{target}\t{verdict}\tmax_rel_error={:.3e}\tdeterministic={}", r.max_rel_error, r.deterministic);
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
        for p in &r.params {
            text.push_str(&format!("  {}\tchecked={}\tmax_rel_error={:.3e}\n", p.name, p.checked, p.max_rel_error));
        }
        if !r.passed {
            failed.push(target.to_string());
        }
    }
    let out = out_dir(common, "gradcheck")?;
    let report = out.join("gradcheck.txt");
    write_text(&report, &text)?;
    let mut manifest = Manifest::new("gradcheck", &cfg);
    manifest.output(&report)?;
    manifest.write(&out)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

#[cfg(feature = "hdf5")]
pub fn import(common: &Common, args: &ImportArgs) -> Result<(), CliError> {
    use cleftnet::data::cremi::{import_cremi, CremiPaths, DEFAULT_BACKGROUND_SENTINEL};

    let mut cfg = resolve(common)?;
    if let Some(p) = &args.raw_path {
        cfg.import.raw_path = p.clone();
    }
    if let Some(p) = &args.cleft_path {
        cfg.import.cleft_path = p.clone();
    }
    if let Some(s) = args.background_sentinel {
        cfg.import.background_sentinel = Some(s);
    }
    if let Some(s) = common.spacing {
        cfg.import.spacing = Some(s);
    }
    let paths = CremiPaths {
        raw: cfg.import.raw_path.clone(),
        clefts: cfg.import.cleft_path.clone(),
        background_sentinel: cfg.import.background_sentinel.unwrap_or(DEFAULT_BACKGROUND_SENTINEL),
    };
    let mut volume = import_cremi(&args.input, &paths)?;
    if let Some(s) = cfg.import.spacing {
        volume.spacing = s;
    }
    info!(
        "{:?} voxels, spacing {:?}, cleft fraction {:.5}",
        volume.extent(),
        volume.spacing,
        volume.cleft_fraction()
    );
    let out = out_dir(common, "data")?;
    let (rp, lp) = volume.save(&out.join(&args.name))?;
    let mut manifest = Manifest::new("import", &cfg);
    manifest.input(&args.input)?;
    manifest.outputs([&rp, &lp])?;
    manifest.write(&out)?;
    Ok(())
}

#[cfg(not(feature = "hdf5"))]
pub fn import(_: &Common, _: &ImportArgs) -> Result<(), CliError> {
    Err(CliError::Config("this build has no HDF5 support".into()))
}
