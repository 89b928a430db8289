use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ardvae_core::analysis::{
    dump_reconstruction, relevance_report, MetricsWriter, RelevanceReport, RetentionRule, RunMetrics,
};
use ardvae_core::checkpoint::Checkpoint;
use ardvae_core::config::{preset, preset_names, TrainConfig};
use ardvae_core::data::{load_matrix_file, split, synth_generate, write_flat_f32, DataFormat, Dataset, SplitSpec, SynthSpec, Transform};
use ardvae_core::gradcheck::{gradcheck as run_gradcheck, GradCheckSpec};
use ardvae_core::models::{mean_and_stderr, repeated_bounds, BoundOptions, GradientSet, TestScoreWindow};
use ardvae_core::numerics::RngStream;
use ardvae_core::optim::Trainer;
use ardvae_core::{ArdError, Result};

use crate::{EvalArgs, GradcheckArgs, ReportArgs, SynthArgs, TrainArgs};

/// Clipping events echoed individually before switching to a summary.
const CLIP_LOG_LIMIT: u64 = 5;

fn usage(field: &str, message: impl Into<String>) -> ArdError {
    ArdError::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ArdError {
    ArdError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn load_data(path: &Path, format: Option<DataFormat>) -> Result<Dataset> {
    if !path.exists() {
        return Err(io_err(path, std::io::Error::new(std::io::ErrorKind::NotFound, "data file not found")));
    }
    load_matrix_file(path, format.unwrap_or_else(|| DataFormat::from_path(path)))
}

fn resolve_config(a: &TrainArgs) -> Result<(TrainConfig, Option<Checkpoint>)> {
    let (mut config, resume) = if let Some(dir) = &a.resume {
        let ck = Checkpoint::load(dir)?;
        (ck.manifest.config.clone(), Some(ck))
    } else if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        (TrainConfig::from_json(&text)?, None)
    } else if let Some(name) = &a.preset {
        let c = preset(name)
            .ok_or_else(|| usage("preset", format!("unknown preset {name:?}; known: {}", preset_names().join(", "))))?;
        (c, None)
    } else {
        return Err(usage("config", "one of --config, --preset or --resume is required"));
    };
    if let Some(d) = &a.data {
        config.data_path = Some(d.to_string_lossy().into_owned());
    }
    if let Some(f) = a.format {
        config.data_format = Some(f.into());
    }
    if let Some(s) = a.seed {
        if resume.is_some() && s != config.seed {
            return Err(usage("seed", "cannot change the seed of a resumed run"));
        }
        config.seed = s;
    }
    if let Some(i) = a.iterations {
        config.iterations = Some(i);
        config.epochs = None;
    }
    if let Some(d) = a.deterministic {
        config.deterministic = d;
    }
    config.validate()?;
    Ok((config, resume))
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let (config, resume) = resolve_config(&a)?;
    if a.dry_run {
        println!("{}", config.to_canonical_json());
        return Ok(ExitCode::SUCCESS);
    }
    let data_path = PathBuf::from(
        config
            .data_path
            .as_deref()
            .ok_or_else(|| usage("data_path", "no dataset given; pass --data or set data_path"))?,
    );
    let full = load_data(&data_path, config.data_format)?;
    let train_count = match config.train_count {
        Some(n) => n,
        None => full.len().checked_sub(config.test_count).ok_or_else(|| {
            usage(
                "test_count",
                format!("test_count {} exceeds dataset size {}", config.test_count, full.len()),
            )
        })?,
    };
    let (train_raw, test_raw) = split(
        &full,
        &SplitSpec {
            train_count,
            test_count: config.test_count,
            seed: config.split_seed,
        },
    )?;
    let transform = match &resume {
        Some(ck) => ck.manifest.transform.clone(),
        None => Transform::fit(&train_raw.x, config.scaling),
    };
    let train_set = transform.apply_dataset(&train_raw)?;
    let test_set = test_raw.as_ref().map(|t| transform.apply_dataset(t)).transpose()?;

    let out = &a.out_dir;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_file(&out.join("config.json"), config.to_canonical_json())?;
    let ck_dir = out.join("checkpoint");
    let metrics_path = out.join("metrics.csv");

    let mut trainer = match resume {
        Some(ck) => {
            if ck.manifest.input_dim != train_set.dim() {
                return Err(ArdError::Dimension {
                    context: "dataset width vs checkpoint data dimension",
                    expected: ck.manifest.input_dim,
                    found: train_set.dim(),
                });
            }
            Trainer::resume(config, train_set, test_set, ck.model, ck.optimizer, ck.manifest.loop_state)?
        }
        None => Trainer::new(config, train_set, test_set)?,
    };
    let mut metrics = if a.resume.is_some() && metrics_path.exists() {
        MetricsWriter::append(&metrics_path)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };

    let total = trainer.total_iterations();
    let progress_every = (total / 20).max(1);
    let window = trainer.config().score_window;
    let checkpoint_every = trainer.config().checkpoint_every;
    let mut recent = TestScoreWindow::new(window)?;
    let mut clips = 0u64;
    let quiet = a.quiet;
    if !quiet {
        eprintln!(
            "training {} on {} rows x {} dims for {total} iterations (starting at {})",
            trainer.config().variant,
            trainer.train_set().len(),
            trainer.train_set().dim(),
            trainer.iteration()
        );
    }

    let result = trainer.run(|t, row: &RunMetrics| {
        metrics.write(row)?;
        recent.push(row.bound_total);
        if row.clipped {
            clips += 1;
            if clips <= CLIP_LOG_LIMIT {
                eprintln!("iteration {}: gradient norm {:.4e} clipped", row.iteration, row.grad_norm);
            }
        }
        if !quiet && (row.iteration.is_multiple_of(progress_every) || row.iteration == total) {
            let test = row.test_bound.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            eprintln!(
                "iter {:>7}  epoch {:>5}  bound {:>12.4}  test {:>12}  retained {}",
                row.iteration,
                row.epoch,
                row.bound_total,
                test,
                row.retained_count
            );
        }
        if checkpoint_every > 0 && row.iteration.is_multiple_of(checkpoint_every) {
            metrics.flush()?;
            Checkpoint::capture(t, &transform).save(&ck_dir)?;
        }
        Ok(())
    });
    if let Err(e) = result {
        // Keep whatever progress can still be written before giving up.
        let _ = metrics.flush();
        if matches!(e, ArdError::Io { .. }) {
            if let Err(e2) = Checkpoint::capture(&trainer, &transform).save(&ck_dir) {
                eprintln!("could not save checkpoint after failure: {e2}");
            }
        }
        return Err(e);
    }
    metrics.flush()?;
    if clips > CLIP_LOG_LIMIT {
        eprintln!("gradient clipped on {clips} iterations in total");
    }
    Checkpoint::capture(&trainer, &transform).save(&ck_dir)?;

    let config = trainer.config();
    let report = relevance_report(trainer.model(), config.retention_rule(), config.retention_threshold)?;
    write_file(&out.join("relevance.txt"), report.to_text())?;

    match recent.mean() {
        Some(b) => println!("final train bound: {b:.6}"),
        None => println!("final train bound: -"),
    }
    match trainer.test_score() {
        Some(s) => println!("test bound: {s:.6}"),
        None => println!("test bound: -"),
    }
    println!("retained dimensions: {} of {}", report.retained_count, report.dims.len());
    println!("output: {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let raw = load_data(&a.data, a.format.map(Into::into))?;
    if raw.dim() != ck.manifest.input_dim {
        return Err(ArdError::Dimension {
            context: "dataset width vs checkpoint data dimension",
            expected: ck.manifest.input_dim,
            found: raw.dim(),
        });
    }
    let data = ck.manifest.transform.apply_dataset(&raw)?;
    let config = &ck.manifest.config;
    let opts = BoundOptions {
        n_w: config.n_w,
        n_z: config.n_z,
        kl_w_scale: config.kl_w_scale(ck.manifest.train_rows),
    };
    let mut rng = match a.seed {
        Some(s) => RngStream::new(s).split("eval-command"),
        None => RngStream::from_state(&ck.manifest.loop_state.eval_rng)?.split("eval-command"),
    };
    let bounds = repeated_bounds(&ck.model, &data.x, &opts, a.window, &mut rng)?;
    println!(
        "checkpoint {} ({}, iteration {})",
        a.checkpoint.display(),
        ck.model.variant,
        ck.manifest.iteration
    );
    println!("data {} ({} rows x {} dims), {} evaluations", a.data.display(), data.len(), data.dim(), a.window);
    let columns: [(&str, fn(&ardvae_core::models::BoundBreakdown) -> f64); 4] = [
        ("total", |b| b.total),
        ("recon", |b| b.recon),
        ("kl_z", |b| b.kl_z),
        ("kl_w", |b| b.kl_w),
    ];
    for (name, get) in columns {
        let values: Vec<f64> = bounds.iter().map(get).collect();
        let (mean, se) = mean_and_stderr(&values);
        println!("{name:<6} {mean:>14.6} +/- {se:.6}");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut spec = GradCheckSpec::toy(a.variant.into(), a.seed);
    spec.input_dim = a.input;
    spec.hidden = a.hidden;
    spec.latent_dim = a.latent;
    spec.batch = a.batch;
    spec.opts.n_w = a.n_w;
    spec.opts.n_z = a.n_z;
    spec.tolerance = a.tolerance;
    if spec.input_dim == 0 || spec.latent_dim == 0 || spec.batch == 0 || spec.hidden.contains(&0) {
        return Err(usage("gradcheck", "sizes must be positive"));
    }
    if spec.opts.n_w == 0 || spec.opts.n_z == 0 {
        return Err(usage("gradcheck", "sample counts must be positive"));
    }
    let bump = |g: &mut GradientSet| g.decoder.mean_head.bias[0] += 0.5;
    let corrupt: Option<&dyn Fn(&mut GradientSet)> = if a.corrupt { Some(&bump) } else { None };
    let report = run_gradcheck(&spec, corrupt)?;
    println!("{:<28} {:>8} {:>8} {:>12}", "block", "checked", "skipped", "max_rel_err");
    for b in &report.blocks {
        println!("{:<28} {:>8} {:>8} {:>12.3e}", b.name, b.checked, b.skipped, b.max_rel_error);
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{}: max relative error {:.3e} (tolerance {:.1e}): {verdict}",
        spec.variant,
        report.max_rel_error(),
        spec.tolerance
    );
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let bad = || usage("image_shape", format!("expected HxW, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn print_report(report: &RelevanceReport) {
    println!(
        "{} relevance, rule {} at threshold {}: {} of {} dimensions retained",
        report.variant,
        report.rule.as_str(),
        report.threshold_used,
        report.retained_count,
        report.dims.len()
    );
    let has_ard = report.dims.first().is_some_and(|d| d.mu_tau.is_some());
    if has_ard {
        println!("{:>5} {:>12} {:>12} {:>12} {:>14} {:>9}", "dim", "mu_tau", "var_tau", "lambda", "w_col_sq_norm", "retained");
        for d in &report.dims {
            println!(
                "{:>5} {:>12.4e} {:>12.4e} {:>12.4e} {:>14.4e} {:>9}",
                d.index,
                d.mu_tau.unwrap_or(f64::NAN),
                d.var_tau.unwrap_or(f64::NAN),
                d.lambda.unwrap_or(f64::NAN),
                d.weight_col_sq_norm,
                d.retained
            );
        }
    } else {
        println!("{:>5} {:>14} {:>9}", "dim", "w_col_sq_norm", "retained");
        for d in &report.dims {
            println!("{:>5} {:>14.4e} {:>9}", d.index, d.weight_col_sq_norm, d.retained);
        }
    }
}

pub fn report(a: ReportArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let config = &ck.manifest.config;
    let rule = match &a.rule {
        Some(r) => r.parse::<RetentionRule>()?,
        None => config.retention_rule(),
    };
    let threshold = a.threshold.unwrap_or(config.retention_threshold);
    let report = relevance_report(&ck.model, rule, threshold)?;
    print_report(&report);

    let out = a.out_dir.clone().unwrap_or_else(|| a.checkpoint.clone());
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_file(&out.join("relevance.txt"), report.to_text())?;
    let mut csv = String::from("dim,weight_col_sq_norm\n");
    for d in &report.dims {
        csv.push_str(&format!("{},{:?}\n", d.index, d.weight_col_sq_norm));
    }
    write_file(&out.join("weight_norms.csv"), csv)?;

    if let Some(shape) = &a.image_shape {
        let shape = parse_shape(shape)?;
        let path = a.data.as_ref().expect("clap enforces --data");
        let raw = load_data(path, None)?;
        let data = ck.manifest.transform.apply_dataset(&raw)?;
        if a.index >= data.len() {
            return Err(usage("index", format!("row {} out of range for {} rows", a.index, data.len())));
        }
        let values = data.x.as_slice();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let prefix = out.join(format!("recon_{}", a.index));
        let paths = dump_reconstruction(&ck.model, data.x.row(a.index), shape, (lo, hi), &prefix)?;
        for p in paths {
            println!("wrote {}", p.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn synth(a: SynthArgs) -> Result<ExitCode> {
    let spec = SynthSpec {
        true_dim: a.k,
        ambient_dim: a.dim,
        n: a.n,
        noise_std: a.noise,
        nonlinearity: a.nonlinearity.into(),
    };
    let data = synth_generate(&spec, &mut RngStream::new(a.seed))?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_flat_f32(&a.out, &data.x)?;
    let meta = serde_json::json!({
        "true_dim": spec.true_dim,
        "ambient_dim": spec.ambient_dim,
        "n": spec.n,
        "noise_std": spec.noise_std,
        "nonlinearity": spec.nonlinearity,
        "seed": a.seed,
        "format": "flat_f32",
    });
    let mut meta_path = a.out.as_os_str().to_owned();
    meta_path.push(".meta.json");
    let meta_path = PathBuf::from(meta_path);
    write_file(&meta_path, serde_json::to_string_pretty(&meta).expect("metadata serializes"))?;
    println!("wrote {} ({} rows x {} dims) and {}", a.out.display(), data.len(), data.dim(), meta_path.display());
    Ok(ExitCode::SUCCESS)
}
