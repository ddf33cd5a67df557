use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};
use star_core::eval::{bench_forward, evaluate, BenchConfig};
use star_core::net::{checkpoint_digest, load_checkpoint, save_checkpoint, Network};
use star_core::pipeline::{cross_subject_split, read_clip, write_clip, Manifest, ManifestRecord, VideoSample, CLIP_EXTENSION};
use star_core::synth::{dataset_specs, render_sample, GRID_HEIGHT, GRID_WIDTH};
use star_core::tensor::Tensor4;
use star_core::train::{train as run_training, HistoryRecord};

use crate::config::{RunConfig, Split};
use crate::error::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn synth(workdir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let synth = cfg.synth()?;
    let specs = dataset_specs(&synth)?;
    let manifest_path = workdir.join(&cfg.manifest);
    let base = manifest_dir(&manifest_path);
    let clips = base.join("clips");
    fs::create_dir_all(&clips).map_err(|e| io_err(&clips, e))?;

    let mut manifest = Manifest {
        class_names: cfg.classes.0.clone(),
        records: Vec::with_capacity(specs.len()),
    };
    for spec in &specs {
        let sample = render_sample(spec, &synth)?;
        let rel = PathBuf::from("clips").join(format!(
            "c{:02}_s{}_r{}.{CLIP_EXTENSION}",
            spec.action, spec.subject, spec.repetition
        ));
        write_clip(base.join(&rel), &sample)?;
        manifest.records.push(ManifestRecord {
            path: rel,
            class: spec.action,
            subject: spec.subject,
            repetition: spec.repetition,
        });
    }
    manifest.write(&manifest_path)?;
    let digest = Sha256::digest(manifest.render().as_bytes());
    println!("wrote {} clips", manifest.records.len());
    println!("manifest {} sha256 {}", manifest_path.display(), hex(&digest));
    Ok(())
}

fn load_manifest(workdir: &Path, cfg: &RunConfig) -> Result<(Manifest, Vec<VideoSample>), CliError> {
    let path = workdir.join(&cfg.manifest);
    let manifest = Manifest::read(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if manifest.records.is_empty() {
        return Err(CliError::Data(format!("{} lists no clips", path.display())));
    }
    let samples = manifest.load(&manifest_dir(&path))?;
    Ok((manifest, samples))
}

fn class_names(manifest: &Manifest, samples: &[VideoSample]) -> Vec<String> {
    if manifest.class_names.is_empty() {
        let k = samples.iter().map(|s| s.action as usize + 1).max().unwrap_or(0);
        (0..k).map(|i| format!("class{i}")).collect()
    } else {
        manifest.class_names.clone()
    }
}

fn select(samples: Vec<VideoSample>, split: Split) -> Result<Vec<VideoSample>, CliError> {
    if split == Split::All {
        return Ok(samples);
    }
    let (train, test) = cross_subject_split(samples)?;
    Ok(if split == Split::Train { train } else { test })
}

pub fn train(workdir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let tcfg = cfg.train();
    let (manifest, samples) = load_manifest(workdir, cfg)?;
    let names = class_names(&manifest, &samples);
    let (train_set, test_set) = cross_subject_split(samples)?;
    let mut net = Network::<f32>::build(cfg.network(names.len()))?;
    eprintln!(
        "{} network, {} parameters; {} training and {} held-out clips",
        cfg.network,
        net.parameter_count(),
        train_set.len(),
        test_set.len()
    );

    let history_path = workdir.join(&cfg.history);
    let file = fs::File::create(&history_path).map_err(|e| io_err(&history_path, e))?;
    let mut history = BufWriter::new(file);
    let mut write_err = None;
    let every = (tcfg.iterations / 20).max(1);
    let report = run_training(&mut net, &train_set, &tcfg, |r: &HistoryRecord| {
        if let Err(e) = writeln!(history, "{}", r.to_line()) {
            write_err.get_or_insert(e);
        }
        if r.iteration % every == 0 || r.iteration == tcfg.iterations {
            eprintln!("iter {:>5} loss {:.4} acc {:.3}", r.iteration, r.loss, r.accuracy);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&history_path, e));
    }
    history.flush().map_err(|e| io_err(&history_path, e))?;
    if let Some(r) = report.history.last() {
        if !r.loss.is_finite() {
            return Err(CliError::Internal(format!("loss diverged to {} at iteration {}", r.loss, r.iteration)));
        }
    }

    let ckpt = workdir.join(&cfg.checkpoint);
    save_checkpoint(&net, Some(&report.optimizer), &ckpt)?;
    match report.history.last() {
        Some(r) => println!("final loss {:.6}", r.loss),
        None => println!("final loss n/a (0 iterations)"),
    }
    if test_set.is_empty() {
        println!("held-out accuracy n/a (no held-out clips)");
    } else {
        let eval = evaluate(&net, &test_set, &names)?;
        println!("held-out accuracy {:.4} ({}/{})", eval.accuracy, eval.correct, eval.samples);
    }
    println!("checkpoint {} sha256 {}", ckpt.display(), checkpoint_digest(&net, Some(&report.optimizer)));
    Ok(())
}

pub fn eval(workdir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt = load_checkpoint(workdir.join(&cfg.checkpoint), None)?;
    let (manifest, samples) = load_manifest(workdir, cfg)?;
    let names = class_names(&manifest, &samples);
    let classes = ckpt.network.num_classes();
    if names.len() != classes {
        return Err(CliError::Data(format!(
            "manifest has {} classes but the checkpoint was trained on {classes}",
            names.len()
        )));
    }
    let samples = select(samples, cfg.split)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("the {} split is empty", cfg.split)));
    }
    let report = evaluate(&ckpt.network, &samples, &names)?;
    print!("{}", report.to_text());
    let lines = report.to_lines();
    print!("{lines}");
    let out = workdir.join(&cfg.report);
    fs::write(&out, lines).map_err(|e| io_err(&out, e))?;
    Ok(())
}

pub fn bench(workdir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt_path = workdir.join(&cfg.checkpoint);
    let net = if ckpt_path.exists() {
        eprintln!("benchmarking {}", ckpt_path.display());
        load_checkpoint(&ckpt_path, None)?.network
    } else {
        let k = cfg.actions()?.len();
        eprintln!("no checkpoint at {}; benchmarking a fresh {} network", ckpt_path.display(), cfg.network);
        Network::build(cfg.network(k))?
    };
    let c = net.config();
    let clip = Tensor4::<f32>::zeros((c.in_channels, c.window, c.in_spatial[0], c.in_spatial[1]));
    let start = Instant::now();
    let report = bench_forward(
        &net,
        &clip,
        BenchConfig {
            trials: cfg.trials,
            warmup: cfg.warmup,
        },
    )?;
    println!(
        "{} trials ({} warmup): mean {:.3} ms, std {:.3} ms",
        report.trials, report.warmup, report.mean_ms, report.std_ms
    );
    println!(
        "{}",
        serde_json::json!({
            "trials": report.trials,
            "warmup": report.warmup,
            "mean_ms": report.mean_ms,
            "std_ms": report.std_ms,
            "parameters": net.parameter_count(),
            "wall_s": start.elapsed().as_secs_f64(),
        })
    );
    Ok(())
}

/// One frame as a binary PGM: each pixel is `round(255 * clamp(sum over keypoints, 0, 1))`.
fn frame_pgm(clip: &Tensor4<f32>, t: usize) -> Vec<u8> {
    let s = clip.shape();
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            let sum: f32 = (0..s.c).map(|c| clip.get(c, t, y, x)).sum();
            out.push((255.0 * sum.clamp(0.0, 1.0)).round() as u8);
        }
    }
    out
}

pub fn inspect(path: &Path, dump: Option<PathBuf>) -> Result<(), CliError> {
    let sample = read_clip(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let clip = &sample.clip;
    let s = clip.shape();
    let data = clip.data();
    let (min, max) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len().max(1) as f64;
    let nonzero = data.iter().filter(|&&v| v != 0.0).count();
    println!("clip {}", path.display());
    println!("shape (k, t, h, w) = ({}, {}, {}, {})", s.c, s.t, s.h, s.w);
    println!(
        "class {} subject {} repetition {}",
        sample.action, sample.subject, sample.repetition
    );
    println!("min {min:.6} max {max:.6} mean {mean:.6} nonzero {nonzero}/{}", data.len());
    if (s.h, s.w) != (GRID_HEIGHT, GRID_WIDTH) {
        println!("note: grid differs from the default {GRID_HEIGHT}x{GRID_WIDTH}");
    }
    if let Some(dir) = dump {
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for t in 0..s.t {
            let p = dir.join(format!("frame_{t:04}.pgm"));
            fs::write(&p, frame_pgm(clip, t)).map_err(|e| io_err(&p, e))?;
        }
        println!("wrote {} frames to {}", s.t, dir.display());
    }
    Ok(())
}
