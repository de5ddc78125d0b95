use std::path::{Path, PathBuf};
use std::time::Instant;

use dadt::beam::{generate_pseudo_low_beam, KMeansParams};
use dadt::bev::GridSpec;
use dadt::distill::checkpoint::header_for;
use dadt::distill::{
    config_hash, evaluate, load_checkpoint, load_dataset, loss_csv, save_checkpoint, train,
    MetricsReport, Mode, ModelState,
};
use dadt::export::{context_heatmap, encode_pgm, features_csv, HeatmapBounds};
use dadt::io::{write_atomic, write_json};
use dadt::pointcloud::{load_frame, load_labels, write_frame, FrameFormat};
use dadt::rng::{mix64, stream};
use dadt::simlidar::{make_dataset, ObjectClass, SceneTemplate};
use serde::Serialize;

use crate::config::{
    load_config, parse_json_file, record_path, CliError, CliResult, RunRecord, TOOL_VERSION,
};

fn write_record<T: Serialize>(
    out: &Path,
    is_dir: bool,
    command: &str,
    config: &T,
) -> CliResult<()> {
    let record = RunRecord {
        tool_version: TOOL_VERSION,
        command,
        config,
    };
    Ok(write_json(&record_path(out, is_dir), &record)?)
}

fn load_model(path: &Path) -> CliResult<ModelState> {
    Ok(load_checkpoint(path)?.model)
}

#[derive(Serialize)]
struct SimulateArgs<'a> {
    scene: &'a SceneTemplate,
    frames: usize,
    seed: u64,
}

pub fn simulate(scene: Option<&Path>, frames: usize, seed: u64, out: &Path) -> CliResult<()> {
    let template: SceneTemplate = match scene {
        Some(p) => parse_json_file(p)?,
        None => SceneTemplate::default(),
    };
    let manifest = make_dataset(&template, frames, seed, out)?;
    write_record(
        out,
        true,
        "simulate",
        &SimulateArgs {
            scene: &template,
            frames,
            seed,
        },
    )?;
    let points: usize = manifest.frames.iter().map(|f| f.points).sum();
    let boxes: usize = manifest.frames.iter().map(|f| f.boxes).sum();
    println!(
        "wrote {frames} frames ({points} points, {boxes} boxes) to {}",
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ResampleStats {
    pub source_beams: usize,
    pub target_beams: usize,
    pub input_points: usize,
    pub output_points: usize,
    pub retained_fraction: f64,
    pub kept_beams: Vec<u32>,
    pub beam_point_counts: Vec<usize>,
    pub beam_centers: Vec<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

#[derive(Serialize)]
struct ResampleArgs<'a> {
    input: &'a Path,
    source_beams: usize,
    target_beams: usize,
    seed: u64,
}

pub fn resample(
    input: &Path,
    source_beams: usize,
    target_beams: usize,
    seed: u64,
    out: &Path,
    stats: Option<&Path>,
) -> CliResult<()> {
    let cloud = load_frame(input, FrameFormat::Bin)?;
    let params = KMeansParams {
        seed: mix64(seed, stream::KMEANS),
        ..KMeansParams::default()
    };
    let (pseudo, model) = generate_pseudo_low_beam(&cloud, source_beams, target_beams, params)?;
    write_frame(&pseudo.cloud, out)?;
    let report = ResampleStats {
        source_beams,
        target_beams,
        input_points: cloud.len(),
        output_points: pseudo.cloud.len(),
        retained_fraction: pseudo.cloud.len() as f64 / cloud.len().max(1) as f64,
        kept_beams: pseudo.kept_beams.clone(),
        beam_point_counts: model.beam_counts(),
        beam_centers: model.centers.clone(),
        inertia: model.inertia,
        iterations: model.iterations,
    };
    if let Some(p) = stats {
        write_json(p, &report)?;
    }
    write_record(
        out,
        false,
        "resample",
        &ResampleArgs {
            input,
            source_beams,
            target_beams,
            seed,
        },
    )?;
    println!(
        "kept {} of {} beams, {} of {} points",
        target_beams, source_beams, report.output_points, report.input_points
    );
    Ok(())
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub data: Option<&'a Path>,
    pub teacher: Option<&'a str>,
    pub mode: Option<Mode>,
    pub out: Option<&'a Path>,
}

pub fn train_cmd(args: TrainArgs<'_>) -> CliResult<()> {
    let loaded = load_config(args.config)?;
    let mut rc = loaded.config.clone();
    if let Some(m) = args.mode {
        rc.train.mode = m;
    }
    if let Some(d) = args.data {
        rc.data = Some(d.to_path_buf());
    }
    if let Some(t) = args.teacher {
        rc.teacher = Some(t.to_string());
    }
    if let Some(o) = args.out {
        rc.out = Some(o.to_path_buf());
    }
    let data = rc
        .data
        .clone()
        .ok_or_else(|| CliError::Validation("no dataset given (--data)".into()))?;
    let out = rc
        .out
        .clone()
        .ok_or_else(|| CliError::Validation("no output directory given (--out)".into()))?;
    let teacher_path = rc
        .teacher
        .as_deref()
        .filter(|t| *t != "none")
        .map(PathBuf::from);
    if rc.train.mode == Mode::Dadt && teacher_path.is_none() {
        return Err(CliError::Validation(
            "dadt mode needs a teacher checkpoint (--teacher)".into(),
        ));
    }
    if rc.train.mode == Mode::Vanilla && loaded.sets_lambdas() {
        eprintln!("warning: vanilla mode ignores lambda_c and lambda_o");
    }
    rc.train.validate()?;

    let teacher = match &teacher_path {
        Some(p) => Some(load_model(p)?.frozen()),
        None => None,
    };
    let frames = load_dataset(&data)?;
    let started = Instant::now();
    let output = train(&frames, teacher.as_ref(), &rc.train)?;
    let wall = started.elapsed().as_secs_f64();

    let train_json = serde_json::to_string(&rc.train).expect("config serializes");
    let header = header_for(
        &output.model,
        rc.train.mode.name(),
        rc.train.seed,
        config_hash(&train_json),
    );
    save_checkpoint(&out.join("model.ckpt"), &header, &output.model)?;
    write_atomic(
        &out.join("loss.csv"),
        loss_csv("epoch", &output.epochs).as_bytes(),
    )?;
    write_atomic(
        &out.join("steps.csv"),
        loss_csv("step", &output.steps).as_bytes(),
    )?;
    write_json(&out.join("config.json"), &rc)?;
    let metrics = MetricsReport {
        tool_version: TOOL_VERSION.to_string(),
        config: serde_json::to_value(&rc).expect("config serializes"),
        eval: None,
        epoch_losses: output.epochs.clone(),
        wall_clock_seconds: wall,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    write_record(&out, true, "train", &rc)?;
    let last = output.epochs.last().expect("at least one epoch");
    println!(
        "{} mode, {} epochs, {} steps: final l_det {:.4} l_o {:.4} l_c {:.4} total {:.4}",
        rc.train.mode.name(),
        output.epochs.len(),
        output.steps.len(),
        last.l_det,
        last.l_o,
        last.l_c,
        last.total
    );
    Ok(())
}

pub fn eval_cmd(ckpt: &Path, data: &Path, report: &Path, config: Option<&Path>) -> CliResult<()> {
    let rc = load_config(config)?.config;
    let model = load_model(ckpt)?;
    let frames = load_dataset(data)?;
    let started = Instant::now();
    let result = evaluate(&model, &frames, &rc.train.grid, &rc.train.eval)?;
    write_atomic(report, result.csv().as_bytes())?;
    let echo = serde_json::json!({
        "ckpt": ckpt,
        "data": data,
        "grid": rc.train.grid,
        "eval": rc.train.eval,
    });
    let metrics = MetricsReport {
        tool_version: TOOL_VERSION.to_string(),
        config: echo.clone(),
        eval: Some(result.clone()),
        epoch_losses: Vec::new(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&report.with_extension("json"), &metrics)?;
    write_record(report, false, "eval", &echo)?;
    for (name, ap) in &result.ap {
        println!("{name:<11} AP {ap:7.3}");
    }
    println!(
        "mAP         {:7.3}  ({} frames, {} boxes)",
        result.map, result.frames, result.ground_truth
    );
    Ok(())
}

pub struct ExportContextArgs<'a> {
    pub ckpt: &'a Path,
    pub frame: &'a Path,
    pub labels: &'a Path,
    pub class: &'a str,
    pub out: &'a Path,
    pub config: Option<&'a Path>,
}

pub fn export_context(args: ExportContextArgs<'_>) -> CliResult<()> {
    let rc = load_config(args.config)?.config;
    let class = ObjectClass::from_name(args.class)
        .ok_or_else(|| CliError::Validation(format!("unknown class {:?}", args.class)))?;
    let model = load_model(args.ckpt)?;
    let cloud = load_frame(args.frame, FrameFormat::Bin)?;
    let labels = load_labels(args.labels)?;
    let scale = rc.train.loss.map_scale(model.d());
    let (map, objects) = context_heatmap(&model, &cloud, &labels, class, &rc.train.grid, scale)?;
    let (pgm, min, max) = encode_pgm(&map);
    write_atomic(args.out, &pgm)?;
    let bounds = HeatmapBounds {
        class: class.name().to_string(),
        min,
        max,
        height: map.h,
        width: map.w,
        objects,
    };
    write_json(&args.out.with_extension("json"), &bounds)?;
    let echo = serde_json::json!({
        "ckpt": args.ckpt,
        "frame": args.frame,
        "labels": args.labels,
        "class": class.name(),
        "grid": rc.train.grid,
        "scale": scale,
    });
    write_record(args.out, false, "export-context", &echo)?;
    println!(
        "{} map over {objects} boxes, range [{min}, {max}]",
        class.name()
    );
    Ok(())
}

pub fn export_features(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
) -> CliResult<()> {
    let rc = load_config(config)?.config;
    let grid: GridSpec = rc.train.grid;
    let model = load_model(ckpt)?;
    let frames = load_dataset(data)?;
    let csv = features_csv(&model, &frames, &grid)?;
    write_atomic(out, csv.as_bytes())?;
    let echo = serde_json::json!({ "ckpt": ckpt, "data": data, "grid": grid });
    write_record(out, false, "export-features", &echo)?;
    println!("{} object rows", csv.lines().count() - 1);
    Ok(())
}

pub fn gradcheck(seed: u64, fault: Option<&str>, report: Option<&Path>) -> CliResult<()> {
    if let Some(name) = fault {
        if !dadt::gradcheck::COMPONENTS.contains(&name) {
            return Err(CliError::Validation(format!("unknown component {name:?}")));
        }
    }
    let started = Instant::now();
    let r = dadt::gradcheck::run(seed, fault)?;
    for c in &r.components {
        println!(
            "{:<32} max rel err {:.3e} over {:>2} instances ({} coords)  {}",
            c.name,
            c.max_rel_err,
            c.instances,
            c.coordinates,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "tolerance {:.0e}, {:.1} s",
        r.tolerance,
        started.elapsed().as_secs_f64()
    );
    if let Some(p) = report {
        write_json(p, &r)?;
    }
    if r.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = r
            .components
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::Check(format!(
            "gradient mismatch in {}",
            failed.join(", ")
        )))
    }
}
