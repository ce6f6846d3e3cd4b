use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use roadfill::data::synthetic::{generate_dataset, write_dataset, SyntheticDatasetSpec};
use roadfill::data::{build_manifest, ingest, subset_halving, DatasetManifest, SourceImage, Split, Style};
use roadfill::evaluation::{
    emit_report, evaluate_bundle, load_manifest_samples, matrix_tsv, parse_matrix_tsv, run_matrix, summarize,
    MatrixSpec, ReportOptions,
};
use roadfill::masking::{preview_strip, MaskSchedule};
use roadfill::model::{describe, load_checkpoint, CheckpointBundle, SegmentationModel, ToyUNet};
use roadfill::pngio::{self, PixelLayout};
use roadfill::trainer::{
    initial_model, inpainting_model, run_options, run_pipeline, run_step1, run_step2, run_step3, segmentation_model,
    PipelineConfig, PipelineData, PipelineMode, StepOutcome,
};

use crate::cli::*;
use crate::{Status, UserError};

pub fn run(cmd: Command) -> Result<Status> {
    match cmd {
        Command::Data(DataCmd::MakeSynthetic(a)) => make_synthetic(a),
        Command::Data(DataCmd::BuildManifest(a)) => build(a),
        Command::Data(DataCmd::Subset(a)) => subset(a),
        Command::Train(TrainCmd::Step1(a)) => step(1, a),
        Command::Train(TrainCmd::Step2(a)) => step(2, a),
        Command::Train(TrainCmd::Step3(a)) => step(3, a),
        Command::Train(TrainCmd::Pipeline(a)) => pipeline(a),
        Command::Eval(EvalCmd::Evaluate(a)) => eval_one(a),
        Command::Eval(EvalCmd::Matrix(a)) => matrix(a),
        Command::Eval(EvalCmd::Report(a)) => report(a),
        Command::Mask(MaskCmd::Preview(a)) => preview(a),
        Command::Model(ModelCmd::Describe(a)) => describe_model(a),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(UserError(format!("missing {what}: {}", path.display())).into())
    }
}

fn load_bundle(path: &Path) -> Result<CheckpointBundle> {
    require(path, "checkpoint")?;
    Ok(CheckpointBundle::load(path)?)
}

fn make_synthetic(a: MakeSynthetic) -> Result<Status> {
    let (train_styles, val_styles) = if a.holdout {
        (vec![Style::A, Style::B, Style::C], vec![Style::D])
    } else {
        (Style::ALL.to_vec(), Style::ALL.to_vec())
    };
    let spec = SyntheticDatasetSpec {
        canvas: a.canvas,
        train_scenes: a.scenes,
        val_scenes: a.val_scenes,
        seed: a.seed,
        train_styles,
        val_styles,
    };
    let scenes = generate_dataset(&spec)?;
    let manifest = write_dataset(&scenes, a.canvas, &a.out)?;
    manifest.split(Split::Train).save(&a.out.join("train.tsv"))?;
    manifest.split(Split::Val).save(&a.out.join("val.tsv"))?;
    let path = a.out.join("manifest.tsv");
    Ok(Status {
        text: format!(
            "wrote {} train and {} val scenes ({}px), {} and per-split train.tsv, val.tsv",
            a.scenes,
            a.val_scenes,
            a.canvas,
            path.display()
        ),
        json: json!({ "manifest": path, "records": manifest.len(), "train": a.scenes, "val": a.val_scenes }),
    })
}

fn build(a: BuildManifest) -> Result<Status> {
    let manifest = match (&a.source_dir, a.placeholders) {
        (_, Some(n)) => {
            let sources: Vec<SourceImage> =
                (0..n).map(|i| SourceImage::placeholder(format!("src{i:05}"), a.size, a.size)).collect();
            build_manifest(&sources, a.crop, a.overlap, a.split)?
        }
        (Some(dir), None) => {
            require(dir, "source folder")?;
            let sources = match a.layout {
                Layout::Deepglobe => ingest::scan_deepglobe(dir)?,
                Layout::CityOsm => ingest::scan_city_osm(dir)?,
            };
            ingest::manifest_from_sources(&sources, a.crop, a.overlap, a.split)?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    manifest.save(&a.out)?;
    let sources = manifest.source_ids().len();
    Ok(Status {
        text: format!("{} records from {sources} sources -> {}", manifest.len(), a.out.display()),
        json: json!({ "manifest": a.out, "records": manifest.len(), "sources": sources }),
    })
}

fn subset(a: Subset) -> Result<Status> {
    require(&a.manifest, "manifest")?;
    let full = DatasetManifest::load(&a.manifest)?;
    let kept = subset_halving(&full, a.level, a.seed)?;
    kept.save(&a.out)?;
    let (s, r) = (kept.source_ids().len(), kept.len());
    Ok(Status {
        text: format!("{} subset: {s} of {} sources, {r} records -> {}", a.level, full.source_ids().len(), a.out.display()),
        json: json!({ "manifest": a.out, "records": r, "sources": s, "level": a.level.to_string() }),
    })
}

/// Config precedence: defaults of the profile, then the file, then `--set`,
/// then the dedicated flags.
pub fn load_config(a: &ConfigArgs) -> Result<PipelineConfig> {
    let mut overrides = a.overrides.clone();
    if let Some(seed) = a.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = match &a.config {
        Some(path) => {
            require(path, "config file")?;
            PipelineConfig::load(path, &overrides)?
        }
        None => PipelineConfig::from_toml_with_overrides("", &overrides)?,
    };
    if let Some(out) = &a.out {
        cfg.out_dir = Some(out.clone());
    }
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from("runs"));
    }
    Ok(cfg)
}

fn load_data(cfg: &PipelineConfig) -> Result<PipelineData> {
    let d = &cfg.data;
    for p in [&d.unlabeled, &d.labeled, &d.validation].into_iter().flatten() {
        require(p, "manifest")?;
    }
    Ok(PipelineData::load(d)?)
}

fn prepare_out(cfg: &PipelineConfig) -> Result<()> {
    let dir = cfg.out_dir.as_ref().expect("load_config sets out_dir");
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn step_json(o: &StepOutcome) -> serde_json::Value {
    json!({
        "step": o.step.to_string(),
        "checkpoint": o.checkpoint,
        "completed_epochs": o.completed_epochs,
        "final_loss": o.log.epochs().last().map(|r| r.l_total),
        "val_metric": o.history.last().copied().flatten(),
        "warnings": o.warnings,
    })
}

fn step_line(o: &StepOutcome) -> String {
    let loss = o.log.epochs().last().map_or("-".into(), |r| format!("{:.5}", r.l_total));
    let val = o.history.last().copied().flatten().map_or("-".into(), |v| format!("{v:.4}"));
    let ckpt = o.checkpoint.as_ref().map_or("-".into(), |p| p.display().to_string());
    let mut line = format!("{}: {} epochs, loss {loss}, val {val}, checkpoint {ckpt}", o.step, o.completed_epochs);
    for w in &o.warnings {
        line.push_str(&format!("\nwarning: {w}"));
    }
    line
}

/// An RGB-headed network, loaded from `init` when given.
fn trunk(cfg: &PipelineConfig, init: Option<&CheckpointBundle>) -> Result<ToyUNet> {
    let mut model = inpainting_model(cfg)?;
    if let Some(b) = init {
        load_checkpoint(b, &mut model)?;
    }
    Ok(model)
}

fn step(n: u8, a: StepArgs) -> Result<Status> {
    if a.scratch && n != 3 {
        return Err(UserError("--scratch only applies to step3".into()).into());
    }
    if n == 1 && a.init.is_some() {
        return Err(UserError("step1 starts from random weights; use --resume to continue".into()).into());
    }
    let mut cfg = load_config(&a.config)?;
    let resume = a.resume.as_deref().map(load_bundle).transpose()?;
    let init = a.init.as_deref().map(load_bundle).transpose()?;
    if n > 1 && init.is_none() && resume.is_none() && !a.scratch {
        return Err(UserError(format!("step{n} needs --init <checkpoint>{}", if n == 3 { " or --scratch" } else { "" })).into());
    }
    let data = load_data(&cfg)?;
    prepare_out(&cfg)?;
    let mut opts = run_options(&cfg, &data);
    opts.resume = resume;
    opts.stop_after = a.stop_after;
    let outcome = match n {
        1 => run_step1(&cfg.step1, &mut trunk(&cfg, None)?, &data.unlabeled, &data.validation, &opts)?,
        2 => {
            cfg.step2.init_from = a.init.clone();
            run_step2(&cfg.step2, &mut trunk(&cfg, init.as_ref())?, &data.labeled, &data.validation, &opts)?
        }
        _ => {
            cfg.step3.init_from = a.init.clone();
            let base = if a.scratch { initial_model(&cfg) } else { trunk(&cfg, init.as_ref())? };
            let mut model = segmentation_model(&cfg, base)?;
            run_step3(&cfg.step3, &mut model, &data.labeled, &data.validation, cfg.num_classes, &opts)?
        }
    };
    Ok(Status {
        text: step_line(&outcome),
        json: step_json(&outcome),
    })
}

fn pipeline(a: PipelineArgs) -> Result<Status> {
    let cfg = load_config(&a.config)?;
    let mode = match (a.skip_guided, a.scratch) {
        (true, _) => PipelineMode::SkipGuided,
        (_, true) => PipelineMode::Scratch,
        _ => PipelineMode::Full,
    };
    let data = load_data(&cfg)?;
    prepare_out(&cfg)?;
    let out = run_pipeline(&cfg, mode, &data)?;
    let dir = cfg.out_dir.as_ref().expect("set");
    let lines: Vec<String> = out.steps.iter().map(step_line).collect();
    Ok(Status {
        text: format!("{}\nlineage: {}", lines.join("\n"), dir.join("lineage.tsv").display()),
        json: json!({
            "lineage": dir.join("lineage.tsv"),
            "steps": out.steps.iter().map(step_json).collect::<Vec<_>>(),
            "final_metric": out.final_metric(),
        }),
    })
}

fn eval_one(a: Evaluate) -> Result<Status> {
    let bundle = load_bundle(&a.ckpt)?;
    require(&a.manifest, "manifest")?;
    let samples = load_manifest_samples(&a.manifest)?;
    let report = evaluate_bundle(&bundle, &samples, a.threshold)?;
    if let Some(out) = &a.out {
        std::fs::write(out, report.to_tsv()).with_context(|| format!("writing {}", out.display()))?;
    }
    let per_class: serde_json::Map<String, serde_json::Value> = report
        .per_class
        .iter()
        .map(|(c, v)| (c.to_string(), json!({ "iou": v.iou(), "per_image_mean": v.per_image_mean })))
        .collect();
    Ok(Status {
        text: report.to_tsv().trim_end().to_string(),
        json: json!({ "images": report.n_images, "mean_iou": report.mean_iou(), "classes": per_class, "report": a.out }),
    })
}

fn matrix(a: Matrix) -> Result<Status> {
    require(&a.spec, "matrix spec")?;
    let text = std::fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let spec = MatrixSpec::from_toml(&text)?;
    let base = a.spec.parent().unwrap_or(Path::new("."));
    let m = run_matrix(&spec, base)?;
    let rows = summarize(&m);
    let table = matrix_tsv(&rows);
    std::fs::write(&a.out, &table).with_context(|| format!("writing {}", a.out.display()))?;
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| r.failed)
        .map(|r| format!("{}/{}/{}: {}", r.level, r.domain, r.arm, r.note))
        .collect();
    if !failed.is_empty() {
        return Err(UserError(format!(
            "{} of {} rows failed (table written to {}):\n  {}",
            failed.len(),
            rows.len(),
            a.out.display(),
            failed.join("\n  ")
        ))
        .into());
    }
    Ok(Status {
        text: format!("{}\n-> {}", table.trim_end(), a.out.display()),
        json: json!({ "table": a.out, "rows": rows.len() }),
    })
}

fn report(a: Report) -> Result<Status> {
    require(&a.matrix, "matrix table")?;
    let text = std::fs::read_to_string(&a.matrix).with_context(|| format!("reading {}", a.matrix.display()))?;
    let rows = parse_matrix_tsv(&text, &a.matrix)?;
    let opts = ReportOptions {
        mask_epochs: a.mask_epochs,
        mask_canvas: a.mask_size,
        seed: a.seed,
        ..ReportOptions::default()
    };
    let files = emit_report(&rows, &opts, &a.out)?;
    Ok(Status {
        text: format!(
            "wrote {}, {} and {}",
            files.table.display(),
            files.plot.display(),
            files.mask_figure.display()
        ),
        json: json!({ "table": files.table, "plot": files.plot, "mask_figure": files.mask_figure }),
    })
}

fn preview(a: Preview) -> Result<Status> {
    let schedule = match &a.schedule {
        Some(p) => {
            require(p, "schedule file")?;
            std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?
                .parse::<MaskSchedule>()?
        }
        None => MaskSchedule::table(),
    };
    if a.epochs.is_empty() {
        return Err(UserError("--epochs needs at least one epoch".into()).into());
    }
    let (w, h, px) = preview_strip(&schedule, &a.epochs, a.size, a.seed)?;
    pngio::write(&a.out, w, h, PixelLayout::Gray, &px)?;
    let panels: Vec<_> = a
        .epochs
        .iter()
        .map(|&e| {
            let (n, s) = schedule.at(e);
            json!({ "epoch": e, "clusters": n, "size": s })
        })
        .collect();
    Ok(Status {
        text: format!("{} panel(s), {w}x{h} -> {}", a.epochs.len(), a.out.display()),
        json: json!({ "out": a.out, "width": w, "height": h, "panels": panels }),
    })
}

fn describe_model(a: Describe) -> Result<Status> {
    let model = match &a.ckpt {
        Some(p) => ToyUNet::from_bundle(&load_bundle(p)?)?,
        None => {
            if a.classes == 0 || a.base == 0 {
                return Err(UserError("--classes and --base must be positive".into()).into());
            }
            ToyUNet::with_base(3, a.classes, a.base, 0)
        }
    };
    let text = describe(&model);
    Ok(Status {
        json: json!({
            "out_channels": model.out_channels(),
            "parameters": model.parameter_count(),
            "final_layer": model.final_layer(),
            "description": text,
        }),
        text: text.trim_end().to_string(),
    })
}
