//! One function per experiment command. Each reads only its inputs and
//! writes only inside the configured output directory.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use frkan::autodiff::{Eval, Graph};
use frkan::knots::{audit_network_knots, build_sawtooth_network, InputSlice, ScanSettings};
use frkan::layers::{
    init_network, load_checkpoint, save_checkpoint, Architecture, Layer, Network, NetworkConfig,
};
use frkan::spline::{spline_eval, GridSpec};
use frkan::tasks::{
    generate_classification, generate_feynman, generate_runge, load_csv, load_idx,
    write_dataset_csv, DatasetSplit, LabelColumn, Manifest,
};
use frkan::training::{config_hash, grid_range_experiment, train, Metric, StabilityConfig};
use serde_json::{json, Value};

use crate::config::{CommandKind, ExperimentConfig, TaskKind};
use crate::CliError;

fn validation(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

/// Runs the configured command and returns its summary.
pub fn execute(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    cfg.validate().map_err(validation)?;
    fs::create_dir_all(&cfg.out)
        .with_context(|| format!("creating output directory {}", cfg.out.display()))
        .map_err(runtime)?;
    write_json(&cfg.out.join("config.json"), cfg)?;
    let summary = match cfg.command {
        CommandKind::Train | CommandKind::Approx => run_training(cfg)?,
        CommandKind::Knots => run_knots(cfg)?,
        CommandKind::Stability => run_stability(cfg)?,
        CommandKind::Paramcount => run_paramcount(cfg)?,
        CommandKind::ExportActivation => run_export(cfg)?,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    if cfg.command == CommandKind::Knots && summary["pass"] == json!(false) {
        return Err(CliError::BoundCheck(format!(
            "measured {} knots outside [{}, {}]",
            summary["measured_total"], summary["bounds"]["lower"], summary["bounds"]["upper"]
        )));
    }
    Ok(summary)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(DatasetSplit, Option<Manifest>), CliError> {
    let t = &cfg.task;
    Ok(match cfg.task_kind() {
        TaskKind::Feynman => {
            let d = generate_feynman(&t.equation, t.n, cfg.seed)
                .with_context(|| format!("task.equation `{}`", t.equation))
                .map_err(runtime)?;
            (d.split, Some(d.manifest))
        }
        TaskKind::Runge => (
            generate_runge(t.n, cfg.seed)
                .context("task.n")
                .map_err(validation)?,
            None,
        ),
        TaskKind::Classification => (
            generate_classification(t.n, t.classes, t.dim, cfg.seed)
                .context("task.classes / task.dim")
                .map_err(validation)?,
            None,
        ),
        TaskKind::Csv => {
            let path = t.path.as_ref().expect("validated");
            let label = t
                .label_column
                .clone()
                .map(LabelColumn::Name)
                .unwrap_or(LabelColumn::Index(usize::MAX));
            let label = match label {
                LabelColumn::Index(_) => {
                    let header = fs::read_to_string(path)
                        .with_context(|| format!("task.path {}", path.display()))
                        .map_err(validation)?;
                    let cols = header.lines().next().map_or(0, |l| l.split(',').count());
                    LabelColumn::Index(cols.saturating_sub(1))
                }
                named => named,
            };
            let split = load_csv(path, &label, cfg.seed)
                .with_context(|| format!("task.path {}", path.display()))
                .map_err(validation)?;
            (split, None)
        }
        TaskKind::Idx => {
            let images = t.path.as_ref().expect("validated");
            let labels = t.labels_path.as_ref().expect("validated");
            let split = load_idx(images, labels, cfg.seed)
                .with_context(|| {
                    format!(
                        "task.path {} / task.labels_path {}",
                        images.display(),
                        labels.display()
                    )
                })
                .map_err(validation)?;
            (split, None)
        }
    })
}

/// Descriptor from the config, or the single-hidden-layer default.
pub fn architecture(cfg: &ExperimentConfig, d_in: usize, d_out: usize) -> Result<String, CliError> {
    let m = &cfg.model;
    let desc = m
        .arch
        .clone()
        .unwrap_or_else(|| format!("in:{d_in} -> {}:{} -> out:{d_out}", m.kind, m.hidden));
    let arch = Architecture::parse(&desc, m.kind)
        .with_context(|| format!("model.arch `{desc}`"))
        .map_err(validation)?;
    if arch.input != d_in || arch.output() != d_out {
        return Err(validation(anyhow!(
            "model.arch `{desc}` maps {} -> {} but the task needs {d_in} -> {d_out}",
            arch.input,
            arch.output()
        )));
    }
    Ok(desc)
}

pub fn network_config(cfg: &ExperimentConfig, arch: String) -> NetworkConfig {
    let m = &cfg.model;
    NetworkConfig {
        architecture: arch,
        default_kind: m.kind,
        grid: m.grid.spec(),
        groups: m.groups,
        shift_scale: m.shift_scale,
        silu: m.silu,
        norm: m.norm,
    }
}

fn run_training(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    let (split, manifest) = load_dataset(cfg)?;
    let arch = architecture(cfg, split.input_dim(), split.output_dim())?;
    let mut net = init_network(&network_config(cfg, arch), cfg.seed)
        .context("model")
        .map_err(validation)?;
    let mut record = train(&mut net, &split, &cfg.train.to_train_config(cfg.seed))
        .context("training")
        .map_err(runtime)?;
    record.config_hash = config_hash(&cfg.identity());
    write_text(&cfg.out.join("metrics.csv"), &record.to_csv())?;
    save_checkpoint(&net, cfg.out.join("checkpoint.json"))
        .context("writing checkpoint")
        .map_err(runtime)?;
    if let Some(m) = &manifest {
        write_json(&cfg.out.join("manifest.json"), m)?;
        write_dataset_csv(&split, cfg.out.join("dataset.csv"))
            .context("writing dataset.csv")
            .map_err(runtime)?;
    }
    let s = record.summary();
    let mut out = json!({
        "command": cfg.command.name(),
        "task": split.name,
        "architecture": net.descriptor(),
        "parameters": net.num_params(),
        "metric": s.metric,
        "train_metric": s.final_train_metric,
        "test_metric": s.final_eval_metric,
        "final_loss": s.final_loss,
        "final_penalty": s.final_penalty,
        "steps": s.steps,
        "nan_step": s.nan_step,
        "config_hash": s.config_hash,
        "wall_time_secs": s.wall_time_secs,
    });
    match s.metric {
        Metric::Rmse => out["test_rmse"] = json!(s.final_eval_metric),
        Metric::Accuracy => out["test_accuracy"] = json!(s.final_eval_metric),
        Metric::CrossEntropy => {}
    }
    Ok(out)
}

fn load_net(path: &Path, field: &str) -> Result<Network, CliError> {
    load_checkpoint(path)
        .with_context(|| format!("{field} {}", path.display()))
        .map_err(validation)
}

fn run_knots(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    let k = &cfg.knots;
    let net = if k.sawtooth {
        let g = &cfg.model.grid;
        let net = build_sawtooth_network(g.intervals, g.order, g.a, g.b, cfg.seed)
            .context("model.grid (the sawtooth needs K = 1)")
            .map_err(validation)?;
        save_checkpoint(&net, cfg.out.join("checkpoint.json"))
            .context("writing checkpoint")
            .map_err(runtime)?;
        net
    } else {
        load_net(
            k.checkpoint.as_ref().expect("validated"),
            "knots.checkpoint",
        )?
    };
    if k.slice_dim >= net.input_dim() {
        return Err(validation(anyhow!(
            "knots.slice_dim {} is out of range for {} inputs",
            k.slice_dim,
            net.input_dim()
        )));
    }
    let (a, b) = net
        .stages()
        .iter()
        .find_map(|s| s.layer.grid())
        .map_or((-1.0, 1.0), |g| (g.lower, g.upper));
    let (lo, hi) = (k.lo.unwrap_or(a), k.hi.unwrap_or(b));
    let settings = ScanSettings {
        samples: k.samples,
        ..ScanSettings::default()
    };
    let audit = audit_network_knots(
        &net,
        &InputSlice::axis(net.input_dim(), k.slice_dim),
        lo,
        hi,
        &settings,
    )
    .context("knot audit")
    .map_err(validation)?;
    write_json(&cfg.out.join("knots.json"), &audit)?;
    let mut v = serde_json::to_value(&audit).map_err(runtime)?;
    v["command"] = json!("knots");
    v["architecture"] = json!(net.descriptor());
    v["config_hash"] = json!(config_hash(&cfg.identity()));
    Ok(v)
}

pub fn stability_config(cfg: &ExperimentConfig) -> StabilityConfig {
    let s = &cfg.stability;
    let base = StabilityConfig::default();
    StabilityConfig {
        ranges: s.ranges.clone(),
        depth: s.depth,
        steps: s.steps,
        seed: cfg.seed,
        width: s.width,
        input_dim: cfg.task.dim,
        classes: cfg.task.classes,
        samples: s.samples,
        intervals: cfg.model.grid.intervals,
        order: cfg.model.grid.order,
        groups: cfg.model.groups,
        shift_scale: cfg.model.shift_scale,
        silu: s.silu,
        norm: cfg.model.norm,
        train: frkan::training::TrainConfig {
            learning_rate: s.lr,
            batch_size: cfg.train.batch,
            lambda: cfg.train.lambda,
            adam: cfg.train.adam,
            ..base.train
        },
    }
}

fn run_stability(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    let sc = stability_config(cfg);
    if sc.classes < 2 || sc.input_dim + 1 < sc.classes {
        return Err(validation(anyhow!(
            "task.classes = {} needs task.dim >= {}",
            sc.classes,
            sc.classes.saturating_sub(1)
        )));
    }
    let runs = grid_range_experiment(&sc)
        .context("stability experiment")
        .map_err(runtime)?;
    let mut rows = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        write_text(
            &cfg.out.join(format!("metrics_range{i}.csv")),
            &run.record.to_csv(),
        )?;
        let s = run.record.summary();
        rows.push(json!({
            "range": run.range,
            "nan_step": s.nan_step,
            "completed_steps": s.steps,
            "final_loss": s.final_loss,
            "final_eval_metric": s.final_eval_metric,
            "final_train_metric": s.final_train_metric,
            "metrics_csv": format!("metrics_range{i}.csv"),
        }));
    }
    let report = json!({
        "command": "stability",
        "architecture": sc.architecture(),
        "steps": sc.steps,
        "silu": sc.silu,
        "runs": rows,
        "config_hash": config_hash(&cfg.identity()),
    });
    write_json(&cfg.out.join("stability.json"), &report)?;
    Ok(report)
}

fn run_paramcount(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    let arch = match &cfg.model.arch {
        Some(a) => a.clone(),
        None => architecture(cfg, cfg.task.dim, 1)?,
    };
    let net = init_network(&network_config(cfg, arch), cfg.seed)
        .context("model")
        .map_err(validation)?;
    let count = net.param_count();
    write_json(&cfg.out.join("paramcount.json"), &count)?;
    Ok(json!({
        "command": "paramcount",
        "architecture": net.descriptor(),
        "total": count.total,
        "layers": count.layers,
    }))
}

fn silu(x: f64) -> f64 {
    Eval.silu(x)
}

/// `x, spline, silu_path, combined` over `[a - KΔg, b + KΔg]`.
pub fn activation_rows(
    net: &Network,
    layer: usize,
    unit: usize,
    samples: usize,
) -> Result<Vec<[f64; 4]>, CliError> {
    let stage = net.stages().get(layer).ok_or_else(|| {
        validation(anyhow!(
            "export.layer {layer} is out of range for {} layers",
            net.stages().len()
        ))
    })?;
    let (group, spline_w, silu_w, spec): (_, f64, f64, GridSpec) = match &stage.layer {
        Layer::Kan(l) => {
            let edges = l.d_in * l.d_out;
            if unit >= edges {
                return Err(validation(anyhow!(
                    "export.unit {unit} is out of range for {edges} edges"
                )));
            }
            let (i, o) = (unit / l.d_out, unit % l.d_out);
            let s = if l.silu { l.silu_weight[unit] } else { 0.0 };
            (l.edge_group(i, o), l.spline_weight[unit], s, l.knots.spec())
        }
        Layer::FrKan(l) => {
            if unit >= l.num_groups() {
                return Err(validation(anyhow!(
                    "export.unit {unit} is out of range for {} groups",
                    l.num_groups()
                )));
            }
            (
                l.groups[unit].clone(),
                1.0,
                if l.silu { 1.0 } else { 0.0 },
                l.grid(),
            )
        }
        Layer::Mlp(_) => {
            return Err(validation(anyhow!(
                "export.layer {layer} is an MLP layer without activations to export"
            )))
        }
    };
    let margin = spec.order as f64 * spec.spacing();
    let (lo, hi) = (spec.lower - margin, spec.upper + margin);
    Ok((0..samples)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (samples - 1) as f64;
            let s = spline_w * spline_eval(x, &group);
            let p = silu_w * silu(x);
            [x, s, p, s + p]
        })
        .collect())
}

fn run_export(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    let e = &cfg.export;
    let net = load_net(
        e.checkpoint.as_ref().expect("validated"),
        "export.checkpoint",
    )?;
    let rows = activation_rows(&net, e.layer, e.unit, e.samples)?;
    let mut csv = String::from("x,spline,silu_path,combined\n");
    for r in &rows {
        csv.push_str(&format!(
            "{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r[0], r[1], r[2], r[3]
        ));
    }
    write_text(&cfg.out.join("activation.csv"), &csv)?;
    Ok(json!({
        "command": "export-activation",
        "architecture": net.descriptor(),
        "layer": e.layer,
        "unit": e.unit,
        "rows": rows.len(),
        "interval": [rows[0][0], rows[rows.len() - 1][0]],
    }))
}
