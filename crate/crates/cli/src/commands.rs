//! Subcommand implementations. Each takes the effective configuration and
//! writes human-readable progress to `out`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use hgn_core::checkpoint::{Checkpoint, StoredHierarchy};
use hgn_core::data::{generate_synthetic, load_dataset, samples_checksum, save_dataset, PoseSample};
use hgn_core::graph::io::parse_edge_list;
use hgn_core::graph::skeleton::JOINT_NAMES;
use hgn_core::graph::{build_hierarchy_with, build_synthetic_body_mesh, hierarchy_checksum, CoarseningHierarchy};
use hgn_core::layers::GConvKind;
use hgn_core::metrics::{evaluate, EvalReport, Predictions};
use hgn_core::model::{Hgn, HgnConfig, Variant};
use hgn_core::training::{predict_samples, train as train_loop, EpochReport};
use hgn_core::Error;

use crate::config::{RunConfig, Source};
use crate::hierarchy_files::{config_comment, load_hierarchy, save_hierarchy};
use crate::svg::{error_chart, Series};
use crate::CliError;

fn echo_json(cfg: &RunConfig) -> String {
    serde_json::to_string(&cfg.echo()).expect("string map serializes")
}

pub fn coarsen(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let targets: Vec<usize> = cfg.list("targets").map_err(|e| CliError::usage(e.message))?;
    if targets.is_empty() || targets.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CliError::usage(format!("targets must be a strictly decreasing list, got `{}`", cfg.str("targets"))));
    }
    let graph = match cfg.str("graph") {
        "" => build_synthetic_body_mesh(cfg.get("mesh_vertices")?, cfg.get("mesh_seed")?)?.graph,
        path => {
            let text = fs::read_to_string(path).map_err(|e| CliError::parse(format!("{path}: {e}")))?;
            parse_edge_list(&text).map_err(|e| CliError::parse(format!("{path}: {e}")))?
        }
    };
    let h = build_hierarchy_with(&graph, &targets, cfg.get("seed")?, cfg.hem_score()?).map_err(|e| match e {
        Error::InvalidArgument(m) => CliError::usage(m),
        other => other.into(),
    })?;
    let dir = cfg.str("hierarchy");
    let summary = save_hierarchy(&h, Path::new(dir), &cfg.echo())?;
    writeln!(out, "level sizes: {:?}", summary.sizes)?;
    let ratios: Vec<String> = summary.ratios.iter().map(|r| format!("{r:.3}")).collect();
    writeln!(out, "ratios: [{}]", ratios.join(", "))?;
    for s in &summary.selected {
        writeln!(
            out,
            "target {}: level {} with {} nodes, {} edges, {}",
            s.target,
            s.level,
            s.nodes,
            s.edges,
            if s.connected { "connected" } else { "disconnected" }
        )?;
    }
    writeln!(out, "checksum {}", summary.checksum)?;
    writeln!(out, "wrote {dir}")?;
    Ok(())
}

fn hierarchy_at(cfg: &RunConfig) -> Result<CoarseningHierarchy, CliError> {
    let dir = cfg.str("hierarchy");
    load_hierarchy(Path::new(dir)).map_err(|e| CliError::parse(format!("hierarchy {dir}: {e}")))
}

pub fn gen_data(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let h = hierarchy_at(cfg)?;
    let generator = cfg.generator()?;
    let mut ds = generate_synthetic(&generator, &h)?;
    ds.meta.config = cfg.echo();
    let path = cfg.str("dataset");
    save_dataset(&ds, path)?;
    writeln!(out, "wrote {} samples to {path}", ds.len())?;
    writeln!(out, "samples_sha256 {}", samples_checksum(&ds)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &str) -> Result<Checkpoint<f64>, CliError> {
    Checkpoint::load(path).map_err(|e| {
        let code = CliError::from(e);
        CliError::new(code.code, format!("checkpoint {path}: {}", code.message))
    })
}

#[derive(Serialize)]
struct ReportLine<'a> {
    #[serde(flatten)]
    epoch: &'a EpochReport,
    variant: &'a str,
    gconv: &'a str,
    channels: usize,
    param_count: usize,
    config: &'a BTreeMap<String, String>,
}

fn same_architecture(a: &HgnConfig, b: &HgnConfig) -> bool {
    HgnConfig { seed: 0, ..a.clone() } == HgnConfig { seed: 0, ..b.clone() }
}

pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let h = hierarchy_at(cfg)?;
    let checksum = hierarchy_checksum(&h);
    let ds = load_dataset(cfg.str("dataset")).map_err(|e| CliError::parse(format!("dataset {}: {e}", cfg.str("dataset"))))?;
    if let Some(c) = &ds.meta.hierarchy_checksum {
        if *c != checksum {
            return Err(CliError::compat(format!("dataset was generated for hierarchy {c}, not {checksum}")));
        }
    }
    let tcfg = cfg.train()?;
    let mcfg = cfg.model()?;
    let mut model = match cfg.str("init_checkpoint") {
        "" => Hgn::<f64>::build(&mcfg, &h)?,
        path => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.hierarchy_checksum() != checksum {
                return Err(CliError::compat(format!("{path} was trained on a different hierarchy")));
            }
            if !same_architecture(&ckpt.model.config, &mcfg) {
                return Err(CliError::compat(format!("{path} holds a different architecture than configured")));
            }
            ckpt.model
        }
    };

    let echo = cfg.echo();
    let report_path = cfg.str("report");
    let mut report = BufWriter::new(File::create(report_path)?);
    let param_count = model.param_count();
    let (variant, gconv) = (mcfg.variant.as_str(), mcfg.gconv_kind.as_str());
    let mut last = None;
    let outcome = train_loop(&mut model, &ds, &tcfg, None, |r| {
        let line = ReportLine { epoch: r, variant, gconv, channels: mcfg.channels, param_count, config: &echo };
        serde_json::to_writer(&mut report, &line)?;
        report.write_all(b"\n")?;
        report.flush()?;
        last = Some(r.clone());
        Ok(())
    });
    let outcome = outcome.map_err(|e| {
        let e = CliError::from(e);
        CliError::new(e.code, format!("training failed: {}", e.message))
    })?;

    let ckpt = Checkpoint {
        config: echo,
        model,
        hierarchy: StoredHierarchy { source_nodes: h.source.n_nodes(), selected: h.selected.clone() },
        optimizer: Some(outcome.optimizer),
        epochs_done: tcfg.epochs,
    };
    let ckpt_path = cfg.str("checkpoint");
    ckpt.save(ckpt_path)?;
    writeln!(out, "{variant}/{}/{gconv}: {param_count} parameters", mcfg.channels)?;
    if let Some(r) = last {
        write!(out, "epoch {}: loss {:.6}", r.epoch, r.train_loss)?;
        if let Some(v) = r.train_mpjpe_mm {
            write!(out, ", train mpjpe {v:.2} mm")?;
        }
        if let Some(v) = r.val_mpjpe_mm {
            write!(out, ", val mpjpe {v:.2} mm")?;
        }
        writeln!(out)?;
    }
    writeln!(out, "wrote {ckpt_path} and {report_path}")?;
    Ok(())
}

fn eval_threads() -> usize {
    std::env::var("HGN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Eval-mode predictions computed chunk by chunk on up to `HGN_THREADS`
/// threads; the result does not depend on the thread count.
pub fn predict_parallel(model: &Hgn<f64>, samples: &[&PoseSample], batch: usize, flip: bool) -> Result<Predictions, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eval_threads())
        .build()
        .map_err(|e| CliError::usage(format!("cannot start eval threads: {e}")))?;
    let chunks: Vec<&[&PoseSample]> = samples.chunks(batch.max(1)).collect();
    let parts: Vec<_> = pool.install(|| chunks.par_iter().map(|c| predict_samples(model, c, batch, flip)).collect());
    let mut all = Predictions::default();
    for part in parts {
        let p = part?;
        all.pose.extend(p.pose);
        if let Some(m) = p.mesh_mid {
            all.mesh_mid.get_or_insert_with(Vec::new).extend(m);
        }
        if let Some(m) = p.mesh_top {
            all.mesh_top.get_or_insert_with(Vec::new).extend(m);
        }
    }
    Ok(all)
}

pub fn eval(cfg: &RunConfig, ckpt: Checkpoint<f64>, out: &mut dyn Write) -> Result<(), CliError> {
    let path = cfg.str("dataset");
    let ds = load_dataset(path).map_err(|e| CliError::parse(format!("dataset {path}: {e}")))?;
    let expected = ckpt.hierarchy_checksum();
    if let Some(c) = &ds.meta.hierarchy_checksum {
        if *c != expected {
            return Err(CliError::compat(format!("dataset hierarchy {c} does not match checkpoint hierarchy {expected}")));
        }
    }
    let indices: Vec<usize> = match cfg.str("eval_split") {
        "all" => (0..ds.len()).collect(),
        split @ ("train" | "val") => {
            let (train, val) = ds.split(cfg.get("val_fraction")?, cfg.get("split_seed")?);
            if split == "train" {
                train
            } else {
                val
            }
        }
        other => return Err(CliError::parse(format!("unknown eval_split `{other}` (all, train, val)"))),
    };
    if indices.is_empty() {
        return Err(CliError::parse(format!("eval split `{}` is empty", cfg.str("eval_split"))));
    }
    let samples: Vec<PoseSample> = indices.iter().map(|&i| ds.samples[i].clone()).collect();
    let refs: Vec<&PoseSample> = samples.iter().collect();
    let pred = predict_parallel(&ckpt.model, &refs, cfg.get("eval_batch_size")?, cfg.get("flip_eval")?)?;
    let mut report = evaluate(&pred, &samples)?;
    report.config = cfg.echo();

    let dir = Path::new(cfg.str("out_dir"));
    fs::create_dir_all(dir)?;
    let head = config_comment(&report.config);
    fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(dir.join("per_joint.csv"), head.clone() + &report.per_joint_csv())?;
    fs::write(dir.join("per_action.csv"), head + &report.per_action_csv())?;

    let compare: Option<EvalReport> = match cfg.str("compare") {
        "" => None,
        p => Some(serde_json::from_str(&fs::read_to_string(p).map_err(|e| CliError::parse(format!("{p}: {e}")))?)?),
    };
    let label = format!("{}/{}", cfg.str("variant"), cfg.str("channels"));
    let mut series = vec![Series { label: &label, per_joint: &report.per_joint_mm, per_action: &report.per_action_mm }];
    let compare_label = compare.as_ref().map(|c| format!("{}/{}", c.config.get("variant").map_or("?", |s| s), c.config.get("channels").map_or("?", |s| s)));
    if let (Some(c), Some(l)) = (&compare, &compare_label) {
        series.insert(0, Series { label: l, per_joint: &c.per_joint_mm, per_action: &c.per_action_mm });
    }
    fs::write(dir.join("errors.svg"), error_chart(&JOINT_NAMES, &series, &echo_json(cfg)))?;

    writeln!(out, "samples {}", report.n_samples)?;
    writeln!(out, "mpjpe {:.3} mm", report.mpjpe_mm)?;
    writeln!(out, "pa_mpjpe {:.3} mm", report.pa_mpjpe_mm)?;
    if let Some(v) = report.mpvpe_mid_mm {
        writeln!(out, "mpvpe_mid {v:.3} mm")?;
    }
    if let Some(v) = report.mpvpe_top_mm {
        writeln!(out, "mpvpe_top {v:.3} mm")?;
    }
    if let (Some(p), Some(a)) = (report.pck_pct, report.auc_pct) {
        writeln!(out, "pck {p:.2} %, auc {a:.2} %")?;
    }
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}

/// Published parameter counts, keyed by variant, channels and convolution.
pub const REFERENCE_COUNTS: [(Variant, usize, GConvKind, &str); 10] = [
    (Variant::Full, 128, GConvKind::Semantic, "1.04M"),
    (Variant::Full, 64, GConvKind::Semantic, "0.29M"),
    (Variant::Baseline, 128, GConvKind::Semantic, "0.43M"),
    (Variant::NoTop, 128, GConvKind::Semantic, "0.82M"),
    (Variant::NoMidCoarsest, 128, GConvKind::Semantic, "0.81M"),
    (Variant::Full, 79, GConvKind::Semantic, "0.43M"),
    (Variant::NoTop, 91, GConvKind::Semantic, "0.43M"),
    (Variant::NoMidCoarsest, 92, GConvKind::Semantic, "0.43M"),
    (Variant::Full, 128, GConvKind::Vanilla, "0.71M"),
    (Variant::Full, 64, GConvKind::Vanilla, "0.21M"),
];

pub fn reference_count(variant: Variant, channels: usize, kind: GConvKind) -> Option<&'static str> {
    REFERENCE_COUNTS.iter().find(|r| (r.0, r.1, r.2) == (variant, channels, kind)).map(|r| r.3)
}

fn parse_variant_spec(spec: &str) -> Result<(Variant, usize, GConvKind), CliError> {
    let parts: Vec<&str> = spec.trim().split(':').collect();
    let bad = || CliError::parse(format!("param_variants entry `{spec}` is not variant:channels[:gconv]"));
    match parts[..] {
        [v, c] | [v, c, _] => {
            let kind = parts.get(2).map_or(Ok(GConvKind::Semantic), |k| k.parse())?;
            Ok((v.parse()?, c.parse().map_err(|_| bad())?, kind))
        }
        _ => Err(bad()),
    }
}

pub fn param_count(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let base = cfg.model()?;
    let rows: Vec<(Variant, usize, GConvKind)> = if !cfg.str("param_variants").is_empty() {
        cfg.str("param_variants").split(',').map(parse_variant_spec).collect::<Result<_, _>>()?
    } else if ["variant", "channels", "gconv"].iter().any(|k| cfg.source(k) > Source::Default) {
        vec![(base.variant, base.channels, base.gconv_kind)]
    } else {
        REFERENCE_COUNTS.iter().map(|r| (r.0, r.1, r.2)).collect()
    };
    let h = if Path::new(cfg.str("hierarchy")).join("summary.json").exists() {
        hierarchy_at(cfg)?
    } else {
        let mesh = build_synthetic_body_mesh(cfg.get("mesh_vertices")?, cfg.get("mesh_seed")?)?;
        build_hierarchy_with(&mesh.graph, &cfg.list::<usize>("targets")?, cfg.get("seed")?, cfg.hem_score()?)?
    };
    writeln!(out, "variant\tchannels\tgconv\tparams\tparams_m\treference")?;
    for (variant, channels, kind) in rows {
        let mcfg = HgnConfig { variant, channels, gconv_kind: kind, ..base.clone() };
        let n = Hgn::<f64>::build(&mcfg, &h)?.param_count();
        let reference = reference_count(variant, channels, kind).unwrap_or("-");
        writeln!(out, "{}\t{channels}\t{}\t{n}\t{:.2}M\t{reference}", variant.as_str(), kind.as_str(), n as f64 / 1e6)?;
    }
    Ok(())
}
