use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::Args;
use serde_json::{json, Value};
use vcfes_core::checkpoint::{load_checkpoint, save_checkpoint};
use vcfes_core::dataset::{load_samples, read_manifest, EmbeddingMatrix};
use vcfes_core::evaluation::{
    compare_modes, rank_query, write_rank_rows, EvalProtocol, MetricReport, QueryItem, RANK_TABLE_HEADER,
};
use vcfes_core::gradcheck::{run_gradcheck, GradcheckOptions, TOLERANCE};
use vcfes_core::retrieval::rank;
use vcfes_core::synthetic::{generate, SyntheticSpec};
use vcfes_core::training::IdLossMode;
use vcfes_core::{
    build_index, fit, load_index, project, save_index, Error, GalleryEntry, GalleryIndex, HeadParameters, ModelShape,
    ReidModel, TrainingSample, ViewWeighting,
};

use crate::config::{existing, required, ConfigArgs, RunConfig};
use crate::{NumericFailure, UsageError};

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = 20)]
    pub identities: usize,
    #[arg(long, default_value_t = 12)]
    pub views: usize,
    /// Backbone embedding dimension D.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub signature_dim: usize,
    #[arg(long, default_value_t = 0.15)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.3)]
    pub overlap: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_identities: args.identities,
        views_per_identity: args.views,
        backbone_dim: args.dim,
        signature_dim: args.signature_dim,
        noise_sigma: args.noise,
        distractor_overlap: args.overlap,
        seed: args.seed,
    };
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let ds = generate(&spec)?;
    ds.write(&args.out)?;
    println!(
        "wrote {} samples ({} identities x {} views) to {}",
        ds.samples.len(),
        spec.num_identities,
        spec.views_per_identity,
        args.out.display()
    );
    Ok(())
}

struct SplitPaths<'a> {
    manifest: &'a Path,
    embeddings: &'a Path,
    masks: &'a Path,
}

fn split_paths<'a>(cfg: &'a RunConfig, manifest: &'a Option<std::path::PathBuf>, key: &str) -> Result<SplitPaths<'a>> {
    Ok(SplitPaths {
        manifest: existing(manifest, key)?,
        embeddings: existing(&cfg.embeddings, "embeddings")?,
        masks: existing(&cfg.masks, "masks")?,
    })
}

fn load_split(paths: &SplitPaths<'_>) -> Result<Vec<TrainingSample>> {
    let records = read_manifest(paths.manifest)?;
    let embeddings = EmbeddingMatrix::load(paths.embeddings)?;
    Ok(load_samples(&records, &embeddings, paths.masks)?)
}

pub fn train(args: &ConfigArgs, timestamps: bool) -> Result<()> {
    let cfg = RunConfig::load(args)?;
    cfg.train.validate()?;
    let inputs = split_paths(&cfg, &cfg.train_manifest, "train_manifest")?;
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;

    let samples = load_split(&inputs)?;
    let input_dim = samples
        .first()
        .map(|s| s.embedding.len())
        .ok_or_else(|| Error::DegenerateDataset("training manifest is empty".into()))?;
    let classes = samples.iter().map(|s| s.identity as usize).max().unwrap_or(0) + 1;
    let shape = ModelShape {
        input_dim,
        embed_dim: cfg.embed_dim,
        classes,
        arc_scale: cfg.arc_scale,
        arc_margin: cfg.arc_margin,
        use_bias: cfg.use_bias,
    };
    let out = fit(&samples, shape, &cfg.train)?;
    save_checkpoint(&out.model, ckpt)?;

    let log_path = cfg.log.clone().unwrap_or_else(|| ckpt.join("train_log.jsonl"));
    let mut log = String::new();
    for record in &out.history {
        let mut line = serde_json::to_value(record)?;
        if timestamps {
            line["timestamp"] = json!(unix_seconds());
        }
        log.push_str(&line.to_string());
        log.push('\n');
    }
    write_text(&log_path, &log)?;

    let means = out.epoch_means();
    println!(
        "trained on {} samples, {} identities, {} epochs; mean loss {:.4} -> {:.4}",
        samples.len(),
        classes,
        cfg.train.epochs,
        means.first().copied().unwrap_or(f64::NAN),
        means.last().copied().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn project_all(samples: &[TrainingSample], heads: &HeadParameters) -> Result<Vec<GalleryEntry>> {
    samples
        .iter()
        .map(|s| {
            Ok(GalleryEntry {
                identity: s.identity,
                image_id: s.image_id.clone(),
                spaces: project(&s.embedding, heads)?,
                area_ratios: s.area_ratios,
            })
        })
        .collect()
}

pub fn gallery(args: &ConfigArgs) -> Result<()> {
    let cfg = RunConfig::load(args)?;
    let ckpt = existing(&cfg.checkpoint, "checkpoint")?;
    let inputs = split_paths(&cfg, &cfg.gallery_manifest, "gallery_manifest")?;
    let out = required(&cfg.index, "index")?;

    let model = load_checkpoint(ckpt)?;
    let samples = load_split(&inputs)?;
    let index = build_index(project_all(&samples, &model.heads)?)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_index(&index, out)?;
    println!(
        "indexed {} entries (d = {}) into {}",
        index.len(),
        index.dim(),
        out.display()
    );
    Ok(())
}

/// Checkpoint and index from the same run, or a format mismatch.
fn load_model_and_index(cfg: &RunConfig) -> Result<(ReidModel, GalleryIndex)> {
    let ckpt = existing(&cfg.checkpoint, "checkpoint")?;
    let index_path = existing(&cfg.index, "index")?;
    let model = load_checkpoint(ckpt)?;
    let index = load_index(index_path)?;
    if !index.is_empty() && index.dim() != model.heads.embed_dim() {
        return Err(Error::FormatMismatch(format!(
            "index {} holds d = {} embeddings but checkpoint {} projects to d = {}",
            index_path.display(),
            index.dim(),
            ckpt.display(),
            model.heads.embed_dim()
        ))
        .into());
    }
    Ok((model, index))
}

fn to_queries(samples: &[TrainingSample], heads: &HeadParameters) -> Result<Vec<QueryItem>> {
    samples
        .iter()
        .map(|s| {
            Ok(QueryItem {
                image_id: s.image_id.clone(),
                identity: s.identity,
                spaces: project(&s.embedding, heads)?,
                area_ratios: s.area_ratios,
            })
        })
        .collect()
}

fn parse_mode(s: &str) -> Result<ViewWeighting> {
    Ok(s.parse().map_err(|e: Error| UsageError(e.to_string()))?)
}

pub fn query(args: &ConfigArgs, image_id: &str, k: usize, mode: &str, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(args)?;
    let weighting = parse_mode(mode)?;
    if k == 0 {
        return Err(UsageError("--k must be at least 1".into()).into());
    }
    let inputs = split_paths(&cfg, &cfg.query_manifest, "query_manifest")?;
    let (model, index) = load_model_and_index(&cfg)?;
    if index.is_empty() {
        return Err(Error::EmptyIndex.into());
    }

    let records = read_manifest(inputs.manifest)?;
    let record = records
        .iter()
        .find(|r| r.image_id == image_id)
        .ok_or_else(|| UsageError(format!("image id {image_id:?} not in {}", inputs.manifest.display())))?;
    let embeddings = EmbeddingMatrix::load(inputs.embeddings)?;
    let sample = load_samples(std::slice::from_ref(record), &embeddings, inputs.masks)?.remove(0);
    let spaces = project(&sample.embedding, &model.heads)?;

    let mut ranked = rank(&index, &spaces, &sample.area_ratios, cfg.combine, weighting)?;
    ranked.hits.truncate(k);
    let mut buf = Vec::new();
    writeln!(buf, "{RANK_TABLE_HEADER}")?;
    write_rank_rows(&mut buf, image_id, &ranked)?;
    match out {
        Some(p) => write_text(p, std::str::from_utf8(&buf)?)?,
        None => io::stdout().write_all(&buf)?,
    }
    Ok(())
}

fn deltas(reports: &[MetricReport]) -> Vec<Value> {
    let base = reports
        .iter()
        .find(|r| r.mode == ViewWeighting::GlobalOnly.name())
        .unwrap_or(&reports[0]);
    reports
        .iter()
        .filter(|r| r.mode != base.mode)
        .map(|r| {
            json!({
                "mode": r.mode,
                "baseline": base.mode,
                "top1": r.top1 - base.top1,
                "top5": r.top5 - base.top5,
                "map": r.map - base.map,
            })
        })
        .collect()
}

pub fn eval(args: &ConfigArgs, timestamps: bool) -> Result<()> {
    let cfg = RunConfig::load(args)?;
    let inputs = split_paths(&cfg, &cfg.query_manifest, "query_manifest")?;
    let report_path = required(&cfg.report, "report")?;
    let (model, index) = load_model_and_index(&cfg)?;

    let queries = to_queries(&load_split(&inputs)?, &model.heads)?;
    let protocol = EvalProtocol {
        queries: &queries,
        gallery: &index,
        exclude_self: cfg.exclude_self,
        combine: cfg.combine,
    };
    let reports = compare_modes(&protocol, &cfg.modes)?;

    let mut doc = json!({
        "combine": cfg.combine,
        "exclude_self": cfg.exclude_self,
        "reports": reports,
        "deltas": deltas(&reports),
    });
    if timestamps {
        doc["timestamp"] = json!(unix_seconds());
    }
    write_text(report_path, &(serde_json::to_string_pretty(&doc)? + "\n"))?;

    if let Some(table) = &cfg.rank_table {
        let mode = *cfg.modes.last().expect("modes nonempty");
        let file = File::create(table).with_context(|| format!("creating {}", table.display()))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{RANK_TABLE_HEADER}")?;
        for q in &queries {
            write_rank_rows(&mut w, &q.image_id, &rank_query(&protocol, q, mode)?)?;
        }
        w.flush()?;
    }

    for r in &reports {
        println!(
            "{:<13} top1 {:.4}  top5 {:.4}  mAP {:.4}  ({} queries, {} skipped)",
            r.mode, r.top1, r.top5, r.map, r.num_queries, r.num_skipped
        );
    }
    println!("report: {}", report_path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `arcface_ce`, `softmin_distance` or `both`.
    #[arg(long, default_value = "both")]
    pub mode: String,
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let modes = match args.mode.as_str() {
        "both" => vec![IdLossMode::ArcfaceCe, IdLossMode::SoftminDistance],
        "arcface_ce" => vec![IdLossMode::ArcfaceCe],
        "softmin_distance" => vec![IdLossMode::SoftminDistance],
        other => return Err(UsageError(format!("unknown mode {other:?}")).into()),
    };
    if args.trials == 0 {
        return Err(UsageError("--trials must be at least 1".into()).into());
    }
    let opts = GradcheckOptions {
        trials: args.trials,
        seed: args.seed,
        ..GradcheckOptions::default()
    };
    let mut failed = Vec::new();
    for mode in modes {
        let report = run_gradcheck(&opts, mode)?;
        let name = serde_json::to_value(mode)?.as_str().unwrap_or_default().to_string();
        println!(
            "{name}: max relative error {:.3e} over {} parameters ({} excluded near kinks), max abs error {:.3e}",
            report.stats.max_rel_error, report.stats.checked, report.stats.excluded, report.stats.max_abs_error
        );
        if !report.passed() {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        return Err(NumericFailure(format!("gradient check above {TOLERANCE:e} for {}", failed.join(", "))).into());
    }
    Ok(())
}
