//! Run configuration: a TOML file whose keys can each be overridden by a
//! flag of the same name.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use vcfes_core::heads::{DEFAULT_ARC_MARGIN, DEFAULT_ARC_SCALE, DEFAULT_EMBED_DIM};
use vcfes_core::{Combine, TrainConfig, ViewWeighting};

use crate::UsageError;

/// Flags mirroring every config key. `None` means "not given".
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    #[arg(long, alias = "train_manifest")]
    pub train_manifest: Option<PathBuf>,
    #[arg(long, alias = "gallery_manifest")]
    pub gallery_manifest: Option<PathBuf>,
    #[arg(long, alias = "query_manifest")]
    pub query_manifest: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Training log (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, alias = "rank_table")]
    pub rank_table: Option<PathBuf>,

    #[arg(long, alias = "embed_dim")]
    pub embed_dim: Option<usize>,
    #[arg(long, alias = "arc_scale")]
    pub arc_scale: Option<f64>,
    #[arg(long, alias = "arc_margin")]
    pub arc_margin: Option<f64>,
    #[arg(long, alias = "use_bias")]
    pub use_bias: Option<bool>,
    /// `query_only` or `min_pair`.
    #[arg(long)]
    pub combine: Option<String>,
    /// Comma-separated subset of `global_only,largest_view,all_views`.
    #[arg(long)]
    pub modes: Option<String>,
    #[arg(long, alias = "exclude_self")]
    pub exclude_self: Option<bool>,

    #[arg(long, alias = "lambda_id")]
    pub lambda_id: Option<f64>,
    #[arg(long, alias = "lambda_triplet")]
    pub lambda_triplet: Option<f64>,
    #[arg(long, alias = "triplet_margin")]
    pub triplet_margin: Option<f64>,
    #[arg(long, alias = "learning_rate")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, alias = "batch_p")]
    pub batch_p: Option<usize>,
    #[arg(long, alias = "batch_k")]
    pub batch_k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `adam` or `sgd`.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// `arcface_ce` or `softmin_distance`.
    #[arg(long, alias = "id_loss")]
    pub id_loss: Option<String>,
    #[arg(long, alias = "softmin_temperature")]
    pub softmin_temperature: Option<f64>,
}

const PATH_KEYS: &[&str] = &[
    "train_manifest",
    "gallery_manifest",
    "query_manifest",
    "embeddings",
    "masks",
    "checkpoint",
    "index",
    "report",
    "log",
    "rank_table",
];

/// Non-path keys that are not part of [`TrainConfig`].
const OTHER_KEYS: &[&str] = &[
    "embed_dim",
    "arc_scale",
    "arc_margin",
    "use_bias",
    "combine",
    "modes",
    "exclude_self",
];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSettings {
    train_manifest: Option<PathBuf>,
    gallery_manifest: Option<PathBuf>,
    query_manifest: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    masks: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    index: Option<PathBuf>,
    report: Option<PathBuf>,
    log: Option<PathBuf>,
    rank_table: Option<PathBuf>,
    embed_dim: Option<usize>,
    arc_scale: Option<f64>,
    arc_margin: Option<f64>,
    use_bias: Option<bool>,
    combine: Option<String>,
    modes: Option<String>,
    exclude_self: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train_manifest: Option<PathBuf>,
    pub gallery_manifest: Option<PathBuf>,
    pub query_manifest: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub rank_table: Option<PathBuf>,
    pub embed_dim: usize,
    pub arc_scale: f64,
    pub arc_margin: f64,
    pub use_bias: bool,
    pub combine: Combine,
    pub modes: Vec<ViewWeighting>,
    pub exclude_self: bool,
    pub train: TrainConfig,
}

fn parse_modes(s: &str) -> Result<Vec<ViewWeighting>> {
    let modes = s
        .split(',')
        .map(|m| m.trim().parse::<ViewWeighting>())
        .collect::<vcfes_core::Result<Vec<_>>>()
        .map_err(|e| UsageError(e.to_string()))?;
    if modes.is_empty() {
        return Err(UsageError("modes must not be empty".into()).into());
    }
    Ok(modes)
}

impl RunConfig {
    /// File values first, then flag overrides; relative paths in the file
    /// resolve against the file's directory.
    pub fn load(args: &ConfigArgs) -> Result<Self> {
        let mut table = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
                let mut t: toml::Table =
                    toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
                rebase_paths(&mut t, path.parent().unwrap_or(Path::new("")));
                t
            }
            None => toml::Table::new(),
        };
        let overrides = toml::Table::try_from(args).context("encoding flag overrides")?;
        table.extend(overrides);

        let (settings, train): (toml::Table, toml::Table) = table
            .into_iter()
            .partition(|(k, _)| PATH_KEYS.contains(&k.as_str()) || OTHER_KEYS.contains(&k.as_str()));
        let s: RawSettings = settings.try_into().map_err(|e| UsageError(format!("config: {e}")))?;
        let train: TrainConfig = train.try_into().map_err(|e| UsageError(format!("config: {e}")))?;

        Ok(Self {
            train_manifest: s.train_manifest,
            gallery_manifest: s.gallery_manifest,
            query_manifest: s.query_manifest,
            embeddings: s.embeddings,
            masks: s.masks,
            checkpoint: s.checkpoint,
            index: s.index,
            report: s.report,
            log: s.log,
            rank_table: s.rank_table,
            embed_dim: s.embed_dim.unwrap_or(DEFAULT_EMBED_DIM),
            arc_scale: s.arc_scale.unwrap_or(DEFAULT_ARC_SCALE),
            arc_margin: s.arc_margin.unwrap_or(DEFAULT_ARC_MARGIN),
            use_bias: s.use_bias.unwrap_or(true),
            combine: match s.combine {
                Some(c) => c.parse().map_err(|e: vcfes_core::Error| UsageError(e.to_string()))?,
                None => Combine::default(),
            },
            modes: parse_modes(s.modes.as_deref().unwrap_or("global_only,largest_view,all_views"))?,
            exclude_self: s.exclude_self.unwrap_or(true),
            train,
        })
    }
}

fn rebase_paths(table: &mut toml::Table, base: &Path) {
    for (key, value) in table.iter_mut() {
        if !PATH_KEYS.contains(&key.as_str()) {
            continue;
        }
        if let toml::Value::String(s) = value {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    }
}

/// A path the command needs; missing key is a usage error.
pub fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| {
        UsageError(format!(
            "missing required setting `{key}` (config key or --{})",
            key.replace('_', "-")
        ))
        .into()
    })
}

/// A required input that must already exist.
pub fn existing<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = required(value, key)?;
    if !p.exists() {
        return Err(UsageError(format!("`{key}` path does not exist: {}", p.display())).into());
    }
    Ok(p)
}
