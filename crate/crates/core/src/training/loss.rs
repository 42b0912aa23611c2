use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::heads::{arcface_logits, margin_cos, project, ReidModel, COS_CLAMP};
use crate::linalg;
use crate::mask::AreaRatios;
use crate::retrieval::{fuse, per_space_distances};
use crate::space::{PerSpaceEmbeddings, Space};

use super::{IdLossMode, LossReport, TrainConfig, TrainingSample};

/// Backbone inputs of one batch with class labels and area ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub area_ratios: Vec<AreaRatios>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a TrainingSample>) -> Self {
        let mut b = Batch {
            inputs: Vec::new(),
            labels: Vec::new(),
            area_ratios: Vec::new(),
        };
        for s in samples {
            b.inputs.push(s.embedding.clone());
            b.labels.push(s.identity as usize);
            b.area_ratios.push(s.area_ratios);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Per-identity reference embeddings used by the softmin identity loss.
/// Index `k` holds identity `k`; an all-zero space marks an identity with
/// no data.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub classes: Vec<PerSpaceEmbeddings>,
}

/// `max(0, ‖a−p‖ − ‖a−n‖ + margin)`.
pub fn triplet_loss_space(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    Error::check_dim(anchor.len(), positive.len())?;
    Error::check_dim(anchor.len(), negative.len())?;
    let d_ap = linalg::l2_distance(anchor, positive);
    let d_an = linalg::l2_distance(anchor, negative);
    Ok((d_ap - d_an + margin).max(0.0))
}

/// Batch-hard selection for one anchor in one space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct TripletChoice {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_ap: f64,
    pub d_an: f64,
    pub hinge: f64,
}

impl TripletChoice {
    pub fn active(&self) -> bool {
        self.hinge > 0.0
    }
}

fn check_pk(labels: &[usize]) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batch needs at least two identities, found {}",
            counts.len()
        )));
    }
    if let Some((id, n)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::DegenerateBatch(format!("identity {id} has only {n} sample(s)")));
    }
    Ok(())
}

/// Farthest positive and nearest negative per anchor; the first index wins
/// ties.
pub(crate) fn mine_space(vectors: &[&[f64]], labels: &[usize], margin: f64) -> Vec<TripletChoice> {
    let n = vectors.len();
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = linalg::l2_distance(vectors[a], vectors[j]);
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let (positive, d_ap) = pos.expect("PK batch has a positive per anchor");
        let (negative, d_an) = neg.expect("PK batch has a negative per anchor");
        out.push(TripletChoice {
            anchor: a,
            positive,
            negative,
            d_ap,
            d_an,
            hinge: (d_ap - d_an + margin).max(0.0),
        });
    }
    out
}

fn mean_hinge(choices: &[TripletChoice]) -> f64 {
    choices.iter().map(|c| c.hinge).sum::<f64>() / choices.len() as f64
}

/// Mean batch-hard triplet hinge in each of the four spaces.
pub fn batch_triplet_loss(embeddings: &[PerSpaceEmbeddings], labels: &[usize], margin: f64) -> Result<[f64; 4]> {
    Error::check_dim(embeddings.len(), labels.len())?;
    check_pk(labels)?;
    let mut out = [0.0; 4];
    for s in Space::ALL {
        let vs: Vec<&[f64]> = embeddings.iter().map(|e| e.get(s)).collect();
        out[s.index()] = mean_hinge(&mine_space(&vs, labels, margin));
    }
    Ok(out)
}

/// Numerically stable `−log softmax(logits)[target]` plus the softmax.
pub(crate) fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[target];
    (loss.max(0.0), exps.iter().map(|e| e / sum).collect())
}

/// `−fused_distance(query, prototype_k) / τ` for every identity `k`, using
/// the query's area ratios.
pub fn softmin_logits(
    query: &PerSpaceEmbeddings,
    query_ar: &AreaRatios,
    prototypes: &Prototypes,
    temperature: f64,
) -> Result<Vec<f64>> {
    prototypes
        .classes
        .iter()
        .map(|p| Ok(-fuse(per_space_distances(query, p)?, query_ar.to_array()) / temperature))
        .collect()
}

fn check_targets(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&target) => Err(Error::BadTarget { target, classes }),
        None => Ok(()),
    }
}

/// Identity-classification loss over already projected embeddings.
pub fn id_loss(
    embeddings: &[PerSpaceEmbeddings],
    labels: &[usize],
    area_ratios: &[AreaRatios],
    model: &ReidModel,
    mode: IdLossMode,
    temperature: f64,
    prototypes: Option<&Prototypes>,
) -> Result<f64> {
    Error::check_dim(embeddings.len(), labels.len())?;
    Error::check_dim(embeddings.len(), area_ratios.len())?;
    if embeddings.is_empty() {
        return Ok(0.0);
    }
    let n = embeddings.len() as f64;
    match mode {
        IdLossMode::ArcfaceCe => {
            check_targets(labels, model.shape().classes)?;
            let mut total = 0.0;
            for s in Space::ALL {
                let head = model.arcface(s);
                let mut acc = 0.0;
                for (e, &y) in embeddings.iter().zip(labels) {
                    acc += cross_entropy(&arcface_logits(e.get(s), head, Some(y))?, y).0;
                }
                total += acc / n;
            }
            Ok(total / 4.0)
        }
        IdLossMode::SoftminDistance => {
            let protos = prototypes.ok_or(Error::MissingPrototypes)?;
            check_targets(labels, protos.classes.len())?;
            let mut acc = 0.0;
            for ((e, &y), ar) in embeddings.iter().zip(labels).zip(area_ratios) {
                acc += cross_entropy(&softmin_logits(e, ar, protos, temperature)?, y).0;
            }
            Ok(acc / n)
        }
    }
}

/// Everything the backward pass needs from one loss evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub embeddings: Vec<PerSpaceEmbeddings>,
    /// Pre-normalization norms, `[sample][space]`.
    pub(crate) z_norms: Vec<[f64; 4]>,
    pub(crate) triplets: [Vec<TripletChoice>; 4],
    pub report: LossReport,
}

impl ForwardPass {
    /// Discrete choices made during the forward pass: batch-hard selections,
    /// hinge activity, and ArcFace branch (clamped/saturated). Two parameter
    /// settings with equal signatures lie on the same smooth piece.
    pub fn signature(&self, model: &ReidModel, labels: &[usize]) -> Vec<u64> {
        let mut sig = Vec::new();
        for choices in &self.triplets {
            for c in choices {
                sig.extend([c.positive as u64, c.negative as u64, c.active() as u64]);
            }
        }
        let margin = model.shape().arc_margin;
        for (e, &y) in self.embeddings.iter().zip(labels) {
            for s in Space::ALL {
                let head = model.arcface(s);
                if y >= head.classes() {
                    continue;
                }
                let (cos, _) = head.cosines(e.get(s));
                let clamped = cos[y].abs() > 1.0 - COS_CLAMP;
                let saturated = margin_cos(cos[y], margin).1 == 0.0;
                sig.extend([clamped as u64, saturated as u64]);
            }
        }
        sig
    }
}

/// Projects the batch and evaluates the composite objective.
pub fn forward(
    batch: &Batch,
    model: &ReidModel,
    config: &TrainConfig,
    prototypes: Option<&Prototypes>,
) -> Result<ForwardPass> {
    Error::check_dim(batch.inputs.len(), batch.labels.len())?;
    Error::check_dim(batch.inputs.len(), batch.area_ratios.len())?;
    check_pk(&batch.labels)?;
    let mut embeddings = Vec::with_capacity(batch.len());
    let mut z_norms = Vec::with_capacity(batch.len());
    for x in &batch.inputs {
        let e = project(x, &model.heads)?;
        z_norms.push(Space::ALL.map(|s| linalg::norm(&model.heads.linear(s, x))));
        embeddings.push(e);
    }
    let triplets = Space::ALL.map(|s| {
        let vs: Vec<&[f64]> = embeddings.iter().map(|e| e.get(s)).collect();
        mine_space(&vs, &batch.labels, config.triplet_margin)
    });
    let per_space = std::array::from_fn(|i| mean_hinge(&triplets[i]));
    let id = id_loss(
        &embeddings,
        &batch.labels,
        &batch.area_ratios,
        model,
        config.id_loss,
        config.softmin_temperature,
        prototypes,
    )?;
    Ok(ForwardPass {
        embeddings,
        z_norms,
        triplets,
        report: LossReport::compose(id, per_space, config),
    })
}

/// The composite objective `λ_ID·L_ID + λ_Triplet·L_Triplet` on one batch.
pub fn total_loss(
    batch: &Batch,
    model: &ReidModel,
    config: &TrainConfig,
    prototypes: Option<&Prototypes>,
) -> Result<LossReport> {
    Ok(forward(batch, model, config, prototypes)?.report)
}
