use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::heads::{init_heads, project, ModelShape, ReidModel};
use crate::linalg;
use crate::space::{PerSpaceEmbeddings, Space};

use super::grad::loss_gradients;
use super::loss::{Batch, Prototypes};
use super::optim::Optimizer;
use super::{IdLossMode, LossReport, TrainConfig, TrainingSample};

/// Loss of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub id_loss: f64,
    pub triplet_per_space: [f64; 4],
    pub total: f64,
}

impl BatchRecord {
    fn new(epoch: usize, batch: usize, r: &LossReport) -> Self {
        Self {
            epoch,
            batch,
            id_loss: r.id_loss,
            triplet_per_space: r.triplet_loss_per_space,
            total: r.total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: ReidModel,
    pub history: Vec<BatchRecord>,
}

impl FitOutput {
    /// Mean total loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &self.history {
            let e = sums.entry(r.epoch).or_default();
            e.0 += r.total;
            e.1 += 1;
        }
        sums.values().map(|(s, n)| s / *n as f64).collect()
    }
}

/// Mean projected embedding per identity and space, renormalized.
/// Identities with no samples get all-zero (degenerate) prototypes.
pub fn identity_prototypes(samples: &[TrainingSample], model: &ReidModel, classes: usize) -> Result<Prototypes> {
    let d = model.heads.embed_dim();
    let mut sums: Vec<[Vec<f64>; 4]> = (0..classes).map(|_| std::array::from_fn(|_| vec![0.0; d])).collect();
    for s in samples {
        let id = s.identity as usize;
        if id >= classes {
            return Err(Error::BadTarget { target: id, classes });
        }
        let e = project(&s.embedding, &model.heads)?;
        for sp in Space::ALL {
            linalg::axpy(&mut sums[id][sp.index()], 1.0, e.get(sp));
        }
    }
    let classes = sums
        .into_iter()
        .map(PerSpaceEmbeddings::from_raw)
        .collect::<Result<Vec<_>>>()?;
    Ok(Prototypes { classes })
}

/// Sample indices grouped by identity, in identity order; identities with
/// fewer than two samples are left out.
fn usable_identities(samples: &[TrainingSample]) -> Vec<Vec<usize>> {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_id.entry(s.identity).or_default().push(i);
    }
    by_id.into_values().filter(|v| v.len() >= 2).collect()
}

/// One epoch of P×K batches drawn by seeded shuffle.
///
/// Identities are shuffled and chunked by `P`; a trailing chunk with a single
/// identity joins the previous chunk. Each identity contributes `K` samples
/// from a fresh shuffle of its images, cycling when it has fewer than `K`.
pub fn pk_batches(groups: &[Vec<usize>], p: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    let mut chunks: Vec<Vec<usize>> = order.chunks(p).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    chunks
        .into_iter()
        .map(|ids| {
            let mut batch = Vec::with_capacity(ids.len() * k);
            for g in ids {
                let mut members = groups[g].clone();
                members.shuffle(rng);
                batch.extend(members.iter().cycle().take(k));
            }
            batch
        })
        .collect()
}

/// Trains the projection heads and ArcFace classifiers.
///
/// Deterministic for a fixed seed: the seed drives both the initialization
/// and (on a separate stream) the batch sampler.
pub fn fit(dataset: &[TrainingSample], shape: ModelShape, config: &TrainConfig) -> Result<FitOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::DegenerateDataset("dataset is empty".into()));
    }
    for s in dataset {
        Error::check_dim(shape.input_dim, s.embedding.len())?;
        if s.identity as usize >= shape.classes {
            return Err(Error::BadTarget {
                target: s.identity as usize,
                classes: shape.classes,
            });
        }
    }
    let groups = usable_identities(dataset);
    if groups.len() < 2 {
        return Err(Error::DegenerateDataset(format!(
            "need at least two identities with two or more samples, found {}",
            groups.len()
        )));
    }

    let mut model = init_heads(config.seed, shape)?;
    let mut optimizer = Optimizer::new(config, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut history = Vec::new();

    for epoch in 0..config.epochs {
        let prototypes = match config.id_loss {
            IdLossMode::SoftminDistance => Some(identity_prototypes(dataset, &model, shape.classes)?),
            IdLossMode::ArcfaceCe => None,
        };
        for (b, indices) in pk_batches(&groups, config.batch_p, config.batch_k, &mut rng)
            .into_iter()
            .enumerate()
        {
            let batch = Batch::from_samples(indices.iter().map(|&i| &dataset[i]));
            let (report, grads) = loss_gradients(&batch, &model, config, prototypes.as_ref())?;
            history.push(BatchRecord::new(epoch, b, &report));
            optimizer.step(&mut model, &grads);
        }
    }
    Ok(FitOutput { model, history })
}
