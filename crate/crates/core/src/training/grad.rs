use crate::error::{Error, Result};
use crate::heads::{margin_cos, ReidModel};
use crate::linalg::{self, NORM_FLOOR};
use crate::retrieval::space_distance;
use crate::space::Space;

use super::loss::{cross_entropy, forward, softmin_logits, Batch, ForwardPass, Prototypes};
use super::{IdLossMode, LossReport, TrainConfig};

/// Gradient of the total loss for every trainable tensor, laid out like
/// [`ReidModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub tensors: Vec<Vec<f64>>,
}

impl ModelGradients {
    pub fn zeros_like(model: &ReidModel) -> Self {
        Self {
            tensors: model.parameters().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn weight_mut(&mut self, s: Space) -> &mut [f64] {
        &mut self.tensors[2 * s.index()]
    }

    pub fn bias_mut(&mut self, s: Space) -> &mut [f64] {
        &mut self.tensors[2 * s.index() + 1]
    }

    pub fn arcface_mut(&mut self, s: Space) -> &mut [f64] {
        &mut self.tensors[8 + s.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flatten().copied()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    fn add(&mut self, other: &ModelGradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            linalg::axpy(a, 1.0, b);
        }
    }
}

/// `∂L/∂u` per sample and space, where `u` are the unit embeddings.
type EmbeddingGrads = Vec<[Vec<f64>; 4]>;

fn zero_embedding_grads(n: usize, d: usize) -> EmbeddingGrads {
    (0..n).map(|_| std::array::from_fn(|_| vec![0.0; d])).collect()
}

fn triplet_backward(fp: &ForwardPass, du: &mut EmbeddingGrads) {
    let inv_n = 1.0 / fp.embeddings.len() as f64;
    for s in Space::ALL {
        let si = s.index();
        for c in fp.triplets[si].iter().filter(|c| c.active()) {
            let ua = fp.embeddings[c.anchor].get(s);
            if c.d_ap > 0.0 {
                let up = fp.embeddings[c.positive].get(s);
                let g: Vec<f64> = ua.iter().zip(up).map(|(a, p)| (a - p) / c.d_ap * inv_n).collect();
                linalg::axpy(&mut du[c.anchor][si], 1.0, &g);
                linalg::axpy(&mut du[c.positive][si], -1.0, &g);
            }
            if c.d_an > 0.0 {
                let un = fp.embeddings[c.negative].get(s);
                let g: Vec<f64> = ua.iter().zip(un).map(|(a, n)| (a - n) / c.d_an * inv_n).collect();
                linalg::axpy(&mut du[c.anchor][si], -1.0, &g);
                linalg::axpy(&mut du[c.negative][si], 1.0, &g);
            }
        }
    }
}

fn arcface_backward(
    fp: &ForwardPass,
    labels: &[usize],
    model: &ReidModel,
    du: &mut EmbeddingGrads,
    grads: &mut ModelGradients,
) {
    let weight = 1.0 / (4.0 * fp.embeddings.len() as f64);
    for s in Space::ALL {
        let head = model.arcface(s);
        let (scale, margin, dim) = (head.scale(), head.margin(), head.dim());
        let mut dc = vec![0.0; head.weight.len()];
        for (i, (e, &y)) in fp.embeddings.iter().zip(labels).enumerate() {
            let v = e.get(s);
            let (cos, norms) = head.cosines(v);
            let (target_cos, target_deriv) = margin_cos(cos[y], margin);
            let logits: Vec<f64> = cos
                .iter()
                .enumerate()
                .map(|(j, &c)| if j == y { scale * target_cos } else { scale * c })
                .collect();
            let (_, probs) = cross_entropy(&logits, y);
            for (j, (&c, &row_norm)) in cos.iter().zip(&norms).enumerate() {
                if row_norm <= NORM_FLOOR {
                    continue;
                }
                let dlogit = (probs[j] - if j == y { 1.0 } else { 0.0 }) * weight;
                let dcos = dlogit * if j == y { scale * target_deriv } else { scale };
                if dcos == 0.0 {
                    continue;
                }
                let row = head.row(j);
                let dv = &mut du[i][s.index()];
                let drow = &mut dc[j * dim..(j + 1) * dim];
                for k in 0..dim {
                    let unit_row = row[k] / row_norm;
                    dv[k] += dcos * unit_row;
                    drow[k] += dcos * (v[k] - unit_row * c) / row_norm;
                }
            }
        }
        linalg::axpy(grads.arcface_mut(s), 1.0, &dc);
    }
}

fn softmin_backward(
    fp: &ForwardPass,
    batch: &Batch,
    prototypes: &Prototypes,
    temperature: f64,
    du: &mut EmbeddingGrads,
) -> Result<()> {
    let inv_n = 1.0 / fp.embeddings.len() as f64;
    for (i, (e, &y)) in fp.embeddings.iter().zip(&batch.labels).enumerate() {
        let ar = batch.area_ratios[i];
        let logits = softmin_logits(e, &ar, prototypes, temperature)?;
        let (_, probs) = cross_entropy(&logits, y);
        for (k, proto) in prototypes.classes.iter().enumerate() {
            let dlogit = (probs[k] - if k == y { 1.0 } else { 0.0 }) * inv_n;
            let dfused = -dlogit / temperature;
            for s in Space::ALL {
                let w = s.view().map_or(1.0, |v| ar.get(v));
                let (u, p) = (e.get(s), proto.get(s));
                if w == 0.0 || linalg::is_zero(u) || linalg::is_zero(p) {
                    continue;
                }
                let d = space_distance(u, p)?;
                if d > 0.0 {
                    let coef = dfused * w / 2.0 / d;
                    for (g, (a, b)) in du[i][s.index()].iter_mut().zip(u.iter().zip(p)) {
                        *g += coef * (a - b);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Chains `∂L/∂u` through `u = normalize(W·x + b)` into the head tensors.
fn heads_backward(fp: &ForwardPass, batch: &Batch, model: &ReidModel, du: &EmbeddingGrads, grads: &mut ModelGradients) {
    let use_bias = model.heads.use_bias();
    for (i, x) in batch.inputs.iter().enumerate() {
        for s in Space::ALL {
            let z_norm = fp.z_norms[i][s.index()];
            if z_norm <= NORM_FLOOR {
                continue;
            }
            let u = fp.embeddings[i].get(s);
            let g = &du[i][s.index()];
            let radial = linalg::dot(u, g);
            let dz: Vec<f64> = g.iter().zip(u).map(|(gk, uk)| (gk - uk * radial) / z_norm).collect();
            linalg::add_outer(grads.weight_mut(s), &dz, x, 1.0);
            if use_bias {
                linalg::axpy(grads.bias_mut(s), 1.0, &dz);
            }
        }
    }
}

/// Analytic gradient of the composite loss with respect to every head and
/// ArcFace tensor. Hinge kinks and the ArcFace clamp/saturation zones take
/// a zero subgradient.
pub fn loss_gradients(
    batch: &Batch,
    model: &ReidModel,
    config: &TrainConfig,
    prototypes: Option<&Prototypes>,
) -> Result<(LossReport, ModelGradients)> {
    let fp = forward(batch, model, config, prototypes)?;
    if !fp.report.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let n = batch.len();
    let d = model.heads.embed_dim();
    let mut total = ModelGradients::zeros_like(model);

    if config.lambda_triplet != 0.0 {
        let mut du = zero_embedding_grads(n, d);
        triplet_backward(&fp, &mut du);
        let mut g = ModelGradients::zeros_like(model);
        heads_backward(&fp, batch, model, &du, &mut g);
        g.scale(config.lambda_triplet);
        total.add(&g);
    }
    if config.lambda_id != 0.0 {
        let mut du = zero_embedding_grads(n, d);
        let mut g = ModelGradients::zeros_like(model);
        match config.id_loss {
            IdLossMode::ArcfaceCe => arcface_backward(&fp, &batch.labels, model, &mut du, &mut g),
            IdLossMode::SoftminDistance => {
                let protos = prototypes.ok_or(Error::MissingPrototypes)?;
                softmin_backward(&fp, batch, protos, config.softmin_temperature, &mut du)?;
            }
        }
        heads_backward(&fp, batch, model, &du, &mut g);
        g.scale(config.lambda_id);
        total.add(&g);
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((fp.report, total))
}
