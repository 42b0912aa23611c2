//! Parallel linear projection heads and per-space ArcFace classifiers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::space::{PerSpaceEmbeddings, Space};

pub const DEFAULT_INPUT_DIM: usize = 384;
pub const DEFAULT_EMBED_DIM: usize = 128;
pub const DEFAULT_ARC_SCALE: f64 = 30.0;
pub const DEFAULT_ARC_MARGIN: f64 = 0.30;

/// `arccos` inputs are clamped to `±(1 − COS_CLAMP)`.
pub const COS_CLAMP: f64 = 1e-7;

/// One `d × D` linear map plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// Row-major `d × D`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParameters {
    input_dim: usize,
    embed_dim: usize,
    use_bias: bool,
    heads: [LinearHead; 4],
}

impl HeadParameters {
    pub fn new(input_dim: usize, embed_dim: usize, use_bias: bool, heads: [LinearHead; 4]) -> Result<Self> {
        if input_dim == 0 || embed_dim == 0 {
            return Err(Error::InvalidConfig("head dimensions must be positive".into()));
        }
        for h in &heads {
            Error::check_dim(input_dim * embed_dim, h.weight.len())?;
            Error::check_dim(embed_dim, h.bias.len())?;
            if h.weight.iter().chain(&h.bias).any(|x| !x.is_finite()) {
                return Err(Error::InvalidConfig("head parameters must be finite".into()));
            }
            if !use_bias && h.bias.iter().any(|&b| b != 0.0) {
                return Err(Error::InvalidConfig("bias disabled but nonzero".into()));
            }
        }
        Ok(Self {
            input_dim,
            embed_dim,
            use_bias,
            heads,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn use_bias(&self) -> bool {
        self.use_bias
    }

    pub fn head(&self, space: Space) -> &LinearHead {
        &self.heads[space.index()]
    }

    pub fn head_mut(&mut self, space: Space) -> &mut LinearHead {
        &mut self.heads[space.index()]
    }

    pub fn heads_mut(&mut self) -> &mut [LinearHead; 4] {
        &mut self.heads
    }

    /// `W_s·x + b_s` before normalization.
    pub fn linear(&self, space: Space, x: &[f64]) -> Vec<f64> {
        let h = self.head(space);
        let mut z = h.bias.clone();
        let mut wx = vec![0.0; self.embed_dim];
        linalg::matvec(&h.weight, self.embed_dim, self.input_dim, x, &mut wx);
        for (zi, w) in z.iter_mut().zip(wx) {
            *zi += w;
        }
        z
    }
}

/// Angular-margin classifier for one latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcFaceHead {
    classes: usize,
    dim: usize,
    /// Row-major `K × d` class centers; rows are normalized at use.
    pub weight: Vec<f64>,
    scale: f64,
    margin: f64,
}

impl ArcFaceHead {
    pub fn new(classes: usize, dim: usize, weight: Vec<f64>, scale: f64, margin: f64) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::InvalidConfig("ArcFace dimensions must be positive".into()));
        }
        Error::check_dim(classes * dim, weight.len())?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ArcFace scale must be positive, got {scale}"
            )));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(Error::InvalidConfig(format!(
                "ArcFace margin must lie in [0, pi/2), got {margin}"
            )));
        }
        Ok(Self {
            classes,
            dim,
            weight,
            scale,
            margin,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weight[class * self.dim..(class + 1) * self.dim]
    }

    /// Cosine between `v` and every normalized class row, plus the row norms.
    pub fn cosines(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (0..self.classes)
            .map(|j| {
                let row = self.row(j);
                let n = linalg::norm(row);
                (linalg::dot(row, v) / n.max(linalg::NORM_FLOOR), n)
            })
            .unzip()
    }

    /// Target logit `s·cos(θ + m)` for a raw cosine. The angle saturates at
    /// π, so the margin never raises the logit.
    pub fn margin_logit(&self, cos: f64) -> f64 {
        self.scale * margin_cos(cos, self.margin).0
    }
}

/// `cos(θ + m)` written as `c·cos m − sin θ·sin m`, with `sin θ` taken from
/// the clamped cosine, and its derivative with respect to `c`.
///
/// Once `θ + m` reaches π the value saturates at −1 with derivative 0. With
/// `m = 0` the value is exactly `c`.
pub(crate) fn margin_cos(cos: f64, margin: f64) -> (f64, f64) {
    let lim = 1.0 - COS_CLAMP;
    let clamped = cos.clamp(-lim, lim);
    let (sin_m, cos_m) = margin.sin_cos();
    if clamped <= -cos_m {
        return (-1.0, 0.0);
    }
    let sin_theta = (1.0 - clamped * clamped).sqrt();
    let value = cos * cos_m - sin_theta * sin_m;
    if value <= -1.0 {
        return (-1.0, 0.0);
    }
    let deriv = if cos.abs() > lim {
        cos_m
    } else {
        cos_m + clamped * sin_m / sin_theta
    };
    (value, deriv)
}

/// Projection heads together with the four ArcFace classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidModel {
    pub heads: HeadParameters,
    pub arcface: [ArcFaceHead; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub classes: usize,
    pub arc_scale: f64,
    pub arc_margin: f64,
    pub use_bias: bool,
}

impl ModelShape {
    pub fn new(input_dim: usize, embed_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            embed_dim,
            classes,
            arc_scale: DEFAULT_ARC_SCALE,
            arc_margin: DEFAULT_ARC_MARGIN,
            use_bias: true,
        }
    }
}

impl ReidModel {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.heads.input_dim,
            embed_dim: self.heads.embed_dim,
            classes: self.arcface[0].classes,
            arc_scale: self.arcface[0].scale,
            arc_margin: self.arcface[0].margin,
            use_bias: self.heads.use_bias,
        }
    }

    pub fn arcface(&self, space: Space) -> &ArcFaceHead {
        &self.arcface[space.index()]
    }

    /// Every trainable tensor: per space weight then bias, followed by the
    /// four ArcFace class-center matrices.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(12);
        for s in Space::ALL {
            let h = self.heads.head(s);
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out.extend(self.arcface.iter().map(|a| &a.weight[..]));
        out
    }

    /// Whether tensor `t` of [`ReidModel::parameters`] is optimized. Biases
    /// are frozen at zero when disabled.
    pub fn is_trainable(&self, t: usize) -> bool {
        self.heads.use_bias || !(t < 8 && t % 2 == 1)
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(12);
        for h in self.heads.heads_mut().iter_mut() {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out.extend(self.arcface.iter_mut().map(|a| &mut a.weight[..]));
        out
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Seeded Xavier-uniform initialization. Heads are drawn in space order,
/// then the ArcFace class centers in space order.
pub fn init_heads(seed: u64, shape: ModelShape) -> Result<ReidModel> {
    let ModelShape {
        input_dim,
        embed_dim,
        classes,
        ..
    } = shape;
    if input_dim == 0 || embed_dim == 0 || classes == 0 {
        return Err(Error::InvalidConfig("D, d and K must all be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = Space::ALL.map(|_| LinearHead {
        weight: xavier(&mut rng, input_dim, embed_dim, input_dim * embed_dim),
        bias: vec![0.0; embed_dim],
    });
    let heads = HeadParameters::new(input_dim, embed_dim, shape.use_bias, heads)?;
    let mut arcface = Vec::with_capacity(4);
    for _ in Space::ALL {
        let w = xavier(&mut rng, embed_dim, classes, classes * embed_dim);
        arcface.push(ArcFaceHead::new(
            classes,
            embed_dim,
            w,
            shape.arc_scale,
            shape.arc_margin,
        )?);
    }
    let arcface: [ArcFaceHead; 4] = arcface.try_into().expect("four spaces");
    Ok(ReidModel { heads, arcface })
}

/// Maps a backbone embedding into the four normalized latent spaces.
pub fn project(x: &[f64], heads: &HeadParameters) -> Result<PerSpaceEmbeddings> {
    Error::check_dim(heads.input_dim, x.len())?;
    PerSpaceEmbeddings::from_raw(Space::ALL.map(|s| heads.linear(s, x)))
}

/// Scaled cosine logits against every class; with a target, the target
/// logit carries the additive angular margin.
pub fn arcface_logits(v: &[f64], head: &ArcFaceHead, target: Option<usize>) -> Result<Vec<f64>> {
    Error::check_dim(head.dim, v.len())?;
    if let Some(t) = target {
        if t >= head.classes {
            return Err(Error::BadTarget {
                target: t,
                classes: head.classes,
            });
        }
    }
    let (cos, _) = head.cosines(v);
    Ok(cos
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            if Some(j) == target {
                head.margin_logit(c)
            } else {
                head.scale * c
            }
        })
        .collect())
}
