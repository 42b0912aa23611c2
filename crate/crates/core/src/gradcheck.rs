//! Central finite-difference verification of [`loss_gradients`].
//!
//! The numerical side only calls the forward loss. A parameter is excluded
//! when perturbing it by `±h` changes any discrete forward choice (batch-hard
//! selection, hinge activity, ArcFace clamp/saturation branch), i.e. when it
//! sits within `h` of a kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::heads::{init_heads, ModelShape, ReidModel};
use crate::mask::AreaRatios;
use crate::space::PerSpaceEmbeddings;
use crate::training::{forward, loss_gradients, Batch, IdLossMode, Prototypes, TrainConfig};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Denominator floor of the relative error. Central differences at
/// `h = 1e-5` carry about 1e-10 of absolute roundoff, so entries below this
/// floor are compared by absolute difference (`< TOLERANCE · RELATIVE_FLOOR`).
pub const RELATIVE_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckStats {
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradcheckStats {
    fn merge(self, o: GradcheckStats) -> Self {
        Self {
            checked: self.checked + o.checked,
            excluded: self.excluded + o.excluded,
            max_rel_error: self.max_rel_error.max(o.max_rel_error),
            max_abs_error: self.max_abs_error.max(o.max_abs_error),
        }
    }
}

/// Compares analytic gradients to central differences on every parameter.
pub fn check_instance(
    batch: &Batch,
    model: &ReidModel,
    config: &TrainConfig,
    prototypes: Option<&Prototypes>,
    step: f64,
) -> Result<GradcheckStats> {
    let (_, grads) = loss_gradients(batch, model, config, prototypes)?;
    let base_sig = forward(batch, model, config, prototypes)?.signature(model, &batch.labels);
    let mut probe = model.clone();
    let mut stats = GradcheckStats {
        checked: 0,
        excluded: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for (t, analytic) in grads.tensors.iter().enumerate() {
        if !model.is_trainable(t) {
            continue;
        }
        for (k, &a) in analytic.iter().enumerate() {
            let original = probe.parameters()[t][k];
            let mut eval = |value: f64| -> Result<(f64, Vec<u64>)> {
                probe.parameters_mut()[t][k] = value;
                let fp = forward(batch, &probe, config, prototypes)?;
                Ok((fp.report.total, fp.signature(&probe, &batch.labels)))
            };
            let (plus, sig_plus) = eval(original + step)?;
            let (minus, sig_minus) = eval(original - step)?;
            probe.parameters_mut()[t][k] = original;
            if sig_plus != base_sig || sig_minus != base_sig {
                stats.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            stats.checked += 1;
            stats.max_rel_error = stats.max_rel_error.max(relative_error(a, numeric));
            stats.max_abs_error = stats.max_abs_error.max((a - numeric).abs());
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub classes: usize,
    pub batch_p: usize,
    pub batch_k: usize,
    pub trials: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            input_dim: 16,
            embed_dim: 8,
            classes: 4,
            batch_p: 2,
            batch_k: 2,
            trials: 5,
            step: DEFAULT_STEP,
            seed: 0,
        }
    }
}

/// A random model, P×K batch and prototype set.
pub fn random_instance(opts: &GradcheckOptions, seed: u64) -> Result<(ReidModel, Batch, Prototypes)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = init_heads(
        rng.random(),
        ModelShape::new(opts.input_dim, opts.embed_dim, opts.classes),
    )?;
    for h in model.heads.heads_mut().iter_mut() {
        h.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
    }
    let mut ids: Vec<usize> = (0..opts.classes).collect();
    rand::seq::SliceRandom::shuffle(&mut ids[..], &mut rng);
    let mut batch = Batch {
        inputs: Vec::new(),
        labels: Vec::new(),
        area_ratios: Vec::new(),
    };
    for &id in ids.iter().take(opts.batch_p) {
        for _ in 0..opts.batch_k {
            batch
                .inputs
                .push((0..opts.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect());
            batch.labels.push(id);
            let a: f64 = rng.random();
            let b = rng.random::<f64>() * (1.0 - a);
            batch
                .area_ratios
                .push(AreaRatios::new(a, b, rng.random::<f64>() * (1.0 - a - b))?);
        }
    }
    let classes = (0..opts.classes)
        .map(|_| {
            PerSpaceEmbeddings::from_raw(std::array::from_fn(|_| {
                (0..opts.embed_dim).map(|_| StandardNormal.sample(&mut rng)).collect()
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((model, batch, Prototypes { classes }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub mode: IdLossMode,
    pub trials: usize,
    #[serde(flatten)]
    pub stats: GradcheckStats,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.stats.checked > 0 && self.stats.max_rel_error < TOLERANCE
    }
}

/// Runs `opts.trials` random instances for one identity-loss mode.
pub fn run_gradcheck(opts: &GradcheckOptions, mode: IdLossMode) -> Result<GradcheckReport> {
    let config = TrainConfig {
        id_loss: mode,
        ..TrainConfig::default()
    };
    let mut total: Option<GradcheckStats> = None;
    for trial in 0..opts.trials {
        let (model, batch, protos) = random_instance(opts, opts.seed.wrapping_mul(1000).wrapping_add(trial as u64))?;
        let s = check_instance(&batch, &model, &config, Some(&protos), opts.step)?;
        total = Some(match total {
            Some(t) => t.merge(s),
            None => s,
        });
    }
    Ok(GradcheckReport {
        mode,
        trials: opts.trials,
        stats: total.unwrap_or(GradcheckStats {
            checked: 0,
            excluded: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        }),
    })
}
