//! Synthetic re-identification datasets with controlled viewpoints.
//!
//! Each identity owns one standard-normal latent signature per visible side. A view at
//! azimuth φ shows the sides in proportion to [`viewpoint_to_area_ratios`],
//! and its backbone embedding is the ratio-weighted sum of per-side random
//! linear lifts of those signatures, plus isotropic Gaussian noise:
//!
//! `x = Σ_side AR_side · L_side · sig_side + σ·ε`
//!
//! The lifts `L_front, L_side, L_rear` are the three column blocks of one
//! `D × 3S` matrix with orthonormal columns (when `D ≥ 3S`).
//!
//! Views are evenly spaced and split by view index: `v % 3 == 0` train,
//! `1` query, `2` gallery.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, EmbeddingMatrix, ManifestRecord};
use crate::error::{Error, Result};
use crate::heads::{HeadParameters, LinearHead};
use crate::mask::{area_ratios, AreaRatios, BinaryMask, MaskSet};
use crate::space::{Space, View};
use crate::training::TrainingSample;

pub const MASK_WIDTH: usize = 64;
pub const MASK_HEIGHT: usize = 32;
/// Foreground rectangle inset from every mask border.
pub const MASK_INSET: usize = 4;

/// Trigonometric values below this are treated as exactly zero, so that
/// 90° and 180° produce exact zeros.
const TRIG_SNAP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub views_per_identity: usize,
    pub backbone_dim: usize,
    pub signature_dim: usize,
    pub noise_sigma: f64,
    pub distractor_overlap: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 20 identities, 12 views, D = 32, S = 8, σ = 0.15, overlap 0.3, seed 7.
    pub fn benchmark() -> Self {
        Self {
            num_identities: 20,
            views_per_identity: 12,
            backbone_dim: 32,
            signature_dim: 8,
            noise_sigma: 0.15,
            distractor_overlap: 0.3,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.num_identities < 2 {
            return bad("num_identities must be at least 2");
        }
        if self.views_per_identity < 2 {
            return bad("views_per_identity must be at least 2");
        }
        if self.backbone_dim == 0 || self.signature_dim == 0 {
            return bad("backbone_dim and signature_dim must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.distractor_overlap) {
            return bad("distractor_overlap must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        3 * self.signature_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn of_view(view: usize) -> Split {
        match view % 3 {
            0 => Split::Train,
            1 => Split::Query,
            _ => Split::Gallery,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn manifest_name(self) -> String {
        format!("{}.csv", self.name())
    }
}

fn snap(x: f64) -> f64 {
    if x.abs() < TRIG_SNAP {
        0.0
    } else {
        x
    }
}

/// Visible-side proportions of a vehicle seen from `azimuth_deg`
/// (0° head-on, 90° side, 180° rear).
pub fn viewpoint_to_area_ratios(azimuth_deg: f64) -> Result<AreaRatios> {
    if !azimuth_deg.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "azimuth must be finite, got {azimuth_deg}"
        )));
    }
    let phi = azimuth_deg.to_radians();
    let (c, s) = (snap(phi.cos()), snap(phi.sin()));
    let raw = [c.max(0.0), s.abs(), (-c).max(0.0)];
    let total: f64 = raw.iter().sum();
    AreaRatios::new(raw[0] / total, raw[1] / total, raw[2] / total)
}

/// Side pixel counts for a foreground of `pixels`, each within one pixel
/// of `ratio · pixels` (largest-remainder rounding).
pub fn side_pixel_counts(ratios: &AreaRatios, pixels: usize) -> [usize; 3] {
    let exact = ratios.to_array().map(|r| r * pixels as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    for &i in order.iter().take(pixels.saturating_sub(assigned).min(3)) {
        counts[i] += 1;
    }
    counts
}

/// Rectangular foreground with the sides filled column by column:
/// front, then side, then rear.
pub fn render_masks(ratios: &AreaRatios) -> MaskSet {
    let blank = || BinaryMask::empty(MASK_WIDTH, MASK_HEIGHT).expect("positive dims");
    let (mut fg, mut views) = (blank(), [blank(), blank(), blank()]);
    let (x0, x1) = (MASK_INSET, MASK_WIDTH - MASK_INSET);
    let (y0, y1) = (MASK_INSET, MASK_HEIGHT - MASK_INSET);
    let counts = side_pixel_counts(ratios, (x1 - x0) * (y1 - y0));
    let (mut side, mut filled) = (0usize, 0usize);
    for x in x0..x1 {
        for y in y0..y1 {
            fg.set(x, y, true);
            while side < 3 && filled == counts[side] {
                side += 1;
                filled = 0;
            }
            if side < 3 {
                views[side].set(x, y, true);
                filled += 1;
            }
        }
    }
    let [front, side, rear] = views;
    MaskSet {
        foreground: fg,
        front,
        side,
        rear,
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub split: Split,
    pub view: usize,
    pub azimuth: f64,
    pub embedding_index: usize,
    /// Ratios the view was generated from; `sample.area_ratios` holds the
    /// ratios measured back from the rendered masks.
    pub generating_ratios: AreaRatios,
    pub masks: MaskSet,
    pub sample: TrainingSample,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub samples: Vec<SyntheticSample>,
    /// `D × 3S` row-major lift matrix.
    lift: Vec<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect()
}

/// Columns of a `rows × cols` row-major Gaussian matrix, orthonormalized
/// when `rows ≥ cols` and otherwise scaled to unit length.
fn random_lift(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut columns: Vec<Vec<f64>> = (0..cols).map(|_| gaussian_vec(rng, rows, 1.0)).collect();
    for j in 0..cols {
        if rows >= cols {
            for i in 0..j {
                let proj = crate::linalg::dot(&columns[i], &columns[j]);
                let ci = columns[i].clone();
                crate::linalg::axpy(&mut columns[j], -proj, &ci);
            }
        }
        let (unit, _) = crate::linalg::normalize(&columns[j]);
        columns[j] = unit;
    }
    let mut m = vec![0.0; rows * cols];
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m[i * cols + j] = v;
        }
    }
    m
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let (d, s) = (spec.backbone_dim, spec.signature_dim);
    let latent = spec.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lift = random_lift(&mut rng, d, latent);

    let shared: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(&mut rng, s, 1.0)).collect();
    let (a, b) = (spec.distractor_overlap.sqrt(), (1.0 - spec.distractor_overlap).sqrt());
    let signatures: Vec<[Vec<f64>; 3]> = (0..spec.num_identities)
        .map(|_| {
            [0, 1, 2].map(|side| {
                let own = gaussian_vec(&mut rng, s, 1.0);
                shared[side].iter().zip(&own).map(|(g, e)| a * g + b * e).collect()
            })
        })
        .collect();

    let mut samples = Vec::with_capacity(spec.num_identities * spec.views_per_identity);
    for (identity, sigs) in signatures.iter().enumerate() {
        for view in 0..spec.views_per_identity {
            let azimuth = view as f64 * 360.0 / spec.views_per_identity as f64;
            let generating_ratios = viewpoint_to_area_ratios(azimuth)?;
            let mut z = vec![0.0; latent];
            for v in View::ALL {
                let w = generating_ratios.get(v);
                for (k, &x) in sigs[v.index()].iter().enumerate() {
                    z[v.index() * s + k] = w * x;
                }
            }
            let noise = gaussian_vec(&mut rng, d, spec.noise_sigma);
            let embedding: Vec<f64> = (0..d)
                .map(|i| {
                    let row = &lift[i * latent..(i + 1) * latent];
                    // Stored as f32 on disk; keep memory and disk identical.
                    (crate::linalg::dot(row, &z) + noise[i]) as f32 as f64
                })
                .collect();
            let masks = render_masks(&generating_ratios);
            let image_id = format!("id{identity:03}_v{view:02}");
            samples.push(SyntheticSample {
                split: Split::of_view(view),
                view,
                azimuth,
                embedding_index: samples.len(),
                generating_ratios,
                sample: TrainingSample {
                    image_id,
                    identity: identity as u32,
                    embedding,
                    area_ratios: area_ratios(&masks)?,
                },
                masks,
            });
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        samples,
        lift,
    })
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> Vec<TrainingSample> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.sample.clone())
            .collect()
    }

    pub fn manifest(&self, split: Split) -> Vec<ManifestRecord> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| ManifestRecord {
                image_id: s.sample.image_id.clone(),
                identity: s.sample.identity,
                embedding_index: s.embedding_index,
                mask_stem: s.sample.image_id.clone(),
            })
            .collect()
    }

    pub fn embeddings(&self) -> Result<EmbeddingMatrix> {
        let rows: Vec<Vec<f64>> = self.samples.iter().map(|s| s.sample.embedding.clone()).collect();
        EmbeddingMatrix::from_rows(self.spec.backbone_dim, &rows)
    }

    /// Writes `{train,query,gallery}.csv`, `embeddings.vcfe`, `masks/` and
    /// `spec.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let masks_dir = dir.join("masks");
        fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
        for split in Split::ALL {
            write_manifest(&dir.join(split.manifest_name()), &self.manifest(split))?;
        }
        self.embeddings()?.save(&dir.join("embeddings.vcfe"))?;
        for s in &self.samples {
            s.masks.save(&masks_dir, &s.sample.image_id)?;
        }
        let spec_path = dir.join("spec.json");
        let json = serde_json::to_string_pretty(&self.spec).expect("spec serializes") + "\n";
        fs::write(&spec_path, json).map_err(|e| Error::io(&spec_path, e))
    }

    /// Heads that invert the generator: global maps back to the full latent
    /// mixture, and each side head keeps only its own signature block.
    /// Exact inverses when `D ≥ 3S` and the noise is zero.
    pub fn oracle_heads(&self) -> HeadParameters {
        let (d, s) = (self.spec.backbone_dim, self.spec.signature_dim);
        let latent = self.spec.latent_dim();
        let transpose_rows = |keep: &dyn Fn(usize) -> bool| {
            let mut w = vec![0.0; latent * d];
            for j in (0..latent).filter(|&j| keep(j)) {
                for i in 0..d {
                    w[j * d + i] = self.lift[i * latent + j];
                }
            }
            LinearHead {
                weight: w,
                bias: vec![0.0; latent],
            }
        };
        let heads = Space::ALL.map(|space| match space.view() {
            None => transpose_rows(&|_| true),
            Some(v) => transpose_rows(&|j| j / s == v.index()),
        });
        HeadParameters::new(d, latent, false, heads).expect("oracle shapes are consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &AreaRatios, b: [f64; 3]) -> bool {
        a.to_array().iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn azimuth_examples() {
        assert!(close(&viewpoint_to_area_ratios(0.0).unwrap(), [1.0, 0.0, 0.0]));
        assert_eq!(viewpoint_to_area_ratios(90.0).unwrap().to_array(), [0.0, 1.0, 0.0]);
        assert!(close(&viewpoint_to_area_ratios(45.0).unwrap(), [0.5, 0.5, 0.0]));
        let rear = viewpoint_to_area_ratios(180.0).unwrap();
        assert_eq!(rear.front, 0.0);
        assert_eq!(rear.to_array(), [0.0, 0.0, 1.0]);
        assert!(viewpoint_to_area_ratios(f64::NAN).is_err());
    }

    #[test]
    fn azimuth_ratios_sum_to_one() {
        for k in 0..720 {
            let r = viewpoint_to_area_ratios(k as f64 * 0.5).unwrap();
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_counts_within_one() {
        for k in 0..360 {
            let r = viewpoint_to_area_ratios(k as f64).unwrap();
            let c = side_pixel_counts(&r, 1344);
            assert_eq!(c.iter().sum::<usize>(), 1344);
            for (n, a) in c.iter().zip(r.to_array()) {
                assert!((*n as f64 - a * 1344.0).abs() < 1.0);
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = SyntheticSpec::benchmark();
        assert!(s.validate().is_ok());
        s.num_identities = 1;
        assert!(s.validate().is_err());
        let mut s = SyntheticSpec::benchmark();
        s.noise_sigma = -0.1;
        assert!(s.validate().is_err());
        let mut s = SyntheticSpec::benchmark();
        s.distractor_overlap = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn masks_recover_ratios() {
        let ds = generate(&SyntheticSpec::benchmark()).unwrap();
        let fg = ((MASK_WIDTH - 2 * MASK_INSET) * (MASK_HEIGHT - 2 * MASK_INSET)) as f64;
        for s in &ds.samples {
            let got = s.sample.area_ratios.to_array();
            for (g, want) in got.iter().zip(s.generating_ratios.to_array()) {
                assert!((g - want).abs() <= 1.0 / fg);
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&SyntheticSpec::benchmark()).unwrap();
        let b = generate(&SyntheticSpec::benchmark()).unwrap();
        assert_eq!(a.embeddings().unwrap(), b.embeddings().unwrap());
        let c = generate(&SyntheticSpec {
            seed: 8,
            ..SyntheticSpec::benchmark()
        })
        .unwrap();
        assert_ne!(a.embeddings().unwrap(), c.embeddings().unwrap());
    }

    #[test]
    fn splits_partition_views() {
        let ds = generate(&SyntheticSpec::benchmark()).unwrap();
        let sizes = Split::ALL.map(|s| ds.split(s).len());
        assert_eq!(sizes, [80, 80, 80]);
        assert!(ds.samples.iter().all(|s| s.split == Split::of_view(s.view)));
    }

    #[test]
    fn oracle_heads_recover_side_signatures() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            ..SyntheticSpec::benchmark()
        };
        let ds = generate(&spec).unwrap();
        let heads = ds.oracle_heads();
        // Two views of one identity that both show the front.
        let (a, b) = (&ds.samples[0].sample, &ds.samples[1].sample);
        let pa = crate::heads::project(&a.embedding, &heads).unwrap();
        let pb = crate::heads::project(&b.embedding, &heads).unwrap();
        let d = crate::linalg::l2_distance(pa.get(Space::Front), pb.get(Space::Front));
        assert!(d < 1e-5, "front-space distance {d}");
    }
}
