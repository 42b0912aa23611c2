//! Fixtures shared by the benchmarks.

use vcfes_core::synthetic::{generate, SyntheticSpec};
use vcfes_core::{build_index, init_heads, project, GalleryEntry, GalleryIndex, ModelShape, ReidModel, TrainingSample};

/// `identities × 12` synthetic samples with a freshly initialized model.
pub fn fixture(identities: usize, backbone_dim: usize, embed_dim: usize) -> (Vec<TrainingSample>, ReidModel) {
    let spec = SyntheticSpec {
        num_identities: identities,
        views_per_identity: 12,
        backbone_dim,
        ..SyntheticSpec::benchmark()
    };
    let samples: Vec<TrainingSample> = generate(&spec)
        .expect("valid spec")
        .samples
        .into_iter()
        .map(|s| s.sample)
        .collect();
    let model = init_heads(0, ModelShape::new(backbone_dim, embed_dim, identities)).expect("valid shape");
    (samples, model)
}

pub fn gallery(samples: &[TrainingSample], model: &ReidModel) -> GalleryIndex {
    let entries = samples
        .iter()
        .map(|s| GalleryEntry {
            identity: s.identity,
            image_id: s.image_id.clone(),
            spaces: project(&s.embedding, &model.heads).expect("matching dims"),
            area_ratios: s.area_ratios,
        })
        .collect();
    build_index(entries).expect("unique ids")
}
