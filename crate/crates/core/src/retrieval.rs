//! Gallery index and viewpoint-conditioned ranking.
//!
//! The fused distance between a query and a gallery entry is
//!
//! ```text
//! (d_global + d_front·w_front + d_side·w_side + d_rear·w_rear) / 2
//! ```
//!
//! where `d_*` are L2 distances between unit vectors in each latent space
//! and `w_*` are the query's area ratios (or the pairwise minimum with the
//! entry's ratios, see [`Combine`]). A side the query does not show gets
//! weight zero and cannot influence the result.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mask::AreaRatios;
use crate::space::{PerSpaceEmbeddings, Space};

pub const INDEX_MAGIC: &[u8; 4] = b"VCIX";
pub const INDEX_VERSION: u16 = 1;

/// Distance assigned when either side of a comparison is degenerate.
pub const MAX_UNIT_DISTANCE: f64 = 2.0;

/// How the per-side weights are chosen from the two area-ratio triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// Weights are the query's ratios.
    #[default]
    QueryOnly,
    /// Weight per side is `min(query ratio, entry ratio)`.
    MinPair,
}

/// Which side spaces take part in the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewWeighting {
    /// Global space only.
    GlobalOnly,
    /// Global plus the single side with the largest query ratio, weight 1.
    LargestView,
    /// Global plus every side weighted by its ratio.
    #[default]
    AllViews,
}

impl ViewWeighting {
    pub const ALL: [ViewWeighting; 3] = [
        ViewWeighting::GlobalOnly,
        ViewWeighting::LargestView,
        ViewWeighting::AllViews,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ViewWeighting::GlobalOnly => "global_only",
            ViewWeighting::LargestView => "largest_view",
            ViewWeighting::AllViews => "all_views",
        }
    }
}

impl std::str::FromStr for ViewWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ViewWeighting::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode {s:?}")))
    }
}

impl std::str::FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query_only" => Ok(Combine::QueryOnly),
            "min_pair" => Ok(Combine::MinPair),
            _ => Err(Error::InvalidConfig(format!("unknown combine mode {s:?}"))),
        }
    }
}

/// L2 distance between unit vectors; [`MAX_UNIT_DISTANCE`] if either is the
/// degenerate zero vector.
pub fn space_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Error::check_dim(a.len(), b.len())?;
    if linalg::is_zero(a) || linalg::is_zero(b) {
        return Ok(MAX_UNIT_DISTANCE);
    }
    Ok(linalg::l2_distance(a, b))
}

/// Fused distance from per-space distances (global, front, side, rear) and
/// per-side weights (front, side, rear).
pub fn fuse(d: [f64; 4], w: [f64; 3]) -> f64 {
    (d[0] + d[1] * w[0] + d[2] * w[1] + d[3] * w[2]) / 2.0
}

pub fn view_weights(
    query_ar: &AreaRatios,
    entry_ar: &AreaRatios,
    combine: Combine,
    weighting: ViewWeighting,
) -> [f64; 3] {
    let base = match combine {
        Combine::QueryOnly => query_ar.to_array(),
        Combine::MinPair => {
            let (q, e) = (query_ar.to_array(), entry_ar.to_array());
            [q[0].min(e[0]), q[1].min(e[1]), q[2].min(e[2])]
        }
    };
    match weighting {
        ViewWeighting::AllViews => base,
        ViewWeighting::GlobalOnly => [0.0; 3],
        ViewWeighting::LargestView => {
            let mut w = [0.0; 3];
            w[query_ar.largest_view().index()] = 1.0;
            w
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceBreakdown {
    pub d_global: f64,
    pub d_front: f64,
    pub d_side: f64,
    pub d_rear: f64,
    pub fused: f64,
}

impl DistanceBreakdown {
    pub fn per_space(&self) -> [f64; 4] {
        [self.d_global, self.d_front, self.d_side, self.d_rear]
    }

    pub fn get(&self, space: Space) -> f64 {
        self.per_space()[space.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub identity: u32,
    pub image_id: String,
    pub spaces: PerSpaceEmbeddings,
    pub area_ratios: AreaRatios,
}

pub fn per_space_distances(a: &PerSpaceEmbeddings, b: &PerSpaceEmbeddings) -> Result<[f64; 4]> {
    let mut d = [0.0; 4];
    for s in Space::ALL {
        d[s.index()] = space_distance(a.get(s), b.get(s))?;
    }
    Ok(d)
}

/// Fused distance under the full all-views weighting.
pub fn fused_distance(
    query: &PerSpaceEmbeddings,
    query_ar: &AreaRatios,
    entry: &GalleryEntry,
    combine: Combine,
) -> Result<DistanceBreakdown> {
    fused_distance_with(query, query_ar, entry, combine, ViewWeighting::AllViews)
}

pub fn fused_distance_with(
    query: &PerSpaceEmbeddings,
    query_ar: &AreaRatios,
    entry: &GalleryEntry,
    combine: Combine,
    weighting: ViewWeighting,
) -> Result<DistanceBreakdown> {
    let d = per_space_distances(query, &entry.spaces)?;
    let w = view_weights(query_ar, &entry.area_ratios, combine, weighting);
    Ok(DistanceBreakdown {
        d_global: d[0],
        d_front: d[1],
        d_side: d[2],
        d_rear: d[3],
        fused: fuse(d, w),
    })
}

/// Immutable collection of gallery entries sharing one embedding dimension.
///
/// Embeddings are stored at `f32` precision, the precision of the index file,
/// so a save/load round trip is exact.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GalleryIndex {
    entries: Vec<GalleryEntry>,
    dim: usize,
}

impl GalleryIndex {
    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted, deduplicated identity labels.
    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

pub fn build_index(entries: Vec<GalleryEntry>) -> Result<GalleryIndex> {
    let dim = entries.first().map_or(0, |e| e.spaces.dim());
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        Error::check_dim(dim, e.spaces.dim())?;
        if e.image_id.len() > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!("image id too long: {}", e.image_id.len())));
        }
        if !seen.insert(e.image_id.clone()) {
            return Err(Error::DuplicateImageId(e.image_id));
        }
        AreaRatios::new(e.area_ratios.front, e.area_ratios.side, e.area_ratios.rear)?;
        out.push(GalleryEntry {
            spaces: e.spaces.quantized(),
            ..e
        });
    }
    Ok(GalleryIndex { entries: out, dim })
}

pub fn encode_index(index: &GalleryIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.extend_from_slice(&(index.entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&(index.dim as u32).to_le_bytes());
    for e in &index.entries {
        out.extend_from_slice(&e.identity.to_le_bytes());
        out.extend_from_slice(&(e.image_id.len() as u16).to_le_bytes());
        out.extend_from_slice(e.image_id.as_bytes());
        for (_, v) in e.spaces.iter() {
            for &x in v {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        for r in e.area_ratios.to_array() {
            out.extend_from_slice(&r.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedFile("index file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_index(bytes: &[u8]) -> Result<GalleryIndex> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != INDEX_MAGIC {
        return Err(Error::MalformedFile("bad index magic".into()));
    }
    let version = r.u16()?;
    if version != INDEX_VERSION {
        return Err(Error::FormatMismatch(format!(
            "index version {version} (expected {INDEX_VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let identity = r.u32()?;
        let len = r.u16()? as usize;
        let image_id = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::MalformedFile("image id is not UTF-8".into()))?;
        let mut spaces: [Vec<f64>; 4] = Default::default();
        for v in spaces.iter_mut() {
            *v = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?;
        }
        let ar = [r.f64()?, r.f64()?, r.f64()?];
        entries.push(GalleryEntry {
            identity,
            image_id,
            spaces: PerSpaceEmbeddings::new(spaces)?,
            area_ratios: AreaRatios::new(ar[0], ar[1], ar[2]).map_err(|e| Error::MalformedFile(e.to_string()))?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedFile("trailing bytes after index entries".into()));
    }
    let index = build_index(entries)?;
    if index.dim != dim && !index.is_empty() {
        return Err(Error::MalformedFile("index dimension mismatch".into()));
    }
    Ok(GalleryIndex { dim, ..index })
}

pub fn save_index(index: &GalleryIndex, path: &Path) -> Result<()> {
    fs::write(path, encode_index(index)).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: &Path) -> Result<GalleryIndex> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_index(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedHit {
    pub image_id: String,
    pub identity: u32,
    pub distance: DistanceBreakdown,
}

/// Hits in ascending fused distance, ties broken by image id.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RankedResult {
    pub hits: Vec<RankedHit>,
}

/// Ascending fused distance, then ascending image id.
pub fn sort_hits(hits: &mut [RankedHit]) {
    hits.sort_by(|a, b| {
        a.distance
            .fused
            .total_cmp(&b.distance.fused)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
}

fn check_query(index: &GalleryIndex, query: &PerSpaceEmbeddings) -> Result<()> {
    if !index.is_empty() {
        Error::check_dim(index.dim, query.dim())?;
    }
    Ok(())
}

fn hit(
    entry: &GalleryEntry,
    query: &PerSpaceEmbeddings,
    query_ar: &AreaRatios,
    combine: Combine,
    weighting: ViewWeighting,
) -> Result<RankedHit> {
    Ok(RankedHit {
        image_id: entry.image_id.clone(),
        identity: entry.identity,
        distance: fused_distance_with(query, query_ar, entry, combine, weighting)?,
    })
}

/// Scores every entry, in index order (unsorted).
pub fn score_all(
    index: &GalleryIndex,
    query: &PerSpaceEmbeddings,
    query_ar: &AreaRatios,
    combine: Combine,
    weighting: ViewWeighting,
) -> Result<Vec<RankedHit>> {
    check_query(index, query)?;
    index
        .entries
        .iter()
        .map(|e| hit(e, query, query_ar, combine, weighting))
        .collect()
}

/// [`score_all`] over a rayon pool; output order matches the sequential scan.
pub fn par_score_all(
    index: &GalleryIndex,
    query: &PerSpaceEmbeddings,
    query_ar: &AreaRatios,
    combine: Combine,
    weighting: ViewWeighting,
) -> Result<Vec<RankedHit>> {
    check_query(index, query)?;
    index
        .entries
        .par_iter()
        .map(|e| hit(e, query, query_ar, combine, weighting))
        .collect()
}

/// Full ranking of the gallery. An empty index yields an empty ranking.
pub fn rank(
    index: &GalleryIndex,
    query: &PerSpaceEmbeddings,
    query_ar: &AreaRatios,
    combine: Combine,
    weighting: ViewWeighting,
) -> Result<RankedResult> {
    let mut hits = score_all(index, query, query_ar, combine, weighting)?;
    sort_hits(&mut hits);
    Ok(RankedResult { hits })
}

/// The `k` nearest entries under the all-views fused distance.
pub fn query_topk(
    index: &GalleryIndex,
    query: &PerSpaceEmbeddings,
    query_ar: &AreaRatios,
    k: usize,
    combine: Combine,
) -> Result<RankedResult> {
    topk_impl(index, query, query_ar, k, combine, false)
}

pub fn par_query_topk(
    index: &GalleryIndex,
    query: &PerSpaceEmbeddings,
    query_ar: &AreaRatios,
    k: usize,
    combine: Combine,
) -> Result<RankedResult> {
    topk_impl(index, query, query_ar, k, combine, true)
}

fn topk_impl(
    index: &GalleryIndex,
    query: &PerSpaceEmbeddings,
    query_ar: &AreaRatios,
    k: usize,
    combine: Combine,
    parallel: bool,
) -> Result<RankedResult> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let w = ViewWeighting::AllViews;
    let mut hits = if parallel {
        par_score_all(index, query, query_ar, combine, w)?
    } else {
        score_all(index, query, query_ar, combine, w)?
    };
    sort_hits(&mut hits);
    hits.truncate(k);
    Ok(RankedResult { hits })
}
