//! Retrieval metrics: Top-k, CMC and mAP over a full gallery ranking.
//!
//! A query is skipped (and counted) when the gallery holds no relevant item
//! for it, after dropping the query's own image when self-exclusion is on.
//! mAP is taken over the full ranking, never truncated.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::AreaRatios;
use crate::retrieval::{score_all, Combine, GalleryIndex, RankedHit, RankedResult, ViewWeighting};
use crate::space::PerSpaceEmbeddings;

/// Label recorded in every report for the AP convention in use.
pub const RANKING_LABEL: &str = "full_ranking";

#[derive(Debug, Clone, PartialEq)]
pub struct QueryItem {
    pub image_id: String,
    pub identity: u32,
    pub spaces: PerSpaceEmbeddings,
    pub area_ratios: AreaRatios,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalProtocol<'a> {
    pub queries: &'a [QueryItem],
    pub gallery: &'a GalleryIndex,
    pub exclude_self: bool,
    pub combine: Combine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub top1: f64,
    pub top5: f64,
    pub map: f64,
    pub cmc: Vec<f64>,
    /// Queries that contributed to the averages.
    pub num_queries: usize,
    pub num_skipped: usize,
    pub mode: String,
    pub ranking: String,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Mean over relevant positions `i` (1-based) of `relevant in first i / i`.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoRelevant);
    }
    Ok(sum / hits as f64)
}

struct QueryOutcome {
    first_hit: usize,
    ap: f64,
}

fn ranked_for_query(
    protocol: &EvalProtocol<'_>,
    query: &QueryItem,
    weighting: ViewWeighting,
    transform: &(dyn Fn(f64) -> f64 + Sync),
) -> Result<Vec<RankedHit>> {
    let mut hits = score_all(
        protocol.gallery,
        &query.spaces,
        &query.area_ratios,
        protocol.combine,
        weighting,
    )?;
    if protocol.exclude_self {
        hits.retain(|h| h.image_id != query.image_id);
    }
    for h in &mut hits {
        h.distance.fused = transform(h.distance.fused);
    }
    crate::retrieval::sort_hits(&mut hits);
    Ok(hits)
}

fn outcome(hits: &[RankedHit], identity: u32) -> Option<QueryOutcome> {
    let flags: Vec<bool> = hits.iter().map(|h| h.identity == identity).collect();
    let first_hit = flags.iter().position(|&f| f)?;
    let ap = average_precision(&flags).ok()?;
    Some(QueryOutcome { first_hit, ap })
}

pub fn evaluate(protocol: &EvalProtocol<'_>, weighting: ViewWeighting) -> Result<MetricReport> {
    evaluate_with(protocol, weighting, &|d| d)
}

/// [`evaluate`] with `transform` applied to every fused distance before
/// sorting. Used to check that the ranking depends only on distance order.
pub fn evaluate_with(
    protocol: &EvalProtocol<'_>,
    weighting: ViewWeighting,
    transform: &(dyn Fn(f64) -> f64 + Sync),
) -> Result<MetricReport> {
    if protocol.gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let outcomes: Vec<Option<QueryOutcome>> = protocol
        .queries
        .par_iter()
        .map(|q| {
            Ok(outcome(
                &ranked_for_query(protocol, q, weighting, transform)?,
                q.identity,
            ))
        })
        .collect::<Result<_>>()?;

    let evaluated: Vec<&QueryOutcome> = outcomes.iter().flatten().collect();
    let n = evaluated.len();
    if n == 0 {
        return Err(Error::DegenerateDataset(
            "every query was skipped: no relevant gallery item for any query".into(),
        ));
    }
    let len = protocol.gallery.len().max(5);
    let mut counts = vec![0usize; len];
    for o in &evaluated {
        counts[o.first_hit] += 1;
    }
    let mut cmc = Vec::with_capacity(len);
    let mut acc = 0usize;
    for c in counts {
        acc += c;
        cmc.push(acc as f64 / n as f64);
    }
    let map = evaluated.iter().map(|o| o.ap).sum::<f64>() / n as f64;
    Ok(MetricReport {
        top1: cmc[0],
        top5: cmc[4],
        map,
        cmc,
        num_queries: n,
        num_skipped: protocol.queries.len() - n,
        mode: weighting.name().to_string(),
        ranking: RANKING_LABEL.to_string(),
    })
}

/// One report per weighting mode, over identical query and gallery data.
pub fn compare_modes(protocol: &EvalProtocol<'_>, modes: &[ViewWeighting]) -> Result<Vec<MetricReport>> {
    modes.iter().map(|&m| evaluate(protocol, m)).collect()
}

/// Full ranking for one query under the protocol's exclusion rule.
pub fn rank_query(protocol: &EvalProtocol<'_>, query: &QueryItem, weighting: ViewWeighting) -> Result<RankedResult> {
    Ok(RankedResult {
        hits: ranked_for_query(protocol, query, weighting, &|d| d)?,
    })
}

pub const RANK_TABLE_HEADER: &str = "query_id,rank,gallery_id,fused,d_global,d_front,d_side,d_rear";

/// Appends rows `query_id,rank,gallery_id,fused,d_global,d_front,d_side,d_rear`
/// (rank is 1-based). Writes no header.
pub fn write_rank_rows(out: &mut impl Write, query_id: &str, result: &RankedResult) -> io::Result<()> {
    for (i, h) in result.hits.iter().enumerate() {
        let d = &h.distance;
        writeln!(
            out,
            "{query_id},{},{},{},{},{},{},{}",
            i + 1,
            h.image_id,
            d.fused,
            d.d_global,
            d.d_front,
            d.d_side,
            d.d_rear
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{build_index, GalleryEntry};
    use proptest::prelude::*;

    fn emb(seed: &[f64]) -> PerSpaceEmbeddings {
        let v = seed.to_vec();
        PerSpaceEmbeddings::from_raw([v.clone(), v.clone(), v.clone(), v]).unwrap()
    }

    fn entry(id: u32, name: &str, v: &[f64]) -> GalleryEntry {
        GalleryEntry {
            identity: id,
            image_id: name.into(),
            spaces: emb(v),
            area_ratios: AreaRatios::new(0.5, 0.5, 0.0).unwrap(),
        }
    }

    fn query(id: u32, name: &str, v: &[f64]) -> QueryItem {
        QueryItem {
            image_id: name.into(),
            identity: id,
            spaces: emb(v),
            area_ratios: AreaRatios::new(0.5, 0.5, 0.0).unwrap(),
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, false, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[false, true]).unwrap(), 0.5);
        assert!(matches!(average_precision(&[false, false]), Err(Error::NoRelevant)));
        assert!(matches!(average_precision(&[]), Err(Error::NoRelevant)));
    }

    fn ap_oracle(flags: &[bool]) -> f64 {
        let positions: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
        let precisions: Vec<f64> = positions
            .iter()
            .map(|&i| flags[..=i].iter().filter(|&&f| f).count() as f64 / (i + 1) as f64)
            .collect();
        precisions.iter().sum::<f64>() / precisions.len() as f64
    }

    proptest! {
        #[test]
        fn ap_matches_oracle(flags in prop::collection::vec(any::<bool>(), 1..=10)) {
            prop_assume!(flags.iter().any(|&f| f));
            prop_assert!((average_precision(&flags).unwrap() - ap_oracle(&flags)).abs() < 1e-15);
        }

        #[test]
        fn ap_relevant_first_is_one_and_reversal_decreases(rel in 1usize..6, irr in 0usize..6) {
            let mut flags = vec![true; rel];
            flags.extend(vec![false; irr]);
            prop_assert_eq!(average_precision(&flags).unwrap(), 1.0);
            flags.reverse();
            let rev = average_precision(&flags).unwrap();
            if irr > 0 { prop_assert!(rev < 1.0); } else { prop_assert_eq!(rev, 1.0); }
        }
    }

    #[test]
    fn perfect_retrieval() {
        let gallery = build_index(vec![
            entry(0, "g0", &[1.0, 0.0, 0.0]),
            entry(1, "g1", &[0.0, 1.0, 0.0]),
            entry(2, "g2", &[0.0, 0.0, 1.0]),
        ])
        .unwrap();
        let queries = vec![
            query(0, "q0", &[1.0, 0.0, 0.0]),
            query(1, "q1", &[0.0, 1.0, 0.0]),
            query(2, "q2", &[0.0, 0.0, 1.0]),
        ];
        let p = EvalProtocol {
            queries: &queries,
            gallery: &gallery,
            exclude_self: true,
            combine: Combine::QueryOnly,
        };
        let r = evaluate(&p, ViewWeighting::AllViews).unwrap();
        assert_eq!((r.top1, r.top5, r.map), (1.0, 1.0, 1.0));
        assert_eq!(r.cmc.len(), 5);
        assert_eq!(r.num_queries, 3);
        assert_eq!(r.num_skipped, 0);
        assert_eq!(r.mode, "all_views");
    }

    #[test]
    fn absent_identity_is_skipped() {
        let gallery = build_index(vec![entry(0, "a", &[1.0, 0.0]), entry(1, "b", &[0.0, 1.0])]).unwrap();
        let queries = vec![
            query(0, "q", &[1.0, 0.1]),
            query(7, "x", &[1.0, 1.0]),
            query(1, "b", &[0.0, 1.0]),
        ];
        let p = EvalProtocol {
            queries: &queries,
            gallery: &gallery,
            exclude_self: true,
            combine: Combine::QueryOnly,
        };
        let r = evaluate(&p, ViewWeighting::GlobalOnly).unwrap();
        // "b" only matches itself, which is excluded.
        assert_eq!(r.num_skipped, 2);
        assert_eq!(r.num_queries, 1);
        assert_eq!(r.top1, 1.0);

        let p = EvalProtocol {
            exclude_self: false,
            ..p
        };
        let r = evaluate(&p, ViewWeighting::GlobalOnly).unwrap();
        assert_eq!(r.num_skipped, 1);
    }

    #[test]
    fn empty_gallery_and_all_skipped() {
        let gallery = build_index(vec![]).unwrap();
        let queries = vec![query(0, "q", &[1.0])];
        let p = EvalProtocol {
            queries: &queries,
            gallery: &gallery,
            exclude_self: true,
            combine: Combine::QueryOnly,
        };
        assert!(matches!(
            evaluate(&p, ViewWeighting::AllViews),
            Err(Error::EmptyGallery)
        ));
        let gallery = build_index(vec![entry(3, "a", &[1.0])]).unwrap();
        let p = EvalProtocol { gallery: &gallery, ..p };
        assert!(matches!(
            evaluate(&p, ViewWeighting::AllViews),
            Err(Error::DegenerateDataset(_))
        ));
    }

    #[test]
    fn rank_rows() {
        let gallery = build_index(vec![entry(0, "a", &[1.0, 0.0]), entry(1, "b", &[0.0, 1.0])]).unwrap();
        let q = query(0, "q", &[1.0, 0.0]);
        let queries = [q.clone()];
        let p = EvalProtocol {
            queries: &queries,
            gallery: &gallery,
            exclude_self: true,
            combine: Combine::QueryOnly,
        };
        let ranked = rank_query(&p, &q, ViewWeighting::AllViews).unwrap();
        let mut buf = Vec::new();
        write_rank_rows(&mut buf, "q", &ranked).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("q,1,a,0,0,0,0,"));
        assert!(lines[1].starts_with("q,2,b,"));
    }
}
