//! Cosine ranking and retrieval metrics with writer-label relevance.

use std::collections::BTreeMap;
use std::io::Write;

use num_traits::{FromPrimitive, Num};
use rayon::prelude::*;

use crate::aggregation::GlobalDescriptor;
use crate::corpus::EntityId;
use crate::error::{Error, Result};
use crate::scalar::{dot, l2_norm, Scalar};

/// Top-x columns reported by default.
pub const DEFAULT_TOP_X: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: EntityId,
    /// Gallery ids with cosine similarity, best first.
    pub items: Vec<(EntityId, f64)>,
}

impl RankedList {
    /// Relevance flags under the same-writer rule.
    pub fn relevance(&self) -> Vec<bool> {
        let w = self.query.writer();
        self.items.iter().map(|(id, _)| id.writer() == w).collect()
    }
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == T::zero() || nb == T::zero() {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).to_f64().unwrap_or(0.0)
}

/// Sorts by similarity descending, ties by ascending id string.
fn sort_items(items: &mut [(EntityId, f64, String)]) {
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.2.cmp(&b.2)));
}

/// Ranks `gallery` by cosine similarity to `query`. Gallery entries sharing
/// the query's id are dropped.
pub fn rank<T: Scalar>(query: &GlobalDescriptor<T>, gallery: &[GlobalDescriptor<T>]) -> Result<RankedList> {
    rank_filtered(query, gallery, |_, _| false)
}

/// Like [`rank`] but additionally drops gallery entries for which
/// `exclude(query, candidate)` holds.
pub fn rank_filtered<T: Scalar>(
    query: &GlobalDescriptor<T>,
    gallery: &[GlobalDescriptor<T>],
    exclude: impl Fn(&EntityId, &EntityId) -> bool,
) -> Result<RankedList> {
    let mut items = Vec::with_capacity(gallery.len());
    for g in gallery {
        if g.entity == query.entity || exclude(&query.entity, &g.entity) {
            continue;
        }
        if g.values.len() != query.values.len() {
            return Err(Error::DimMismatch {
                expected: query.values.len(),
                got: g.values.len(),
            });
        }
        items.push((g.entity.clone(), cosine(&query.values, &g.values), g.entity.to_string()));
    }
    if items.is_empty() {
        return Err(Error::EmptyGallery);
    }
    sort_items(&mut items);
    Ok(RankedList {
        query: query.entity.clone(),
        items: items.into_iter().map(|(id, s, _)| (id, s)).collect(),
    })
}

/// Average precision in any numeric type; `r` must equal the number of
/// relevant entries.
pub fn average_precision_in<N: Num + Clone + FromPrimitive>(ranked_rel: &[bool], r: usize) -> Result<N> {
    if r == 0 {
        return Err(Error::NoRelevant);
    }
    let hits = ranked_rel.iter().filter(|&&b| b).count();
    if hits != r {
        return Err(Error::InvalidConfig(format!("relevant count {r} does not match list ({hits})")));
    }
    let lit = |v: usize| N::from_usize(v).expect("count fits the numeric type");
    let mut found = 0;
    let mut sum = N::zero();
    for (k, &rel) in ranked_rel.iter().enumerate() {
        if rel {
            found += 1;
            sum = sum + lit(found) / lit(k + 1);
        }
    }
    Ok(sum / lit(r))
}

pub fn average_precision(ranked_rel: &[bool], r: usize) -> Result<f64> {
    average_precision_in(ranked_rel, r)
}

/// Mean of the defined per-query APs; `None` entries (no relevant item) are
/// skipped.
pub fn mean_ap(aps: &[Option<f64>]) -> Result<f64> {
    let kept: Vec<f64> = aps.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::NoQueries);
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// 1 when the first `x` entries are all relevant.
pub fn top_x_hard(ranked_rel: &[bool], x: usize) -> Result<u8> {
    if x == 0 || ranked_rel.len() < x {
        return Err(Error::ListTooShort { len: ranked_rel.len(), x });
    }
    Ok(u8::from(ranked_rel[..x].iter().all(|&b| b)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// AP of every query with at least one relevant gallery item.
    pub per_query_ap: BTreeMap<EntityId, f64>,
    pub map: f64,
    /// Fraction of evaluated queries whose first `x` results are all relevant.
    pub top_x: BTreeMap<usize, f64>,
    pub relevant: BTreeMap<EntityId, usize>,
    pub gallery_size: usize,
}

/// Ranks every query against `gallery` and aggregates AP and Top-x. Queries
/// without relevant items are left out of every average; a Top-x value
/// is only reported when all evaluated lists have at least `x` entries.
pub fn evaluate_queries<T: Scalar>(
    queries: &[GlobalDescriptor<T>],
    gallery: &[GlobalDescriptor<T>],
    exclude: impl Fn(&EntityId, &EntityId) -> bool + Sync,
    top_xs: &[usize],
) -> Result<(EvalResult, Vec<RankedList>)> {
    let lists: Vec<RankedList> = queries
        .par_iter()
        .map(|q| rank_filtered(q, gallery, &exclude))
        .collect::<Result<_>>()?;
    let mut per_query_ap = BTreeMap::new();
    let mut relevant = BTreeMap::new();
    let mut aps = Vec::with_capacity(lists.len());
    let mut hits: BTreeMap<usize, (usize, bool)> = top_xs.iter().map(|&x| (x, (0, true))).collect();
    for list in &lists {
        let rel = list.relevance();
        let r = rel.iter().filter(|&&b| b).count();
        relevant.insert(list.query.clone(), r);
        if r == 0 {
            aps.push(None);
            continue;
        }
        let ap = average_precision(&rel, r)?;
        per_query_ap.insert(list.query.clone(), ap);
        aps.push(Some(ap));
        for (&x, slot) in hits.iter_mut() {
            match top_x_hard(&rel, x) {
                Ok(v) => slot.0 += v as usize,
                Err(_) => slot.1 = false,
            }
        }
    }
    let map = mean_ap(&aps)?;
    let n = per_query_ap.len() as f64;
    let top_x = hits
        .into_iter()
        .filter(|(_, (_, ok))| *ok)
        .map(|(x, (c, _))| (x, c as f64 / n))
        .collect();
    Ok((
        EvalResult {
            per_query_ap,
            map,
            top_x,
            relevant,
            gallery_size: gallery.len(),
        },
        lists,
    ))
}

/// Leave-one-out evaluation: every entity queries all others.
pub fn evaluate<T: Scalar>(descs: &[GlobalDescriptor<T>], top_xs: &[usize]) -> Result<EvalResult> {
    Ok(evaluate_queries(descs, descs, |_, _| false, top_xs)?.0)
}

/// Writes `query_id rank gallery_id similarity relevant` lines, ranks from 1.
pub fn write_ranked_lists<W: Write>(mut w: W, lists: &[RankedList]) -> Result<()> {
    for list in lists {
        let writer = list.query.writer();
        for (i, (id, s)) in list.items.iter().enumerate() {
            writeln!(w, "{} {} {} {:.6} {}", list.query, i + 1, id, s, u8::from(id.writer() == writer))?;
        }
    }
    Ok(())
}
