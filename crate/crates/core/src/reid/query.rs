//! Top-k identity retrieval and accuracy-preserving library pruning.

use image::imageops;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::geometry::Mugshot;
use super::library::{Embedding, Metric, ReferenceLibrary};
use super::providers::{EmbedRequest, EmbeddingProvider};
use super::ReidError;

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranked {
    pub individual_id: String,
    pub distance: f64,
}

/// Distinct individuals in non-decreasing distance order, at most k long.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Prediction {
    pub ranked: Vec<Ranked>,
}

impl Prediction {
    pub fn top1(&self) -> Option<&str> {
        self.ranked.first().map(|r| r.individual_id.as_str())
    }

    /// True when `id` is among the first `k` entries.
    pub fn hit_within(&self, id: &str, k: usize) -> bool {
        self.ranked.iter().take(k).any(|r| r.individual_id == id)
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

/// Ranking order shared by retrieval and pruning: distance, then id.
fn better(a: (f64, &str), b: (f64, &str)) -> bool {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)).is_lt()
}

/// Scores every individual by its closest embedding to any of the query
/// embeddings and returns the `k` best.
pub fn rank_individuals(
    library: &ReferenceLibrary,
    queries: &[Embedding],
    k: usize,
    metric: Metric,
) -> Result<Prediction, ReidError> {
    if library.is_empty() {
        return Err(ReidError::EmptyLibrary);
    }
    if k == 0 {
        return Err(ReidError::InvalidK);
    }
    let mut scored: Vec<Ranked> = library
        .individuals()
        .map(|(id, entries)| {
            let distance = entries
                .iter()
                .flat_map(|e| queries.iter().map(move |q| metric.distance(q, &e.embedding)))
                .fold(f64::INFINITY, f64::min);
            Ranked {
                individual_id: id.to_string(),
                distance,
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.individual_id.cmp(&b.individual_id))
    });
    scored.truncate(k);
    Ok(Prediction { ranked: scored })
}

/// Embeds the mugshot and its 180° rotation, then ranks individuals by the
/// better of the two orientations. Covers animals photographed head-down
/// against a head-up library.
pub fn query_topk(
    library: &ReferenceLibrary,
    query: &Mugshot,
    embedder: &dyn EmbeddingProvider,
    k: usize,
    metric: Metric,
) -> Result<Prediction, ReidError> {
    if library.is_empty() {
        return Err(ReidError::EmptyLibrary);
    }
    let key = query.source.key();
    let upright = embedder.embed(EmbedRequest {
        key: &key,
        image: &query.image,
    })?;
    let flipped_image = imageops::rotate180(&query.image);
    let flipped_key = format!("{key}:rot180");
    let flipped = embedder.embed(EmbedRequest {
        key: &flipped_key,
        image: &flipped_image,
    })?;
    rank_individuals(library, &[upright, flipped], k, metric)
}

/// One labelled validation query; several embeddings (e.g. both orientations)
/// are min-merged exactly as in retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationQuery {
    pub label: String,
    pub embeddings: Vec<Embedding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub library: ReferenceLibrary,
    pub initial_top1: f64,
    pub final_top1: f64,
    /// `(individual_id, image_ref)` in the order they were removed.
    pub removed: Vec<(String, String)>,
    /// Full passes over the library, including the final one that removed nothing.
    pub passes: usize,
}

/// Top-1 accuracy of the library on the validation set.
pub fn top1_accuracy(
    library: &ReferenceLibrary,
    validation: &[ValidationQuery],
    metric: Metric,
) -> Result<f64, ReidError> {
    if validation.is_empty() {
        return Err(ReidError::EmptyValidation);
    }
    let mut hits = 0;
    for q in validation {
        let p = rank_individuals(library, &q.embeddings, 1, metric)?;
        hits += (p.top1() == Some(q.label.as_str())) as usize;
    }
    Ok(hits as f64 / validation.len() as f64)
}

/// Randomized greedy pruning: visit embeddings in a seeded random order and
/// drop each one whose absence does not lower top-1 validation accuracy,
/// never emptying an individual. Passes repeat until one removes nothing.
pub fn prune_library(
    library: &ReferenceLibrary,
    validation: &[ValidationQuery],
    seed: u64,
    metric: Metric,
) -> Result<PruneOutcome, ReidError> {
    if validation.is_empty() {
        return Err(ReidError::EmptyValidation);
    }
    if library.is_empty() {
        return Err(ReidError::EmptyLibrary);
    }
    if let Some(q) = validation.iter().find(|q| !library.contains(&q.label)) {
        return Err(ReidError::UnknownLabel(q.label.clone()));
    }
    if let Some(q) = validation.iter().find(|q| q.embeddings.is_empty()) {
        return Err(ReidError::Embedder(format!("validation query for {} has no embeddings", q.label)));
    }

    // Flattened entries: (individual index, entry index within individual).
    let ids: Vec<&str> = library.individuals().map(|(id, _)| id).collect();
    let mut flat: Vec<(usize, usize)> = Vec::new();
    let mut remaining: Vec<usize> = Vec::new();
    for (ii, (_, entries)) in library.individuals().enumerate() {
        remaining.push(entries.len());
        flat.extend((0..entries.len()).map(|ei| (ii, ei)));
    }
    let entry = |f: usize| {
        let (ii, ei) = flat[f];
        &library.entries_of(ids[ii]).expect("known individual")[ei]
    };

    // dist[v][f]: validation query v to library embedding f, min over the query's embeddings.
    let dist: Vec<Vec<f64>> = validation
        .iter()
        .map(|q| {
            (0..flat.len())
                .map(|f| {
                    q.embeddings
                        .iter()
                        .map(|e| metric.distance(e, &entry(f).embedding))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        })
        .collect();
    let labels: Vec<usize> = validation
        .iter()
        .map(|q| ids.iter().position(|id| *id == q.label).expect("checked above"))
        .collect();

    let correct = |active: &[bool]| -> usize {
        dist.iter()
            .zip(&labels)
            .filter(|(row, &label)| {
                let mut best: Option<(f64, usize)> = None;
                for (f, &d) in row.iter().enumerate() {
                    if !active[f] {
                        continue;
                    }
                    let ii = flat[f].0;
                    if best.is_none_or(|(bd, bi)| better((d, ids[ii]), (bd, ids[bi]))) {
                        best = Some((d, ii));
                    }
                }
                best.map(|(_, ii)| ii) == Some(label)
            })
            .count()
    };

    let mut active = vec![true; flat.len()];
    let initial = correct(&active);
    let mut current = initial;
    let mut removed = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..flat.len()).collect();
    let mut passes = 0;
    loop {
        passes += 1;
        order.shuffle(&mut rng);
        let mut removed_this_pass = false;
        for &f in &order {
            let ii = flat[f].0;
            if !active[f] || remaining[ii] <= 1 {
                continue;
            }
            active[f] = false;
            let trial = correct(&active);
            if trial >= current {
                current = trial;
                remaining[ii] -= 1;
                removed.push((ids[ii].to_string(), entry(f).image_ref.clone()));
                removed_this_pass = true;
            } else {
                active[f] = true;
            }
        }
        if !removed_this_pass {
            break;
        }
    }

    let mut pruned = ReferenceLibrary::new();
    for (f, &keep) in active.iter().enumerate() {
        if keep {
            pruned.insert(ids[flat[f].0], entry(f).clone());
        }
    }
    let n = validation.len() as f64;
    Ok(PruneOutcome {
        library: pruned,
        initial_top1: initial as f64 / n,
        final_top1: current as f64 / n,
        removed,
        passes,
    })
}
