//! kNN evaluation of shared-layer embeddings.
//!
//! Three protocols are provided:
//!
//! * closed set: val/test queries against the training split;
//! * unseen NN: each unseen record against train ∪ unseen, itself excluded;
//! * 1-shot episodes: one support record per unseen individual, with the
//!   training split acting as distractors.
//!
//! Labels are voted per level independently. With `k = 1` every prediction is
//! a neighbour's full label path, so it is always hierarchy-consistent.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Split};
use crate::linalg::{dot, keyed_rng, normalized, stream, Matrix};
use crate::network::{EncoderParams, NetworkError};
use crate::taxonomy::{report_order, ConsistencyReport, LabelTriple, Level, Taxonomy, TaxonomyError};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Default number of support draws for 1-shot evaluation.
pub const DEFAULT_EPISODES: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference set is empty")]
    EmptyReference,
    #[error("k = {k} exceeds the {available} available references")]
    KTooLarge { k: usize, available: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("split {0} has no records")]
    EmptySplit(Split),
    #[error("split {0} cannot be used here")]
    InvalidSplit(Split),
    #[error("unseen individual `{individual}` has {count} example(s); 1-shot needs at least 2")]
    InsufficientExamples { individual: String, count: usize },
    #[error("episode count must be at least 1")]
    NoEpisodes,
    #[error("predictions ({preds}) and truths ({truths}) differ in length")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("balanced accuracy of an empty list")]
    EmptyInput,
    #[error("query has dimension {found}, references have {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        }
    }

    /// Maps a raw embedding into the space the metric compares in.
    fn prepare(self, v: &[f64]) -> Vec<f64> {
        match self {
            Metric::Cosine => normalized(v, 1e-12),
            Metric::Euclidean => v.to_vec(),
        }
    }

    /// Distance between two prepared vectors.
    fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Cosine => 1.0 - dot(a, b),
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// Anything that maps a feature matrix to embeddings used for kNN.
pub trait Embedder {
    fn embed(&self, features: &Matrix) -> Result<Matrix, EvalError>;
}

impl Embedder for EncoderParams {
    fn embed(&self, features: &Matrix) -> Result<Matrix, EvalError> {
        Ok(EncoderParams::embed(self, features)?)
    }
}

/// Uses the input features directly, for baselines.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawFeatures;

impl Embedder for RawFeatures {
    fn embed(&self, features: &Matrix) -> Result<Matrix, EvalError> {
        Ok(features.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Train,
    Unseen,
    Support,
}

/// Labeled embeddings of one group of records.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub keys: Vec<String>,
    pub embeddings: Matrix,
    pub labels: Vec<LabelTriple>,
}

impl LabeledSet {
    pub fn from_split(model: &dyn Embedder, ds: &Dataset, split: Split) -> Result<Self, EvalError> {
        let indices = ds.split_indices(split);
        let embeddings = if indices.is_empty() {
            Matrix::zeros(0, 0)
        } else {
            model.embed(&ds.features(&indices))?
        };
        Ok(LabeledSet {
            keys: indices.iter().map(|&i| ds.records()[i].key.clone()).collect(),
            embeddings,
            labels: ds.labels(&indices),
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            keys: indices.iter().map(|&i| self.keys[i].clone()).collect(),
            embeddings: self.embeddings.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

/// Reference embeddings prepared for one metric.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    keys: Vec<String>,
    embeddings: Vec<Vec<f64>>,
    labels: Vec<LabelTriple>,
    sources: Vec<Source>,
    metric: Metric,
}

impl ReferenceSet {
    pub fn new(metric: Metric) -> Self {
        ReferenceSet {
            keys: Vec::new(),
            embeddings: Vec::new(),
            labels: Vec::new(),
            sources: Vec::new(),
            metric,
        }
    }

    pub fn from_set(set: &LabeledSet, source: Source, metric: Metric) -> Self {
        let mut r = ReferenceSet::new(metric);
        r.extend(set, source);
        r
    }

    pub fn extend(&mut self, set: &LabeledSet, source: Source) {
        for i in 0..set.len() {
            self.push(&set.keys[i], set.embeddings.row(i), set.labels[i].clone(), source);
        }
    }

    pub fn push(&mut self, key: &str, embedding: &[f64], label: LabelTriple, source: Source) {
        self.keys.push(key.to_string());
        self.embeddings.push(self.metric.prepare(embedding));
        self.labels.push(label);
        self.sources.push(source);
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn labels(&self) -> &[LabelTriple] {
        &self.labels
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }
}

/// The three predicted labels for one query.
pub type PredictionTriple = LabelTriple;

/// Majority vote per level over the `k` nearest references.
///
/// References whose key equals `query_key` are skipped when `exclude_self`
/// is set. Neighbours are ranked by distance, then by reference order. Vote
/// ties go to the label with the smallest summed distance, then to the
/// lexicographically smallest label.
pub fn knn_predict(
    reference: &ReferenceSet,
    query: &[f64],
    query_key: Option<&str>,
    k: usize,
    exclude_self: bool,
) -> Result<PredictionTriple, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let dim = reference.embeddings[0].len();
    if query.len() != dim {
        return Err(EvalError::DimensionMismatch {
            expected: dim,
            found: query.len(),
        });
    }
    let metric = reference.metric;
    let q = metric.prepare(query);
    let mut candidates: Vec<(f64, usize)> = reference
        .embeddings
        .iter()
        .enumerate()
        .filter(|(i, _)| !(exclude_self && query_key.is_some_and(|key| reference.keys[*i] == key)))
        .map(|(i, e)| (metric.distance(&q, e), i))
        .collect();
    if candidates.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    if k > candidates.len() {
        return Err(EvalError::KTooLarge {
            k,
            available: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let neighbours = &candidates[..k];

    let vote = |level: Level| -> String {
        let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
        for &(d, i) in neighbours {
            let entry = tally.entry(reference.labels[i].label(level)).or_insert((0, 0.0));
            entry.0 += 1;
            entry.1 += d;
        }
        // BTreeMap iterates labels in order, so the first best wins lexicographic ties.
        let mut best: Option<(&str, usize, f64)> = None;
        for (label, (count, dist)) in tally {
            let better = match best {
                None => true,
                Some((_, c, d)) => count > c || (count == c && dist < d),
            };
            if better {
                best = Some((label, count, dist));
            }
        }
        best.expect("k >= 1").0.to_string()
    };

    Ok(LabelTriple {
        individual: vote(Level::Individual),
        species: vote(Level::Species),
        taxon: vote(Level::Taxon),
    })
}

/// Mean per-class recall over the classes present in `truths`.
pub fn balanced_accuracy<T: Ord>(preds: &[T], truths: &[T]) -> Result<f64, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    if truths.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut per_class: BTreeMap<&T, (usize, usize)> = BTreeMap::new();
    for (p, t) in preds.iter().zip(truths) {
        let entry = per_class.entry(t).or_insert((0, 0));
        entry.1 += 1;
        if p == t {
            entry.0 += 1;
        }
    }
    let recall_sum: f64 = per_class.values().map(|&(hit, n)| hit as f64 / n as f64).sum();
    Ok(recall_sum / per_class.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LevelAccuracy {
    pub taxon: f64,
    pub species: f64,
    pub id: f64,
}

impl LevelAccuracy {
    pub fn get(&self, level: Level) -> f64 {
        match level {
            Level::Individual => self.id,
            Level::Species => self.species,
            Level::Taxon => self.taxon,
        }
    }

    fn get_mut(&mut self, level: Level) -> &mut f64 {
        match level {
            Level::Individual => &mut self.id,
            Level::Species => &mut self.species,
            Level::Taxon => &mut self.taxon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesRow {
    pub species: String,
    /// Fraction of this species' queries assigned the right species.
    pub species_accuracy: f64,
    /// Balanced ID accuracy over this species' queries.
    pub id_accuracy: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub count: usize,
    pub mean: LevelAccuracy,
    pub per_episode: Vec<LevelAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub scenario: String,
    pub k: usize,
    pub metric: Metric,
    pub queries: usize,
    pub balanced_accuracy: LevelAccuracy,
    pub per_species: Vec<SpeciesRow>,
    pub consistency: ConsistencyReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episodes: Option<EpisodeStats>,
}

impl EvalReport {
    pub fn accuracies_in_unit_interval(&self) -> bool {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        Level::ALL.iter().all(|&l| unit(self.balanced_accuracy.get(l)))
            && self
                .per_species
                .iter()
                .all(|r| unit(r.species_accuracy) && unit(r.id_accuracy))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Predictions paired with ground truth for a set of queries.
#[derive(Debug, Clone, Default)]
pub struct ScoredQueries {
    pub predictions: Vec<PredictionTriple>,
    pub truths: Vec<LabelTriple>,
}

/// Classifies every query against `reference`.
pub fn score_queries(
    reference: &ReferenceSet,
    queries: &LabeledSet,
    k: usize,
    exclude_self: bool,
) -> Result<ScoredQueries, EvalError> {
    let mut scored = ScoredQueries::default();
    for i in 0..queries.len() {
        let pred = knn_predict(reference, queries.embeddings.row(i), Some(&queries.keys[i]), k, exclude_self)?;
        scored.predictions.push(pred);
        scored.truths.push(queries.labels[i].clone());
    }
    Ok(scored)
}

fn pick<'a>(idx: &[usize], level: Level, from: &'a [LabelTriple]) -> Vec<&'a str> {
    idx.iter().map(|&i| from[i].label(level)).collect()
}

fn level_labels(triples: &[LabelTriple], level: Level) -> Vec<&str> {
    triples.iter().map(|t| t.label(level)).collect()
}

/// Per-level and per-species balanced accuracies plus a consistency audit.
pub fn summarize(
    scored: &ScoredQueries,
    taxonomy: &Taxonomy,
    scenario: &str,
    k: usize,
    metric: Metric,
) -> Result<EvalReport, EvalError> {
    let mut overall = LevelAccuracy::default();
    for level in Level::ALL {
        *overall.get_mut(level) = balanced_accuracy(
            &level_labels(&scored.predictions, level),
            &level_labels(&scored.truths, level),
        )?;
    }

    let species = report_order(scored.truths.iter().map(|t| t.species.as_str()));
    let mut per_species = Vec::with_capacity(species.len());
    for sp in species {
        let idx: Vec<usize> = (0..scored.truths.len()).filter(|&i| scored.truths[i].species == sp).collect();
        per_species.push(SpeciesRow {
            species: sp.to_string(),
            species_accuracy: balanced_accuracy(
                &pick(&idx, Level::Species, &scored.predictions),
                &pick(&idx, Level::Species, &scored.truths),
            )?,
            id_accuracy: balanced_accuracy(
                &pick(&idx, Level::Individual, &scored.predictions),
                &pick(&idx, Level::Individual, &scored.truths),
            )?,
            queries: idx.len(),
        });
    }

    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        scenario: scenario.to_string(),
        k,
        metric,
        queries: scored.truths.len(),
        balanced_accuracy: overall,
        per_species,
        consistency: taxonomy.check_consistency(&scored.predictions)?,
        episodes: None,
    })
}

/// Closed-set queries against training references.
pub fn closed_from_sets(
    train: &LabeledSet,
    queries: &LabeledSet,
    taxonomy: &Taxonomy,
    k: usize,
    metric: Metric,
) -> Result<EvalReport, EvalError> {
    let reference = ReferenceSet::from_set(train, Source::Train, metric);
    let scored = score_queries(&reference, queries, k, false)?;
    summarize(&scored, taxonomy, "closed", k, metric)
}

pub fn evaluate_closed(
    model: &dyn Embedder,
    ds: &Dataset,
    split: Split,
    k: usize,
    metric: Metric,
) -> Result<EvalReport, EvalError> {
    if !matches!(split, Split::Val | Split::Test) {
        return Err(EvalError::InvalidSplit(split));
    }
    let queries = LabeledSet::from_split(model, ds, split)?;
    if queries.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let train = LabeledSet::from_split(model, ds, Split::Train)?;
    let mut report = closed_from_sets(&train, &queries, ds.taxonomy(), k, metric)?;
    report.scenario = format!("closed-{split}");
    Ok(report)
}

/// Unseen queries against train ∪ unseen, each query excluding itself.
pub fn unseen_nn_from_sets(
    train: &LabeledSet,
    unseen: &LabeledSet,
    taxonomy: &Taxonomy,
    k: usize,
    metric: Metric,
) -> Result<EvalReport, EvalError> {
    if unseen.is_empty() {
        return Err(EvalError::EmptySplit(Split::Unseen));
    }
    let mut reference = ReferenceSet::from_set(train, Source::Train, metric);
    reference.extend(unseen, Source::Unseen);
    let scored = score_queries(&reference, unseen, k, true)?;
    summarize(&scored, taxonomy, "unseen-nn", k, metric)
}

pub fn evaluate_unseen_nn(model: &dyn Embedder, ds: &Dataset, k: usize, metric: Metric) -> Result<EvalReport, EvalError> {
    let train = LabeledSet::from_split(model, ds, Split::Train)?;
    let unseen = LabeledSet::from_split(model, ds, Split::Unseen)?;
    unseen_nn_from_sets(&train, &unseen, ds.taxonomy(), k, metric)
}

/// Averages per-episode reports.
fn merge_episodes(reports: Vec<EvalReport>, k: usize, metric: Metric) -> EvalReport {
    let count = reports.len() as f64;
    let mut mean = LevelAccuracy::default();
    let mut consistency = ConsistencyReport::default();
    let mut species: BTreeMap<String, (f64, f64, usize, usize)> = BTreeMap::new();
    for r in &reports {
        for level in Level::ALL {
            *mean.get_mut(level) += r.balanced_accuracy.get(level) / count;
        }
        consistency.merge(&r.consistency);
        for row in &r.per_species {
            let entry = species.entry(row.species.clone()).or_insert((0.0, 0.0, 0, 0));
            entry.0 += row.species_accuracy;
            entry.1 += row.id_accuracy;
            entry.2 += row.queries;
            entry.3 += 1;
        }
    }
    let per_species = report_order(species.keys().map(String::as_str))
        .into_iter()
        .map(|sp| {
            let (sa, ia, q, n) = species[sp];
            SpeciesRow {
                species: sp.to_string(),
                species_accuracy: sa / n as f64,
                id_accuracy: ia / n as f64,
                queries: q / n,
            }
        })
        .collect();
    EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        scenario: "one-shot".into(),
        k,
        metric,
        queries: reports.first().map_or(0, |r| r.queries),
        balanced_accuracy: mean,
        per_species,
        consistency,
        episodes: Some(EpisodeStats {
            count: reports.len(),
            mean,
            per_episode: reports.iter().map(|r| r.balanced_accuracy).collect(),
        }),
    }
}

/// 1-shot evaluation over embedded sets. `train` may be empty (no distractors).
pub fn one_shot_from_sets(
    train: &LabeledSet,
    unseen: &LabeledSet,
    taxonomy: &Taxonomy,
    episodes: usize,
    k: usize,
    metric: Metric,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    if unseen.is_empty() {
        return Err(EvalError::EmptySplit(Split::Unseen));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, label) in unseen.labels.iter().enumerate() {
        by_class.entry(label.individual.as_str()).or_default().push(i);
    }
    if let Some((individual, members)) = by_class.iter().find(|(_, m)| m.len() < 2) {
        return Err(EvalError::InsufficientExamples {
            individual: individual.to_string(),
            count: members.len(),
        });
    }

    let mut reports = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let mut rng = keyed_rng(seed, stream::EPISODES, episode as u64);
        let mut is_support = vec![false; unseen.len()];
        let mut reference = ReferenceSet::new(metric);
        for members in by_class.values() {
            let pick = members[rng.random_range(0..members.len())];
            is_support[pick] = true;
            reference.push(&unseen.keys[pick], unseen.embeddings.row(pick), unseen.labels[pick].clone(), Source::Support);
        }
        reference.extend(train, Source::Train);
        let query_idx: Vec<usize> = (0..unseen.len()).filter(|&i| !is_support[i]).collect();
        let queries = unseen.subset(&query_idx);
        let scored = score_queries(&reference, &queries, k, false)?;
        reports.push(summarize(&scored, taxonomy, "one-shot", k, metric)?);
    }
    Ok(merge_episodes(reports, k, metric))
}

pub fn one_shot_episodes(
    model: &dyn Embedder,
    ds: &Dataset,
    episodes: usize,
    k: usize,
    metric: Metric,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let train = LabeledSet::from_split(model, ds, Split::Train)?;
    let unseen = LabeledSet::from_split(model, ds, Split::Unseen)?;
    one_shot_from_sets(&train, &unseen, ds.taxonomy(), episodes, k, metric, seed)
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Renders reports side by side: one column per report, per-species species
/// and ID rows, then overall balanced accuracies and consistency counts.
pub fn render_table(columns: &[(String, EvalReport)]) -> String {
    const LABEL_WIDTH: usize = 16;
    let width = columns.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7) + 2;
    let mut out = String::new();
    let row = |out: &mut String, label: &str, cells: Vec<String>| {
        let _ = write!(out, "{label:<LABEL_WIDTH$}");
        for c in cells {
            let _ = write!(out, "{c:>width$}");
        }
        out.push('\n');
    };
    let scenario = columns.first().map_or("", |(_, r)| r.scenario.as_str());
    row(&mut out, scenario, columns.iter().map(|(n, _)| n.clone()).collect());
    let _ = writeln!(out, "{}", "-".repeat(LABEL_WIDTH + width * columns.len()));

    let species = report_order(columns.iter().flat_map(|(_, r)| r.per_species.iter().map(|s| s.species.as_str())));
    for sp in species {
        row(&mut out, sp, vec![String::new(); columns.len()]);
        let find = |r: &EvalReport| r.per_species.iter().find(|s| s.species == sp).cloned();
        row(
            &mut out,
            "  Species",
            columns.iter().map(|(_, r)| find(r).map_or("-".into(), |s| pct(s.species_accuracy))).collect(),
        );
        row(
            &mut out,
            "  ID",
            columns.iter().map(|(_, r)| find(r).map_or("-".into(), |s| pct(s.id_accuracy))).collect(),
        );
    }
    row(&mut out, "Balanced acc", vec![String::new(); columns.len()]);
    for (label, level) in [("  Taxon", Level::Taxon), ("  Species", Level::Species), ("  ID", Level::Individual)] {
        row(&mut out, label, columns.iter().map(|(_, r)| pct(r.balanced_accuracy.get(level))).collect());
    }
    row(&mut out, "Consistency", vec![String::new(); columns.len()]);
    row(
        &mut out,
        "  Species/ID",
        columns.iter().map(|(_, r)| r.consistency.species_id_errors.to_string()).collect(),
    );
    row(
        &mut out,
        "  Taxon/species",
        columns.iter().map(|(_, r)| r.consistency.taxon_species_errors.to_string()).collect(),
    );
    if columns.iter().any(|(_, r)| r.episodes.is_some()) {
        row(
            &mut out,
            "Episodes",
            columns
                .iter()
                .map(|(_, r)| r.episodes.as_ref().map_or("-".into(), |e| e.count.to_string()))
                .collect(),
        );
    }
    out
}
