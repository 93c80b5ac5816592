//! The individual → species → taxon label hierarchy.
//!
//! Levels are indexed finest to coarsest: `0 = individual`, `1 = species`,
//! `2 = taxon`. A [`Taxonomy`] is immutable once built and can be shared
//! between threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("cannot build a taxonomy from an empty label list")]
    Empty,
    #[error("empty {level} label")]
    EmptyLabel { level: Level },
    #[error("{level} `{label}` has conflicting parents `{first}` and `{second}`")]
    ConflictingParent {
        level: Level,
        label: String,
        first: String,
        second: String,
    },
    #[error("label `{label}` used at both the {first} and {second} levels")]
    LevelCollision {
        label: String,
        first: Level,
        second: Level,
    },
    #[error("unknown {level} label `{label}`")]
    UnknownLabel { level: Level, label: String },
}

/// One level of the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    #[serde(alias = "id")]
    Individual,
    Species,
    Taxon,
}

impl Level {
    /// All levels, finest first.
    pub const ALL: [Level; 3] = [Level::Individual, Level::Species, Level::Taxon];

    pub fn index(self) -> usize {
        match self {
            Level::Individual => 0,
            Level::Species => 1,
            Level::Taxon => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Level> {
        Level::ALL.get(index).copied()
    }

    /// Short tag used in reports and file formats.
    pub fn short_name(self) -> &'static str {
        match self {
            Level::Individual => "id",
            Level::Species => "species",
            Level::Taxon => "taxon",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Level::Individual => "individual",
            Level::Species => "species",
            Level::Taxon => "taxon",
        };
        f.write_str(name)
    }
}

/// The (individual, species, taxon) labels attached to one recording.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelTriple {
    pub individual: String,
    pub species: String,
    pub taxon: String,
}

impl LabelTriple {
    /// Builds a triple, trimming surrounding whitespace and rejecting blank fields.
    pub fn new(
        individual: impl AsRef<str>,
        species: impl AsRef<str>,
        taxon: impl AsRef<str>,
    ) -> Result<Self, TaxonomyError> {
        let triple = LabelTriple {
            individual: individual.as_ref().trim().to_string(),
            species: species.as_ref().trim().to_string(),
            taxon: taxon.as_ref().trim().to_string(),
        };
        triple.validate()?;
        Ok(triple)
    }

    pub fn label(&self, level: Level) -> &str {
        match level {
            Level::Individual => &self.individual,
            Level::Species => &self.species,
            Level::Taxon => &self.taxon,
        }
    }

    fn validate(&self) -> Result<(), TaxonomyError> {
        for level in Level::ALL {
            if self.label(level).trim().is_empty() {
                return Err(TaxonomyError::EmptyLabel { level });
            }
        }
        Ok(())
    }

    fn normalized(&self) -> Result<Self, TaxonomyError> {
        LabelTriple::new(&self.individual, &self.species, &self.taxon)
    }
}

impl fmt::Display for LabelTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.individual, self.species, self.taxon)
    }
}

/// Counts of predictions whose adjacent levels do not form a parent-child path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    #[serde(rename = "species_id")]
    pub species_id_errors: usize,
    #[serde(rename = "taxon_species")]
    pub taxon_species_errors: usize,
    #[serde(rename = "total")]
    pub total_predictions: usize,
}

impl ConsistencyReport {
    pub fn is_consistent(&self) -> bool {
        self.species_id_errors == 0 && self.taxon_species_errors == 0
    }

    pub fn merge(&mut self, other: &ConsistencyReport) {
        self.species_id_errors += other.species_id_errors;
        self.taxon_species_errors += other.taxon_species_errors;
        self.total_predictions += other.total_predictions;
    }
}

/// A three-level label forest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    /// `parents[0]` maps individual → species, `parents[1]` maps species → taxon.
    parents: [BTreeMap<String, String>; 2],
    /// `children[0]` maps species → individuals, `children[1]` maps taxon → species.
    children: [BTreeMap<String, BTreeSet<String>>; 2],
    registry: [BTreeSet<String>; 3],
}

impl Taxonomy {
    /// Builds the hierarchy from label triples. Identical duplicates are merged.
    pub fn build<'a, I>(triples: I) -> Result<Self, TaxonomyError>
    where
        I: IntoIterator<Item = &'a LabelTriple>,
    {
        let mut parents: [BTreeMap<String, String>; 2] = Default::default();
        let mut seen_any = false;
        for raw in triples {
            seen_any = true;
            let triple = raw.normalized()?;
            insert_parent(
                &mut parents[0],
                Level::Individual,
                &triple.individual,
                &triple.species,
            )?;
            insert_parent(&mut parents[1], Level::Species, &triple.species, &triple.taxon)?;
        }
        if !seen_any {
            return Err(TaxonomyError::Empty);
        }

        let mut registry: [BTreeSet<String>; 3] = Default::default();
        let mut children: [BTreeMap<String, BTreeSet<String>>; 2] = Default::default();
        for (individual, species) in &parents[0] {
            registry[0].insert(individual.clone());
            children[0]
                .entry(species.clone())
                .or_default()
                .insert(individual.clone());
        }
        for (species, taxon) in &parents[1] {
            registry[1].insert(species.clone());
            registry[2].insert(taxon.clone());
            children[1]
                .entry(taxon.clone())
                .or_default()
                .insert(species.clone());
        }

        for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if let Some(label) = registry[a].intersection(&registry[b]).next() {
                return Err(TaxonomyError::LevelCollision {
                    label: label.clone(),
                    first: Level::ALL[a],
                    second: Level::ALL[b],
                });
            }
        }

        Ok(Taxonomy {
            parents,
            children,
            registry,
        })
    }

    /// Registered labels at `level`, in lexicographic order.
    pub fn labels(&self, level: Level) -> impl Iterator<Item = &str> + '_ {
        self.registry[level.index()].iter().map(String::as_str)
    }

    pub fn count(&self, level: Level) -> usize {
        self.registry[level.index()].len()
    }

    pub fn contains(&self, level: Level, label: &str) -> bool {
        self.registry[level.index()].contains(label.trim())
    }

    /// The parent label of `label` at the next coarser level, or `None` for taxa.
    pub fn parent(&self, level: Level, label: &str) -> Result<Option<&str>, TaxonomyError> {
        let label = label.trim();
        if !self.contains(level, label) {
            return Err(TaxonomyError::UnknownLabel {
                level,
                label: label.to_string(),
            });
        }
        Ok(match level {
            Level::Taxon => None,
            _ => self.parents[level.index()].get(label).map(String::as_str),
        })
    }

    /// Direct children of `label` at the next finer level.
    pub fn children(&self, level: Level, label: &str) -> Result<Vec<&str>, TaxonomyError> {
        let label = label.trim();
        if !self.contains(level, label) {
            return Err(TaxonomyError::UnknownLabel {
                level,
                label: label.to_string(),
            });
        }
        Ok(match level {
            Level::Individual => Vec::new(),
            _ => self.children[level.index() - 1]
                .get(label)
                .map(|set| set.iter().map(String::as_str).collect())
                .unwrap_or_default(),
        })
    }

    /// The (species, taxon) pair above an individual.
    pub fn ancestors(&self, individual: &str) -> Result<(&str, &str), TaxonomyError> {
        let individual = individual.trim();
        let species = self.parents[0]
            .get(individual)
            .ok_or_else(|| TaxonomyError::UnknownLabel {
                level: Level::Individual,
                label: individual.to_string(),
            })?;
        let taxon = &self.parents[1][species];
        Ok((species, taxon))
    }

    /// The full label path for a registered individual.
    pub fn path(&self, individual: &str) -> Result<LabelTriple, TaxonomyError> {
        let (species, taxon) = self.ancestors(individual)?;
        Ok(LabelTriple {
            individual: individual.trim().to_string(),
            species: species.to_string(),
            taxon: taxon.to_string(),
        })
    }

    /// Audits predicted triples for hierarchy violations.
    pub fn check_consistency<'a, I>(&self, predictions: I) -> Result<ConsistencyReport, TaxonomyError>
    where
        I: IntoIterator<Item = &'a LabelTriple>,
    {
        let mut report = ConsistencyReport::default();
        for pred in predictions {
            for level in Level::ALL {
                let label = pred.label(level).trim();
                if !self.contains(level, label) {
                    return Err(TaxonomyError::UnknownLabel {
                        level,
                        label: label.to_string(),
                    });
                }
            }
            let species = pred.species.trim();
            if self.parents[0][pred.individual.trim()] != species {
                report.species_id_errors += 1;
            }
            if self.parents[1][species] != pred.taxon.trim() {
                report.taxon_species_errors += 1;
            }
            report.total_predictions += 1;
        }
        Ok(report)
    }
}

fn insert_parent(
    map: &mut BTreeMap<String, String>,
    level: Level,
    child: &str,
    parent: &str,
) -> Result<(), TaxonomyError> {
    match map.get(child) {
        Some(existing) if existing != parent => Err(TaxonomyError::ConflictingParent {
            level,
            label: child.to_string(),
            first: existing.clone(),
            second: parent.to_string(),
        }),
        Some(_) => Ok(()),
        None => {
            map.insert(child.to_string(), parent.to_string());
            Ok(())
        }
    }
}

/// Square boolean relation over batch indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMask {
    size: usize,
    bits: Vec<bool>,
}

impl PairMask {
    /// Same-label relation over a flat label list, diagonal excluded.
    pub fn from_labels<T: PartialEq>(labels: &[T]) -> Self {
        let size = labels.len();
        let mut bits = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                bits[i * size + j] = i != j && labels[i] == labels[j];
            }
        }
        PairMask { size, bits }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    /// Indices `p` with `(i, p)` in the relation, ascending.
    pub fn positives(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.bits[i * self.size..(i + 1) * self.size];
        row.iter()
            .enumerate()
            .filter_map(|(j, &set)| set.then_some(j))
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.size)
            .flat_map(|i| self.positives(i).map(move |p| (i, p)))
            .collect()
    }
}

/// Positive-pair relation at `level`: `(i, p)` is set iff `i != p` and both
/// samples carry the same label at that level.
///
/// Coarse-level positives include fine-level ones, so the relations nest.
pub fn positive_mask(batch: &[LabelTriple], level: Level) -> PairMask {
    let keys: Vec<&str> = batch.iter().map(|t| t.label(level).trim()).collect();
    PairMask::from_labels(&keys)
}

/// Species of the reference dataset in the order they are usually reported.
pub const REPORT_SPECIES_ORDER: [&str; 7] = ["CHF", "TP", "LO", "EEO", "SH", "HY", "GW"];

/// Orders species for reporting: known species in [`REPORT_SPECIES_ORDER`]
/// first, then the rest lexicographically.
pub fn report_order<'a>(species: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
    let mut all: Vec<&str> = species.into_iter().collect();
    all.sort_by_key(|s| {
        let rank = REPORT_SPECIES_ORDER
            .iter()
            .position(|known| known == s)
            .unwrap_or(REPORT_SPECIES_ORDER.len());
        (rank, *s)
    });
    all.dedup();
    all
}
