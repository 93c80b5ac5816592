//! Feature datasets: file loading, synthetic hierarchical mixtures, batching.
//!
//! Records hold already-pooled per-call feature vectors, one label triple and
//! a split tag. Two on-disk encodings are supported:
//!
//! * comma-separated text with header `key,split,taxon,species,individual,f0,...,f{D-1}`;
//! * JSON lines (`.jsonl`) with the same field names, one object per record.
//!   A `features` array is accepted in place of the `f0..` fields.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{keyed_rng, stream, Matrix};
use crate::taxonomy::{LabelTriple, Level, Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("bad header: {0}")]
    Header(String),
    #[error("individual `{individual}` appears in the unseen split and in {split}")]
    SplitLeakage { individual: String, split: Split },
    #[error("unseen species `{species}` has no training records")]
    UnseenSpeciesNotInTrain { species: String },
    #[error("duplicate record key `{0}`")]
    DuplicateKey(String),
    #[error("record `{key}` has dimension {found}, expected {expected}")]
    DimensionMismatch {
        key: String,
        expected: usize,
        found: usize,
    },
    #[error("record `{0}` has a non-finite feature")]
    NonFinite(String),
    #[error("dataset has no records")]
    Empty,
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error("batch size must be at least 2, got {0}")]
    InvalidBatchSize(usize),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unseen,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Unseen];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unseen => "unseen",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unseen" => Ok(Split::Unseen),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub key: String,
    pub features: Vec<f64>,
    pub label: LabelTriple,
    pub split: Split,
}

/// An immutable, validated collection of records sharing one feature width.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<EmbeddingRecord>,
    dim: usize,
    taxonomy: Taxonomy,
}

impl Dataset {
    /// Validates records and derives the taxonomy from their labels.
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self, DataError> {
        let first = records.first().ok_or(DataError::Empty)?;
        let dim = first.features.len();
        let mut keys = BTreeSet::new();
        for rec in &records {
            if !keys.insert(rec.key.as_str()) {
                return Err(DataError::DuplicateKey(rec.key.clone()));
            }
            if rec.features.len() != dim {
                return Err(DataError::DimensionMismatch {
                    key: rec.key.clone(),
                    expected: dim,
                    found: rec.features.len(),
                });
            }
            if rec.features.iter().any(|x| !x.is_finite()) {
                return Err(DataError::NonFinite(rec.key.clone()));
            }
        }

        let taxonomy = Taxonomy::build(records.iter().map(|r| &r.label))?;

        let mut seen_individuals: BTreeMap<&str, Split> = BTreeMap::new();
        let mut train_species = BTreeSet::new();
        for rec in &records {
            if rec.split != Split::Unseen {
                seen_individuals
                    .entry(rec.label.individual.as_str())
                    .or_insert(rec.split);
            }
            if rec.split == Split::Train {
                train_species.insert(rec.label.species.as_str());
            }
        }
        for rec in records.iter().filter(|r| r.split == Split::Unseen) {
            if let Some(&split) = seen_individuals.get(rec.label.individual.as_str()) {
                return Err(DataError::SplitLeakage {
                    individual: rec.label.individual.clone(),
                    split,
                });
            }
            if !train_species.contains(rec.label.species.as_str()) {
                return Err(DataError::UnseenSpeciesNotInTrain {
                    species: rec.label.species.clone(),
                });
            }
        }

        Ok(Dataset {
            records,
            dim,
            taxonomy,
        })
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices belonging to `split`, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| (r.split == split).then_some(i))
            .collect()
    }

    pub fn features(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(&self.records[i].features);
        }
        Matrix::from_vec(indices.len(), self.dim, data)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<LabelTriple> {
        indices.iter().map(|&i| self.records[i].label.clone()).collect()
    }

    /// Distinct labels at `level` within `split`.
    pub fn split_labels(&self, split: Split, level: Level) -> BTreeSet<&str> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.label.label(level))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    JsonLines,
}

impl DataFormat {
    /// `.jsonl` selects JSON lines; everything else is comma-separated.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => DataFormat::JsonLines,
            _ => DataFormat::Csv,
        }
    }
}

const FIXED_COLUMNS: [&str; 5] = ["key", "split", "taxon", "species", "individual"];

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset, DataError> {
    let file = File::open(path)?;
    read_dataset(BufReader::new(file), format)
}

pub fn read_dataset<R: Read>(reader: R, format: DataFormat) -> Result<Dataset, DataError> {
    let records = match format {
        DataFormat::Csv => read_csv(reader)?,
        DataFormat::JsonLines => read_jsonl(BufReader::new(reader))?,
    };
    Dataset::new(records)
}

fn valid_label(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn parse_row(
    row: usize,
    key: &str,
    split: &str,
    taxon: &str,
    species: &str,
    individual: &str,
    features: Vec<f64>,
) -> Result<EmbeddingRecord, DataError> {
    let bad = |message: String| DataError::Parse { row, message };
    let key = key.trim();
    if key.is_empty() {
        return Err(bad("empty key".into()));
    }
    let split = split.parse::<Split>().map_err(bad)?;
    for (name, value) in [("taxon", taxon), ("species", species), ("individual", individual)] {
        if !valid_label(value.trim()) {
            return Err(bad(format!("invalid {name} label `{value}`")));
        }
    }
    let label = LabelTriple::new(individual, species, taxon).map_err(|e| bad(e.to_string()))?;
    if let Some(pos) = features.iter().position(|x| !x.is_finite()) {
        return Err(bad(format!("non-finite feature f{pos}")));
    }
    Ok(EmbeddingRecord {
        key: key.to_string(),
        features,
        label,
        split,
    })
}

fn read_csv<R: Read>(reader: R) -> Result<Vec<EmbeddingRecord>, DataError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = csv
        .headers()
        .map_err(|e| DataError::Header(e.to_string()))?
        .clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names.len() < FIXED_COLUMNS.len() || names[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(DataError::Header(format!(
            "expected leading columns {}",
            FIXED_COLUMNS.join(",")
        )));
    }
    let dim = names.len() - FIXED_COLUMNS.len();
    for (j, name) in names[FIXED_COLUMNS.len()..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(DataError::Header(format!("expected column f{j}, found `{name}`")));
        }
    }
    if dim == 0 {
        return Err(DataError::Header("no feature columns".into()));
    }

    let mut records = Vec::new();
    for (idx, result) in csv.records().enumerate() {
        let row = idx + 1;
        let fields = result.map_err(|e| DataError::Parse {
            row,
            message: e.to_string(),
        })?;
        if fields.len() != names.len() {
            return Err(DataError::Parse {
                row,
                message: format!(
                    "expected {dim} features, found {}",
                    fields.len().saturating_sub(FIXED_COLUMNS.len())
                ),
            });
        }
        let features = fields
            .iter()
            .skip(FIXED_COLUMNS.len())
            .enumerate()
            .map(|(j, v)| {
                v.trim().parse::<f64>().map_err(|_| DataError::Parse {
                    row,
                    message: format!("f{j} is not a number: `{v}`"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        records.push(parse_row(
            row, &fields[0], &fields[1], &fields[2], &fields[3], &fields[4], features,
        )?);
    }
    Ok(records)
}

fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<EmbeddingRecord>, DataError> {
    let mut records = Vec::new();
    let mut dim: Option<usize> = None;
    let mut row = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        let bad = |message: String| DataError::Parse { row, message };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| bad("expected a JSON object".into()))?;
        let text = |name: &str| -> Result<&str, DataError> {
            obj.get(name)
                .and_then(|v| v.as_str())
                .ok_or_else(|| bad(format!("missing string field `{name}`")))
        };
        let features = if let Some(array) = obj.get("features") {
            array
                .as_array()
                .ok_or_else(|| bad("`features` must be an array".into()))?
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| bad("non-numeric feature".into())))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            let mut values = Vec::new();
            while let Some(v) = obj.get(&format!("f{}", values.len())) {
                values.push(
                    v.as_f64()
                        .ok_or_else(|| bad(format!("f{} is not a number", values.len())))?,
                );
            }
            values
        };
        let expected = *dim.get_or_insert(features.len());
        if features.len() != expected || expected == 0 {
            return Err(bad(format!(
                "expected {expected} features, found {}",
                features.len()
            )));
        }
        records.push(parse_row(
            row,
            text("key")?,
            text("split")?,
            text("taxon")?,
            text("species")?,
            text("individual")?,
            features,
        )?);
    }
    Ok(records)
}

/// Writes a dataset in the given encoding. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_dataset<W: Write>(ds: &Dataset, mut out: W, format: DataFormat) -> Result<(), DataError> {
    match format {
        DataFormat::Csv => {
            let mut header = FIXED_COLUMNS.join(",");
            for j in 0..ds.dim() {
                header.push_str(&format!(",f{j}"));
            }
            writeln!(out, "{header}")?;
            for rec in ds.records() {
                let mut line = format!(
                    "{},{},{},{},{}",
                    rec.key, rec.split, rec.label.taxon, rec.label.species, rec.label.individual
                );
                for x in &rec.features {
                    line.push(',');
                    line.push_str(&x.to_string());
                }
                writeln!(out, "{line}")?;
            }
        }
        DataFormat::JsonLines => {
            for rec in ds.records() {
                let mut line = format!(
                    "{{\"key\":{},\"split\":\"{}\",\"taxon\":{},\"species\":{},\"individual\":{}",
                    serde_json::to_string(&rec.key).expect("string serializes"),
                    rec.split,
                    serde_json::to_string(&rec.label.taxon).expect("string serializes"),
                    serde_json::to_string(&rec.label.species).expect("string serializes"),
                    serde_json::to_string(&rec.label.individual).expect("string serializes"),
                );
                for (j, x) in rec.features.iter().enumerate() {
                    line.push_str(&format!(",\"f{j}\":{}", serde_json::Number::from_f64(*x).expect("finite")));
                }
                line.push('}');
                writeln!(out, "{line}")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = File::create(path)?;
    write_dataset(ds, std::io::BufWriter::new(file), DataFormat::from_path(path))
}

/// Parameters of the hierarchical Gaussian mixture used in place of real recordings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_taxa: usize,
    pub species_per_taxon: usize,
    pub ids_per_species: usize,
    pub samples_per_id: usize,
    pub unseen_ids_per_species: usize,
    pub dim: usize,
    pub spread_taxon: f64,
    pub spread_species: f64,
    pub spread_id: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// The frozen well-separated fixture: 2 taxa × 2 species × 4 IDs × 50
    /// samples in 32 dimensions, with one unseen ID per species.
    pub fn separable_fixture() -> Self {
        SynthConfig {
            n_taxa: 2,
            species_per_taxon: 2,
            ids_per_species: 4,
            samples_per_id: 50,
            unseen_ids_per_species: 1,
            dim: 32,
            spread_taxon: 10.0,
            spread_species: 3.0,
            spread_id: 1.0,
            noise: 0.6,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let counts = [
            ("n_taxa", self.n_taxa),
            ("species_per_taxon", self.species_per_taxon),
            ("ids_per_species", self.ids_per_species),
            ("samples_per_id", self.samples_per_id),
            ("unseen_ids_per_species", self.unseen_ids_per_species),
            ("dim", self.dim),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(DataError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        let spreads = [
            ("spread_taxon", self.spread_taxon),
            ("spread_species", self.spread_species),
            ("spread_id", self.spread_id),
            ("noise", self.noise),
        ];
        for (name, value) in spreads {
            if !(value.is_finite() && value >= 0.0) {
                return Err(DataError::InvalidConfig(format!(
                    "{name} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }

    /// Per-ID sample counts for (train, val, test): 80/10/10, rounded.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.samples_per_id;
        let train = ((n as f64) * 0.8).round() as usize;
        let val = ((n as f64) * 0.1).round() as usize;
        let test = n.saturating_sub(train + val);
        (train.min(n), val.min(n - train.min(n)), test)
    }
}

fn gaussian_around<R: Rng>(center: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    center
        .iter()
        .map(|c| {
            let z: f64 = rng.sample(StandardNormal);
            c + sigma * z
        })
        .collect()
}

/// Generates a hierarchical Gaussian mixture.
///
/// Centers are drawn taxon by taxon, species by species, then per ID; each ID
/// draws its samples immediately after its center. Known IDs come before the
/// unseen IDs of the same species. Everything is a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut rng = keyed_rng(cfg.seed, stream::SYNTH, 0);
    let origin = vec![0.0; cfg.dim];
    let (n_train, n_val, _) = cfg.split_counts();
    let mut records = Vec::new();

    for t in 0..cfg.n_taxa {
        let taxon = format!("T{t}");
        let taxon_center = gaussian_around(&origin, cfg.spread_taxon, &mut rng);
        for s in 0..cfg.species_per_taxon {
            let species = format!("T{t}-S{s}");
            let species_center = gaussian_around(&taxon_center, cfg.spread_species, &mut rng);
            let known = (0..cfg.ids_per_species).map(|i| (format!("{species}-I{i}"), false));
            let unseen = (0..cfg.unseen_ids_per_species).map(|i| (format!("{species}-U{i}"), true));
            for (individual, is_unseen) in known.chain(unseen) {
                let id_center = gaussian_around(&species_center, cfg.spread_id, &mut rng);
                let label = LabelTriple::new(&individual, &species, &taxon)?;
                for n in 0..cfg.samples_per_id {
                    let split = if is_unseen {
                        Split::Unseen
                    } else if n < n_train {
                        Split::Train
                    } else if n < n_train + n_val {
                        Split::Val
                    } else {
                        Split::Test
                    };
                    records.push(EmbeddingRecord {
                        key: format!("{individual}-{n:04}"),
                        features: gaussian_around(&id_center, cfg.noise, &mut rng),
                        label: label.clone(),
                        split,
                    });
                }
            }
        }
    }
    Dataset::new(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Matrix,
    pub labels: Vec<LabelTriple>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Shuffles `split` with a PRNG keyed by `(seed, epoch)` and chunks it.
/// A trailing chunk of a single record is dropped.
pub fn make_batches(
    ds: &Dataset,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>, DataError> {
    if batch_size < 2 {
        return Err(DataError::InvalidBatchSize(batch_size));
    }
    let mut order = ds.split_indices(split);
    if order.is_empty() {
        return Err(DataError::EmptySplit(split));
    }
    let mut rng = keyed_rng(seed, stream::BATCHES, epoch);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .filter(|chunk| chunk.len() >= 2)
        .map(|chunk| Batch {
            indices: chunk.to_vec(),
            features: ds.features(chunk),
            labels: ds.labels(chunk),
        })
        .collect())
}

/// Adds isotropic Gaussian noise with standard deviation `sigma`.
pub fn augment<R: Rng>(features: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return features.to_vec();
    }
    gaussian_around(features, sigma, rng)
}
