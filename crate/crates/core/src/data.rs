//! Feature stores, the dataset manifest, and the synthetic generator.
//!
//! A feature store is a binary table of `f32` rows addressed by string id:
//!
//! ```text
//! "MMQF"  u32 version (1)  u32 dim  u64 count  count × dim × f32   (little-endian)
//! ```
//!
//! The ids live next to it in `<path>.ids.json` as a JSON array, in row order.
//! Rows are widened to `f64` when looked up.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, FeatureDims, FeatureLookup, Modality, QuestionGraph, QuestionInstance, SourceRecord, Topology};
use crate::metrics::{canonical_category, OTHER_CATEGORY};
use crate::tensor::Rng;

pub const STORE_MAGIC: &[u8; 4] = b"MMQF";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn from_parts(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::Consistency(format!(
                "{} ids × dim {dim} needs {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Consistency(format!("duplicate feature id `{dup}`")));
        }
        Ok(FeatureStore { dim, ids, data })
    }

    /// Appends a row, rounding to `f32`.
    pub fn push(&mut self, id: impl Into<String>, row: &[f64]) -> Result<()> {
        let id = id.into();
        if row.len() != self.dim {
            return Err(Error::Dimension {
                id,
                expected: self.dim,
                found: row.len(),
            });
        }
        self.ids.push(id);
        self.data.extend(row.iter().map(|&v| v as f32));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary payload; `ids` come from the sidecar.
    pub fn from_bytes(bytes: &[u8], ids: Vec<String>) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != STORE_MAGIC {
            return Err(Error::Format("not a feature store (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported feature store version {version}")));
        }
        let dim = u32_at(8) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload = &bytes[HEADER_LEN..];
        if Some(payload.len()) != count.checked_mul(dim).and_then(|n| n.checked_mul(4)) {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header declares {count} rows of dim {dim}",
                payload.len()
            )));
        }
        if ids.len() != count {
            return Err(Error::Consistency(format!("id sidecar lists {} ids, store holds {count} rows", ids.len())));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::from_parts(dim, ids, data)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.json");
    PathBuf::from(s)
}

pub fn write_store(path: impl AsRef<Path>, store: &FeatureStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, store.to_bytes())?;
    fs::write(sidecar_path(path), serde_json::to_vec(&store.ids)?)?;
    Ok(())
}

pub fn read_store(path: impl AsRef<Path>) -> Result<FeatureStore> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let sidecar = sidecar_path(path);
    let ids: Vec<String> = serde_json::from_slice(&fs::read(&sidecar)?)
        .map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?;
    FeatureStore::from_bytes(&bytes, ids)
}

/// Id resolution across several stores.
#[derive(Clone, Debug, Default)]
pub struct FeatureCatalog {
    stores: Vec<FeatureStore>,
    index: HashMap<String, (usize, usize)>,
}

impl FeatureCatalog {
    pub fn new(stores: Vec<FeatureStore>) -> Result<Self> {
        let mut index = HashMap::new();
        for (s, store) in stores.iter().enumerate() {
            for (r, id) in store.ids.iter().enumerate() {
                if index.insert(id.clone(), (s, r)).is_some() {
                    return Err(Error::Consistency(format!("feature id `{id}` appears in more than one store")));
                }
            }
        }
        Ok(FeatureCatalog { stores, index })
    }

    pub fn open(paths: &[impl AsRef<Path>]) -> Result<Self> {
        Self::new(paths.iter().map(read_store).collect::<Result<_>>()?)
    }

    pub fn dim_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).map(|&(s, _)| self.stores[s].dim)
    }

    pub fn stores(&self) -> &[FeatureStore] {
        &self.stores
    }
}

impl FeatureLookup for FeatureCatalog {
    fn lookup(&self, id: &str) -> Result<Vec<f64>> {
        let &(s, r) = self.index.get(id).ok_or_else(|| Error::Lookup(id.to_string()))?;
        Ok(self.stores[s].row(r).iter().map(|&v| f64::from(v)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (expected train, dev or test)")))
    }
}

/// Optional first manifest line: `{"meta": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub text_dim: usize,
    pub image_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
}

impl ManifestMeta {
    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            text: self.text_dim,
            image: self.image_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceLine {
    sid: String,
    modality: Modality,
    label: u8,
    feature_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_text: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    qid: String,
    category: String,
    split: Split,
    question_feature_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question_text: Option<String>,
    sources: Vec<SourceLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    meta: ManifestMeta,
}

impl ManifestLine {
    fn from_entry(split: Split, inst: &QuestionInstance) -> Self {
        ManifestLine {
            qid: inst.question_id.clone(),
            category: inst.category.clone(),
            split,
            question_feature_id: inst.question_feature_id.clone(),
            question_text: inst.question_text.clone(),
            sources: inst
                .sources
                .iter()
                .map(|s| SourceLine {
                    sid: s.source_id.clone(),
                    modality: s.modality,
                    label: s.label,
                    feature_ids: s.feature_ids.clone(),
                    raw_text: s.raw_text.clone(),
                })
                .collect(),
        }
    }

    fn into_entry(self) -> (Split, QuestionInstance) {
        let inst = QuestionInstance {
            question_id: self.qid,
            category: self.category,
            question_feature_id: self.question_feature_id,
            question_text: self.question_text,
            sources: self
                .sources
                .into_iter()
                .map(|s| SourceRecord {
                    source_id: s.sid,
                    modality: s.modality,
                    label: s.label,
                    feature_ids: s.feature_ids,
                    raw_text: s.raw_text,
                })
                .collect(),
        };
        (self.split, inst)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub meta: Option<ManifestMeta>,
    pub entries: Vec<(Split, QuestionInstance)>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        if let Some(meta) = &self.meta {
            out.push_str(&serde_json::to_string(&MetaLine { meta: meta.clone() })?);
            out.push('\n');
        }
        for (split, inst) in &self.entries {
            out.push_str(&serde_json::to_string(&ManifestLine::from_entry(*split, inst))?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses JSON Lines; blank lines are skipped, errors carry 1-based line numbers.
    pub fn parse(reader: impl BufRead) -> Result<Self> {
        let mut manifest = Manifest::default();
        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Manifest { line: line_no, message };
            if manifest.meta.is_none() && manifest.entries.is_empty() && line.trim_start().starts_with("{\"meta\"") {
                let meta: MetaLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
                manifest.meta = Some(meta.meta);
                continue;
            }
            let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            let (split, inst) = parsed.into_entry();
            inst.validate().map_err(|e| err(e.to_string()))?;
            manifest.entries.push((split, inst));
        }
        Ok(manifest)
    }
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(manifest.to_jsonl()?.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    Manifest::parse(BufReader::new(fs::File::open(path)?))
}

/// Instances by split with every feature id resolved.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dims: FeatureDims,
    pub catalog: FeatureCatalog,
    pub train: Vec<QuestionInstance>,
    pub dev: Vec<QuestionInstance>,
    pub test: Vec<QuestionInstance>,
}

impl Dataset {
    /// Checks every id against the catalog and widths against `dims`.
    pub fn new(manifest: Manifest, catalog: FeatureCatalog, dims: FeatureDims) -> Result<Self> {
        let mut ds = Dataset {
            dims,
            catalog,
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        };
        let line_offset = usize::from(manifest.meta.is_some());
        for (i, (split, inst)) in manifest.entries.into_iter().enumerate() {
            let err = |message: String| Error::Manifest {
                line: i + 1 + line_offset,
                message,
            };
            if canonical_category(&inst.category) == OTHER_CATEGORY {
                log::warn!(
                    "question `{}` has category `{}` outside the taxonomy",
                    inst.question_id,
                    inst.category
                );
            }
            ds.check_dim(&inst.question_feature_id, dims.text).map_err(err)?;
            for s in &inst.sources {
                let expected: &[usize] = match s.modality {
                    Modality::Image => &[dims.image, dims.text],
                    Modality::Text => &[dims.text],
                };
                for (id, &d) in s.feature_ids.iter().zip(expected) {
                    ds.check_dim(id, d).map_err(err)?;
                }
            }
            ds.split_mut(split).push(inst);
        }
        Ok(ds)
    }

    fn check_dim(&self, id: &str, expected: usize) -> std::result::Result<(), String> {
        match self.catalog.dim_of(id) {
            None => Err(format!("feature id `{id}` is not in any store")),
            Some(d) if d != expected => Err(format!("feature `{id}` has dim {d}, expected {expected}")),
            Some(_) => Ok(()),
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<QuestionInstance> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn split(&self, split: Split) -> &[QuestionInstance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn graphs(&self, split: Split, topology: Topology) -> Result<Vec<QuestionGraph>> {
        self.split(split)
            .iter()
            .map(|inst| build_graph(topology, inst, &self.catalog, self.dims))
            .collect()
    }
}

/// Reads a manifest and its stores. Dims come from the manifest's meta line,
/// falling back to 768 / 2048.
pub fn load_dataset(manifest_path: impl AsRef<Path>, store_paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let dims = manifest.meta.as_ref().map(ManifestMeta::dims).unwrap_or_default();
    Dataset::new(manifest, FeatureCatalog::open(store_paths)?, dims)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub sources_per_question: usize,
    pub positives_per_question: usize,
    /// Expected norm of the noise added to each unit-norm signal vector.
    pub noise_scale: f64,
    pub seed: u64,
    pub text_dim: usize,
    pub image_dim: usize,
    /// Signal directions are drawn in a subspace of this dimension; 0 or
    /// values ≥ `text_dim` use the full text space.
    pub latent_dim: usize,
    /// Negative directions are redrawn until their cosine with the question
    /// direction is at most this, which keeps the task separable; 1 disables.
    pub max_negative_cosine: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_train: 200,
            n_dev: 50,
            n_test: 50,
            sources_per_question: 10,
            positives_per_question: 2,
            noise_scale: 0.1,
            seed: 0,
            text_dim: 768,
            image_dim: 2048,
            latent_dim: 4,
            max_negative_cosine: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn n_questions(&self) -> usize {
        self.n_train + self.n_dev + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources_per_question == 0 {
            return Err(Error::Config("sources_per_question must be at least 1".into()));
        }
        if self.positives_per_question > self.sources_per_question {
            return Err(Error::Config(format!(
                "{} positives do not fit in {} sources",
                self.positives_per_question, self.sources_per_question
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise_scale must be non-negative, got {}", self.noise_scale)));
        }
        if !(self.max_negative_cosine > -1.0 && self.max_negative_cosine <= 1.0) {
            return Err(Error::Config(format!(
                "max_negative_cosine must lie in (-1, 1], got {}",
                self.max_negative_cosine
            )));
        }
        if self.text_dim == 0 || self.image_dim == 0 {
            return Err(Error::Config("feature dims must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            text: self.text_dim,
            image: self.image_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub manifest: Manifest,
    pub text: FeatureStore,
    pub image: FeatureStore,
}

impl SyntheticData {
    pub fn dataset(&self) -> Result<Dataset> {
        let dims = self.manifest.meta.as_ref().map(ManifestMeta::dims).unwrap_or_default();
        let catalog = FeatureCatalog::new(vec![self.text.clone(), self.image.clone()])?;
        Dataset::new(self.manifest.clone(), catalog, dims)
    }

    /// Writes `manifest.jsonl`, `text.mmqf` and `image.mmqf` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SyntheticPaths> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let paths = SyntheticPaths {
            manifest: dir.join("manifest.jsonl"),
            stores: vec![dir.join("text.mmqf"), dir.join("image.mmqf")],
        };
        write_manifest(&paths.manifest, &self.manifest)?;
        write_store(&paths.stores[0], &self.text)?;
        write_store(&paths.stores[1], &self.image)?;
        Ok(paths)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPaths {
    pub manifest: PathBuf,
    pub stores: Vec<PathBuf>,
}

const MAX_REDRAWS: usize = 10_000;

const VISUAL_CATEGORIES: [&str; 6] = ["YesNo", "Number", "Color", "Choose", "Others", "Shape"];

const WORDS: [&str; 48] = [
    "red", "blue", "green", "round", "square", "tall", "small", "river", "bridge", "tower", "church", "garden", "statue",
    "roof", "window", "door", "car", "train", "boat", "horse", "bird", "tree", "flower", "mountain", "lake", "street",
    "museum", "market", "painting", "flag", "clock", "wall", "stone", "wooden", "glass", "ancient", "modern", "city",
    "village", "island", "coast", "forest", "desert", "castle", "palace", "temple", "harbor", "field",
];

fn words(rng: &mut Rng, n: usize) -> Vec<&'static str> {
    (0..n).map(|_| WORDS[rng.below(WORDS.len())]).collect()
}

/// Gaussian vector with expected norm `scale`.
fn noise(rng: &mut Rng, dim: usize, scale: f64) -> Vec<f64> {
    let sd = scale / (dim as f64).sqrt();
    (0..dim).map(|_| sd * rng.normal()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `rows × cols` row-major matrix with orthonormal columns (Gram–Schmidt on
/// Gaussian draws).
fn orthonormal_columns(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = rng.normal_vec(rows);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    (0..rows).flat_map(|r| basis.iter().map(move |b| b[r]).collect::<Vec<_>>()).collect()
}

/// A separable retrieval task. Positives carry the question direction
/// (text and caption as `q + noise`, image as `P q + noise` for a fixed
/// random projection `P`); negatives use an independent random direction
/// through the same pipeline, kept at most `max_negative_cosine` from the
/// question. Directions are unit vectors of a `latent_dim`-dimensional
/// subspace of the text space.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut proj_rng = root.fork(0);
    let psd = 1.0 / (spec.image_dim as f64).sqrt();
    let projection: Vec<f64> = (0..spec.image_dim * spec.text_dim).map(|_| psd * proj_rng.normal()).collect();
    let project = |u: &[f64]| -> Vec<f64> {
        projection.chunks_exact(spec.text_dim).map(|row| row.iter().zip(u).map(|(p, x)| p * x).sum()).collect()
    };

    let latent = if spec.latent_dim == 0 || spec.latent_dim >= spec.text_dim {
        None
    } else {
        Some(orthonormal_columns(&mut root.fork(u64::MAX), spec.text_dim, spec.latent_dim))
    };
    let direction = |rng: &mut Rng| -> Vec<f64> {
        match &latent {
            None => rng.unit_vector(spec.text_dim),
            Some(basis) => {
                let z = rng.unit_vector(spec.latent_dim);
                basis.chunks_exact(spec.latent_dim).map(|row| row.iter().zip(&z).map(|(b, x)| b * x).sum()).collect()
            }
        }
    };

    let negative_direction = |rng: &mut Rng, q: &[f64]| -> Result<Vec<f64>> {
        for _ in 0..MAX_REDRAWS {
            let d = direction(rng);
            if d.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() <= spec.max_negative_cosine {
                return Ok(d);
            }
        }
        Err(Error::Config(format!(
            "no negative direction within cosine {} of the question after {MAX_REDRAWS} draws",
            spec.max_negative_cosine
        )))
    };

    let mut text = FeatureStore::new(spec.text_dim);
    let mut image = FeatureStore::new(spec.image_dim);
    let mut entries = Vec::with_capacity(spec.n_questions());
    let splits = std::iter::repeat_n(Split::Train, spec.n_train)
        .chain(std::iter::repeat_n(Split::Dev, spec.n_dev))
        .chain(std::iter::repeat_n(Split::Test, spec.n_test));
    for (qi, split) in splits.enumerate() {
        let mut rng = root.fork(qi as u64 + 1);
        let qid = format!("q{qi:05}");
        let q = direction(&mut rng);
        let q_modality = if rng.bernoulli(0.5) { Modality::Image } else { Modality::Text };
        let category = match q_modality {
            Modality::Image => VISUAL_CATEGORIES[rng.below(VISUAL_CATEGORIES.len())],
            Modality::Text => "text",
        };
        let q_words = words(&mut rng, 6);
        let question_feature_id = format!("{qid}.question");
        text.push(&question_feature_id, &q)?;

        let mut is_positive = vec![false; spec.sources_per_question];
        let mut slots: Vec<usize> = (0..spec.sources_per_question).collect();
        rng.shuffle(&mut slots);
        for &s in &slots[..spec.positives_per_question] {
            is_positive[s] = true;
        }

        let mut sources = Vec::with_capacity(spec.sources_per_question);
        for (si, &positive) in is_positive.iter().enumerate() {
            let sid = format!("{qid}.s{si:02}");
            let (base, modality, mut raw) = if positive {
                let mut w = q_words[..3].to_vec();
                w.extend(words(&mut rng, 3));
                (q.clone(), q_modality, w)
            } else {
                let m = if rng.bernoulli(0.5) { Modality::Image } else { Modality::Text };
                (negative_direction(&mut rng, &q)?, m, words(&mut rng, 6))
            };
            rng.shuffle(&mut raw);
            let feature_ids = match modality {
                Modality::Image => {
                    let img_id = format!("{sid}.image");
                    let cap_id = format!("{sid}.caption");
                    image.push(&img_id, &add(&project(&base), &noise(&mut rng, spec.image_dim, spec.noise_scale)))?;
                    text.push(&cap_id, &add(&base, &noise(&mut rng, spec.text_dim, spec.noise_scale)))?;
                    vec![img_id, cap_id]
                }
                Modality::Text => {
                    let id = format!("{sid}.snippet");
                    text.push(&id, &add(&base, &noise(&mut rng, spec.text_dim, spec.noise_scale)))?;
                    vec![id]
                }
            };
            sources.push(SourceRecord {
                source_id: sid,
                modality,
                label: u8::from(positive),
                feature_ids,
                raw_text: Some(raw.join(" ")),
            });
        }
        entries.push((
            split,
            QuestionInstance {
                question_id: qid,
                category: category.to_string(),
                question_feature_id,
                question_text: Some(q_words.join(" ")),
                sources,
            },
        ));
    }
    Ok(SyntheticData {
        manifest: Manifest {
            meta: Some(ManifestMeta {
                text_dim: spec.text_dim,
                image_dim: spec.image_dim,
                generator: Some(format!(
                    "synthetic seed={} noise_scale={} latent_dim={} max_negative_cosine={}",
                    spec.seed, spec.noise_scale, spec.latent_dim, spec.max_negative_cosine
                )),
            }),
            entries,
        },
        text,
        image,
    })
}

/// JSON Schema (draft 2020-12) for one manifest record.
pub fn manifest_schema() -> serde_json::Value {
    serde_json::json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "manifest record",
        "description": "One JSON object per line. An optional first line {\"meta\": {\"text_dim\", \"image_dim\"}} declares feature widths (default 768 and 2048).",
        "type": "object",
        "additionalProperties": false,
        "required": ["qid", "category", "split", "question_feature_id", "sources"],
        "properties": {
            "qid": {"type": "string"},
            "category": {
                "type": "string",
                "description": "YesNo, Number, Color, Choose, Others, Shape or text; other values are reported under \"other\""
            },
            "split": {"enum": ["train", "dev", "test"]},
            "question_feature_id": {"type": "string", "description": "id of the question embedding in a text store"},
            "question_text": {"type": "string", "description": "optional, used only by the lexical baseline"},
            "sources": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "additionalProperties": false,
                    "required": ["sid", "modality", "label", "feature_ids"],
                    "properties": {
                        "sid": {"type": "string", "description": "unique within the question"},
                        "modality": {"enum": ["image", "text"]},
                        "label": {"enum": [0, 1]},
                        "feature_ids": {
                            "type": "array",
                            "items": {"type": "string"},
                            "description": "image: [image embedding, caption embedding]; text: [snippet embedding]"
                        },
                        "raw_text": {"type": "string", "description": "optional, used only by the lexical baseline"}
                    }
                }
            }
        }
    })
}
