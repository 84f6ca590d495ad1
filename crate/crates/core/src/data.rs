//! Multimodal token datasets: a seeded synthetic generator and the on-disk
//! format (a JSON manifest plus one raw little-endian `f32` file per sample
//! and modality, row-major `N × D_in`).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModalityConfig;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const SPLIT_STREAM: u64 = 0x5917_c0de_0000_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModality {
    pub name: String,
    pub tokens: usize,
    pub input_dim: usize,
    /// Consecutive tokens per signal window.
    pub window: usize,
    /// Number of signal windows.
    pub redundancy: usize,
    /// Label components carried by this modality.
    pub components: Vec<usize>,
    /// Extra windows carrying the code of one decoy class (drawn per sample
    /// among the wrong classes). Must be fewer than `redundancy`, so the
    /// label is always the majority code.
    #[serde(default)]
    pub distractors: usize,
}

/// How a class code is written into a signal token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalEncoding {
    /// `+amplitude` on the class coordinate.
    #[default]
    Linear,
    /// `±amplitude` with an independent random sign per token, so class
    /// means coincide and decoding needs a per-token nonlinearity.
    Signed,
}

fn default_amplitude() -> f64 {
    1.0
}
fn default_fractions() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub modalities: Vec<SyntheticModality>,
    pub num_classes: usize,
    /// The class code (a one-hot vector in `R^C`) is cut into this many
    /// contiguous coordinate blocks.
    pub num_components: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the Gaussian noise added to every feature.
    pub noise: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub encoding: SignalEncoding,
    /// Train / validation / test fractions.
    #[serde(default = "default_fractions")]
    pub splits: [f64; 3],
}

/// Contiguous near-equal blocks tiling `0..len`.
fn even_blocks(len: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let (base, extra) = (len / parts, len % parts);
    let mut start = 0;
    (0..parts)
        .map(|p| {
            let end = start + base + usize::from(p < extra);
            let r = start..end;
            start = end;
            r
        })
        .collect()
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.modalities.is_empty() {
            return bad("synthetic spec needs at least one modality".into());
        }
        if self.num_classes < 2 || self.samples_per_class == 0 {
            return bad("synthetic spec needs ≥2 classes and ≥1 sample per class".into());
        }
        if self.num_components == 0 || self.num_components > self.num_classes {
            return bad(format!("{} components for {} classes", self.num_components, self.num_classes));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.amplitude.is_finite()) {
            return bad("noise must be finite and non-negative".into());
        }
        let blocks = even_blocks(self.num_classes, self.num_components);
        let mut covered = vec![false; self.num_components];
        let mut names = HashSet::new();
        for m in &self.modalities {
            if !names.insert(m.name.as_str()) || !valid_name(&m.name) {
                return bad(format!("modality name {:?} is duplicated or not a plain identifier", m.name));
            }
            if m.window == 0 || m.window > m.tokens {
                return bad(format!("{}: signal window {} does not fit {} tokens", m.name, m.window, m.tokens));
            }
            if m.redundancy == 0 {
                return bad(format!("{}: redundancy must be at least 1", m.name));
            }
            if m.distractors >= m.redundancy {
                return bad(format!("{}: {} distractor windows would outvote {} signal windows", m.name, m.distractors, m.redundancy));
            }
            let mut width = 0;
            for &c in &m.components {
                if c >= self.num_components {
                    return bad(format!("{}: component {c} out of range", m.name));
                }
                covered[c] = true;
                width += blocks[c].len();
            }
            if width > m.input_dim {
                return bad(format!("{}: {width} signal coordinates exceed {} features", m.name, m.input_dim));
            }
        }
        if let Some(c) = covered.iter().position(|c| !c) {
            return bad(format!("label component {c} is carried by no modality"));
        }
        split_counts(1, &self.splits).map(|_| ())
    }

    /// Coordinates of the class code carried by modality `m`, in feature order.
    pub fn signal_coordinates(&self, m: usize) -> Vec<usize> {
        let blocks = even_blocks(self.num_classes, self.num_components);
        self.modalities[m].components.iter().flat_map(|&c| blocks[c].clone()).collect()
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDescriptor {
    pub name: String,
    pub tokens: usize,
    pub input_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: usize,
    /// Modality name → token file, relative to the dataset root.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub modalities: Vec<ModalityDescriptor>,
    pub num_classes: usize,
    pub samples: Vec<SampleRecord>,
    /// Sample indices per split.
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn model_modalities(&self) -> Vec<ModalityConfig> {
        self.modalities
            .iter()
            .map(|m| ModalityConfig { name: m.name.clone(), input_dim: m.input_dim, tokens: m.tokens })
            .collect()
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |message: String| Err(Error::Dataset { path: path.to_path_buf(), message });
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported manifest version {}", self.version));
        }
        if self.modalities.is_empty() || self.num_classes < 2 {
            return bad("manifest needs at least one modality and two classes".into());
        }
        let names: HashSet<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        if names.len() != self.modalities.len() {
            return bad("duplicate modality name".into());
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return bad(format!("duplicate sample id {}", s.id));
            }
            if s.label >= self.num_classes {
                return bad(format!("sample {}: label {} outside 0..{}", s.id, s.label, self.num_classes));
            }
            if let Some(unknown) = s.files.keys().find(|k| !names.contains(k.as_str())) {
                return bad(format!("sample {}: unknown modality {unknown:?}", s.id));
            }
            if let Some(m) = self.modalities.iter().find(|m| !s.files.contains_key(&m.name)) {
                return bad(format!("sample {}: no file for modality {}", s.id, m.name));
            }
        }
        let mut seen = vec![false; self.samples.len()];
        for &i in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if i >= self.samples.len() {
                return bad(format!("split refers to sample index {i} of {}", self.samples.len()));
            }
            if std::mem::replace(&mut seen[i], true) {
                return bad(format!("sample index {i} appears in more than one split slot"));
            }
        }
        Ok(())
    }
}

/// A manifest with every token matrix held in memory (values are exactly
/// representable as `f32`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// `features[sample][modality]`, `N × D_in`.
    pub features: Vec<Vec<Tensor>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.manifest.samples[i].label
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.samples.iter().map(|s| s.label).collect()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        self.manifest.splits.get(split)
    }

    /// The same samples restricted to the listed modalities.
    pub fn select_modalities(&self, keep: &[usize]) -> Result<Dataset> {
        if keep.is_empty() || keep.iter().any(|&m| m >= self.manifest.modalities.len()) {
            return Err(Error::Config(format!("invalid modality selection {keep:?}")));
        }
        let mut manifest = self.manifest.clone();
        manifest.modalities = keep.iter().map(|&m| self.manifest.modalities[m].clone()).collect();
        let names: HashSet<String> = manifest.modalities.iter().map(|m| m.name.clone()).collect();
        for s in &mut manifest.samples {
            s.files.retain(|k, _| names.contains(k));
        }
        let features = self.features.iter().map(|f| keep.iter().map(|&m| f[m].clone()).collect()).collect();
        Ok(Dataset { manifest, features })
    }
}

fn file_name(id: &str, modality: &str) -> String {
    format!("{id}.{modality}.f32")
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let coords: Vec<Vec<usize>> = (0..spec.modalities.len()).map(|m| spec.signal_coordinates(m)).collect();

    let mut samples = Vec::new();
    let mut features = Vec::new();
    let total = spec.num_classes * spec.samples_per_class;
    let width = total.to_string().len().max(5);
    for i in 0..total {
        let label = i % spec.num_classes;
        let id = format!("s{i:0width$}");
        let mut per_modality = Vec::with_capacity(spec.modalities.len());
        let mut files = BTreeMap::new();
        for (m, ms) in spec.modalities.iter().enumerate() {
            let mut data: Vec<f64> = (0..ms.tokens * ms.input_dim).map(|_| spec.noise * normal.sample(&mut rng)).collect();
            let decoy = (label + rng.random_range(1..spec.num_classes)) % spec.num_classes;
            for w in 0..ms.redundancy + ms.distractors {
                let code = if w < ms.redundancy { label } else { decoy };
                let start = rng.random_range(0..=ms.tokens - ms.window);
                for t in start..start + ms.window {
                    let amp = match spec.encoding {
                        SignalEncoding::Linear => spec.amplitude,
                        SignalEncoding::Signed if rng.random_bool(0.5) => spec.amplitude,
                        SignalEncoding::Signed => -spec.amplitude,
                    };
                    let row = &mut data[t * ms.input_dim..(t + 1) * ms.input_dim];
                    for (f, &c) in coords[m].iter().enumerate() {
                        if c == code {
                            row[f] += amp;
                        }
                    }
                }
            }
            let data = data.into_iter().map(|v| v as f32 as f64).collect();
            per_modality.push(Tensor::matrix(ms.tokens, ms.input_dim, data)?);
            files.insert(ms.name.clone(), file_name(&id, &ms.name));
        }
        samples.push(SampleRecord { id, label, files });
        features.push(per_modality);
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let splits = split_dataset(&labels, spec.splits, seed ^ SPLIT_STREAM)?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        modalities: spec
            .modalities
            .iter()
            .map(|m| ModalityDescriptor { name: m.name.clone(), tokens: m.tokens, input_dim: m.input_dim })
            .collect(),
        num_classes: spec.num_classes,
        samples,
        splits,
    };
    Ok(Dataset { manifest, features })
}

/// Largest-remainder split of `n` items by `fractions`.
fn split_counts(n: usize, fractions: &[f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Seeded, class-stratified train / val / test partition of sample indices.
///
/// Each class is shuffled and its members are spread by within-class
/// quantile, so cutting the merged order at the global counts gives every
/// split each class's share to within one sample.
pub fn split_dataset(labels: &[usize], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let counts = split_counts(labels.len(), &fractions)?;
    for (k, (&c, &f)) in counts.iter().zip(&fractions).enumerate() {
        if f > 0.0 && c == 0 {
            let name = ["train", "val", "test"][k];
            return Err(Error::Config(format!("{name} split is empty for {} samples", labels.len())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut keyed = Vec::with_capacity(labels.len());
    for (&class, members) in by_class.iter_mut() {
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        for (rank, &i) in members.iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / n, class, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();
    let (train, rest) = order.split_at(counts[0]);
    let (val, test) = rest.split_at(counts[1]);
    Ok(Splits { train: train.to_vec(), val: val.to_vec(), test: test.to_vec() })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = &dataset.manifest;
    for (record, feats) in manifest.samples.iter().zip(&dataset.features) {
        for (desc, t) in manifest.modalities.iter().zip(feats) {
            let path = dir.join(&record.files[&desc.name]);
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn read_tokens(path: &Path, desc: &ModalityDescriptor) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = (desc.tokens * desc.input_dim * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch { path: path.to_path_buf(), expected, actual: bytes.len() as u64 });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::matrix(desc.tokens, desc.input_dim, data)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&text)
        .map_err(|e| Error::Dataset { path: path.clone(), message: format!("malformed manifest: {e}") })?;
    manifest.validate(&path)?;
    let mut features = Vec::with_capacity(manifest.samples.len());
    for record in &manifest.samples {
        let mut per = Vec::with_capacity(manifest.modalities.len());
        for desc in &manifest.modalities {
            per.push(read_tokens(&dir.join(&record.files[&desc.name]), desc)?);
        }
        features.push(per);
    }
    Ok(Dataset { manifest, features })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            modalities: vec![
                SyntheticModality { name: "a".into(), tokens: 8, input_dim: 4, window: 2, redundancy: 2, components: vec![0], distractors: 0 },
                SyntheticModality { name: "b".into(), tokens: 6, input_dim: 3, window: 1, redundancy: 1, components: vec![1], distractors: 0 },
            ],
            num_classes: 4,
            num_components: 2,
            samples_per_class: 5,
            noise: 0.1,
            amplitude: 1.0,
            encoding: SignalEncoding::Linear,
            splits: [0.6, 0.2, 0.2],
        }
    }

    #[test]
    fn even_blocks_tile() {
        assert_eq!(even_blocks(6, 3), vec![0..2, 2..4, 4..6]);
        assert_eq!(even_blocks(5, 2), vec![0..3, 3..5]);
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = small_spec();
        let a = generate_synthetic(&spec, 7).unwrap();
        assert_eq!(a, generate_synthetic(&spec, 7).unwrap());
        assert_ne!(a.features, generate_synthetic(&spec, 8).unwrap().features);
        let mut counts = [0; 4];
        for y in a.labels() {
            counts[y] += 1;
        }
        assert_eq!(counts, [5; 4]);
        assert_eq!(a.features[0][0].shape(), &[8, 4]);
        assert_eq!(a.features[0][1].shape(), &[6, 3]);
    }

    #[test]
    fn invalid_specs() {
        let mut s = small_spec();
        s.modalities[0].window = 9;
        assert!(generate_synthetic(&s, 0).is_err());
        let mut s = small_spec();
        s.modalities[1].components = vec![0];
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.modalities[1].redundancy = 0;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.splits = [0.5, 0.2, 0.2];
        assert!(s.validate().is_err());
    }

    #[test]
    fn split_counts_and_stratification() {
        let labels: Vec<usize> = (0..100).map(|i| i % 3).collect();
        let s = split_dataset(&labels, [0.8, 0.2, 0.0], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 20, 0));
        assert_eq!(s, split_dataset(&labels, [0.8, 0.2, 0.0], 1).unwrap());
        for (part, frac) in [(&s.train, 0.8), (&s.val, 0.2)] {
            for c in 0..3 {
                let global = labels.iter().filter(|&&y| y == c).count() as f64;
                let got = part.iter().filter(|&&i| labels[i] == c).count() as f64;
                assert!((got - frac * global).abs() <= 1.0, "class {c}: {got} vs {}", frac * global);
            }
        }
        assert!(split_dataset(&labels[..2], [0.9, 0.1, 0.0], 0).is_err());
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic(&small_spec(), 3).unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);

        let victim = dir.path().join(&d.manifest.samples[2].files["b"]);
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::SizeMismatch { path, expected: 72, actual: 68 } if *path == victim), "{err}");
        fs::write(&victim, &bytes).unwrap();

        let mut manifest = d.manifest.clone();
        let file = manifest.samples[0].files.remove("a").unwrap();
        manifest.samples[0].files.insert("c".into(), file);
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&manifest).unwrap()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("unknown modality"), "{err}");

        fs::write(dir.path().join(MANIFEST_FILE), b"{not json").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
