//! Feature sets, the known/unknown split protocol, synthetic benchmarks and
//! the binary feature-file format.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RpimError};
use crate::model::ByteCursor;
use crate::numerics::{l2_norm, DenseMatrix, Rng};

/// Frozen feature vectors with their ground-truth classes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
}

impl FeatureSet {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let fs = Self {
            features,
            labels,
            num_classes,
            class_names: None,
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.features.rows() {
            return Err(RpimError::shape("labels", self.features.rows(), self.labels.len()));
        }
        if self.is_empty() {
            return Err(RpimError::InvalidInput("feature set is empty".into()));
        }
        if self.num_classes < 2 {
            return Err(RpimError::InvalidInput(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if let Some(row) = self.features.first_non_finite_row() {
            return Err(RpimError::NonFinite {
                context: "features".into(),
                row,
            });
        }
        let counts = self.class_counts()?;
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(RpimError::InvalidInput(format!("class {c} has no samples")));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(RpimError::shape("class_names", self.num_classes, names.len()));
            }
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= self.num_classes {
                return Err(RpimError::InvalidInput(format!(
                    "sample {i} has label {l} >= K = {}",
                    self.num_classes
                )));
            }
            counts[l] += 1;
        }
        Ok(counts)
    }

    /// Sample indices of each class, ascending.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// One-hot matrix of the labels at `indices`.
    pub fn one_hot(&self, indices: &[usize]) -> DenseMatrix {
        let mut y = DenseMatrix::zeros(indices.len(), self.num_classes);
        for (r, &i) in indices.iter().enumerate() {
            y[(r, self.labels[i])] = 1.0;
        }
        y
    }
}

/// Labeled/unlabeled partition of a feature set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcdSplit {
    /// Sorted class ids that have labeled samples.
    pub known_classes: Vec<usize>,
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
}

impl GcdSplit {
    pub fn is_known(&self, class: usize) -> bool {
        self.known_classes.binary_search(&class).is_ok()
    }

    /// Checks the split invariants over the indices it mentions.
    pub fn validate_subset(&self, fs: &FeatureSet) -> Result<()> {
        let mut seen = vec![false; fs.len()];
        for &i in self.labeled_indices.iter().chain(&self.unlabeled_indices) {
            if i >= fs.len() {
                return Err(RpimError::InvalidInput(format!("split index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(RpimError::InvalidInput(format!("sample {i} is both labeled and unlabeled")));
            }
        }
        if !self.known_classes.windows(2).all(|w| w[0] < w[1]) {
            return Err(RpimError::InvalidInput("known classes must be sorted and distinct".into()));
        }
        for &i in &self.labeled_indices {
            if !self.is_known(fs.labels[i]) {
                return Err(RpimError::InvalidInput(format!(
                    "labeled sample {i} belongs to class {} which is not known",
                    fs.labels[i]
                )));
            }
        }
        if self.labeled_indices.is_empty() {
            return Err(RpimError::InvalidInput("split has no labeled samples".into()));
        }
        if self.unlabeled_indices.is_empty() {
            return Err(RpimError::InvalidInput("split has no unlabeled samples".into()));
        }
        Ok(())
    }

    /// Checks the invariants and that the split covers every sample.
    pub fn validate(&self, fs: &FeatureSet) -> Result<()> {
        self.validate_subset(fs)?;
        let covered = self.labeled_indices.len() + self.unlabeled_indices.len();
        if covered != fs.len() {
            return Err(RpimError::InvalidInput(format!(
                "split covers {covered} of {} samples",
                fs.len()
            )));
        }
        Ok(())
    }
}

fn floor_frac(fraction: f64, n: usize) -> usize {
    // guards against 0.29 * 100 = 28.999999999999996
    (fraction * n as f64 + 1e-9).floor() as usize
}

fn ceil_frac(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Builds the standard split: `⌈known_fraction·K⌉` known classes picked by a
/// seeded shuffle; within each known class `⌊labeled_ratio·n_c⌋` samples are
/// labeled. Everything else is unlabeled.
pub fn make_gcd_split(fs: &FeatureSet, known_fraction: f64, labeled_ratio: f64, rng: &mut Rng) -> Result<GcdSplit> {
    fs.validate()?;
    if !(0.0..=1.0).contains(&known_fraction) || !(0.0..=1.0).contains(&labeled_ratio) {
        return Err(RpimError::InvalidInput(format!(
            "known_fraction and labeled_ratio must lie in [0, 1] (got {known_fraction}, {labeled_ratio})"
        )));
    }
    let k = fs.num_classes;
    let n_known = ceil_frac(known_fraction, k);
    if n_known < 2 || n_known >= k {
        return Err(RpimError::InvalidInput(format!(
            "split needs at least 2 known and 1 unknown class, got {n_known} known of {k}"
        )));
    }
    let mut classes: Vec<usize> = (0..k).collect();
    rng.shuffle(&mut classes);
    let mut known_classes = classes[..n_known].to_vec();
    known_classes.sort_unstable();

    let by_class = fs.indices_by_class();
    let mut labeled = Vec::new();
    for &c in &known_classes {
        let mut members = by_class[c].clone();
        rng.shuffle(&mut members);
        labeled.extend_from_slice(&members[..floor_frac(labeled_ratio, members.len())]);
    }
    if labeled.is_empty() {
        return Err(RpimError::InvalidInput("split produced no labeled samples".into()));
    }
    labeled.sort_unstable();
    let is_labeled: BTreeSet<usize> = labeled.iter().copied().collect();
    let unlabeled = (0..fs.len()).filter(|i| !is_labeled.contains(i)).collect();
    let split = GcdSplit {
        known_classes,
        labeled_indices: labeled,
        unlabeled_indices: unlabeled,
    };
    split.validate(fs)?;
    Ok(split)
}

/// Hyper-parameter search split built from the labeled samples only: half of
/// the known classes become pseudo-unknown (all their samples unlabeled), and
/// a quarter of each remaining class is moved to the unlabeled side.
pub fn make_search_split(fs: &FeatureSet, split: &GcdSplit, rng: &mut Rng) -> Result<GcdSplit> {
    split.validate_subset(fs)?;
    let n_known = split.known_classes.len();
    if n_known < 4 {
        return Err(RpimError::InvalidInput(format!(
            "search split needs at least 4 known classes, got {n_known}"
        )));
    }
    let mut order = split.known_classes.clone();
    rng.shuffle(&mut order);
    let pseudo_unknown: BTreeSet<usize> = order[..n_known / 2].iter().copied().collect();
    let mut known_classes: Vec<usize> = order[n_known / 2..].to_vec();
    known_classes.sort_unstable();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); fs.num_classes];
    for &i in &split.labeled_indices {
        members[fs.labels[i]].push(i);
    }
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for &c in &split.known_classes {
        if pseudo_unknown.contains(&c) {
            unlabeled.extend_from_slice(&members[c]);
        } else {
            let mut m = members[c].clone();
            rng.shuffle(&mut m);
            let held_out = floor_frac(0.25, m.len());
            unlabeled.extend_from_slice(&m[..held_out]);
            labeled.extend_from_slice(&m[held_out..]);
        }
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    let sub = GcdSplit {
        known_classes,
        labeled_indices: labeled,
        unlabeled_indices: unlabeled,
    };
    sub.validate_subset(fs)?;
    Ok(sub)
}

/// Extracts the samples a (sub-)split mentions into a standalone feature set
/// with classes renumbered densely in ascending order of their old ids.
pub fn restrict_to_split(fs: &FeatureSet, split: &GcdSplit) -> Result<(FeatureSet, GcdSplit)> {
    split.validate_subset(fs)?;
    let mut members: Vec<usize> = split
        .labeled_indices
        .iter()
        .chain(&split.unlabeled_indices)
        .copied()
        .collect();
    members.sort_unstable();
    let present: BTreeSet<usize> = members.iter().map(|&i| fs.labels[i]).collect();
    let mut remap = vec![usize::MAX; fs.num_classes];
    for (new, &old) in present.iter().enumerate() {
        remap[old] = new;
    }
    let mut position = vec![usize::MAX; fs.len()];
    for (new, &old) in members.iter().enumerate() {
        position[old] = new;
    }
    let sub = FeatureSet {
        features: fs.features.select_rows(&members),
        labels: members.iter().map(|&i| remap[fs.labels[i]]).collect(),
        num_classes: present.len(),
        class_names: fs
            .class_names
            .as_ref()
            .map(|names| present.iter().map(|&c| names[c].clone()).collect()),
    };
    let mut known: Vec<usize> = split
        .known_classes
        .iter()
        .filter(|c| present.contains(c))
        .map(|&c| remap[c])
        .collect();
    known.sort_unstable();
    let map_indices = |v: &[usize]| {
        let mut out: Vec<usize> = v.iter().map(|&i| position[i]).collect();
        out.sort_unstable();
        out
    };
    let sub_split = GcdSplit {
        known_classes: known,
        labeled_indices: map_indices(&split.labeled_indices),
        unlabeled_indices: map_indices(&split.unlabeled_indices),
    };
    sub.validate()?;
    sub_split.validate(&sub)?;
    Ok((sub, sub_split))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SamplesPerClass {
    Uniform(usize),
    PerClass(Vec<usize>),
}

/// Isotropic Gaussian mixture with well-separated means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: SamplesPerClass,
    /// Minimum distance between class means, in within-class standard deviations.
    pub mean_separation: f64,
    pub seed: u64,
}

const PLACEMENT_ATTEMPTS: usize = 10_000;

impl SyntheticSpec {
    pub fn counts(&self) -> Result<Vec<usize>> {
        let counts = match &self.samples_per_class {
            SamplesPerClass::Uniform(n) => vec![*n; self.classes],
            SamplesPerClass::PerClass(v) => {
                if v.len() != self.classes {
                    return Err(RpimError::shape("samples_per_class", self.classes, v.len()));
                }
                v.clone()
            }
        };
        if counts.contains(&0) {
            return Err(RpimError::InvalidInput("every class needs at least one sample".into()));
        }
        Ok(counts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 {
            return Err(RpimError::InvalidInput(format!(
                "synthetic data needs K >= 2 and D >= 2 (got K={}, D={})",
                self.classes, self.dim
            )));
        }
        if !(self.mean_separation > 0.0 && self.mean_separation.is_finite()) {
            return Err(RpimError::InvalidInput(format!(
                "mean_separation must be positive, got {}",
                self.mean_separation
            )));
        }
        self.counts().map(|_| ())
    }
}

/// Class means sit at distance `mean_separation` from the origin in random
/// directions, each re-drawn until it is at least `mean_separation` from all
/// earlier means. Samples are mean plus standard normal noise, grouped by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureSet> {
    spec.validate()?;
    let counts = spec.counts()?;
    let mut rng = Rng::new(spec.seed);
    let sep = spec.mean_separation;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let dir: Vec<f64> = (0..spec.dim).map(|_| rng.normal()).collect();
            let norm = l2_norm(&dir);
            if norm < 1e-12 {
                continue;
            }
            let candidate: Vec<f64> = dir.iter().map(|v| v * sep / norm).collect();
            let far_enough = means.iter().all(|m| {
                let d2: f64 = m.iter().zip(&candidate).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= sep
            });
            if far_enough {
                means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(RpimError::Degenerate(format!(
                "could not place mean {c} of {} at separation {sep} in {} dimensions; use a larger D",
                spec.classes, spec.dim
            )));
        }
    }

    let total: usize = counts.iter().sum();
    let mut values = Vec::with_capacity(total * spec.dim);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            values.extend(means[c].iter().map(|m| m + rng.normal()));
            labels.push(c);
        }
    }
    FeatureSet::new(DenseMatrix::from_vec(total, spec.dim, values)?, labels, spec.classes)
}

const FEATURE_MAGIC: &[u8; 8] = b"RPIMFEAT";
const FEATURE_VERSION: u32 = 1;

/// Writes the binary feature file. Values are stored as 32-bit floats.
pub fn write_features<W: Write>(fs: &FeatureSet, mut out: W) -> Result<()> {
    fs.validate()?;
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&FEATURE_VERSION.to_le_bytes())?;
    out.write_all(&(fs.len() as u64).to_le_bytes())?;
    out.write_all(&(fs.dim() as u64).to_le_bytes())?;
    out.write_all(&(fs.num_classes as u64).to_le_bytes())?;
    for v in fs.features.values() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    for &l in &fs.labels {
        out.write_all(&(l as u32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_features<R: Read>(mut input: R) -> Result<FeatureSet> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_features(&bytes)
}

pub fn parse_features(bytes: &[u8]) -> Result<FeatureSet> {
    let mut cur = ByteCursor::new(bytes);
    let magic = cur.take(8, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(RpimError::Parse {
            offset: 0,
            message: format!("magic mismatch: expected RPIMFEAT, found {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let at = cur.offset();
    let version = cur.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(RpimError::Parse {
            offset: at,
            message: format!("unsupported feature-file version {version}"),
        });
    }
    let at = cur.offset();
    let n = cur.u64("N")? as usize;
    let d = cur.u64("D")? as usize;
    let k = cur.u64("K")? as usize;
    if n == 0 {
        return Err(RpimError::Parse {
            offset: at,
            message: "empty dataset (N = 0)".into(),
        });
    }
    if d == 0 || k < 2 {
        return Err(RpimError::Parse {
            offset: at + 8,
            message: format!("invalid dimensions D={d}, K={k}"),
        });
    }
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(4))
        .and_then(|b| b.checked_add(n * 4));
    if expected.is_none_or(|e| e > cur.remaining()) {
        return Err(RpimError::Parse {
            offset: cur.offset(),
            message: format!(
                "truncated: header declares N={n}, D={d} but only {} payload bytes follow",
                cur.remaining()
            ),
        });
    }
    let mut values = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let at = cur.offset();
        let v = cur.f32("feature value")?;
        if !v.is_finite() {
            return Err(RpimError::Parse {
                offset: at,
                message: format!("non-finite feature value {v}"),
            });
        }
        values.push(v as f64);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = cur.offset();
        let l = cur.u32("label")? as usize;
        if l >= k {
            return Err(RpimError::Parse {
                offset: at,
                message: format!("label {l} >= K = {k}"),
            });
        }
        labels.push(l);
    }
    if cur.remaining() != 0 {
        return Err(RpimError::Parse {
            offset: cur.offset(),
            message: format!("{} trailing bytes", cur.remaining()),
        });
    }
    FeatureSet::new(DenseMatrix::from_vec(n, d, values)?, labels, k)
}

pub fn write_features_file(fs: &FeatureSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_features(fs, std::io::BufWriter::new(file))
}

pub fn read_features_file(path: &Path) -> Result<FeatureSet> {
    read_features(std::fs::File::open(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarRow {
    index: usize,
    label: usize,
    is_labeled: u8,
}

/// Writes `index,label,is_labeled` for every sample.
pub fn write_sidecar<W: Write>(fs: &FeatureSet, split: &GcdSplit, out: W) -> Result<()> {
    split.validate(fs)?;
    let labeled: BTreeSet<usize> = split.labeled_indices.iter().copied().collect();
    let mut w = csv::Writer::from_writer(out);
    for (index, &label) in fs.labels.iter().enumerate() {
        w.serialize(SidecarRow {
            index,
            label,
            is_labeled: labeled.contains(&index) as u8,
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> RpimError {
    let offset = e.position().map_or(0, |p| p.byte());
    RpimError::Parse {
        offset,
        message: format!("sidecar: {e}"),
    }
}

/// Reads a split sidecar. Every sample must appear exactly once and its label
/// must agree with the feature file; known classes are the labeled ones.
pub fn read_sidecar<R: Read>(fs: &FeatureSet, input: R) -> Result<GcdSplit> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers().map_err(csv_error)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["index", "label", "is_labeled"] {
        return Err(RpimError::Parse {
            offset: 0,
            message: format!("sidecar header must be `index,label,is_labeled`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut flag: Vec<Option<bool>> = vec![None; fs.len()];
    for row in reader.deserialize::<SidecarRow>() {
        let row = row.map_err(csv_error)?;
        if row.index >= fs.len() {
            return Err(RpimError::InvalidInput(format!("sidecar index {} out of range", row.index)));
        }
        if row.label != fs.labels[row.index] {
            return Err(RpimError::InvalidInput(format!(
                "sidecar label {} for sample {} disagrees with feature file label {}",
                row.label, row.index, fs.labels[row.index]
            )));
        }
        if row.is_labeled > 1 {
            return Err(RpimError::InvalidInput(format!("is_labeled must be 0 or 1 (sample {})", row.index)));
        }
        if flag[row.index].replace(row.is_labeled == 1).is_some() {
            return Err(RpimError::InvalidInput(format!("sample {} listed twice in sidecar", row.index)));
        }
    }
    if let Some(i) = flag.iter().position(Option::is_none) {
        return Err(RpimError::InvalidInput(format!("sample {i} missing from sidecar")));
    }
    let labeled: Vec<usize> = (0..fs.len()).filter(|&i| flag[i] == Some(true)).collect();
    let unlabeled: Vec<usize> = (0..fs.len()).filter(|&i| flag[i] == Some(false)).collect();
    let known: BTreeSet<usize> = labeled.iter().map(|&i| fs.labels[i]).collect();
    let split = GcdSplit {
        known_classes: known.into_iter().collect(),
        labeled_indices: labeled,
        unlabeled_indices: unlabeled,
    };
    split.validate(fs)?;
    Ok(split)
}
