//! Domain datasets, synthetic domain-pair generators, IDX ingestion and
//! mini-batch samplers.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assoc::LabelVector;
use crate::error::{Error, IdxError, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::invalid(format!("unknown domain {other:?}"))),
        }
    }
}

/// Samples from one domain. Labels of target-domain data are kept for
/// evaluation only; [`DomainDataset::training_labels`] never returns them.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    inputs: Matrix,
    labels: Option<LabelVector>,
    domain: Domain,
    num_classes: usize,
}

impl DomainDataset {
    pub fn new(
        inputs: Matrix,
        labels: Option<LabelVector>,
        domain: Domain,
        num_classes: usize,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != inputs.rows() {
                return Err(Error::invalid(format!(
                    "{} labels for {} samples",
                    l.len(),
                    inputs.rows()
                )));
            }
            if l.num_classes() != num_classes {
                return Err(Error::invalid("label space does not match num_classes"));
            }
        }
        Ok(Self {
            inputs,
            labels,
            domain,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Labels visible to a trainer: source labels only.
    pub fn training_labels(&self) -> Option<&LabelVector> {
        match self.domain {
            Domain::Source => self.labels.as_ref(),
            Domain::Target => None,
        }
    }

    /// Labels for computing evaluation metrics, from either domain.
    pub fn eval_labels(&self) -> Option<&LabelVector> {
        self.labels.as_ref()
    }

    /// A copy whose labels are visible to the trainer, for the target-only
    /// ceiling run that anchors the coverage metric.
    pub fn with_labels_exposed(&self) -> DomainDataset {
        DomainDataset {
            domain: Domain::Source,
            ..self.clone()
        }
    }

    pub fn subset(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            inputs: self.inputs.select_rows(indices),
            labels: self.labels.as_ref().map(|l| l.select(indices)),
            domain: self.domain,
            num_classes: self.num_classes,
        }
    }

    /// CSV with header `x0,…,x{d-1},label,domain`; missing labels are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.dim() {
            let _ = write!(out, "x{j},");
        }
        out.push_str("label,domain\n");
        for i in 0..self.len() {
            for v in self.inputs.row(i) {
                let _ = write!(out, "{v:?},");
            }
            if let Some(l) = &self.labels {
                let _ = write!(out, "{}", l.labels()[i]);
            }
            let _ = writeln!(out, ",{}", self.domain.as_str());
        }
        out
    }

    /// Parses [`DomainDataset::to_csv`] output. All rows must share one
    /// domain; `num_classes` defaults to one more than the largest label.
    pub fn from_csv(text: &str, num_classes: Option<usize>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::invalid("empty CSV"))?
            .split(',')
            .map(str::trim)
            .collect();
        let n_feat = header.len().saturating_sub(2);
        let header_ok = header.len() >= 3
            && header[n_feat..] == ["label", "domain"]
            && header[..n_feat]
                .iter()
                .enumerate()
                .all(|(j, h)| *h == format!("x{j}"));
        if !header_ok {
            return Err(Error::invalid(format!("unexpected CSV header {header:?}")));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut any_missing = false;
        let mut domain = None;
        for (ln, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != header.len() {
                return Err(Error::invalid(format!(
                    "row {}: {} fields, expected {}",
                    ln + 1,
                    fields.len(),
                    header.len()
                )));
            }
            for f in &fields[..n_feat] {
                data.push(
                    f.parse::<f64>()
                        .map_err(|_| Error::invalid(format!("row {}: bad value {f:?}", ln + 1)))?,
                );
            }
            match fields[n_feat] {
                "" => any_missing = true,
                l => labels.push(
                    l.parse::<usize>()
                        .map_err(|_| Error::invalid(format!("row {}: bad label {l:?}", ln + 1)))?,
                ),
            }
            let d: Domain = fields[n_feat + 1].parse()?;
            if *domain.get_or_insert(d) != d {
                return Err(Error::invalid("CSV mixes source and target rows"));
            }
        }
        let rows = data.len() / n_feat;
        let inputs = Matrix::from_vec(rows, n_feat, data)?;
        let inferred = labels.iter().max().map_or(1, |m| m + 1);
        let num_classes = num_classes.unwrap_or(inferred);
        let labels = if any_missing || labels.is_empty() {
            None
        } else {
            Some(LabelVector::new(labels, num_classes)?)
        };
        DomainDataset::new(
            inputs,
            labels,
            domain.unwrap_or(Domain::Source),
            num_classes,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    TwoMoons,
    GaussianGrid,
    MnistCorrupt,
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(Generator::TwoMoons),
            "gaussian_grid" => Ok(Generator::GaussianGrid),
            "mnist_corrupt" => Ok(Generator::MnistCorrupt),
            other => Err(Error::invalid(format!("unknown generator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPairSpec {
    pub generator: Generator,
    /// Radians, counter-clockwise about the origin.
    pub rotation: f64,
    pub translation: [f64; 2],
    pub noise_std: f64,
    /// Per-sample inversion probability for the corrupted-MNIST target.
    pub invert_prob: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Gaussian grid only.
    pub num_classes: usize,
    /// Gaussian grid only: distance between neighbouring blob centers.
    pub grid_spacing: f64,
    /// Directory holding the four standard MNIST IDX files.
    pub mnist_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for DomainPairSpec {
    fn default() -> Self {
        Self {
            generator: Generator::TwoMoons,
            rotation: PI / 6.0,
            translation: [0.0, 0.0],
            noise_std: 0.1,
            invert_prob: 0.5,
            train_samples: 1000,
            test_samples: 1000,
            num_classes: 4,
            grid_spacing: 1.0,
            mnist_dir: None,
            seed: 0,
        }
    }
}

/// Train and test splits for both domains over a shared label space.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub source_test: DomainDataset,
    pub target_test: DomainDataset,
}

// Independent ChaCha streams per split. Source and target training draws
// share a stream so a null shift reproduces the source exactly.
const STREAM_TRAIN: u64 = 0;
const STREAM_SOURCE_TEST: u64 = 1;
const STREAM_TARGET_TEST: u64 = 2;
const STREAM_CORRUPT: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Balanced labels (counts differ by at most one) in shuffled order.
fn balanced_labels(n: usize, classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn two_moons(n: usize, noise_std: f64, rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>) {
    let labels = balanced_labels(n, 2, rng);
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    let mut inputs = Matrix::zeros(n, 2);
    for (i, &y) in labels.iter().enumerate() {
        let t = rng.random_range(0.0..PI);
        let (x0, x1) = if y == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        inputs[(i, 0)] = x0 + noise.sample(rng);
        inputs[(i, 1)] = x1 + noise.sample(rng);
    }
    (inputs, labels)
}

/// Blob centers laid out row by row on a square grid.
pub fn grid_centers(classes: usize, spacing: f64) -> Vec<[f64; 2]> {
    let cols = (classes as f64).sqrt().ceil() as usize;
    (0..classes)
        .map(|c| [(c % cols) as f64 * spacing, (c / cols) as f64 * spacing])
        .collect()
}

fn gaussian_grid(
    n: usize,
    classes: usize,
    spacing: f64,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> (Matrix, Vec<usize>) {
    let centers = grid_centers(classes, spacing);
    let labels = balanced_labels(n, classes, rng);
    let noise = Normal::new(0.0, std.max(0.0)).expect("finite std");
    let mut inputs = Matrix::zeros(n, 2);
    for (i, &y) in labels.iter().enumerate() {
        inputs[(i, 0)] = centers[y][0] + noise.sample(rng);
        inputs[(i, 1)] = centers[y][1] + noise.sample(rng);
    }
    (inputs, labels)
}

/// Rotates every 2-D row by `angle` about the origin, then translates.
pub fn rotate_translate(inputs: &Matrix, angle: f64, translation: [f64; 2]) -> Matrix {
    let (s, c) = angle.sin_cos();
    Matrix::from_fn(inputs.rows(), 2, |i, j| {
        let (x, y) = (inputs[(i, 0)], inputs[(i, 1)]);
        if j == 0 {
            c * x - s * y + translation[0]
        } else {
            s * x + c * y + translation[1]
        }
    })
}

fn planar_pair(
    spec: &DomainPairSpec,
    draw: impl Fn(usize, &mut ChaCha8Rng) -> (Matrix, Vec<usize>),
    classes: usize,
) -> Result<DomainPair> {
    let make = |stream: u64, n: usize, domain: Domain| -> Result<DomainDataset> {
        let (x, y) = draw(n, &mut stream_rng(spec.seed, stream));
        let x = match domain {
            Domain::Source => x,
            Domain::Target => rotate_translate(&x, spec.rotation, spec.translation),
        };
        DomainDataset::new(x, Some(LabelVector::new(y, classes)?), domain, classes)
    };
    Ok(DomainPair {
        source: make(STREAM_TRAIN, spec.train_samples, Domain::Source)?,
        target: make(STREAM_TRAIN, spec.train_samples, Domain::Target)?,
        source_test: make(STREAM_SOURCE_TEST, spec.test_samples, Domain::Source)?,
        target_test: make(STREAM_TARGET_TEST, spec.test_samples, Domain::Target)?,
    })
}

fn check_planar(spec: &DomainPairSpec) -> Result<()> {
    if !(0.0..=PI / 2.0).contains(&spec.rotation) {
        return Err(Error::invalid(format!(
            "rotation {} outside [0, pi/2]",
            spec.rotation
        )));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be nonnegative"));
    }
    if spec.train_samples == 0 || spec.test_samples == 0 {
        return Err(Error::invalid("sample counts must be positive"));
    }
    Ok(())
}

/// Two interleaved half circles; the target is the same draw rotated and
/// translated.
pub fn gen_two_moons_pair(spec: &DomainPairSpec) -> Result<DomainPair> {
    check_planar(spec)?;
    planar_pair(spec, |n, rng| two_moons(n, spec.noise_std, rng), 2)
}

/// Isotropic Gaussian blobs on a grid, one per class; the target is the same
/// draw rotated and translated.
pub fn gen_gaussian_grid_pair(spec: &DomainPairSpec) -> Result<DomainPair> {
    check_planar(spec)?;
    if spec.num_classes < 2 {
        return Err(Error::invalid("gaussian grid needs at least 2 classes"));
    }
    planar_pair(
        spec,
        |n, rng| gaussian_grid(n, spec.num_classes, spec.grid_spacing, spec.noise_std, rng),
        spec.num_classes,
    )
}

/// MNIST train/test subsets as source; disjoint corrupted subsets as target.
pub fn gen_mnist_corrupt_pair(spec: &DomainPairSpec) -> Result<DomainPair> {
    let dir = spec
        .mnist_dir
        .as_ref()
        .ok_or_else(|| Error::invalid("mnist_corrupt generator needs mnist_dir"))?;
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    let (n, m) = (spec.train_samples, spec.test_samples);
    if 2 * n > train.len() || 2 * m > test.len() {
        return Err(Error::invalid(format!(
            "need {} train and {} test images, have {} and {}",
            2 * n,
            2 * m,
            train.len(),
            test.len()
        )));
    }
    let range = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
    let corrupt = |ds: DomainDataset, salt: u64| {
        corrupt_to_target(&ds, spec.noise_std, spec.invert_prob, spec.seed ^ salt)
    };
    Ok(DomainPair {
        source: train.subset(&range(0, n)),
        target: corrupt(train.subset(&range(n, 2 * n)), 0)?,
        source_test: test.subset(&range(0, m)),
        target_test: corrupt(test.subset(&range(m, 2 * m)), 1)?,
    })
}

pub fn gen_pair(spec: &DomainPairSpec) -> Result<DomainPair> {
    match spec.generator {
        Generator::TwoMoons => gen_two_moons_pair(spec),
        Generator::GaussianGrid => gen_gaussian_grid_pair(spec),
        Generator::MnistCorrupt => gen_mnist_corrupt_pair(spec),
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: at + 4,
            available: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> std::result::Result<(), IdxError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

/// Decodes an IDX image/label file pair held in memory. Pixels are scaled
/// to `[0, 1]` and each image flattened row-major.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> std::result::Result<(Matrix, Vec<u8>), IdxError> {
    check_magic(images, IDX_IMAGES_MAGIC)?;
    check_magic(labels, IDX_LABELS_MAGIC)?;
    let n_images = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n_images != n_labels {
        return Err(IdxError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let pixels = rows * cols;
    let needed = 16 + n_images * pixels;
    if images.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            available: images.len(),
        });
    }
    if labels.len() < 8 + n_labels {
        return Err(IdxError::Truncated {
            needed: 8 + n_labels,
            available: labels.len(),
        });
    }
    let data = images[16..needed]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let x = Matrix::from_vec(n_images, pixels, data).expect("sized above");
    Ok((x, labels[8..8 + n_labels].to_vec()))
}

/// Loads an IDX image/label pair as a labeled source dataset of 10 classes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DomainDataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (x, y) = parse_idx(&images, &labels)?;
    let classes = 10.max(y.iter().map(|&l| l as usize + 1).max().unwrap_or(0));
    let labels = LabelVector::new(y.into_iter().map(usize::from).collect(), classes)?;
    DomainDataset::new(x, Some(labels), Domain::Source, classes)
}

/// Turns a `[0, 1]`-valued dataset into a target domain: each sample is
/// inverted with probability `invert_prob`, then Gaussian pixel noise is
/// added and the result clipped to `[0, 1]`. Labels are retained for
/// evaluation only.
pub fn corrupt_to_target(
    source: &DomainDataset,
    noise_std: f64,
    invert_prob: f64,
    seed: u64,
) -> Result<DomainDataset> {
    if !(0.0..=1.0).contains(&invert_prob) {
        return Err(Error::invalid("invert_prob must lie in [0, 1]"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be nonnegative"));
    }
    let mut rng = stream_rng(seed, STREAM_CORRUPT);
    let noise = Normal::new(0.0, noise_std).expect("finite std");
    let mut x = source.inputs().clone();
    for i in 0..x.rows() {
        let invert = rng.random_bool(invert_prob);
        for v in x.row_mut(i) {
            if invert {
                *v = 1.0 - *v;
            }
            if noise_std > 0.0 {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    DomainDataset::new(
        x,
        source.eval_labels().cloned(),
        Domain::Target,
        source.num_classes(),
    )
}

/// Deterministic random stream for drawing mini-batches. `draws` counts the
/// batches taken so far.
#[derive(Debug, Clone)]
pub struct BatchStream {
    rng: ChaCha8Rng,
    draws: u64,
}

impl BatchStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            rng: stream_rng(seed, stream),
            draws: 0,
        }
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }
}

/// Indices of each class, in dataset order.
pub fn class_indices(labels: &LabelVector) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); labels.num_classes()];
    for (i, &l) in labels.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// Exactly `per_class` samples of every class, without replacement, in
/// shuffled order.
pub fn stratified_labeled_batch(
    ds: &DomainDataset,
    per_class: usize,
    stream: &mut BatchStream,
) -> Result<(Matrix, LabelVector)> {
    let labels = ds.training_labels().ok_or(Error::Unlabeled)?;
    let by_class = class_indices(labels);
    if let Some((class, members)) = by_class
        .iter()
        .enumerate()
        .find(|(_, m)| m.len() < per_class)
    {
        return Err(Error::ClassUndersupply {
            class,
            available: members.len(),
            requested: per_class,
        });
    }
    let rng = &mut stream.rng;
    let mut picked = Vec::with_capacity(per_class * by_class.len());
    for members in &by_class {
        picked.extend(
            index::sample(rng, members.len(), per_class)
                .into_iter()
                .map(|k| members[k]),
        );
    }
    picked.shuffle(rng);
    stream.draws += 1;
    Ok((ds.inputs().select_rows(&picked), labels.select(&picked)))
}

/// `size` samples drawn uniformly without replacement.
pub fn unlabeled_batch(
    ds: &DomainDataset,
    size: usize,
    stream: &mut BatchStream,
) -> Result<Matrix> {
    if size > ds.len() {
        return Err(Error::invalid(format!(
            "batch of {size} requested from {} samples",
            ds.len()
        )));
    }
    let picked = index::sample(&mut stream.rng, ds.len(), size).into_vec();
    stream.draws += 1;
    Ok(ds.inputs().select_rows(&picked))
}
