//! Dataset generators, file loaders and minibatch partitioning.

use std::f64::consts::PI;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Matrix, Vector};
use crate::problems::{BatchFactorization, Params, Problem, ProblemError, ProblemKind};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("label {label} out of range ({classes} classes)")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid dataset specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

fn io_error(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Random least-squares instance `y = Xθ* + σ ε` with standard normal `X`, `θ*`, `ε`.
/// The hidden `θ*` is kept as the problem's reference.
pub fn gen_random_lls(n: usize, p: usize, noise_sigma: f64, seed: u64) -> Result<Problem, DataError> {
    if n == 0 || p == 0 || n < p {
        return Err(DataError::InvalidSpec(format!("random lls needs n >= p >= 1, got {n}x{p}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(DataError::InvalidSpec(format!("noise_sigma must be nonnegative, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal_matrix(n, p, &mut rng);
    let theta = normal_matrix(p, 1, &mut rng);
    let noise = normal_matrix(n, 1, &mut rng);
    let y = x.dot(&theta) + noise * noise_sigma;
    Ok(Problem::least_squares(x, y.column(0).to_owned())?.with_reference(theta))
}

/// A straight ray through the unit-pixel grid `[0, side]²`, at `angle` from the
/// x axis and signed distance `offset` from the grid centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub angle: f64,
    pub offset: f64,
}

/// Length of the ray's intersection with the box `[x0, x1] × [y0, y1]`.
fn clip_length(origin: (f64, f64), dir: (f64, f64), x: (f64, f64), y: (f64, f64)) -> f64 {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (o, d, (a, b)) in [(origin.0, dir.0, x), (origin.1, dir.1, y)] {
        if d.abs() < 1e-15 {
            if o < a || o >= b {
                return 0.0;
            }
        } else {
            let t1 = (a - o) / d;
            let t2 = (b - o) / d;
            lo = lo.max(t1.min(t2));
            hi = hi.min(t1.max(t2));
        }
    }
    (hi - lo).max(0.0)
}

/// Ray-by-pixel intersection lengths, pixel `(i, j)` at column `i * side + j`
/// covering `x ∈ [j, j+1]`, `y ∈ [i, i+1]`.
pub fn ray_matrix(side: usize, rays: &[Ray]) -> Matrix {
    let centre = side as f64 / 2.0;
    let mut out = Matrix::zeros((rays.len(), side * side));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(rays.par_iter())
        .for_each(|(mut row, ray)| {
            let dir = (ray.angle.cos(), ray.angle.sin());
            let normal = (-dir.1, dir.0);
            let origin = (centre + ray.offset * normal.0, centre + ray.offset * normal.1);
            for i in 0..side {
                for j in 0..side {
                    let len = clip_length(origin, dir, (j as f64, j as f64 + 1.0), (i as f64, i as f64 + 1.0));
                    row[i * side + j] = len;
                }
            }
        });
    out
}

/// Nonnegative phantom built from a few random ellipses.
pub fn random_phantom(side: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let s = side as f64;
    let blobs: Vec<(f64, f64, f64, f64, f64, f64)> = (0..5)
        .map(|_| {
            let cx = rng.random_range(0.25..0.75) * s;
            let cy = rng.random_range(0.25..0.75) * s;
            let ax = rng.random_range(0.1..0.35) * s;
            let ay = rng.random_range(0.1..0.35) * s;
            let rot = rng.random_range(0.0..PI);
            let value = rng.random_range(0.2..1.0);
            (cx, cy, ax, ay, rot, value)
        })
        .collect();
    Matrix::from_shape_fn((side, side), |(i, j)| {
        let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
        blobs
            .iter()
            .filter(|(cx, cy, ax, ay, rot, _)| {
                let (dx, dy) = (px - cx, py - cy);
                let u = dx * rot.cos() + dy * rot.sin();
                let v = -dx * rot.sin() + dy * rot.cos();
                (u / ax).powi(2) + (v / ay).powi(2) <= 1.0
            })
            .map(|b| b.5)
            .sum()
    })
}

/// Least-squares problem `y = X vec(phantom)` for the given rays; the
/// vectorized phantom becomes the reference solution.
pub fn tomo_problem(side: usize, rays: &[Ray], phantom: &Matrix) -> Result<Problem, DataError> {
    if phantom.dim() != (side, side) {
        return Err(DataError::InvalidSpec(format!("phantom must be {side}x{side}")));
    }
    let x = ray_matrix(side, rays);
    let truth = Vector::from_iter(phantom.iter().copied());
    let y = x.dot(&truth);
    Ok(Problem::least_squares(x, y)?.with_reference(truth.insert_axis(Axis(1))))
}

/// Synthetic parallel-beam tomography system over a `side × side` image with
/// `rays` random lines through the grid's inscribed disc.
pub fn gen_tomo_like(side: usize, rays: usize, seed: u64) -> Result<Problem, DataError> {
    if side < 2 || rays == 0 {
        return Err(DataError::InvalidSpec(format!("tomography needs side >= 2 and rays >= 1 (got {side}, {rays})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phantom = random_phantom(side, &mut rng);
    let half = 0.49 * side as f64;
    let geometry: Vec<Ray> = (0..rays)
        .map(|_| Ray {
            angle: rng.random_range(0.0..PI),
            offset: rng.random_range(-half..half),
        })
        .collect();
    tomo_problem(side, &geometry, &phantom)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// How IDX labels become targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdxTarget {
    /// Two classes from the filter, mapped to 0 and 1 in filter order.
    Logistic,
    /// One-hot over `classes` labels, or over the filter's classes when one is given.
    Softmax { classes: usize },
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::TruncatedFile(format!("{what} header")))
}

/// Parses an IDX image file (`u8` pixels) into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), DataError> {
    let magic = read_u32(bytes, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4, "image")? as usize;
    let rows = read_u32(bytes, 8, "image")? as usize;
    let cols = read_u32(bytes, 12, "image")? as usize;
    let needed = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < needed {
        return Err(DataError::TruncatedFile(format!(
            "image data has {} bytes, header promises {needed}",
            body.len()
        )));
    }
    Ok((count, rows, cols, &body[..needed]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], DataError> {
    let magic = read_u32(bytes, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4, "label")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(DataError::TruncatedFile(format!(
            "label data has {} bytes, header promises {count}",
            body.len()
        )));
    }
    Ok(&body[..count])
}

/// Builds a problem from IDX image/label bytes; pixels are scaled to `[0, 1]`.
pub fn idx_problem(images: &[u8], labels: &[u8], class_filter: &[u8], target: IdxTarget) -> Result<Problem, DataError> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(DataError::InvalidSpec(format!("{count} images but {} labels", labels.len())));
    }
    let keep: Vec<usize> = (0..count)
        .filter(|&i| class_filter.is_empty() || class_filter.contains(&labels[i]))
        .collect();
    if keep.is_empty() {
        return Err(DataError::InvalidSpec("class filter removed every sample".into()));
    }
    let p = rows * cols;
    let mut x = Matrix::zeros((keep.len(), p));
    for (row, &i) in keep.iter().enumerate() {
        let src = &pixels[i * p..(i + 1) * p];
        for (dst, &px) in x.row_mut(row).iter_mut().zip(src) {
            *dst = px as f64 / 255.0;
        }
    }
    let remap = |label: u8, classes: usize| -> Result<usize, DataError> {
        let idx = if class_filter.is_empty() {
            label as usize
        } else {
            class_filter.iter().position(|&c| c == label).expect("filtered label")
        };
        if idx >= classes {
            return Err(DataError::LabelOutOfRange { label: label as usize, classes });
        }
        Ok(idx)
    };
    match target {
        IdxTarget::Logistic => {
            if !class_filter.is_empty() && class_filter.len() != 2 {
                return Err(DataError::InvalidSpec("logistic targets need a two-class filter".into()));
            }
            let y = keep
                .iter()
                .map(|&i| remap(labels[i], 2).map(|c| c as f64))
                .collect::<Result<Vector, _>>()?;
            Ok(Problem::logistic(x, y)?)
        }
        IdxTarget::Softmax { classes } => {
            let classes = if class_filter.is_empty() { classes } else { class_filter.len() };
            let y = keep
                .iter()
                .map(|&i| remap(labels[i], classes))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Problem::softmax(x, &y, classes)?)
        }
    }
}

pub fn load_idx(images_path: &Path, labels_path: &Path, class_filter: &[u8], target: IdxTarget) -> Result<Problem, DataError> {
    let images = fs::read(images_path).map_err(|e| io_error(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| io_error(labels_path, e))?;
    idx_problem(&images, &labels, class_filter, target)
}

/// Parses the linear-system text format: a header `n p`, then `n` rows of
/// `p` design entries followed by the target.
pub fn parse_linear_system(text: &str) -> Result<Problem, DataError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (header_line, header) = lines.next().ok_or(DataError::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| DataError::Parse {
            line: header_line,
            message: format!("bad header: {e}"),
        })?;
    let [n, p] = dims[..] else {
        return Err(DataError::Parse {
            line: header_line,
            message: format!("header must be `n p`, got {} fields", dims.len()),
        });
    };
    let mut x = Matrix::zeros((n, p));
    let mut y = Vector::zeros(n);
    for row in 0..n {
        let (line, content) = lines.next().ok_or_else(|| DataError::Parse {
            line: header_line + row + 1,
            message: format!("expected {n} data rows, found {row}"),
        })?;
        let values: Vec<f64> = content
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DataError::Parse {
                line,
                message: e.to_string(),
            })?;
        if values.len() != p + 1 {
            return Err(DataError::Parse {
                line,
                message: format!("expected {} values, found {}", p + 1, values.len()),
            });
        }
        for j in 0..p {
            x[[row, j]] = values[j];
        }
        y[row] = values[p];
    }
    if let Some((line, _)) = lines.next() {
        return Err(DataError::Parse {
            line,
            message: "unexpected trailing data".into(),
        });
    }
    Ok(Problem::least_squares(x, y)?)
}

pub fn format_linear_system(pb: &Problem) -> String {
    let mut out = format!("{} {}\n", pb.n(), pb.p());
    for (row, target) in pb.x.rows().into_iter().zip(pb.targets.column(0)) {
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        fields.push(target.to_string());
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}

pub fn load_linear_system(path: &Path) -> Result<Problem, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_linear_system(&text)
}

pub fn write_linear_system(pb: &Problem, path: &Path) -> Result<(), DataError> {
    fs::write(path, format_linear_system(pb)).map_err(|e| io_error(path, e))
}

/// Isotropic Gaussian clusters with means `separation · u_k` for random unit
/// vectors `u_k`.
#[derive(Debug, Clone)]
pub struct BlobModel {
    pub means: Matrix,
}

impl BlobModel {
    pub fn new(p: usize, classes: usize, separation: f64, seed: u64) -> Result<Self, DataError> {
        if classes < 2 || p == 0 {
            return Err(DataError::InvalidSpec(format!("blobs need K >= 2 and p >= 1 (got K = {classes}, p = {p})")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut means = normal_matrix(classes, p, &mut rng);
        for mut row in means.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| separation * v / norm);
        }
        Ok(BlobModel { means })
    }

    pub fn classes(&self) -> usize {
        self.means.nrows()
    }

    /// Draws `n` samples with balanced labels `i mod K`. Two classes give a
    /// logistic problem, more give softmax.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Problem, DataError> {
        let k = self.classes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut x = normal_matrix(n, self.means.ncols(), &mut rng);
        for (mut row, &label) in x.rows_mut().into_iter().zip(&labels) {
            row += &self.means.row(label);
        }
        if k == 2 {
            Ok(Problem::logistic(x, labels.iter().map(|&l| l as f64).collect())?)
        } else {
            Ok(Problem::softmax(x, &labels, k)?)
        }
    }
}

pub fn gen_gaussian_blobs(n: usize, p: usize, classes: usize, separation: f64, seed: u64) -> Result<Problem, DataError> {
    BlobModel::new(p, classes, separation, seed)?.sample(n, seed)
}

/// Fixed contiguous minibatches over a (possibly shuffled) sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub batch_size: usize,
    /// Sample order after the one-time global shuffle.
    pub sample_order: Vec<usize>,
    /// Ranges into `sample_order`, one per batch.
    pub bounds: Vec<Range<usize>>,
    pub seed: u64,
    /// Whether samples and per-epoch visit order are shuffled.
    pub shuffle: bool,
}

impl Partition {
    pub fn new(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Self, DataError> {
        if batch_size == 0 || batch_size > n {
            return Err(DataError::InvalidSpec(format!("batch size {batch_size} must be in 1..={n}")));
        }
        let mut sample_order: Vec<usize> = (0..n).collect();
        if shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_order.shuffle(&mut rng);
        }
        let bounds = (0..n.div_ceil(batch_size))
            .map(|i| i * batch_size..((i + 1) * batch_size).min(n))
            .collect();
        Ok(Partition {
            batch_size,
            sample_order,
            bounds,
            seed,
            shuffle,
        })
    }

    pub fn batch_count(&self) -> usize {
        self.bounds.len()
    }

    pub fn batch_rows(&self, i: usize) -> &[usize] {
        &self.sample_order[self.bounds[i].clone()]
    }

    /// Batch visit order for `epoch`: a fresh seeded permutation, or the
    /// natural order when shuffling is off.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.batch_count()).collect();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch as u64 + 1);
            order.shuffle(&mut rng);
        }
        order
    }

    /// Precomputes the QR factors of every batch.
    pub fn factorize(&self, pb: &Problem) -> Result<Vec<BatchFactorization>, DataError> {
        (0..self.batch_count())
            .into_par_iter()
            .map(|i| BatchFactorization::new(pb, i, self.batch_rows(i).to_vec()).map_err(DataError::from))
            .collect()
    }
}

/// Shuffled partition with precomputed factors.
pub fn partition(pb: &Problem, batch_size: usize, seed: u64) -> Result<(Partition, Vec<BatchFactorization>), DataError> {
    partition_with(pb, batch_size, seed, true)
}

pub fn partition_with(
    pb: &Problem,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<(Partition, Vec<BatchFactorization>), DataError> {
    let part = Partition::new(pb.n(), batch_size, seed, shuffle)?;
    let batches = part.factorize(pb)?;
    Ok((part, batches))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    RandomLls,
    TomoLike,
    IdxImages,
    LinearSystemFile,
    GaussianBlobs,
}

/// Declarative dataset description, as used in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default)]
    pub n: usize,
    #[serde(default)]
    pub p: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
    /// Tomography image side.
    #[serde(default)]
    pub image_side: usize,
    #[serde(default)]
    pub rays: usize,
    /// Samples in the generated holdout set (blobs).
    #[serde(default)]
    pub holdout_n: usize,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub class_filter: Vec<u8>,
    /// `logistic` or `softmax` for IDX data.
    #[serde(default)]
    pub model: Option<ProblemKind>,
}

fn default_classes() -> usize {
    2
}

fn default_separation() -> f64 {
    4.0
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.noise_sigma >= 0.0) {
            return Err(DataError::InvalidSpec("noise_sigma must be nonnegative".into()));
        }
        match self.kind {
            DatasetKind::RandomLls | DatasetKind::GaussianBlobs if self.n == 0 || self.p == 0 => {
                Err(DataError::InvalidSpec("n and p must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    fn idx_target(&self) -> IdxTarget {
        match self.model {
            Some(ProblemKind::Logistic) => IdxTarget::Logistic,
            _ => IdxTarget::Softmax { classes: self.classes.max(2) },
        }
    }

    /// Builds the training problem and, when the kind has one, a holdout set.
    pub fn build(&self) -> Result<(Problem, Option<Problem>), DataError> {
        self.validate()?;
        let require = |p: &Option<PathBuf>, field: &str| -> Result<PathBuf, DataError> {
            p.clone().ok_or_else(|| DataError::InvalidSpec(format!("`{field}` is required for {:?}", self.kind)))
        };
        match self.kind {
            DatasetKind::RandomLls => Ok((gen_random_lls(self.n, self.p, self.noise_sigma, self.seed)?, None)),
            DatasetKind::TomoLike => Ok((gen_tomo_like(self.image_side, self.rays, self.seed)?, None)),
            DatasetKind::LinearSystemFile => Ok((load_linear_system(&require(&self.path, "path")?)?, None)),
            DatasetKind::GaussianBlobs => {
                let model = BlobModel::new(self.p, self.classes, self.separation, self.seed)?;
                let train = model.sample(self.n, self.seed)?;
                let holdout = if self.holdout_n > 0 {
                    Some(model.sample(self.holdout_n, self.seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?)
                } else {
                    None
                };
                Ok((train, holdout))
            }
            DatasetKind::IdxImages => {
                let target = self.idx_target();
                let train = load_idx(&require(&self.images, "images")?, &require(&self.labels, "labels")?, &self.class_filter, target)?;
                let holdout = match (&self.test_images, &self.test_labels) {
                    (Some(img), Some(lbl)) => Some(load_idx(img, lbl, &self.class_filter, target)?),
                    _ => None,
                };
                Ok((train, holdout))
            }
        }
    }
}

/// Zero parameters perturbed by `scale ·` standard normal entries.
pub fn random_init(p: usize, classes: usize, scale: f64, seed: u64) -> Params {
    if scale == 0.0 {
        return Params::zeros((p, classes));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    normal_matrix(p, classes, &mut rng) * scale
}
