//! Datasets and task generators: pixel-permuted tasks, label-disjoint task
//! pairs, and synthetic Gaussian-cluster tasks.

mod idx;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use idx::{parse_idx, read_idx, IdxArray, IMAGES_MAGIC, LABELS_MAGIC};

use crate::classifier::Batch;
use crate::ndcore::{Matrix, Rng};
use crate::{Error, Result};

/// Images scaled to `[0, 1]`, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `(height, width)` of one image; `height * width == images.cols()`.
    pub image_shape: (usize, usize),
}

impl RawDataset {
    pub fn new(images: Matrix, labels: Vec<usize>, num_classes: usize, image_shape: (usize, usize)) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if image_shape.0 * image_shape.1 != images.cols() {
            return Err(Error::shape(format!(
                "image shape {image_shape:?} does not match row width {}",
                images.cols()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.images.cols()
    }

    fn batch(&self, indices: &[usize]) -> Batch {
        Batch::new(
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
        .expect("labels validated at construction")
    }

    /// Applies the same pixel permutation to every image:
    /// `out[:, j] = in[:, perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<RawDataset> {
        check_permutation(perm, self.input_dim())?;
        let mut out = Matrix::zeros(self.len(), self.input_dim());
        for i in 0..self.len() {
            let src = self.images.row(i);
            for (dst, &p) in out.row_mut(i).iter_mut().zip(perm) {
                *dst = src[p];
            }
        }
        Ok(RawDataset {
            images: out,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            image_shape: self.image_shape,
        })
    }

    /// Crops `crop` pixels from every border, then averages `factor × factor`
    /// blocks. For 28×28 MNIST, `crop = 2, factor = 3` yields 8×8 images.
    pub fn mean_pool(&self, crop: usize, factor: usize) -> Result<RawDataset> {
        let (h, w) = self.image_shape;
        if factor == 0 || 2 * crop >= h || 2 * crop >= w {
            return Err(Error::arg(format!("cannot crop {crop} and pool by {factor} a {h}x{w} image")));
        }
        let (ch, cw) = (h - 2 * crop, w - 2 * crop);
        if ch % factor != 0 || cw % factor != 0 {
            return Err(Error::arg(format!(
                "cropped size {ch}x{cw} is not divisible by pool factor {factor}"
            )));
        }
        let (oh, ow) = (ch / factor, cw / factor);
        let norm = (factor * factor) as f64;
        let mut out = Matrix::zeros(self.len(), oh * ow);
        for i in 0..self.len() {
            let src = self.images.row(i);
            let dst = out.row_mut(i);
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = 0.0;
                    for dr in 0..factor {
                        for dc in 0..factor {
                            acc += src[(crop + r * factor + dr) * w + crop + c * factor + dc];
                        }
                    }
                    dst[r * ow + c] = acc / norm;
                }
            }
        }
        Ok(RawDataset {
            images: out,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            image_shape: (oh, ow),
        })
    }
}

fn check_permutation(perm: &[usize], d: usize) -> Result<()> {
    if perm.len() != d {
        return Err(Error::shape(format!("permutation of length {} for {d} pixels", perm.len())));
    }
    let mut seen = vec![false; d];
    for &p in perm {
        if p >= d || std::mem::replace(&mut seen[p], true) {
            return Err(Error::arg("not a permutation"));
        }
    }
    Ok(())
}

/// Reads an IDX image/label file pair. Pixels are divided by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<RawDataset> {
    let images = read_idx(images_path.as_ref(), IMAGES_MAGIC)?;
    let labels = read_idx(labels_path.as_ref(), LABELS_MAGIC)?;
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(Error::format(format!(
            "image file holds {n} samples but label file holds {}",
            labels.dims[0]
        )));
    }
    let pixels = images.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = labels.data.iter().map(|&b| usize::from(b)).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    RawDataset::new(Matrix::from_vec(n, h * w, pixels)?, labels, num_classes, (h, w))
}

/// The training and test pools tasks are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceData {
    pub train: RawDataset,
    pub test: RawDataset,
}

impl SourceData {
    pub fn new(train: RawDataset, test: RawDataset) -> Result<Self> {
        if train.input_dim() != test.input_dim() || train.num_classes != test.num_classes {
            return Err(Error::shape("train and test pools disagree on input dim or class count"));
        }
        Ok(Self { train, test })
    }

    /// Loads `train-*` and `t10k-*` IDX files from `dir`, with or without
    /// a `.gz` suffix.
    pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let find = |stem: &str| -> Result<PathBuf> {
            for candidate in [dir.join(stem), dir.join(format!("{stem}.gz"))] {
                if candidate.is_file() {
                    return Ok(candidate);
                }
            }
            Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{stem}[.gz] not found in {}", dir.display()),
            )
            .into())
        };
        let train = load_idx(find("train-images-idx3-ubyte")?, find("train-labels-idx1-ubyte")?)?;
        let test = load_idx(find("t10k-images-idx3-ubyte")?, find("t10k-labels-idx1-ubyte")?)?;
        Self::new(train, test)
    }

    pub fn mean_pool(&self, crop: usize, factor: usize) -> Result<Self> {
        Self::new(self.train.mean_pool(crop, factor)?, self.test.mean_pool(crop, factor)?)
    }

    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(self.train.permuted(perm)?, self.test.permuted(perm)?)
    }

    pub fn input_dim(&self) -> usize {
        self.train.input_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitSizes {
    pub const FULL: SplitSizes = SplitSizes {
        train: 50_000,
        valid: 10_000,
        test: 10_000,
    };
    pub const DESK: SplitSizes = SplitSizes {
        train: 2_000,
        valid: 500,
        test: 1_000,
    };
}

/// Where a task came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskDescriptor {
    Permutation { seed: u64, identity: bool },
    Disjoint { labels: Vec<usize>, seed: u64 },
    Synthetic { seed: u64, separation: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Batch,
    pub valid: Batch,
    pub test: Batch,
    pub descriptor: TaskDescriptor,
}

impl Task {
    pub fn input_dim(&self) -> usize {
        self.train.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    /// Subtasks used to meta-train the predictor.
    Meta,
    /// Tasks learned in order by a continual learner.
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    tasks: Vec<Task>,
    kind: SequenceKind,
}

impl TaskSequence {
    pub fn new(tasks: Vec<Task>, kind: SequenceKind) -> Result<Self> {
        let first = tasks.first().ok_or_else(|| Error::arg("task sequence is empty"))?;
        let (d, c) = (first.input_dim(), first.num_classes());
        if tasks.iter().any(|t| t.input_dim() != d || t.num_classes() != c) {
            return Err(Error::shape("tasks in a sequence must share input dim and class count"));
        }
        Ok(Self { tasks, kind })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn kind(&self) -> SequenceKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.tasks[0].num_classes()
    }
}

fn draw_indices(pool: &[usize], n: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order = pool.to_vec();
    rng.shuffle(&mut order);
    let rest = order.split_off(n.min(order.len()));
    order.sort_unstable();
    (order, rest)
}

fn build_task(source: &SourceData, train_pool: &[usize], test_pool: &[usize], sizes: SplitSizes, seed: u64, descriptor: TaskDescriptor) -> Result<Task> {
    if sizes.train + sizes.valid > train_pool.len() || sizes.test > test_pool.len() {
        return Err(Error::arg(format!(
            "split sizes {}/{}/{} exceed available {}/{} samples",
            sizes.train,
            sizes.valid,
            sizes.test,
            train_pool.len(),
            test_pool.len()
        )));
    }
    let root = Rng::new(seed);
    let mut split_rng = root.derive("split");
    let (train_idx, rest) = draw_indices(train_pool, sizes.train, &mut split_rng);
    let (valid_idx, _) = draw_indices(&rest, sizes.valid, &mut split_rng);
    let (test_idx, _) = draw_indices(test_pool, sizes.test, &mut root.derive("test-split"));
    Ok(Task {
        train: source.train.batch(&train_idx),
        valid: source.train.batch(&valid_idx),
        test: source.test.batch(&test_idx),
        descriptor,
    })
}

/// The pixel permutation a seed selects (Fisher–Yates on a dedicated stream).
pub fn permutation_for_seed(seed: u64, d: usize) -> Vec<usize> {
    Rng::new(seed).derive("pixel-permutation").permutation(d)
}

/// A task whose images are all shuffled by one fixed pixel permutation.
pub fn make_permutation_task(source: &SourceData, seed: u64, sizes: SplitSizes) -> Result<Task> {
    let perm = permutation_for_seed(seed, source.input_dim());
    make_task_with_permutation(source, &perm, seed, sizes)
}

/// Like [`make_permutation_task`] with an explicit permutation.
pub fn make_task_with_permutation(source: &SourceData, perm: &[usize], seed: u64, sizes: SplitSizes) -> Result<Task> {
    check_permutation(perm, source.input_dim())?;
    let identity = perm.iter().enumerate().all(|(i, &p)| i == p);
    let train_pool: Vec<usize> = (0..source.train.len()).collect();
    let test_pool: Vec<usize> = (0..source.test.len()).collect();
    if sizes.train + sizes.valid > train_pool.len() || sizes.test > test_pool.len() {
        return Err(Error::arg(format!(
            "split sizes {}/{}/{} exceed available {}/{} samples",
            sizes.train,
            sizes.valid,
            sizes.test,
            train_pool.len(),
            test_pool.len()
        )));
    }
    let permuted = if identity { source.clone() } else { source.permuted(perm)? };
    build_task(&permuted, &train_pool, &test_pool, sizes, seed, TaskDescriptor::Permutation { seed, identity })
}

/// Splits the label space at `split_point`: task A holds samples with label
/// `< split_point`, task B the rest. Both keep the full class count.
///
/// With `sizes = None` every eligible sample is used: one sixth of each
/// task's training-pool samples become validation data, and the whole
/// filtered test pool becomes the test split.
pub fn make_disjoint_tasks(source: &SourceData, split_point: usize, sizes: Option<SplitSizes>, seed: u64) -> Result<(Task, Task)> {
    let c = source.train.num_classes;
    if split_point == 0 || split_point >= c {
        return Err(Error::arg(format!("split point {split_point} must lie strictly inside (0, {c})")));
    }
    let pick = |ds: &RawDataset, lower: bool| -> Vec<usize> {
        (0..ds.len()).filter(|&i| (ds.labels[i] < split_point) == lower).collect()
    };
    let make = |lower: bool, salt: &str| -> Result<Task> {
        let train_pool = pick(&source.train, lower);
        let test_pool = pick(&source.test, lower);
        let sizes = sizes.unwrap_or_else(|| {
            let valid = train_pool.len() / 6;
            SplitSizes {
                train: train_pool.len() - valid,
                valid,
                test: test_pool.len(),
            }
        });
        let labels = if lower { (0..split_point).collect() } else { (split_point..c).collect() };
        let task_seed = Rng::new(seed).derive(salt).next_u64();
        build_task(source, &train_pool, &test_pool, sizes, task_seed, TaskDescriptor::Disjoint { labels, seed })
    };
    Ok((make(true, "disjoint-a")?, make(false, "disjoint-b")?))
}

/// Random orthogonal `d × d` matrix (Gram–Schmidt on gaussian columns).
fn random_rotation(rng: &mut Rng, d: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for q in &cols {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= dot * qi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut m = Matrix::zeros(d, d);
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    m
}

/// `C` unit-variance gaussian clusters whose means have norm `separation`,
/// rotated by a seed-derived orthogonal map. Each split holds
/// `n_per_class` samples of every class, drawn independently.
pub fn make_synthetic_task(seed: u64, d: usize, c: usize, n_per_class: usize, separation: f64) -> Result<Task> {
    if c < 2 || d < c {
        return Err(Error::arg(format!("synthetic task needs 2 <= C <= d, got d={d}, C={c}")));
    }
    if n_per_class == 0 {
        return Err(Error::arg("n_per_class must be at least 1"));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::arg(format!("separation must be finite and >= 0, got {separation}")));
    }
    let root = Rng::new(seed);
    let rotation = random_rotation(&mut root.derive("rotation"), d);
    let split = |label: &str| -> Result<Batch> {
        let mut rng = root.derive(label);
        let n = n_per_class * c;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut z = vec![0.0; d];
        for _ in 0..n_per_class {
            for class in 0..c {
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk = rng.normal() + if k == class { separation } else { 0.0 };
                }
                for i in 0..d {
                    let row = rotation.row(i);
                    data.push(row.iter().zip(&z).fold(0.0, |acc, (r, v)| acc + r * v));
                }
                labels.push(class);
            }
        }
        Batch::new(Matrix::from_vec(n, d, data)?, labels, c)
    };
    Ok(Task {
        train: split("train")?,
        valid: split("valid")?,
        test: split("test")?,
        descriptor: TaskDescriptor::Synthetic { seed, separation },
    })
}
