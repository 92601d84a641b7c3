//! Datasets: synthetic source/target task pairs, CSV ingestion and batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Input("dataset has no samples".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Input(format!("label {y} outside [0, {num_classes})")));
        }
        if !features.as_slice().iter().all(|x| x.is_finite()) {
            return Err(Error::Input("features must be finite".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
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

    /// Features and labels of the listed rows.
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Train and eval splits of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Parameters of the synthetic transfer task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskParams {
    pub feature_dim: usize,
    pub source_classes: usize,
    pub target_classes: usize,
    pub samples_per_class: usize,
    /// Rotation of all class means in the `(x0, x1)` plane, radians.
    pub theta: f64,
    /// Standard deviation of the isotropic Gaussian noise.
    pub noise: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            source_classes: 6,
            target_classes: 3,
            samples_per_class: 200,
            theta: 0.3,
            noise: 0.5,
        }
    }
}

/// Norm of every source class mean.
pub const MEAN_RADIUS: f64 = 2.0;

/// A pretraining task and a related transfer task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPair {
    pub source: TaskData,
    pub target: TaskData,
    pub seed: u64,
    pub theta: f64,
    /// `class_map[k]` is the target class of source class `k`.
    pub class_map: Vec<usize>,
    pub source_means: Vec<Vec<f64>>,
}

fn blob_samples(
    means: &[Vec<f64>],
    labels_of_cluster: &[usize],
    clusters_per_class: &[Vec<usize>],
    per_class: usize,
    noise: f64,
    split: Split,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let d = means[0].len();
    let mut features = Vec::with_capacity(num_classes * per_class * d);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for clusters in clusters_per_class {
        for j in 0..per_class {
            let k = clusters[j % clusters.len()];
            for &m in &means[k] {
                features.push(m + noise * rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(labels_of_cluster[k]);
        }
    }
    Dataset::new(Matrix::from_vec(labels.len(), d, features)?, labels, num_classes, split)
}

/// Source classes are Gaussian blobs around seeded points on a sphere of
/// radius [`MEAN_RADIUS`]. Target class `t` merges source classes
/// `t*g .. (t+1)*g` (`g = C_src / C_tgt`) and every mean is rotated by
/// `theta` in the `(x0, x1)` plane. Each class of each split gets
/// `samples_per_class` rows, cycling through its merged clusters.
pub fn gen_transfer_pair(seed: u64, p: &TaskParams) -> Result<TaskPair> {
    if p.feature_dim < 2 {
        return Err(Error::Input(format!("feature_dim must be >= 2, got {}", p.feature_dim)));
    }
    if p.target_classes == 0 || p.source_classes == 0 || p.source_classes % p.target_classes != 0 {
        return Err(Error::Input(format!(
            "source classes ({}) must be a positive multiple of target classes ({})",
            p.source_classes, p.target_classes
        )));
    }
    if !(p.noise > 0.0 && p.noise.is_finite()) {
        return Err(Error::Input(format!("noise must be positive, got {}", p.noise)));
    }
    if p.samples_per_class == 0 {
        return Err(Error::Input("samples_per_class must be positive".into()));
    }
    if !p.theta.is_finite() {
        return Err(Error::Input("theta must be finite".into()));
    }

    let d = p.feature_dim;
    let group = p.source_classes / p.target_classes;
    let mut mrng = stream(seed, Purpose::ClassMeans, 0, 0);
    let source_means: Vec<Vec<f64>> = (0..p.source_classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| mrng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm * MEAN_RADIUS).collect()
        })
        .collect();
    let (s, c) = p.theta.sin_cos();
    let target_means: Vec<Vec<f64>> = source_means
        .iter()
        .map(|m| {
            let mut r = m.clone();
            r[0] = c * m[0] - s * m[1];
            r[1] = s * m[0] + c * m[1];
            r
        })
        .collect();
    let class_map: Vec<usize> = (0..p.source_classes).map(|k| k / group).collect();
    let identity: Vec<usize> = (0..p.source_classes).collect();
    let src_clusters: Vec<Vec<usize>> = (0..p.source_classes).map(|k| vec![k]).collect();
    let tgt_clusters: Vec<Vec<usize>> = (0..p.target_classes)
        .map(|t| (t * group..(t + 1) * group).collect())
        .collect();

    let make = |slot: u64, means: &[Vec<f64>], map: &[usize], clusters: &[Vec<usize>], classes: usize, split: Split| {
        let mut rng = stream(seed, Purpose::SampleNoise, slot, 0);
        blob_samples(means, map, clusters, p.samples_per_class, p.noise, split, classes, &mut rng)
    };
    let source = TaskData {
        train: make(0, &source_means, &identity, &src_clusters, p.source_classes, Split::Train)?,
        eval: make(1, &source_means, &identity, &src_clusters, p.source_classes, Split::Eval)?,
    };
    let target = TaskData {
        train: make(2, &target_means, &class_map, &tgt_clusters, p.target_classes, Split::Train)?,
        eval: make(3, &target_means, &class_map, &tgt_clusters, p.target_classes, Split::Eval)?,
    };
    Ok(TaskPair {
        source,
        target,
        seed,
        theta: p.theta,
        class_map,
        source_means,
    })
}

/// Which CSV column holds the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

/// Reads a comma-separated file of numeric features and one integer label
/// column. A header is assumed when the first cell of the first row does
/// not parse as a number. Rows in error messages are 1-based file lines.
pub fn load_csv(path: &Path, label: &LabelColumn, split: Split) -> Result<Dataset> {
    let perr = |row: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => perr(0, format!("{other:?}")),
        })?;
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        records.push(rec.map_err(|e| perr(i + 1, e.to_string()))?);
    }
    let first = records
        .first()
        .ok_or_else(|| Error::Input(format!("{} is empty", path.display())))?;
    let has_header = first
        .get(0)
        .is_some_and(|cell| cell.trim().parse::<f64>().is_err());
    let width = first.len();
    let label_idx = match label {
        LabelColumn::Index(i) if *i < width => *i,
        LabelColumn::Index(i) => return Err(perr(1, format!("label column {i} out of range ({width} columns)"))),
        LabelColumn::Name(name) => {
            if !has_header {
                return Err(perr(1, format!("label column {name:?} requested but file has no header")));
            }
            first
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| perr(1, format!("no column named {name:?}")))?
        }
    };
    let body = if has_header { &records[1..] } else { &records[..] };
    if body.is_empty() {
        return Err(Error::Input(format!("{} has no data rows", path.display())));
    }
    let offset = if has_header { 2 } else { 1 };
    let mut features = Vec::with_capacity(body.len() * (width - 1));
    let mut labels = Vec::with_capacity(body.len());
    for (i, rec) in body.iter().enumerate() {
        let row = i + offset;
        if rec.len() != width {
            return Err(perr(row, format!("expected {width} fields, found {}", rec.len())));
        }
        for (c, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if c == label_idx {
                let y: i64 = cell
                    .parse()
                    .map_err(|_| perr(row, format!("label {cell:?} is not an integer")))?;
                if y < 0 {
                    return Err(perr(row, format!("negative label {y}")));
                }
                labels.push(y as usize);
            } else {
                let x: f64 = cell
                    .parse()
                    .map_err(|_| perr(row, format!("column {c}: {cell:?} is not a number")))?;
                if !x.is_finite() {
                    return Err(perr(row, format!("column {c}: non-finite value")));
                }
                features.push(x);
            }
        }
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Matrix::from_vec(labels.len(), width - 1, features)?, labels, classes, split)
}

fn batches_from(n: usize, batch_size: usize, mut rng: ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Input("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Shared permutation for `(seed, epoch)`, cut into batches; the last batch
/// may be short.
pub fn make_batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    batches_from(ds.len(), batch_size, stream(seed, Purpose::Shuffle, 0, epoch as u64))
}

/// Like [`make_batches`] but from a stream private to ensemble member `model`.
pub fn make_model_batches(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    model: usize,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    batches_from(
        ds.len(),
        batch_size,
        stream(seed, Purpose::Shuffle, model as u64 + 1, epoch as u64),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tiny(n: usize) -> Dataset {
        Dataset::new(Matrix::zeros(n, 1), vec![0; n], 1, Split::Train).unwrap()
    }

    #[test]
    fn batch_sizes_keep_tail() {
        let b = make_batches(&tiny(5), 2, 0, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(make_batches(&tiny(5), 0, 0, 0).is_err());
    }

    #[test]
    fn batches_depend_on_seed_and_epoch() {
        let ds = tiny(10);
        assert_eq!(make_batches(&ds, 3, 0, 4).unwrap(), make_batches(&ds, 3, 0, 4).unwrap());
        assert_ne!(make_batches(&ds, 3, 0, 0).unwrap(), make_batches(&ds, 3, 0, 1).unwrap());
        assert_ne!(make_batches(&ds, 3, 0, 0).unwrap(), make_model_batches(&ds, 3, 0, 0, 0).unwrap());
    }

    #[test]
    fn generator_is_deterministic() {
        let p = TaskParams::default();
        assert_eq!(gen_transfer_pair(5, &p).unwrap(), gen_transfer_pair(5, &p).unwrap());
        assert_ne!(gen_transfer_pair(5, &p).unwrap(), gen_transfer_pair(6, &p).unwrap());
    }

    #[test]
    fn generator_shapes() {
        let p = TaskParams::default();
        let t = gen_transfer_pair(1, &p).unwrap();
        assert_eq!(t.source.train.len(), 6 * 200);
        assert_eq!(t.target.train.len(), 3 * 200);
        assert_eq!(t.target.eval.num_classes(), 3);
        assert_eq!(t.class_map, vec![0, 0, 1, 1, 2, 2]);
        for ds in [&t.source.train, &t.source.eval, &t.target.train, &t.target.eval] {
            assert_eq!(ds.dim(), 8);
        }
    }

    #[test]
    fn generator_rejects_bad_args() {
        let bad = TaskParams {
            source_classes: 5,
            ..TaskParams::default()
        };
        assert!(matches!(gen_transfer_pair(0, &bad), Err(Error::Input(_))));
        let bad = TaskParams {
            noise: 0.0,
            ..TaskParams::default()
        };
        assert!(gen_transfer_pair(0, &bad).is_err());
        let bad = TaskParams {
            feature_dim: 1,
            ..TaskParams::default()
        };
        assert!(gen_transfer_pair(0, &bad).is_err());
    }

    #[test]
    fn zero_noise_zero_rotation_is_solved_by_class_map() {
        let p = TaskParams {
            theta: 0.0,
            noise: 1e-9,
            samples_per_class: 20,
            ..TaskParams::default()
        };
        let t = gen_transfer_pair(3, &p).unwrap();
        let eval = &t.target.eval;
        let mut correct = 0;
        for r in 0..eval.len() {
            let x = eval.features().row(r);
            let nearest = (0..t.source_means.len())
                .min_by(|&a, &b| {
                    let da: f64 = t.source_means[a].iter().zip(x).map(|(m, v)| (m - v).powi(2)).sum();
                    let db: f64 = t.source_means[b].iter().zip(x).map(|(m, v)| (m - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            correct += usize::from(t.class_map[nearest] == eval.labels()[r]);
        }
        assert_eq!(correct, eval.len());
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_with_and_without_header() {
        let f = write("0.5,1.0,0\n-1,2,1\n3,4,0\n");
        let ds = load_csv(f.path(), &LabelColumn::Index(2), Split::Train).unwrap();
        assert_eq!((ds.len(), ds.num_classes(), ds.dim()), (3, 2, 2));
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.features().row(1), &[-1.0, 2.0]);

        let f = write("label,a,b\n1,0.5,1.0\n0,-1,2\n");
        let ds = load_csv(f.path(), &LabelColumn::Name("label".into()), Split::Eval).unwrap();
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.features().row(0), &[0.5, 1.0]);
    }

    #[test]
    fn csv_errors_name_the_row() {
        let f = write("");
        assert!(matches!(load_csv(f.path(), &LabelColumn::Index(0), Split::Train), Err(Error::Input(_))));

        let f = write("1,2,0\n1,abc,1\n");
        match load_csv(f.path(), &LabelColumn::Index(2), Split::Train) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
        let f = write("x,y\n1,0\n2\n");
        match load_csv(f.path(), &LabelColumn::Name("y".into()), Split::Train) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        let f = write("1,-1\n");
        assert!(matches!(load_csv(f.path(), &LabelColumn::Index(1), Split::Train), Err(Error::Parse { row: 1, .. })));
    }
}
