//! Synthetic domain-shift datasets, CSV ingestion, per-sample
//! standardization, and the two-mini-batch feeding rule: every training
//! iteration draws one source batch and one target batch from independently
//! shuffled streams.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    Target,
}

/// Feature matrix with optional one-hot labels and a domain tag. Target
/// labels, when present, are for evaluation only; the trainer never reads
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Option<Tensor>,
    pub domain: DomainTag,
    pub name: String,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Option<Tensor>,
        domain: DomainTag,
        name: impl Into<String>,
    ) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::invalid("dataset", "features must be a matrix"));
        }
        if let Some(l) = &labels {
            if l.rows() != features.rows() {
                return Err(Error::shape("dataset labels", &[features.rows()], &[l.rows()]));
            }
            for i in 0..l.rows() {
                let row = l.row(i);
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::invalid(
                        "dataset",
                        format!("label row {i} is not one-hot"),
                    ));
                }
            }
        }
        Ok(Dataset {
            features,
            labels,
            domain,
            name: name.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn k(&self) -> Option<usize> {
        self.labels.as_ref().map(Tensor::cols)
    }

    /// Class index per row, when labeled.
    pub fn label_indices(&self) -> Option<Vec<usize>> {
        let l = self.labels.as_ref()?;
        Some(
            (0..l.rows())
                .map(|i| l.row(i).iter().position(|&v| v == 1.0).unwrap())
                .collect(),
        )
    }

    /// Copy of this dataset with the labels dropped (what the trainer sees
    /// of a target dataset).
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            features: self.features.clone(),
            labels: None,
            domain: self.domain,
            name: self.name.clone(),
        }
    }

    pub fn class_counts(&self) -> Option<Vec<usize>> {
        let idx = self.label_indices()?;
        let k = self.k().unwrap();
        let mut counts = vec![0; k];
        for i in idx {
            counts[i] += 1;
        }
        Some(counts)
    }
}

fn one_hot_matrix(indices: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![indices.len(), k]);
    for (i, &j) in indices.iter().enumerate() {
        t.data_mut()[i * k + j] = 1.0;
    }
    t
}

/// Two interleaved half-circles (K=2, d=2): class 0 on the upper unit
/// half-circle, class 1 on the lower one shifted to interleave. Class sizes
/// are balanced within one sample. Positions are evenly spaced on the arcs;
/// `noise_std` adds seeded Gaussian noise.
pub fn gen_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid("gen_moons", "n must be at least 2"));
    }
    if noise_std < 0.0 {
        return Err(Error::invalid("gen_moons", "noise_std must be >= 0"));
    }
    let n0 = n - n / 2;
    let n1 = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n0 {
        let t = std::f64::consts::PI * i as f64 / (n0 - 1).max(1) as f64;
        rows.push(vec![t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n1 {
        let t = std::f64::consts::PI * i as f64 / (n1 - 1).max(1) as f64;
        rows.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise_std > 0.0 {
        for row in &mut rows {
            for v in row {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *v += noise_std * eps;
            }
        }
    }
    Dataset::new(
        Tensor::from_rows(&rows)?,
        Some(one_hot_matrix(&labels, 2)),
        DomainTag::Source,
        "moons",
    )
}

/// Helmert-basis coordinates of K regular-simplex vertices with unit
/// pairwise distance sqrt(2), living in K-1 dimensions.
fn simplex_vertices(k: usize) -> Vec<Vec<f64>> {
    // Row j of the Helmert matrix (orthonormal basis of the hyperplane
    // orthogonal to the all-ones vector) applied to each basis vector e_i.
    let mut verts = vec![vec![0.0; k - 1]; k];
    for j in 1..k {
        let denom = (j as f64 * (j + 1) as f64).sqrt();
        for (i, vert) in verts.iter_mut().enumerate() {
            let h = if i < j {
                1.0 / denom
            } else if i == j {
                -(j as f64) / denom
            } else {
                0.0
            };
            vert[j - 1] = h;
        }
    }
    verts
}

/// K unit-variance Gaussian clusters whose means sit on a regular simplex
/// with pairwise distance `separation`. Requires `d >= K - 1`.
pub fn gen_blobs(n: usize, k: usize, d: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n < k || k < 2 {
        return Err(Error::invalid("gen_blobs", "need n >= K >= 2"));
    }
    if !(separation > 0.0) {
        return Err(Error::invalid("gen_blobs", "separation must be > 0"));
    }
    if d < k - 1 {
        return Err(Error::invalid(
            "gen_blobs",
            format!("d = {d} cannot host a {k}-vertex simplex (need d >= K-1)"),
        ));
    }
    let verts = simplex_vertices(k);
    let scale = separation / 2f64.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let mut row = vec![0.0; d];
        for (j, &c) in verts[class].iter().enumerate() {
            row[j] = c * scale;
        }
        for v in &mut row {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v += eps;
        }
        rows.push(row);
        labels.push(class);
    }
    Dataset::new(
        Tensor::from_rows(&rows)?,
        Some(one_hot_matrix(&labels, k)),
        DomainTag::Source,
        "blobs",
    )
}

/// Domain-shift specification: rotate (d=2 only), scale per axis, translate,
/// add feature noise, and optionally permute the label classes. Applied in
/// that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub rotation_radians: f64,
    pub translation: Vec<f64>,
    pub scale: Vec<f64>,
    /// `permutation[old_class] = new_class`; must be a bijection.
    pub label_permutation: Option<Vec<usize>>,
    pub feature_noise_std: f64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec {
            rotation_radians: 0.0,
            translation: Vec::new(),
            scale: Vec::new(),
            label_permutation: None,
            feature_noise_std: 0.0,
        }
    }

    pub fn rotation(radians: f64) -> Self {
        ShiftSpec {
            rotation_radians: radians,
            ..ShiftSpec::identity()
        }
    }

    pub fn validate(&self, d: usize, k: Option<usize>) -> Result<()> {
        if self.rotation_radians != 0.0 && d != 2 {
            return Err(Error::invalid(
                "shift",
                "rotation is defined for 2-d features only",
            ));
        }
        if !self.translation.is_empty() && self.translation.len() != d {
            return Err(Error::shape("shift translation", &[d], &[self.translation.len()]));
        }
        if !self.scale.is_empty() {
            if self.scale.len() != d {
                return Err(Error::shape("shift scale", &[d], &[self.scale.len()]));
            }
            if self.scale.iter().any(|&s| s == 0.0) {
                return Err(Error::invalid("shift", "scales must be nonzero"));
            }
        }
        if self.feature_noise_std < 0.0 {
            return Err(Error::invalid("shift", "noise std must be >= 0"));
        }
        if let Some(perm) = &self.label_permutation {
            let k = k.ok_or_else(|| {
                Error::invalid("shift", "label permutation requires a labeled dataset")
            })?;
            let mut seen = vec![false; k];
            if perm.len() != k {
                return Err(Error::shape("shift permutation", &[k], &[perm.len()]));
            }
            for &p in perm {
                if p >= k || seen[p] {
                    return Err(Error::invalid("shift", "permutation is not a bijection"));
                }
                seen[p] = true;
            }
        }
        Ok(())
    }
}

/// Produce the shifted target-domain version of a dataset.
pub fn apply_shift(ds: &Dataset, spec: &ShiftSpec, seed: u64) -> Result<Dataset> {
    spec.validate(ds.d(), ds.k())?;
    let (n, d) = (ds.n(), ds.d());
    let mut feats = ds.features.clone();
    if spec.rotation_radians != 0.0 {
        let (sin, cos) = spec.rotation_radians.sin_cos();
        for i in 0..n {
            let x = feats.data()[i * 2];
            let y = feats.data()[i * 2 + 1];
            feats.data_mut()[i * 2] = cos * x - sin * y;
            feats.data_mut()[i * 2 + 1] = sin * x + cos * y;
        }
    }
    if !spec.scale.is_empty() {
        for i in 0..n {
            for (j, &s) in spec.scale.iter().enumerate() {
                feats.data_mut()[i * d + j] *= s;
            }
        }
    }
    if !spec.translation.is_empty() {
        for i in 0..n {
            for (j, &t) in spec.translation.iter().enumerate() {
                feats.data_mut()[i * d + j] += t;
            }
        }
    }
    if spec.feature_noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in feats.data_mut() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v += spec.feature_noise_std * eps;
        }
    }
    let labels = match (&ds.labels, &spec.label_permutation) {
        (Some(l), Some(perm)) => {
            let k = l.cols();
            let mut out = Tensor::zeros(vec![n, k]);
            for i in 0..n {
                let old = l.row(i).iter().position(|&v| v == 1.0).unwrap();
                out.data_mut()[i * k + perm[old]] = 1.0;
            }
            Some(out)
        }
        (l, _) => l.clone(),
    };
    Dataset::new(feats, labels, DomainTag::Target, format!("{}-shifted", ds.name))
}

/// Per-sample standardization: each row is shifted and scaled to zero mean
/// and unit (population) variance across its features. Rows with variance
/// below 1e-12 map to all-zeros.
pub fn standardize(ds: &Dataset) -> Result<Dataset> {
    let (n, d) = (ds.n(), ds.d());
    if d < 2 {
        return Err(Error::invalid("standardize", "needs at least 2 features"));
    }
    let mut feats = ds.features.clone();
    for i in 0..n {
        let row = &mut feats.data_mut()[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        if var < 1e-12 {
            row.fill(0.0);
        } else {
            let inv = 1.0 / var.sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
    }
    Dataset::new(feats, ds.labels.clone(), ds.domain, ds.name.clone())
}

/// One side of a training pair.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Option<Tensor>,
    pub indices: Vec<usize>,
}

/// Infinite shuffled index stream over one dataset: a fresh seeded
/// permutation per epoch, cycling forever.
struct IndexStream {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl IndexStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = IndexStream {
            n,
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
            seed,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed,
            &format!("epoch{}", self.epoch),
        ));
        self.order.shuffle(&mut rng);
        self.pos = 0;
        self.epoch += 1;
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.n {
            self.reshuffle();
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Paired batch iterator over two domains. Each yielded pair has exactly
/// `batch_size` rows per side; within one domain, any `n` consecutive draws
/// form a permutation of the dataset (the shorter dataset cycles).
pub struct PairedBatches<'a> {
    src: &'a Dataset,
    tgt: &'a Dataset,
    batch_size: usize,
    src_stream: IndexStream,
    tgt_stream: IndexStream,
}

pub fn batches<'a>(
    src: &'a Dataset,
    tgt: &'a Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<PairedBatches<'a>> {
    if batch_size == 0 {
        return Err(Error::invalid("batches", "batch_size must be >= 1"));
    }
    if src.n() == 0 || tgt.n() == 0 {
        return Err(Error::invalid("batches", "empty dataset"));
    }
    Ok(PairedBatches {
        src,
        tgt,
        batch_size,
        src_stream: IndexStream::new(src.n(), derive_seed(seed, "src")),
        tgt_stream: IndexStream::new(tgt.n(), derive_seed(seed, "tgt")),
    })
}

fn gather(ds: &Dataset, indices: &[usize]) -> Batch {
    let d = ds.d();
    let mut x = Tensor::zeros(vec![indices.len(), d]);
    for (row, &i) in indices.iter().enumerate() {
        x.data_mut()[row * d..(row + 1) * d].copy_from_slice(ds.features.row(i));
    }
    let y = ds.labels.as_ref().map(|l| {
        let k = l.cols();
        let mut y = Tensor::zeros(vec![indices.len(), k]);
        for (row, &i) in indices.iter().enumerate() {
            y.data_mut()[row * k..(row + 1) * k].copy_from_slice(l.row(i));
        }
        y
    });
    Batch {
        x,
        y,
        indices: indices.to_vec(),
    }
}

impl Iterator for PairedBatches<'_> {
    type Item = (Batch, Batch);

    fn next(&mut self) -> Option<Self::Item> {
        let src_idx: Vec<usize> = (0..self.batch_size)
            .map(|_| self.src_stream.next_index())
            .collect();
        let tgt_idx: Vec<usize> = (0..self.batch_size)
            .map(|_| self.tgt_stream.next_index())
            .collect();
        Some((gather(self.src, &src_idx), gather(self.tgt, &tgt_idx)))
    }
}

// ---------------------------------------------------------------------------
// CSV: plain numeric rows, optional integer class index in the last column.
// Values serialize with 17 significant digits, which round-trips f64 exactly.
// ---------------------------------------------------------------------------

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let labels = ds.label_indices();
    for i in 0..ds.n() {
        let mut first = true;
        for v in ds.features.row(i) {
            if !first {
                out.push(',');
            }
            write!(out, "{:.16e}", v).unwrap();
            first = false;
        }
        if let Some(idx) = &labels {
            write!(out, ",{}", idx[i]).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_csv(path: &Path, has_labels: bool, k: usize, domain: DomainTag) -> Result<Dataset> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let feat_count = if has_labels { cells.len() - 1 } else { cells.len() };
        if has_labels && cells.len() < 2 {
            return Err(Error::Parse {
                line: line_num,
                message: "expected at least one feature and a label".into(),
            });
        }
        match width {
            None => width = Some(feat_count),
            Some(w) if w != feat_count => {
                return Err(Error::Parse {
                    line: line_num,
                    message: format!("expected {w} feature columns, got {feat_count}"),
                })
            }
            _ => {}
        }
        let mut row = Vec::with_capacity(feat_count);
        for cell in &cells[..feat_count] {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line: line_num,
                message: format!("not a number: `{}`", cell.trim()),
            })?;
            row.push(v);
        }
        if has_labels {
            let cell = cells[feat_count].trim();
            let label: usize = cell.parse().map_err(|_| Error::Parse {
                line: line_num,
                message: format!("not a class index: `{cell}`"),
            })?;
            if label >= k {
                return Err(Error::Parse {
                    line: line_num,
                    message: format!("label {label} out of range for K = {k}"),
                });
            }
            labels.push(label);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "no data rows".into(),
        });
    }
    let features = Tensor::from_rows(&rows)?;
    let labels = has_labels.then(|| one_hot_matrix(&labels, k));
    Dataset::new(
        features,
        labels,
        domain,
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
    )
}

/// Median nearest-neighbor distance of the rows; the data-relative scale
/// used to resolve an automatic VAT radius.
pub fn median_nn_distance(features: &Tensor) -> f64 {
    let (n, d) = (features.rows(), features.cols());
    if n < 2 {
        return 0.0;
    }
    let mut nn = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = f64::INFINITY;
        let ri = features.row(i);
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut dist2 = 0.0;
            let rj = features.row(j);
            for c in 0..d {
                let diff = ri[c] - rj[c];
                dist2 += diff * diff;
            }
            if dist2 < best {
                best = dist2;
            }
        }
        nn.push(best.sqrt());
    }
    nn.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Lower median for even counts; any fixed convention works here.
    nn[(n - 1) / 2]
}

/// Seeded Bernoulli dropout masks (inverted scaling), one per encoder layer.
pub fn dropout_masks_for_step(
    widths: &[usize],
    batch: usize,
    dropout: f64,
    seed: u64,
) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - dropout;
    widths
        .iter()
        .map(|&w| {
            let data = (0..batch * w)
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            Tensor::from_parts(vec![batch, w], data)
        })
        .collect()
}
