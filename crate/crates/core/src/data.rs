//! Synthetic domain-shifted datasets, CSV persistence and mini-batching.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radius of the circle the class means sit on.
pub const CLUSTER_RADIUS: f64 = 3.0;
/// Per-dimension standard deviation of every class cluster.
pub const CLUSTER_STD: f64 = 0.4;

/// Label value carried by target rows without an accepted pseudo-label.
pub const SENTINEL: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
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

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub class_count: usize,
}

impl DomainDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        domain: Domain,
        class_count: usize,
    ) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            domain,
            class_count,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Parameter(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if self.labels.is_empty() {
            return Err(Error::Parameter("dataset must contain at least one row".into()));
        }
        if self.labels.len() != self.features.nrows() {
            return Err(Error::Parameter(format!(
                "{} labels for {} feature rows",
                self.labels.len(),
                self.features.nrows()
            )));
        }
        for (row, &label) in self.labels.iter().enumerate() {
            if label >= self.class_count {
                return Err(Error::Format {
                    row,
                    message: format!("label {label} >= class count {}", self.class_count),
                });
            }
        }
        for (row, values) in self.features.rows().into_iter().enumerate() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format {
                    row,
                    message: "non-finite feature value".into(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Rotation,
    Affine,
    ClassConditionalOffset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    /// Radians for rotations, unitless otherwise.
    pub magnitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn rotation(radians: f64, noise_std: f64, seed: u64) -> Self {
        Self {
            kind: ShiftKind::Rotation,
            magnitude: radians,
            noise_std,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.magnitude.is_finite() {
            return Err(Error::Parameter("shift magnitude must be finite".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Shape of the clean source distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Geometry {
    /// `C` isotropic Gaussian clusters with means evenly spaced on a circle.
    #[default]
    Clusters,
    /// One isotropic Gaussian cluster per class centred on a scaled basis
    /// vector, so every pair of means is equally far apart. Needs `d >= C`.
    Orthogonal,
    /// Two interleaving half circles (two classes only) with isotropic
    /// Gaussian jitter of the given std. The upper moon has unit radius;
    /// the lower moon has radius `lower_radius`.
    TwoMoons {
        jitter: f64,
        #[serde(default = "unit_radius")]
        lower_radius: f64,
    },
}

fn unit_radius() -> f64 {
    1.0
}

impl Geometry {
    /// Symmetric two moons of unit radius.
    pub fn two_moons(jitter: f64) -> Self {
        Geometry::TwoMoons { jitter, lower_radius: 1.0 }
    }
}

/// Source/target pair using the default cluster geometry.
pub fn generate_pair(
    spec: &ShiftSpec,
    n_per_class: usize,
    class_count: usize,
    dim: usize,
) -> Result<(DomainDataset, DomainDataset)> {
    generate_pair_with(Geometry::Clusters, spec, n_per_class, class_count, dim)
}

pub fn generate_pair_with(
    geometry: Geometry,
    spec: &ShiftSpec,
    n_per_class: usize,
    class_count: usize,
    dim: usize,
) -> Result<(DomainDataset, DomainDataset)> {
    spec.validate()?;
    if class_count < 2 || dim < 2 || n_per_class < 1 {
        return Err(Error::Parameter(format!(
            "need C >= 2, d >= 2, n_per_class >= 1 (got C={class_count}, d={dim}, n={n_per_class})"
        )));
    }
    if let Geometry::TwoMoons { jitter, lower_radius } = geometry {
        if class_count != 2 {
            return Err(Error::Parameter("two-moons geometry has exactly 2 classes".into()));
        }
        if !(jitter >= 0.0 && jitter.is_finite()) {
            return Err(Error::Parameter(format!("jitter must be >= 0, got {jitter}")));
        }
        if !(lower_radius > 0.0 && lower_radius.is_finite()) {
            return Err(Error::Parameter(format!("lower_radius must be > 0, got {lower_radius}")));
        }
    }

    if geometry == Geometry::Orthogonal && dim < class_count {
        return Err(Error::Parameter(format!(
            "orthogonal geometry needs d >= C (got d={dim}, C={class_count})"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = n_per_class * class_count;
    let mut source = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..class_count {
        for i in 0..n_per_class {
            let row = c * n_per_class + i;
            let mut x = source.row_mut(row);
            match geometry {
                Geometry::Clusters => {
                    let angle = 2.0 * std::f64::consts::PI * c as f64 / class_count as f64;
                    x[0] = CLUSTER_RADIUS * angle.cos();
                    x[1] = CLUSTER_RADIUS * angle.sin();
                    for v in x.iter_mut() {
                        *v += CLUSTER_STD * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                Geometry::Orthogonal => {
                    x[c] = CLUSTER_RADIUS;
                    for v in x.iter_mut() {
                        *v += CLUSTER_STD * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                Geometry::TwoMoons { jitter, lower_radius } => {
                    let t = std::f64::consts::PI * rng.random::<f64>();
                    let (px, py) = if c == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - lower_radius * t.cos(), 0.5 - lower_radius * t.sin())
                    };
                    x[0] = px - 0.5;
                    x[1] = py - 0.25;
                    for v in x.iter_mut() {
                        *v += jitter * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            labels.push(c);
        }
    }

    let mut target = apply_shift(spec, &source, &labels, class_count, &mut rng);
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
        target.mapv_inplace(|v| v + noise.sample(&mut rng));
    }

    let source = DomainDataset::new(source, labels.clone(), Domain::Source, class_count)?;
    let target = DomainDataset::new(target, labels, Domain::Target, class_count)?;
    Ok((source, target))
}

fn apply_shift(
    spec: &ShiftSpec,
    source: &Array2<f64>,
    labels: &[usize],
    class_count: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let m = spec.magnitude;
    let mut target = source.clone();
    match spec.kind {
        ShiftKind::Rotation => {
            let (sin, cos) = m.sin_cos();
            for mut row in target.rows_mut() {
                let (x, y) = (row[0], row[1]);
                row[0] = cos * x - sin * y;
                row[1] = sin * x + cos * y;
            }
        }
        ShiftKind::Affine => {
            // x' = (I + m·A) x + m·b with A, b drawn once from N(0, 1/d).
            let d = source.ncols();
            let scale = 1.0 / (d as f64).sqrt();
            let a = Array2::from_shape_fn((d, d), |_| scale * rng.sample::<f64, _>(StandardNormal));
            let b: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let mixed = source.dot(&a.t());
            for (mut row, mix) in target.rows_mut().into_iter().zip(mixed.rows()) {
                for j in 0..d {
                    row[j] += m * (mix[j] + b[j]);
                }
            }
        }
        ShiftKind::ClassConditionalOffset => {
            let d = source.ncols();
            let directions: Vec<Vec<f64>> = (0..class_count)
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.into_iter().map(|x| x / norm).collect()
                })
                .collect();
            for (mut row, &label) in target.rows_mut().into_iter().zip(labels) {
                for (v, u) in row.iter_mut().zip(&directions[label]) {
                    *v += m * u;
                }
            }
        }
    }
    target
}

pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    header.push("domain".into());
    writer.write_record(&header).map_err(|e| csv_error(path, e))?;
    let mut record = Vec::with_capacity(ds.dim() + 2);
    for (row, &label) in ds.features.rows().into_iter().zip(&ds.labels) {
        record.clear();
        // `{:?}` prints the shortest representation that round-trips exactly.
        record.extend(row.iter().map(|v| format!("{v:?}")));
        record.push(label.to_string());
        record.push(ds.domain.as_str().to_string());
        writer.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a dataset CSV. With `class_count = None` the class count is inferred
/// as `max(label) + 1` (at least 2).
pub fn load_dataset(path: &Path, class_count: Option<usize>) -> Result<DomainDataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let cols = header.len();
    if cols < 3 {
        return Err(Error::Format {
            row: 0,
            message: "header must be f0,...,f{d-1},label,domain".into(),
        });
    }
    let dim = cols - 2;
    for (j, name) in header.iter().take(dim).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Format {
                row: 0,
                message: format!("expected column f{j}, found {name:?}"),
            });
        }
    }
    if &header[dim] != "label" || &header[dim + 1] != "domain" {
        return Err(Error::Format {
            row: 0,
            message: "last two columns must be label,domain".into(),
        });
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut domain = None;
    for (i, record) in reader.records().enumerate() {
        // Row numbers count data rows from 1; the header is row 0.
        let row = i + 1;
        let record = record.map_err(|e| Error::Format {
            row,
            message: e.to_string(),
        })?;
        if record.len() != cols {
            return Err(Error::Format {
                row,
                message: format!("expected {cols} cells, found {}", record.len()),
            });
        }
        for cell in record.iter().take(dim) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Format {
                row,
                message: format!("non-numeric feature cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Format {
                    row,
                    message: format!("non-finite feature cell {cell:?}"),
                });
            }
            values.push(v);
        }
        let label_cell = record[dim].trim();
        let label: usize = label_cell.parse().map_err(|_| Error::Format {
            row,
            message: format!("invalid label {label_cell:?}"),
        })?;
        if let Some(c) = class_count {
            if label >= c {
                return Err(Error::Format {
                    row,
                    message: format!("label {label} out of range for {c} classes"),
                });
            }
        }
        labels.push(label);
        let d = match record[dim + 1].trim() {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => {
                return Err(Error::Format {
                    row,
                    message: format!("unknown domain {other:?}"),
                })
            }
        };
        match domain {
            None => domain = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Format {
                    row,
                    message: "mixed domains in one file".into(),
                })
            }
            _ => {}
        }
    }
    let Some(domain) = domain else {
        return Err(Error::Format {
            row: 1,
            message: "no data rows".into(),
        });
    };
    let n = labels.len();
    let class_count =
        class_count.unwrap_or_else(|| labels.iter().copied().max().map_or(2, |m| (m + 1).max(2)));
    let features = Array2::from_shape_vec((n, dim), values).expect("row lengths checked");
    DomainDataset::new(features, labels, domain, class_count)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            row: 0,
            message: format!("{other:?}"),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    /// True labels for source rows; pseudo-labels or [`SENTINEL`] for target.
    pub labels: Vec<i64>,
    /// Row indices into the dataset the batch was drawn from.
    pub indices: Vec<usize>,
    pub domain: Domain,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Partitions `ds` into batches of `batch_size` rows (the last may be
/// short). Target batches carry sentinel labels; the trainer substitutes
/// accepted pseudo-labels.
pub fn batches(ds: &DomainDataset, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    order
        .chunks(batch_size)
        .map(|idx| Batch {
            features: ds.features.select(Axis(0), idx),
            labels: match ds.domain {
                Domain::Source => idx.iter().map(|&i| ds.labels[i] as i64).collect(),
                Domain::Target => vec![SENTINEL; idx.len()],
            },
            indices: idx.to_vec(),
            domain: ds.domain,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_rotation_copies_source() {
        let spec = ShiftSpec::rotation(0.0, 0.0, 7);
        let (s, t) = generate_pair(&spec, 20, 3, 4).unwrap();
        assert_eq!(s.features, t.features);
        assert_eq!(s.labels, t.labels);
        assert_eq!(t.domain, Domain::Target);
    }

    #[test]
    fn quarter_turn_matches_rotation_matrix() {
        let spec = ShiftSpec::rotation(FRAC_PI_2, 0.0, 7);
        let (s, t) = generate_pair(&spec, 25, 4, 2).unwrap();
        let mut worst: f64 = 0.0;
        for (a, b) in s.features.rows().into_iter().zip(t.features.rows()) {
            // [0 -1; 1 0] · (x, y)
            worst = worst.max((b[0] - -a[1]).abs()).max((b[1] - a[0]).abs());
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ShiftSpec {
            kind: ShiftKind::Affine,
            magnitude: 0.3,
            noise_std: 0.1,
            seed: 11,
        };
        let a = generate_pair(&spec, 10, 3, 5).unwrap();
        let b = generate_pair(&spec, 10, 3, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_means_lie_on_circle() {
        let spec = ShiftSpec::rotation(0.0, 0.0, 3);
        let (s, _) = generate_pair(&spec, 4000, 4, 2).unwrap();
        for c in 0..4 {
            let rows: Vec<usize> = (0..s.len()).filter(|&i| s.labels[i] == c).collect();
            let m = s.features.select(Axis(0), &rows).mean_axis(Axis(0)).unwrap();
            let angle = 2.0 * std::f64::consts::PI * c as f64 / 4.0;
            assert!((m[0] - 3.0 * angle.cos()).abs() < 0.05);
            assert!((m[1] - 3.0 * angle.sin()).abs() < 0.05);
        }
    }

    #[test]
    fn class_offset_moves_each_class_rigidly() {
        let spec = ShiftSpec {
            kind: ShiftKind::ClassConditionalOffset,
            magnitude: 1.5,
            noise_std: 0.0,
            seed: 5,
        };
        let (s, t) = generate_pair(&spec, 10, 3, 3).unwrap();
        let shift0 = &t.features.row(0) - &s.features.row(0);
        let norm = shift0.dot(&shift0).sqrt();
        assert!((norm - 1.5).abs() < 1e-12);
        for i in 1..10 {
            let d = &t.features.row(i) - &s.features.row(i);
            assert!((&d - &shift0).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        let spec = ShiftSpec::rotation(0.1, 0.0, 1);
        assert!(matches!(generate_pair(&spec, 5, 1, 2), Err(Error::Parameter(_))));
        assert!(matches!(generate_pair(&spec, 5, 2, 1), Err(Error::Parameter(_))));
        assert!(matches!(generate_pair(&spec, 0, 2, 2), Err(Error::Parameter(_))));
        let bad = ShiftSpec::rotation(0.1, -1.0, 1);
        assert!(generate_pair(&bad, 5, 2, 2).is_err());
        assert!(generate_pair_with(Geometry::two_moons(0.1), &spec, 5, 3, 2).is_err());
    }

    #[test]
    fn orthogonal_means_are_equidistant() {
        let spec = ShiftSpec::rotation(0.0, 0.0, 3);
        let (s, _) = generate_pair_with(Geometry::Orthogonal, &spec, 400, 5, 6).unwrap();
        let means: Vec<Vec<f64>> = (0..5)
            .map(|c| {
                let rows: Vec<usize> = (0..s.len()).filter(|&i| s.labels[i] == c).collect();
                (0..6).map(|j| rows.iter().map(|&i| s.features[[i, j]]).sum::<f64>() / rows.len() as f64).collect()
            })
            .collect();
        for (c, m) in means.iter().enumerate() {
            for (j, v) in m.iter().enumerate() {
                let want = if j == c { CLUSTER_RADIUS } else { 0.0 };
                assert!((v - want).abs() < 0.1, "class {c} dim {j}: {v}");
            }
        }
        assert!(generate_pair_with(Geometry::Orthogonal, &spec, 5, 7, 6).is_err());
    }

    #[test]
    fn two_moons_has_two_balanced_classes() {
        let spec = ShiftSpec::rotation(0.0, 0.0, 2);
        let (s, _) = generate_pair_with(Geometry::two_moons(0.0), &spec, 50, 2, 2).unwrap();
        assert_eq!(s.labels.iter().filter(|&&l| l == 1).count(), 50);
        // Noise-free upper moon points lie on the unit circle around (-0.5, -0.25).
        for i in 0..50 {
            let (x, y) = (s.features[[i, 0]] + 0.5, s.features[[i, 1]] + 0.25);
            assert!((x * x + y * y - 1.0).abs() < 1e-12);
        }
        let g = Geometry::TwoMoons { jitter: 0.0, lower_radius: 0.5 };
        let (s, _) = generate_pair_with(g, &spec, 50, 2, 2).unwrap();
        for i in 50..100 {
            let (x, y) = (s.features[[i, 0]] - 0.5, s.features[[i, 1]] - 0.25);
            assert!((x * x + y * y - 0.25).abs() < 1e-12);
        }
        let bad = Geometry::TwoMoons { jitter: 0.1, lower_radius: 0.0 };
        assert!(generate_pair_with(bad, &spec, 5, 2, 2).is_err());
    }

    #[test]
    fn small_roundtrip() {
        let ds = DomainDataset::new(
            ndarray::array![[0.1, -2.5], [1.0 / 3.0, 1e-300], [7.0, 0.0]],
            vec![0, 1, 1],
            Domain::Source,
            2,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("f0,f1,label,domain\n"));
        assert_eq!(load_dataset(&path, Some(2)).unwrap(), ds);
    }

    #[test]
    fn out_of_range_label_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "f0,f1,label,domain\n0.0,1.0,0,source\n0.5,0.5,3,source\n").unwrap();
        match load_dataset(&path, Some(3)) {
            Err(Error::Format { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_and_bad_header_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "f0,f1,label,domain\n0.0,abc,0,source\n").unwrap();
        assert!(matches!(load_dataset(&path, None), Err(Error::Format { row: 1, .. })));
        std::fs::write(&path, "x,y,label,domain\n0.0,1.0,0,source\n").unwrap();
        assert!(matches!(load_dataset(&path, None), Err(Error::Format { row: 0, .. })));
        std::fs::write(&path, "f0,f1,label,domain\n0.0,1.0,C,source\n").unwrap();
        assert!(matches!(load_dataset(&path, None), Err(Error::Format { row: 1, .. })));
    }

    #[test]
    fn batch_sizes_follow_arithmetic() {
        let spec = ShiftSpec::rotation(0.0, 0.0, 1);
        let (s, _) = generate_pair(&spec, 5, 2, 2).unwrap();
        let sizes: Vec<usize> = batches(&s, 3, 9, true).iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let one = batches(&s, 10, 9, true);
        assert_eq!(one.len(), 1);
        let mut idx = one[0].indices.clone();
        idx.sort();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert_eq!(batches(&s, 3, 9, true), batches(&s, 3, 9, true));
        assert_ne!(batches(&s, 10, 9, true), batches(&s, 10, 10, true));
    }

    #[test]
    fn target_batches_carry_sentinels() {
        let spec = ShiftSpec::rotation(0.5, 0.0, 1);
        let (_, t) = generate_pair(&spec, 5, 2, 2).unwrap();
        for b in batches(&t, 4, 1, false) {
            assert!(b.labels.iter().all(|&l| l == SENTINEL));
        }
    }
}
