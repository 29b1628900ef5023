//! Synthetic shifted domains with known ground truth, and the dataset and
//! label file formats.
//!
//! Dataset file:
//! ```text
//! pgmm-dataset v1 dim=<D> classes=<C> count=<N>
//! <label>,<x1>,...,<xD>        (N lines, label -1 = unlabeled)
//! ```
//! Label file:
//! ```text
//! pgmm-labels v1 classes=<C> count=<N>
//! <label>                      (N lines)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv;

pub const DATASET_MAGIC: &str = "pgmm-dataset";
pub const LABELS_MAGIC: &str = "pgmm-labels";
pub const FORMAT_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub n_classes: usize,
    pub input_dim: usize,
    pub modes_per_class: usize,
    /// Class-major: mode `k` of class `c` is `centers[c * modes_per_class + k]`.
    pub centers: Vec<Vec<f64>>,
    pub mode_std: f64,
    /// Rotation of the first two input coordinates, in degrees.
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    pub source_freq: Vec<f64>,
    /// Target class frequencies.
    pub label_shift: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self::benchmark()
    }
}

impl DomainSpec {
    /// Three classes in the plane, two modes each, rotated 30 degrees and
    /// translated by (1.5, 0), with target frequencies (0.2, 0.3, 0.5).
    pub fn benchmark() -> Self {
        let centers = [
            [0.0, -3.5],
            [2.0, -3.0],
            [3.5, 3.5],
            [1.5, 5.0],
            [-2.5, 0.5],
            [-4.0, 0.5],
        ]
        .iter()
        .map(|c| c.to_vec())
        .collect();
        DomainSpec {
            n_classes: 3,
            input_dim: 2,
            modes_per_class: 2,
            centers,
            mode_std: 0.6,
            rotation_deg: 30.0,
            translation: vec![1.5, 0.0],
            scale: 1.0,
            source_freq: vec![1.0 / 3.0; 3],
            label_shift: vec![0.2, 0.3, 0.5],
            n_samples: 5000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes;
        if c < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if self.input_dim < 1 {
            return Err(Error::config("input_dim", "must be >= 1"));
        }
        if self.modes_per_class < 1 {
            return Err(Error::config("modes_per_class", "must be >= 1"));
        }
        if self.centers.len() != c * self.modes_per_class {
            return Err(Error::config(
                "centers",
                format!("expected {} centers, got {}", c * self.modes_per_class, self.centers.len()),
            ));
        }
        if self.centers.iter().any(|m| m.len() != self.input_dim) {
            return Err(Error::config("centers", "center dimension differs from input_dim"));
        }
        if !(self.mode_std > 0.0) {
            return Err(Error::config("mode_std", "must be > 0"));
        }
        if self.translation.len() != self.input_dim {
            return Err(Error::config("translation", "length differs from input_dim"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config("scale", "must be > 0"));
        }
        for (key, freq) in [("source_freq", &self.source_freq), ("label_shift", &self.label_shift)] {
            if freq.len() != c {
                return Err(Error::config(key, format!("expected {c} frequencies")));
            }
            if freq.iter().any(|&p| !(p >= 0.0)) || (freq.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::config(key, "frequencies must be >= 0 and sum to 1"));
            }
        }
        Ok(())
    }

    /// Reads a `key = value` spec; missing keys keep the benchmark default.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = DomainSpec::benchmark();
        let mut centers_given = false;
        for e in kv::parse(text)? {
            match e.key.as_str() {
                "classes" => spec.n_classes = kv::scalar(&e)?,
                "input_dim" => spec.input_dim = kv::scalar(&e)?,
                "modes_per_class" => spec.modes_per_class = kv::scalar(&e)?,
                "centers" => {
                    spec.centers = kv::rows(&e)?;
                    centers_given = true;
                }
                "mode_std" => spec.mode_std = kv::scalar(&e)?,
                "rotation_deg" => spec.rotation_deg = kv::scalar(&e)?,
                "translation" => spec.translation = kv::list(&e)?,
                "scale" => spec.scale = kv::scalar(&e)?,
                "source_freq" => spec.source_freq = kv::list(&e)?,
                "label_shift" => spec.label_shift = kv::list(&e)?,
                "n_samples" => spec.n_samples = kv::scalar(&e)?,
                "seed" => spec.seed = kv::scalar(&e)?,
                other => return Err(Error::config(other, "unknown spec key")),
            }
        }
        if !centers_given && spec.centers.len() != spec.n_classes * spec.modes_per_class {
            return Err(Error::config("centers", "required when classes or modes differ from the default"));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> String {
        let centers = self.centers.iter().map(|c| kv::join(c)).collect::<Vec<_>>().join(";");
        format!(
            "classes = {}\ninput_dim = {}\nmodes_per_class = {}\ncenters = {}\nmode_std = {}\n\
             rotation_deg = {}\ntranslation = {}\nscale = {}\nsource_freq = {}\nlabel_shift = {}\n\
             n_samples = {}\nseed = {}\n",
            self.n_classes,
            self.input_dim,
            self.modes_per_class,
            centers,
            self.mode_std,
            self.rotation_deg,
            kv::join(&self.translation),
            self.scale,
            kv::join(&self.source_freq),
            kv::join(&self.label_shift),
            self.n_samples,
            self.seed
        )
    }

    /// Applies the covariate shift: `scale * R x + translation`, where `R`
    /// rotates the first two coordinates.
    pub fn shift(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        if y.len() >= 2 {
            let (s, c) = self.rotation_deg.to_radians().sin_cos();
            let (a, b) = (y[0], y[1]);
            y[0] = c * a - s * b;
            y[1] = s * a + c * b;
        }
        y.iter_mut()
            .zip(&self.translation)
            .for_each(|(v, t)| *v = self.scale * *v + t);
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub n_classes: usize,
    /// Row-major `N x dim`.
    pub inputs: Vec<f64>,
    pub labels: Vec<Option<usize>>,
}

impl Dataset {
    pub fn new(dim: usize, n_classes: usize) -> Self {
        Dataset {
            dim,
            n_classes,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, x: &[f64], label: Option<usize>) {
        assert_eq!(x.len(), self.dim);
        self.inputs.extend_from_slice(x);
        self.labels.push(label);
    }

    /// Labels of a fully labelled set.
    pub fn known_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::contract(format!("sample {i} is unlabeled"))))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{DATASET_MAGIC} {FORMAT_VERSION} dim={} classes={} count={}\n",
            self.dim,
            self.n_classes,
            self.len()
        );
        for i in 0..self.len() {
            let label = self.labels[i].map_or(-1, |l| l as i64);
            write!(s, "{label}").unwrap();
            for x in self.row(i) {
                write!(s, ",{x:.16e}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
        let fields = parse_header(header, DATASET_MAGIC, &["dim", "classes", "count"])?;
        let (dim, n_classes, count) = (fields[0], fields[1], fields[2]);
        let mut ds = Dataset::new(dim, n_classes);
        ds.inputs.reserve(dim * count);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if ds.len() == count {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(Error::parse(lineno, format!("more than {count} data lines")));
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != dim + 1 {
                return Err(Error::parse(
                    lineno,
                    format!("expected {} columns, found {}", dim + 1, cols.len()),
                ));
            }
            let label: i64 = cols[0]
                .trim()
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad label `{}`", cols[0])))?;
            let label = match label {
                -1 => None,
                l if l >= 0 && (l as usize) < n_classes => Some(l as usize),
                l => return Err(Error::parse(lineno, format!("label {l} outside -1..{n_classes}"))),
            };
            for c in &cols[1..] {
                let v: f64 = c
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("bad number `{c}`")))?;
                ds.inputs.push(v);
            }
            ds.labels.push(label);
        }
        if ds.len() != count {
            return Err(Error::parse(
                ds.len() + 2,
                format!("header declares {count} rows, found {}", ds.len()),
            ));
        }
        Ok(ds)
    }
}

fn parse_header(header: &str, magic: &str, keys: &[&str]) -> Result<Vec<usize>> {
    let mut parts = header.split_whitespace();
    if parts.next() != Some(magic) {
        return Err(Error::parse(1, format!("expected `{magic}` header")));
    }
    match parts.next() {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::Version(format!("{magic} {v}"))),
        None => return Err(Error::parse(1, "missing version")),
    }
    let mut values = Vec::with_capacity(keys.len());
    for key in keys {
        let part = parts
            .next()
            .ok_or_else(|| Error::parse(1, format!("missing `{key}=` field")))?;
        let v = part
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| Error::parse(1, format!("expected `{key}=`, got `{part}`")))?;
        values.push(
            v.parse()
                .map_err(|_| Error::parse(1, format!("bad value for `{key}`: `{v}`")))?,
        );
    }
    if let Some(extra) = parts.next() {
        return Err(Error::parse(1, format!("unexpected header field `{extra}`")));
    }
    Ok(values)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, ds.to_text())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_text(&std::fs::read_to_string(path)?)
}

pub fn labels_to_text(labels: &[usize], n_classes: usize) -> String {
    let mut s = format!("{LABELS_MAGIC} {FORMAT_VERSION} classes={n_classes} count={}\n", labels.len());
    for l in labels {
        writeln!(s, "{l}").unwrap();
    }
    s
}

pub fn labels_from_text(text: &str) -> Result<(Vec<usize>, usize)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
    let fields = parse_header(header, LABELS_MAGIC, &["classes", "count"])?;
    let (n_classes, count) = (fields[0], fields[1]);
    let mut labels = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() && labels.len() == count {
            continue;
        }
        let l: usize = line
            .trim()
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad label `{line}`")))?;
        if l >= n_classes {
            return Err(Error::parse(lineno, format!("label {l} outside 0..{n_classes}")));
        }
        labels.push(l);
    }
    if labels.len() != count {
        return Err(Error::parse(
            labels.len() + 2,
            format!("header declares {count} labels, found {}", labels.len()),
        ));
    }
    Ok((labels, n_classes))
}

pub fn write_labels(labels: &[usize], n_classes: usize, path: &Path) -> Result<()> {
    std::fs::write(path, labels_to_text(labels, n_classes))?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<(Vec<usize>, usize)> {
    labels_from_text(&std::fs::read_to_string(path)?)
}

/// Exact per-class counts by largest remainder.
pub fn allocate_counts(freq: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = freq.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..freq.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[c] += 1;
        rest -= 1;
    }
    counts
}

fn sample_domain(
    spec: &DomainSpec,
    freq: &[f64],
    shifted: bool,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let noise = Normal::new(0.0, spec.mode_std).expect("mode_std validated");
    let mut labels: Vec<usize> = allocate_counts(freq, spec.n_samples)
        .into_iter()
        .enumerate()
        .flat_map(|(c, k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(rng);
    let points = labels
        .iter()
        .map(|&c| {
            let k = rng.random_range(0..spec.modes_per_class);
            let center = &spec.centers[c * spec.modes_per_class + k];
            let x: Vec<f64> = center.iter().map(|m| m + noise.sample(rng)).collect();
            if shifted {
                spec.shift(&x)
            } else {
                x
            }
        })
        .collect();
    (points, labels)
}

/// Labelled source set, unlabelled target set, and the held-out target
/// labels.
pub fn generate_domain_pair(spec: &DomainSpec) -> Result<(Dataset, Dataset, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (xs, ys) = sample_domain(spec, &spec.source_freq, false, &mut rng);
    let mut source = Dataset::new(spec.input_dim, spec.n_classes);
    for (x, y) in xs.iter().zip(&ys) {
        source.push(x, Some(*y));
    }
    let (xt, yt) = sample_domain(spec, &spec.label_shift, true, &mut rng);
    let mut target = Dataset::new(spec.input_dim, spec.n_classes);
    for x in &xt {
        target.push(x, None);
    }
    Ok((source, target, yt))
}
