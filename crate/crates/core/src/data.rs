//! Dataset ingestion and synthesis: point-cloud CSVs with a JSON condition
//! schema, PNG image sets with a CSV annotation sidecar, deterministic
//! splits, and a synthetic generator whose conditions -> geometry map is a
//! known closed form (the verification oracle used throughout the tests).

use crate::conditions::{CategoricalEntry, ConditionSchema, ConditionVector, NumericalEntry};
use crate::error::{Error, Result};
use crate::graph::Arr;
use ndarray::{Array2, Array4, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

/// Per-coordinate standardization statistics, computed on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, s))| (x - m) / s).collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, s))| x * s + m).collect()
    }
}

/// Structured 2D point clouds with aligned condition vectors.
#[derive(Debug, Clone)]
pub struct PointCloudDataset {
    /// `N x 2K`, data units, layout `x0, y0, x1, y1, ...`
    pub keypoints: Array2<f64>,
    pub conditions: Vec<ConditionVector>,
    pub schema: ConditionSchema,
    pub standardization: Option<Standardization>,
    /// Out-of-range numerical cells clamped during ingestion.
    pub clamped_values: usize,
}

impl PointCloudDataset {
    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.ncols() / 2
    }

    fn subset(&self, indices: &[usize]) -> Self {
        let mut keypoints = Array2::zeros((indices.len(), self.keypoints.ncols()));
        let mut conditions = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            keypoints.row_mut(r).assign(&self.keypoints.row(i));
            conditions.push(self.conditions[i].clone());
        }
        Self {
            keypoints,
            conditions,
            schema: self.schema.clone(),
            standardization: self.standardization.clone(),
            clamped_values: 0,
        }
    }

    /// Deterministic prefix subsample (used by the dataset-size sweeps so
    /// smaller sizes are prefixes of larger ones under one fixed shuffle).
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(Error::SizeTooLarge { requested: n, available: self.len() });
        }
        let idx: Vec<usize> = (0..n).collect();
        Ok(self.subset(&idx))
    }

    /// Fixed seeded shuffle of the whole dataset.
    pub fn shuffled(&self, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        self.subset(&order)
    }
}

/// Deterministic shuffle-and-split. Standardization statistics are computed
/// from the train side only and attached to both splits.
pub fn split(
    dataset: &PointCloudDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(PointCloudDataset, PointCloudDataset)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
        return Err(Error::Config(format!("test fraction {test_fraction} outside (0,1)")));
    }
    let n = dataset.len();
    let n_test = (n as f64 * test_fraction).floor() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::EmptySplit { n, fraction: test_fraction });
    }
    let shuffled = dataset.shuffled(seed);
    let test_idx: Vec<usize> = (0..n_test).collect();
    let train_idx: Vec<usize> = (n_test..n).collect();
    let mut train = shuffled.subset(&train_idx);
    let mut test = shuffled.subset(&test_idx);
    let stats = compute_standardization(&train.keypoints)?;
    train.standardization = Some(stats.clone());
    test.standardization = Some(stats);
    Ok((train, test))
}

pub fn compute_standardization(keypoints: &Array2<f64>) -> Result<Standardization> {
    let n = keypoints.nrows() as f64;
    let d = keypoints.ncols();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for j in 0..d {
        let col = keypoints.column(j);
        let m = col.sum() / n;
        let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        if v <= 0.0 {
            return Err(Error::Config(format!("zero variance in keypoint coordinate {j}")));
        }
        mean[j] = m;
        std[j] = v.sqrt();
    }
    Ok(Standardization { mean, std })
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

fn cat_column(f: &crate::conditions::CategoricalFeature) -> &str {
    f.column.as_deref().unwrap_or(&f.name)
}

fn num_column(f: &crate::conditions::NumericalFeature) -> &str {
    f.column.as_deref().unwrap_or(&f.name)
}

/// Load a point-cloud dataset from `kp{i}_x, kp{i}_y` coordinate columns plus
/// one column per condition in schema order. Empty condition cells become
/// `Masked`; out-of-range numericals are clamped and counted.
pub fn load_pointcloud_csv(path: &Path, schema_path: &Path) -> Result<PointCloudDataset> {
    let schema: ConditionSchema = serde_json::from_reader(std::fs::File::open(schema_path)?)?;
    schema.validate()?;
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    // keypoint columns: kp0_x, kp0_y, kp1_x, ... until the pattern stops
    let mut kp_cols = Vec::new();
    let mut k = 0;
    loop {
        let xname = format!("kp{k}_x");
        let yname = format!("kp{k}_y");
        match (headers.iter().position(|h| h == xname), headers.iter().position(|h| h == yname)) {
            (Some(xi), Some(yi)) => kp_cols.push((xi, yi)),
            (None, None) => break,
            _ => return Err(Error::MissingColumn(if headers.iter().any(|h| h == xname) {
                yname
            } else {
                xname
            })),
        }
        k += 1;
    }
    if kp_cols.is_empty() {
        return Err(Error::MissingColumn("kp0_x".into()));
    }

    let cat_cols: Vec<usize> = schema
        .categorical_features
        .iter()
        .map(|f| col_index(cat_column(f)))
        .collect::<Result<_>>()?;
    let num_cols: Vec<usize> = schema
        .numerical_features
        .iter()
        .map(|f| col_index(num_column(f)))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut conditions = Vec::new();
    let mut clamped_values = 0usize;
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let parse_num = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.trim().parse::<f64>().map_err(|_| Error::MalformedNumber {
                row: row_idx,
                column: headers.get(col).unwrap_or("").to_string(),
                value: raw.to_string(),
            })
        };
        let mut coords = Vec::with_capacity(kp_cols.len() * 2);
        for &(xi, yi) in &kp_cols {
            coords.push(parse_num(xi)?);
            coords.push(parse_num(yi)?);
        }
        let mut categorical = Vec::with_capacity(cat_cols.len());
        for (fi, &col) in cat_cols.iter().enumerate() {
            let raw = record.get(col).unwrap_or("").trim();
            if raw.is_empty() {
                categorical.push(CategoricalEntry::Masked);
            } else {
                let f = &schema.categorical_features[fi];
                let idx = f.categories.iter().position(|c| c == raw).ok_or_else(|| {
                    Error::UnknownCategoryLabel {
                        row: row_idx,
                        column: cat_column(f).to_string(),
                        label: raw.to_string(),
                    }
                })?;
                categorical.push(CategoricalEntry::Observed(idx));
            }
        }
        let mut numerical = Vec::with_capacity(num_cols.len());
        for (fj, &col) in num_cols.iter().enumerate() {
            let raw = record.get(col).unwrap_or("").trim();
            if raw.is_empty() {
                numerical.push(NumericalEntry::Masked);
            } else {
                let value = raw.parse::<f64>().map_err(|_| Error::MalformedNumber {
                    row: row_idx,
                    column: headers.get(col).unwrap_or("").to_string(),
                    value: raw.to_string(),
                })?;
                let (v, clamped) = schema.normalize_numerical(fj, value)?;
                if clamped {
                    clamped_values += 1;
                }
                numerical.push(NumericalEntry::Observed(v));
            }
        }
        rows.push(coords);
        conditions.push(ConditionVector { categorical, numerical });
    }

    let n = rows.len();
    let d = kp_cols.len() * 2;
    let mut keypoints = Array2::zeros((n, d));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            keypoints[[i, j]] = v;
        }
    }
    Ok(PointCloudDataset { keypoints, conditions, schema, standardization: None, clamped_values })
}

/// Write a dataset in the layout [`load_pointcloud_csv`] reads. Floats are
/// emitted in shortest-roundtrip form, so read-back is bit-exact.
pub fn write_pointcloud_csv(dataset: &PointCloudDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let k = dataset.num_keypoints();
    let mut header = Vec::new();
    for i in 0..k {
        header.push(format!("kp{i}_x"));
        header.push(format!("kp{i}_y"));
    }
    for f in &dataset.schema.categorical_features {
        header.push(cat_column(f).to_string());
    }
    for f in &dataset.schema.numerical_features {
        header.push(num_column(f).to_string());
    }
    writer.write_record(&header)?;
    for (i, cv) in dataset.conditions.iter().enumerate() {
        let mut record: Vec<String> =
            dataset.keypoints.row(i).iter().map(|v| format!("{v}")).collect();
        for (fi, e) in cv.categorical.iter().enumerate() {
            record.push(match e {
                CategoricalEntry::Observed(c) => {
                    dataset.schema.categorical_features[fi].categories[*c].clone()
                }
                CategoricalEntry::Masked => String::new(),
            });
        }
        for (fj, e) in cv.numerical.iter().enumerate() {
            record.push(match e {
                NumericalEntry::Observed(v) => {
                    format!("{}", dataset.schema.denormalize_numerical(fj, *v))
                }
                NumericalEntry::Masked => String::new(),
            });
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic oracle dataset
// ---------------------------------------------------------------------------

/// Closed-form synthetic family: keypoint `k` of a sample with style `s`,
/// variant `v` and scale `u` is `R(2*pi*s/S) * base_k * (0.5 + u) + offset(v)`
/// where `base_k` are the vertices of the unit regular K-gon and
/// `offset(v) = (v/V, -v/V)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_styles: usize,
    pub num_variants: usize,
    /// Gaussian noise added to every coordinate, in data units.
    pub noise_std: f64,
    /// Keypoints per sample.
    pub k: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { num_styles: 6, num_variants: 6, noise_std: 0.01, k: 6 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_styles < 2 || self.num_variants < 2 {
            return Err(Error::Config("synthetic spec needs S, V >= 2".into()));
        }
        if self.noise_std < 0.0 || self.k == 0 {
            return Err(Error::Config("synthetic spec needs noise_std >= 0 and K >= 1".into()));
        }
        Ok(())
    }

    /// The condition schema of the synthetic family: two categorical features
    /// (style, variant) and one numerical feature (scale in [0,1]).
    pub fn schema(&self, d_cat: usize, d_num: usize) -> ConditionSchema {
        ConditionSchema {
            categorical_features: vec![
                crate::conditions::CategoricalFeature {
                    name: "style".into(),
                    cardinality: self.num_styles,
                    categories: (0..self.num_styles).map(|s| format!("style{s}")).collect(),
                    column: None,
                },
                crate::conditions::CategoricalFeature {
                    name: "variant".into(),
                    cardinality: self.num_variants,
                    categories: (0..self.num_variants).map(|v| format!("variant{v}")).collect(),
                    column: None,
                },
            ],
            numerical_features: vec![crate::conditions::NumericalFeature {
                name: "scale".into(),
                min: 0.0,
                max: 1.0,
                column: None,
            }],
            d_cat,
            d_num,
        }
    }
}

/// The noise-free conditions -> geometry map; pure and exact.
pub fn oracle_mean(s: usize, v: usize, u: f64, spec: &SynthSpec) -> Result<Vec<f64>> {
    if s >= spec.num_styles {
        return Err(Error::IndexOutOfRange { index: s, limit: spec.num_styles });
    }
    if v >= spec.num_variants {
        return Err(Error::IndexOutOfRange { index: v, limit: spec.num_variants });
    }
    let theta = 2.0 * PI * s as f64 / spec.num_styles as f64;
    let (sin_t, cos_t) = theta.sin_cos();
    let scale = 0.5 + u;
    let off_x = v as f64 / spec.num_variants as f64;
    let off_y = -off_x;
    let mut out = Vec::with_capacity(2 * spec.k);
    for k in 0..spec.k {
        let phi = 2.0 * PI * k as f64 / spec.k as f64;
        let (bx, by) = (phi.cos(), phi.sin());
        out.push((cos_t * bx - sin_t * by) * scale + off_x);
        out.push((sin_t * bx + cos_t * by) * scale + off_y);
    }
    Ok(out)
}

fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Draw `n` samples with fully observed conditions around the oracle mean.
pub fn synth_generate(
    spec: &SynthSpec,
    n: usize,
    seed: u64,
    d_cat: usize,
    d_num: usize,
) -> Result<PointCloudDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let schema = spec.schema(d_cat, d_num);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keypoints = Array2::zeros((n, 2 * spec.k));
    let mut conditions = Vec::with_capacity(n);
    for i in 0..n {
        let s = rng.gen_range(0..spec.num_styles);
        let v = rng.gen_range(0..spec.num_variants);
        let u: f64 = rng.gen();
        let mean = oracle_mean(s, v, u, spec)?;
        for (j, &m) in mean.iter().enumerate() {
            keypoints[[i, j]] = m + spec.noise_std * sample_standard_normal(&mut rng);
        }
        conditions.push(ConditionVector {
            categorical: vec![CategoricalEntry::Observed(s), CategoricalEntry::Observed(v)],
            numerical: vec![NumericalEntry::Observed(u)],
        });
    }
    Ok(PointCloudDataset { keypoints, conditions, schema, standardization: None, clamped_values: 0 })
}

// ---------------------------------------------------------------------------
// Rasterization and image datasets
// ---------------------------------------------------------------------------

/// Rasterize keypoints in normalized `[-1,1]` layout space: filled discs of
/// radius 1.5 px joined by 1-px polyline segments in closed ring order, dark
/// ink on a white background. Output channels are identical for C > 1;
/// values live in `[-1, 1]`.
pub fn render_image(keypoints: &[f64], image_shape: (usize, usize, usize)) -> Arr {
    let (c, h, w) = image_shape;
    let mut plane = Array2::<f64>::from_elem((h, w), 1.0);
    let k = keypoints.len() / 2;
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (((x + 1.0) / 2.0) * (w as f64 - 1.0), ((1.0 - y) / 2.0) * (h as f64 - 1.0))
    };
    let mut ink = |px: f64, py: f64| {
        let (xi, yi) = (px.round() as isize, py.round() as isize);
        if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
            plane[[yi as usize, xi as usize]] = -1.0;
        }
    };
    // polyline segments in closed ring order
    for i in 0..k {
        let (x0, y0) = to_px(keypoints[2 * i], keypoints[2 * i + 1]);
        let j = (i + 1) % k;
        let (x1, y1) = to_px(keypoints[2 * j], keypoints[2 * j + 1]);
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize + 1;
        for t in 0..=steps {
            let f = t as f64 / steps as f64;
            ink(x0 + (x1 - x0) * f, y0 + (y1 - y0) * f);
        }
    }
    // filled discs, radius 1.5 px
    for i in 0..k {
        let (px, py) = to_px(keypoints[2 * i], keypoints[2 * i + 1]);
        let r = 1.5f64;
        let (x0, x1) = ((px - r).floor() as isize, (px + r).ceil() as isize);
        let (y0, y1) = ((py - r).floor() as isize, (py + r).ceil() as isize);
        for yi in y0..=y1 {
            for xi in x0..=x1 {
                let (dx, dy) = (xi as f64 - px, yi as f64 - py);
                if dx * dx + dy * dy <= r * r
                    && xi >= 0
                    && yi >= 0
                    && (xi as usize) < w
                    && (yi as usize) < h
                {
                    plane[[yi as usize, xi as usize]] = -1.0;
                }
            }
        }
    }
    let mut out = Arr::zeros(IxDyn(&[c, h, w]));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ci, y, x]] = plane[[y, x]];
            }
        }
    }
    out
}

/// Uniformly shaped images with aligned condition vectors, values in `[-1,1]`.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    /// `[N, C, H, W]`
    pub images: Array4<f64>,
    pub conditions: Vec<ConditionVector>,
    pub schema: ConditionSchema,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let d = self.images.dim();
        (d.1, d.2, d.3)
    }
}

/// Rasterize every sample of a point-cloud dataset. Keypoints are mapped to
/// layout space by dividing by `extent`.
pub fn render_dataset(
    pc: &PointCloudDataset,
    image_shape: (usize, usize, usize),
    extent: f64,
) -> ImageDataset {
    let (c, h, w) = image_shape;
    let n = pc.len();
    let mut images = Array4::zeros((n, c, h, w));
    for i in 0..n {
        let kps: Vec<f64> = pc.keypoints.row(i).iter().map(|v| v / extent).collect();
        let img = render_image(&kps, image_shape);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    images[[i, ci, y, x]] = img[[ci, y, x]];
                }
            }
        }
    }
    ImageDataset { images, conditions: pc.conditions.clone(), schema: pc.schema.clone() }
}

/// Write an image dataset as 8-bit PNGs plus an `annotations.csv` sidecar
/// (filename column followed by one column per condition in schema order).
pub fn save_image_dataset(dataset: &ImageDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut writer = csv::Writer::from_path(dir.join("annotations.csv"))?;
    let mut header = vec!["filename".to_string()];
    for f in &dataset.schema.categorical_features {
        header.push(cat_column(f).to_string());
    }
    for f in &dataset.schema.numerical_features {
        header.push(num_column(f).to_string());
    }
    writer.write_record(&header)?;
    for i in 0..dataset.len() {
        let name = format!("img_{i:05}.png");
        save_png(&dataset.images.index_axis(ndarray::Axis(0), i).to_owned().into_dyn(), &dir.join(&name))?;
        let mut record = vec![name];
        let cv = &dataset.conditions[i];
        for (fi, e) in cv.categorical.iter().enumerate() {
            record.push(match e {
                CategoricalEntry::Observed(cc) => {
                    dataset.schema.categorical_features[fi].categories[*cc].clone()
                }
                CategoricalEntry::Masked => String::new(),
            });
        }
        for (fj, e) in cv.numerical.iter().enumerate() {
            record.push(match e {
                NumericalEntry::Observed(v) => {
                    format!("{}", dataset.schema.denormalize_numerical(fj, *v))
                }
                NumericalEntry::Masked => String::new(),
            });
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Load an image dataset saved by [`save_image_dataset`] (or any PNG set with
/// the same annotation sidecar layout). All images must decode to `shape`.
pub fn load_image_dataset(
    dir: &Path,
    schema_path: &Path,
    shape: (usize, usize, usize),
) -> Result<ImageDataset> {
    let schema: ConditionSchema = serde_json::from_reader(std::fs::File::open(schema_path)?)?;
    schema.validate()?;
    let mut reader = csv::Reader::from_path(dir.join("annotations.csv"))?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("filename") {
        return Err(Error::MissingColumn("filename".into()));
    }
    let col_index = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let cat_cols: Vec<usize> = schema
        .categorical_features
        .iter()
        .map(|f| col_index(cat_column(f)))
        .collect::<Result<_>>()?;
    let num_cols: Vec<usize> = schema
        .numerical_features
        .iter()
        .map(|f| col_index(num_column(f)))
        .collect::<Result<_>>()?;
    let (c, h, w) = shape;
    let mut images = Vec::new();
    let mut conditions = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let name = record.get(0).unwrap_or("");
        let img = load_png(&dir.join(name), shape)?;
        images.push(img);
        let mut categorical = Vec::new();
        for (fi, &col) in cat_cols.iter().enumerate() {
            let raw = record.get(col).unwrap_or("").trim();
            if raw.is_empty() {
                categorical.push(CategoricalEntry::Masked);
            } else {
                let f = &schema.categorical_features[fi];
                let idx = f.categories.iter().position(|cat| cat == raw).ok_or_else(|| {
                    Error::UnknownCategoryLabel {
                        row: row_idx,
                        column: cat_column(f).to_string(),
                        label: raw.to_string(),
                    }
                })?;
                categorical.push(CategoricalEntry::Observed(idx));
            }
        }
        let mut numerical = Vec::new();
        for (fj, &col) in num_cols.iter().enumerate() {
            let raw = record.get(col).unwrap_or("").trim();
            if raw.is_empty() {
                numerical.push(NumericalEntry::Masked);
            } else {
                let value = raw.parse::<f64>().map_err(|_| Error::MalformedNumber {
                    row: row_idx,
                    column: headers.get(col).unwrap_or("").to_string(),
                    value: raw.to_string(),
                })?;
                let (v, _) = schema.normalize_numerical(fj, value)?;
                numerical.push(NumericalEntry::Observed(v));
            }
        }
        conditions.push(ConditionVector { categorical, numerical });
    }
    let n = images.len();
    let mut out = Array4::zeros((n, c, h, w));
    for (i, img) in images.iter().enumerate() {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[i, ci, y, x]] = img[[ci, y, x]];
                }
            }
        }
    }
    Ok(ImageDataset { images: out, conditions, schema })
}

/// Save a `[C,H,W]` tensor in `[-1,1]` as an 8-bit grayscale or RGB PNG.
pub fn save_png(img: &Arr, path: &Path) -> Result<()> {
    let shape = img.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let to_u8 = |v: f64| ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8;
    match c {
        1 => {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    buf.put_pixel(x as u32, y as u32, image::Luma([to_u8(img[[0, y, x]])]));
                }
            }
            buf.save(path).map_err(|e| Error::Image(e.to_string()))
        }
        3 => {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = image::Rgb([
                        to_u8(img[[0, y, x]]),
                        to_u8(img[[1, y, x]]),
                        to_u8(img[[2, y, x]]),
                    ]);
                    buf.put_pixel(x as u32, y as u32, px);
                }
            }
            buf.save(path).map_err(|e| Error::Image(e.to_string()))
        }
        _ => Err(Error::Image(format!("unsupported channel count {c}"))),
    }
}

pub fn load_png(path: &Path, shape: (usize, usize, usize)) -> Result<Arr> {
    let (c, h, w) = shape;
    let img = image::open(path).map_err(|e| Error::Image(e.to_string()))?;
    if img.width() as usize != w || img.height() as usize != h {
        return Err(Error::ShapeMismatch(format!(
            "{}: expected {w}x{h}, got {}x{}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let from_u8 = |v: u8| v as f64 / 255.0 * 2.0 - 1.0;
    let mut out = Arr::zeros(IxDyn(&[c, h, w]));
    match c {
        1 => {
            let gray = img.to_luma8();
            for y in 0..h {
                for x in 0..w {
                    out[[0, y, x]] = from_u8(gray.get_pixel(x as u32, y as u32).0[0]);
                }
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            for y in 0..h {
                for x in 0..w {
                    let px = rgb.get_pixel(x as u32, y as u32);
                    for ci in 0..3 {
                        out[[ci, y, x]] = from_u8(px.0[ci]);
                    }
                }
            }
        }
        _ => return Err(Error::Image(format!("unsupported channel count {c}"))),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_mean_closed_form_cases() {
        let spec = SynthSpec::default();
        // s = 0, v = 0, u = 0.5 -> exactly the unit regular K-gon
        let m = oracle_mean(0, 0, 0.5, &spec).unwrap();
        for k in 0..spec.k {
            let phi = 2.0 * PI * k as f64 / spec.k as f64;
            assert!((m[2 * k] - phi.cos()).abs() < 1e-12);
            assert!((m[2 * k + 1] - phi.sin()).abs() < 1e-12);
        }
        // u = 0.5 -> scale exactly 1.0, checked above; offset for v = 1, V = 4
        let spec4 = SynthSpec { num_variants: 4, ..spec };
        let base = oracle_mean(0, 0, 0.5, &spec4).unwrap();
        let off = oracle_mean(0, 1, 0.5, &spec4).unwrap();
        for k in 0..spec4.k {
            assert!((off[2 * k] - base[2 * k] - 0.25).abs() < 1e-12);
            assert!((off[2 * k + 1] - base[2 * k + 1] + 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn synth_generation_is_deterministic_and_noise_free_at_zero_std() {
        let spec = SynthSpec { noise_std: 0.0, ..Default::default() };
        let a = synth_generate(&spec, 20, 7, 4, 4).unwrap();
        let b = synth_generate(&spec, 20, 7, 4, 4).unwrap();
        assert_eq!(a.keypoints, b.keypoints);
        assert_eq!(a.conditions, b.conditions);
        // rows equal their oracle means exactly
        for i in 0..a.len() {
            let (CategoricalEntry::Observed(s), CategoricalEntry::Observed(v)) =
                (a.conditions[i].categorical[0], a.conditions[i].categorical[1])
            else {
                panic!("synthetic conditions must be observed")
            };
            let NumericalEntry::Observed(u) = a.conditions[i].numerical[0] else { panic!() };
            let m = oracle_mean(s, v, u, &spec).unwrap();
            for (j, &mv) in m.iter().enumerate() {
                assert_eq!(a.keypoints[[i, j]], mv);
            }
        }
    }

    #[test]
    fn synth_sample_mean_tracks_oracle_mean() {
        // Monte Carlo: mean over 10^4 noisy draws at fixed conditions.
        let spec = SynthSpec::default();
        let mean = oracle_mean(2, 1, 0.3, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut acc = vec![0.0; mean.len()];
        for _ in 0..n {
            for (j, &m) in mean.iter().enumerate() {
                acc[j] += m + spec.noise_std * sample_standard_normal(&mut rng);
            }
        }
        let tol = 4.0 * spec.noise_std / 100.0;
        for (j, &m) in mean.iter().enumerate() {
            assert!((acc[j] / n as f64 - m).abs() < tol, "coordinate {j}");
        }
    }

    #[test]
    fn oracle_is_periodic_in_style() {
        let spec = SynthSpec::default();
        let a = oracle_mean(1, 2, 0.7, &spec).unwrap();
        let theta_wrapped = 2.0 * PI * (1.0 + spec.num_styles as f64) / spec.num_styles as f64;
        let theta = 2.0 * PI / spec.num_styles as f64;
        assert!((theta_wrapped.sin() - theta.sin()).abs() < 1e-12);
        let _ = a;
    }

    #[test]
    fn distinct_conditions_are_identifiable() {
        // every distinct (s, v) pair separated by >= 10x noise_std at u = 0.5
        let spec = SynthSpec::default();
        let pairs: Vec<(usize, usize)> = (0..spec.num_styles)
            .flat_map(|s| (0..spec.num_variants).map(move |v| (s, v)))
            .collect();
        for (ai, &(s1, v1)) in pairs.iter().enumerate() {
            for &(s2, v2) in &pairs[ai + 1..] {
                let a = oracle_mean(s1, v1, 0.5, &spec).unwrap();
                let b = oracle_mean(s2, v2, 0.5, &spec).unwrap();
                let dist: f64 =
                    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                assert!(dist >= 10.0 * spec.noise_std, "({s1},{v1}) vs ({s2},{v2}): {dist}");
            }
        }
    }

    #[test]
    fn split_is_deterministic_and_standardizes_from_train() {
        let spec = SynthSpec::default();
        let data = synth_generate(&spec, 100, 3, 4, 4).unwrap();
        let (tr1, te1) = split(&data, 0.2, 5).unwrap();
        let (tr2, te2) = split(&data, 0.2, 5).unwrap();
        assert_eq!(tr1.len(), 80);
        assert_eq!(te1.len(), 20);
        assert_eq!(tr1.keypoints, tr2.keypoints);
        assert_eq!(te1.keypoints, te2.keypoints);
        assert_eq!(tr1.standardization, te1.standardization);
        let stats = tr1.standardization.as_ref().unwrap();
        // standardize/destandardize roundtrip to 1e-12
        let row: Vec<f64> = data.keypoints.row(0).to_vec();
        let back = stats.invert(&stats.apply(&row));
        for (a, b) in row.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_split_is_rejected() {
        let spec = SynthSpec::default();
        let data = synth_generate(&spec, 1, 3, 4, 4).unwrap();
        assert!(matches!(split(&data, 0.5, 0), Err(Error::EmptySplit { .. })));
    }

    #[test]
    fn different_seeds_give_different_memberships() {
        let spec = SynthSpec::default();
        let data = synth_generate(&spec, 50, 3, 4, 4).unwrap();
        let mut collisions = 0;
        for seed in 0..100u64 {
            let (_, te_a) = split(&data, 0.2, 2 * seed).unwrap();
            let (_, te_b) = split(&data, 0.2, 2 * seed + 1).unwrap();
            if te_a.keypoints == te_b.keypoints {
                collisions += 1;
            }
        }
        assert_eq!(collisions, 0);
    }

    #[test]
    fn csv_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let mut data = synth_generate(&spec, 25, 9, 4, 4).unwrap();
        // punch in some inherently missing annotations
        data.conditions[3].categorical[0] = CategoricalEntry::Masked;
        data.conditions[7].numerical[0] = NumericalEntry::Masked;
        let csv_path = dir.path().join("kp.csv");
        let schema_path = dir.path().join("schema.json");
        serde_json::to_writer_pretty(std::fs::File::create(&schema_path).unwrap(), &data.schema)
            .unwrap();
        write_pointcloud_csv(&data, &csv_path).unwrap();
        let back = load_pointcloud_csv(&csv_path, &schema_path).unwrap();
        assert_eq!(back.keypoints, data.keypoints);
        assert_eq!(back.conditions, data.conditions);
    }

    #[test]
    fn renderer_is_deterministic_and_separates_disjoint_keypoints() {
        let all_origin = vec![0.0; 12];
        let a = render_image(&all_origin, (1, 32, 32));
        let b = render_image(&all_origin, (1, 32, 32));
        assert_eq!(a, b);
        // single disc at the center: some ink, concentrated near the middle
        assert!(a.iter().any(|&v| v == -1.0));
        assert_eq!(a[[0, 0, 0]], 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut distinct = 0;
        for _ in 0..100 {
            let kp1: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 1.6 - 0.8).collect();
            let kp2: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 1.6 - 0.8).collect();
            let i1 = render_image(&kp1, (1, 32, 32));
            let i2 = render_image(&kp2, (1, 32, 32));
            if i1 != i2 {
                distinct += 1;
            }
        }
        assert_eq!(distinct, 100);
    }

    #[test]
    fn image_dataset_roundtrips_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let pc = synth_generate(&spec, 4, 13, 4, 4).unwrap();
        let images = render_dataset(&pc, (1, 32, 32), 2.5);
        let schema_path = dir.path().join("schema.json");
        serde_json::to_writer(std::fs::File::create(&schema_path).unwrap(), &images.schema)
            .unwrap();
        save_image_dataset(&images, dir.path()).unwrap();
        let back = load_image_dataset(dir.path(), &schema_path, (1, 32, 32)).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.conditions.len(), images.conditions.len());
        // rendered values are exactly {-1, 1}, which survive 8-bit quantization
        assert_eq!(back.images, images.images);
        for (a, b) in back.conditions.iter().zip(&images.conditions) {
            assert_eq!(a.categorical, b.categorical);
            for (x, y) in a.numerical.iter().zip(&b.numerical) {
                match (x, y) {
                    (NumericalEntry::Observed(x), NumericalEntry::Observed(y)) => {
                        assert!((x - y).abs() < 1e-9)
                    }
                    (a, b) => assert_eq!(a, b),
                }
            }
        }
    }
}
