//! Two-modality feature datasets with per-instance presence information.
//!
//! A dataset holds one dense table per modality. Instances that lack a
//! modality keep a zero-filled placeholder row in that modality's table; the
//! [`PresenceMask`] is the only authority on which rows are real.
//!
//! On disk a dataset is a directory:
//!
//! | file           | contents                                                        |
//! |----------------|-----------------------------------------------------------------|
//! | `manifest.json`| `n`, `K`, `d_img`, `d_txt`, `has_labels`, `missing_rate`, `seed` |
//! | `img.f32`      | row-major little-endian `f32`, `n * d_img` values               |
//! | `txt.f32`      | row-major little-endian `f32`, `n * d_txt` values               |
//! | `mask.u8`      | `n` bytes, bit 0 = has image, bit 1 = has text                   |
//! | `labels.i64`   | optional, `n` little-endian `i64`                                |

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Dense feature matrix for one modality. Rows are instances.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    data: Array2<f32>,
}

impl FeatureTable {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::invalid("feature table must have at least one column"));
        }
        if let Some((idx, _)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (r, c) = (idx / data.ncols(), idx % data.ncols());
            return Err(Error::invalid(format!(
                "non-finite feature value at row {r}, column {c}"
            )));
        }
        Ok(Self { data })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.data.row(i)
    }

    /// Gather `rows` into a double-precision matrix.
    pub fn gather_f64(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.dim()));
        for (dst, &src) in out.rows_mut().into_iter().zip(rows) {
            for (d, s) in dst.into_iter().zip(self.data.row(src)) {
                *d = *s as f64;
            }
        }
        out
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(|v| v as f64)
    }

    pub(crate) fn data_mut(&mut self) -> &mut Array2<f32> {
        &mut self.data
    }
}

/// Which modalities an instance carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Presence {
    pub has_img: bool,
    pub has_txt: bool,
}

impl Presence {
    pub const BOTH: Presence = Presence { has_img: true, has_txt: true };
    pub const IMG_ONLY: Presence = Presence { has_img: true, has_txt: false };
    pub const TXT_ONLY: Presence = Presence { has_img: false, has_txt: true };

    pub fn is_complete(self) -> bool {
        self.has_img && self.has_txt
    }

    fn to_byte(self) -> u8 {
        (self.has_img as u8) | ((self.has_txt as u8) << 1)
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Self::IMG_ONLY),
            2 => Some(Self::TXT_ONLY),
            3 => Some(Self::BOTH),
            _ => None,
        }
    }
}

/// Per-instance presence flags plus the nominal missing rate they were drawn at.
#[derive(Debug, Clone, PartialEq)]
pub struct PresenceMask {
    flags: Vec<Presence>,
    missing_rate: f64,
}

/// `round(x)` with ties going up.
pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Number of complete instances for `n` instances at missing rate `p`.
pub fn complete_count_for(n: usize, p: f64) -> usize {
    round_half_up(n as f64 * (1.0 - p))
}

impl PresenceMask {
    pub fn all_present(n: usize) -> Self {
        Self {
            flags: vec![Presence::BOTH; n],
            missing_rate: 0.0,
        }
    }

    pub fn from_flags(flags: Vec<Presence>, missing_rate: f64) -> Result<Self> {
        if let Some(i) = flags.iter().position(|f| !f.has_img && !f.has_txt) {
            return Err(Error::invalid(format!("instance {i} has neither modality")));
        }
        if !(0.0..1.0).contains(&missing_rate) {
            return Err(Error::invalid(format!("missing rate {missing_rate} outside [0, 1)")));
        }
        Ok(Self { flags, missing_rate })
    }

    pub fn n(&self) -> usize {
        self.flags.len()
    }

    pub fn missing_rate(&self) -> f64 {
        self.missing_rate
    }

    pub fn flags(&self) -> &[Presence] {
        &self.flags
    }

    pub fn get(&self, i: usize) -> Presence {
        self.flags[i]
    }

    pub fn complete_count(&self) -> usize {
        self.flags.iter().filter(|f| f.is_complete()).count()
    }

    pub fn img_only_count(&self) -> usize {
        self.flags.iter().filter(|f| **f == Presence::IMG_ONLY).count()
    }

    pub fn txt_only_count(&self) -> usize {
        self.flags.iter().filter(|f| **f == Presence::TXT_ONLY).count()
    }

    pub fn is_fully_present(&self) -> bool {
        self.flags.iter().all(|f| f.is_complete())
    }

    /// Indices of instances carrying an image.
    pub fn img_rows(&self) -> Vec<usize> {
        self.indices(|f| f.has_img)
    }

    pub fn txt_rows(&self) -> Vec<usize> {
        self.indices(|f| f.has_txt)
    }

    pub fn complete_rows(&self) -> Vec<usize> {
        self.indices(|f| f.is_complete())
    }

    fn indices(&self, pred: impl Fn(&Presence) -> bool) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter(|(_, f)| pred(f))
            .map(|(i, _)| i)
            .collect()
    }

    /// Reorder instances: `result[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            flags: perm.iter().map(|&i| self.flags[i]).collect(),
            missing_rate: self.missing_rate,
        }
    }
}

/// Draw a presence mask with exactly `round(n(1-p))` complete instances.
///
/// Of the incomplete instances, `round((n - m) * split_ratio)` keep only the
/// image and the rest keep only the text. Which instances land in each group
/// is a seeded shuffle.
pub fn make_missing_mask(n: usize, p: f64, split_ratio: f64, seed: u64) -> Result<PresenceMask> {
    if n == 0 {
        return Err(Error::invalid("mask needs at least one instance"));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("missing rate {p} outside [0, 1)")));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::invalid(format!("split ratio {split_ratio} outside [0, 1]")));
    }
    let m = complete_count_for(n, p).min(n);
    if m == 0 {
        return Err(Error::invalid(format!(
            "missing rate {p} leaves no complete instances out of {n}"
        )));
    }
    let incomplete = n - m;
    let img_only = round_half_up(incomplete as f64 * split_ratio).min(incomplete);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, "mask"));
    let mut flags = vec![Presence::BOTH; n];
    for (rank, &i) in order.iter().enumerate() {
        flags[i] = if rank < m {
            Presence::BOTH
        } else if rank < m + img_only {
            Presence::IMG_ONLY
        } else {
            Presence::TXT_ONLY
        };
    }
    Ok(PresenceMask { flags, missing_rate: p })
}

/// Two feature tables sharing one instance axis.
#[derive(Debug, Clone, PartialEq)]
pub struct IncompleteDataset {
    pub img: FeatureTable,
    pub txt: FeatureTable,
    pub mask: PresenceMask,
    pub labels: Option<Vec<usize>>,
    pub k: Option<usize>,
    /// Seed recorded in the manifest (generator or mask seed).
    pub seed: u64,
}

impl IncompleteDataset {
    pub fn new(
        img: FeatureTable,
        txt: FeatureTable,
        mask: PresenceMask,
        labels: Option<Vec<usize>>,
        k: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let ds = Self { img, txt, mask, labels, k, seed };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.mask.n()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.img.rows() != n || self.txt.rows() != n {
            return Err(Error::invalid(format!(
                "row counts disagree: mask {n}, img {}, txt {}",
                self.img.rows(),
                self.txt.rows()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::invalid(format!(
                    "{} labels for {n} instances",
                    labels.len()
                )));
            }
            if let Some(k) = self.k {
                if let Some(i) = labels.iter().position(|&l| l >= k) {
                    return Err(Error::invalid(format!(
                        "label {} at row {i} outside [0, {k})",
                        labels[i]
                    )));
                }
            }
            let mut distinct: Vec<usize> = labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 2 {
                return Err(Error::invalid("labels must cover at least 2 distinct values"));
            }
        }
        Ok(())
    }

    /// Cluster count: the declared `K`, else the number of distinct labels.
    pub fn cluster_count(&self) -> Option<usize> {
        self.k.or_else(|| {
            self.labels
                .as_ref()
                .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
        })
    }

    /// Reorder instances: `result[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(Error::invalid("permutation length differs from instance count"));
        }
        let img = self.img.data().select(Axis(0), perm);
        let txt = self.txt.data().select(Axis(0), perm);
        Ok(Self {
            img: FeatureTable { data: img },
            txt: FeatureTable { data: txt },
            mask: self.mask.permuted(perm),
            labels: self
                .labels
                .as_ref()
                .map(|l| perm.iter().map(|&i| l[i]).collect()),
            k: self.k,
            seed: self.seed,
        })
    }
}

/// Remove modalities according to `mask`, zero-filling absent rows.
///
/// A mask may only remove data: every modality it marks present must already
/// be present in `ds`. Applying the same mask twice is the same as applying
/// it once.
pub fn apply_mask(ds: &IncompleteDataset, mask: &PresenceMask) -> Result<IncompleteDataset> {
    if mask.n() != ds.n() {
        return Err(Error::invalid(format!(
            "mask covers {} instances, dataset has {}",
            mask.n(),
            ds.n()
        )));
    }
    for (i, (new, old)) in mask.flags.iter().zip(&ds.mask.flags).enumerate() {
        if (new.has_img && !old.has_img) || (new.has_txt && !old.has_txt) {
            return Err(Error::invalid(format!(
                "mask marks row {i} present in a modality the dataset lacks"
            )));
        }
    }
    let mut out = ds.clone();
    for (i, f) in mask.flags.iter().enumerate() {
        if !f.has_img {
            out.img.data_mut().row_mut(i).fill(0.0);
        }
        if !f.has_txt {
            out.txt.data_mut().row_mut(i).fill(0.0);
        }
    }
    out.mask = mask.clone();
    Ok(out)
}

fn standard_normal(rng: &mut seed::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Synthetic paired dataset: `k` Gaussian clusters in a shared latent space,
/// observed through one fixed random affine map per modality plus noise.
///
/// Cluster centres are pairwise at least `10 * sigma` apart. Labels are drawn
/// uniformly, so class sizes are multinomial.
pub fn synth_paired_blobs(
    k: usize,
    n: usize,
    d_img: usize,
    d_txt: usize,
    sigma: f64,
    seed: u64,
) -> Result<IncompleteDataset> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 clusters, got {k}")));
    }
    if n < 4 * k {
        return Err(Error::invalid(format!("need at least {} instances, got {n}", 4 * k)));
    }
    if d_img == 0 || d_txt == 0 {
        return Err(Error::invalid("feature dimensions must be positive"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }

    let d_lat = k.max(2).min(d_img.min(d_txt));
    let min_sep = 10.0 * sigma;

    let mut rng = seed::rng(seed, "synth/centers");
    let mut spread = min_sep;
    let centers = 'outer: loop {
        let mut centers: Vec<Array1<f64>> = Vec::with_capacity(k);
        for _ in 0..1000 {
            let c: Array1<f64> = (0..d_lat).map(|_| spread * standard_normal(&mut rng)).collect();
            let far_enough = centers.iter().all(|o| {
                let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
                d2.sqrt() >= min_sep
            });
            if far_enough {
                centers.push(c);
                if centers.len() == k {
                    break 'outer centers;
                }
            }
        }
        spread *= 1.5;
    };

    let mut map_rng = seed::rng(seed, "synth/maps");
    let scale = 1.0 / (d_lat as f64).sqrt();
    let mut affine = |d_out: usize| {
        let a = Array2::from_shape_fn((d_lat, d_out), |_| scale * standard_normal(&mut map_rng));
        let b: Array1<f64> = (0..d_out).map(|_| standard_normal(&mut map_rng)).collect();
        (a, b)
    };
    let (a_img, b_img) = affine(d_img);
    let (a_txt, b_txt) = affine(d_txt);

    let mut rng = seed::rng(seed, "synth/points");
    let mut labels = Vec::with_capacity(n);
    let mut latent = Array2::<f64>::zeros((n, d_lat));
    for mut row in latent.rows_mut() {
        let label = rng.random_range(0..k);
        labels.push(label);
        for (j, v) in row.iter_mut().enumerate() {
            *v = centers[label][j] + sigma * standard_normal(&mut rng);
        }
    }

    let mut observe = |a: &Array2<f64>, b: &Array1<f64>| -> Array2<f32> {
        let mut x = latent.dot(a) + b;
        x.mapv_inplace(|v| v + sigma * standard_normal(&mut rng));
        x.mapv(|v| v as f32)
    };
    let img = observe(&a_img, &b_img);
    let txt = observe(&a_txt, &b_txt);

    IncompleteDataset::new(
        FeatureTable::new(img)?,
        FeatureTable::new(txt)?,
        PresenceMask::all_present(n),
        Some(labels),
        Some(k),
        seed,
    )
}

/// Manifest stored next to the binary tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub d_img: usize,
    pub d_txt: usize,
    pub has_labels: bool,
    pub missing_rate: f64,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write `ds` into `dir`, creating the directory if needed.
pub fn write_dataset(ds: &IncompleteDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        n: ds.n(),
        k: ds.k,
        d_img: ds.img.dim(),
        d_txt: ds.txt.dim(),
        has_labels: ds.labels.is_some(),
        missing_rate: ds.mask.missing_rate(),
        seed: ds.seed,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::write(dir.join("img.f32"), f32_bytes(ds.img.data()))?;
    fs::write(dir.join("txt.f32"), f32_bytes(ds.txt.data()))?;
    let mask: Vec<u8> = ds.mask.flags().iter().map(|f| f.to_byte()).collect();
    fs::write(dir.join("mask.u8"), mask)?;
    let labels_path = dir.join("labels.i64");
    match &ds.labels {
        Some(labels) => {
            let bytes: Vec<u8> = labels
                .iter()
                .flat_map(|&l| (l as i64).to_le_bytes())
                .collect();
            fs::write(labels_path, bytes)?;
        }
        None if labels_path.exists() => fs::remove_file(labels_path)?,
        None => {}
    }
    Ok(())
}

pub(crate) fn f32_bytes(m: ArrayView2<'_, f32>) -> Vec<u8> {
    m.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f32_table(path: &Path, n: usize, d: usize) -> Result<FeatureTable> {
    let bytes = fs::read(path)?;
    let expected = n * d * 4;
    if bytes.len() != expected {
        let found = if n > 0 && bytes.len() % (4 * n) == 0 {
            format!("{} columns", bytes.len() / (4 * n))
        } else {
            format!("{} bytes", bytes.len())
        };
        return Err(Error::format(
            path,
            format!("expected {n} rows x {d} columns ({expected} bytes), found {found}"),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            row: Some(idx / d),
            col: Some(idx % d),
            message: format!("non-finite value {}", values[idx]),
        });
    }
    let data = Array2::from_shape_vec((n, d), values).expect("length checked above");
    Ok(FeatureTable { data })
}

/// Read a dataset from its directory or from the path of its `manifest.json`.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<IncompleteDataset> {
    let path = path.as_ref();
    let (dir, manifest_path): (PathBuf, PathBuf) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, path.to_path_buf())
    };
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&manifest_path, format!("malformed manifest: {e}")))?;
    if manifest.d_img == 0 || manifest.d_txt == 0 {
        return Err(Error::format(&manifest_path, "feature dimensions must be positive"));
    }
    if !(0.0..1.0).contains(&manifest.missing_rate) {
        return Err(Error::format(&manifest_path, "missing_rate outside [0, 1)"));
    }
    let n = manifest.n;
    let img = read_f32_table(&dir.join("img.f32"), n, manifest.d_img)?;
    let txt = read_f32_table(&dir.join("txt.f32"), n, manifest.d_txt)?;

    let mask_path = dir.join("mask.u8");
    let mask_bytes = fs::read(&mask_path)?;
    if mask_bytes.len() != n {
        return Err(Error::format(
            &mask_path,
            format!("expected {n} bytes, found {}", mask_bytes.len()),
        ));
    }
    let mut flags = Vec::with_capacity(n);
    for (row, &b) in mask_bytes.iter().enumerate() {
        let f = Presence::from_byte(b).ok_or_else(|| Error::Format {
            path: mask_path.clone(),
            row: Some(row),
            col: None,
            message: format!("invalid presence byte {b}"),
        })?;
        flags.push(f);
    }
    let mask = PresenceMask::from_flags(flags, manifest.missing_rate)?;

    let labels = if manifest.has_labels {
        let labels_path = dir.join("labels.i64");
        let bytes = fs::read(&labels_path)?;
        if bytes.len() != n * 8 {
            return Err(Error::format(
                &labels_path,
                format!("expected {} bytes, found {}", n * 8, bytes.len()),
            ));
        }
        let mut labels = Vec::with_capacity(n);
        for (row, c) in bytes.chunks_exact(8).enumerate() {
            let v = i64::from_le_bytes(c.try_into().expect("chunk of 8"));
            let in_range = v >= 0 && manifest.k.is_none_or(|k| (v as u64) < k as u64);
            if !in_range {
                return Err(Error::Format {
                    path: labels_path.clone(),
                    row: Some(row),
                    col: None,
                    message: format!("label {v} out of range"),
                });
            }
            labels.push(v as usize);
        }
        Some(labels)
    } else {
        None
    };

    IncompleteDataset::new(img, txt, mask, labels, manifest.k, manifest.seed)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))
}
