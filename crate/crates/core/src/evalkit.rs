//! Clustering metrics, baselines and ablation runners.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::mpsc;
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clusterhead::kmeans;
use crate::dataio::{apply_mask, make_missing_mask, IncompleteDataset};
use crate::error::{Error, Result};
use crate::seed;
use crate::trainer::{infer, train, TrainConfig, Variant};

/// Accuracy and normalized mutual information, both in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub acc: f64,
    pub nmi: f64,
}

/// Column chosen for each row of a `r x c` weight matrix so that the total
/// weight is maximal. Rows beyond `c` get `None`.
pub fn max_weight_matching(w: &Array2<f64>) -> Vec<Option<usize>> {
    let (r, c) = w.dim();
    let n = r.max(c);
    if n == 0 {
        return Vec::new();
    }
    let max = w.iter().copied().fold(0.0f64, f64::max);
    let cost = |i: usize, j: usize| if i < r && j < c { max - w[[i, j]] } else { max };
    // Shortest augmenting path with potentials, 1-based with a virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; r];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= r && j <= c {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

fn dense_ids(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

fn contingency(pred: &[usize], truth: &[usize]) -> Result<Array2<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "label vectors differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("empty label vectors"));
    }
    let (p, kp) = dense_ids(pred);
    let (t, kt) = dense_ids(truth);
    let mut c = Array2::zeros((kp, kt));
    for (&a, &b) in p.iter().zip(&t) {
        c[[a, b]] += 1.0;
    }
    Ok(c)
}

/// Fraction of agreements under the best one-to-one cluster-to-class map.
/// Clusters left without a class count as wrong.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let c = contingency(pred, truth)?;
    let matched: f64 = max_weight_matching(&c)
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| c[[i, j]]))
        .sum();
    Ok(matched / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = f64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0.0)
        .map(|c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by `sqrt(H(pred) H(truth))`.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let c = contingency(pred, truth)?;
    let n = pred.len() as f64;
    let rows = c.sum_axis(ndarray::Axis(1));
    let cols = c.sum_axis(ndarray::Axis(0));
    let h1 = entropy(rows.iter().copied(), n);
    let h2 = entropy(cols.iter().copied(), n);
    if h1 == 0.0 && h2 == 0.0 {
        return Ok(1.0);
    }
    if h1 == 0.0 || h2 == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for ((i, j), &nij) in c.indexed_iter() {
        if nij > 0.0 {
            mi += nij / n * (n * nij / (rows[i] * cols[j])).ln();
        }
    }
    Ok((mi / (h1 * h2).sqrt()).clamp(0.0, 1.0))
}

pub fn score(pred: &[usize], truth: &[usize]) -> Result<MetricPair> {
    Ok(MetricPair {
        acc: clustering_accuracy(pred, truth)?,
        nmi: nmi(pred, truth)?,
    })
}

fn truth(ds: &IncompleteDataset) -> Result<&[usize]> {
    ds.labels
        .as_deref()
        .ok_or_else(|| Error::invalid("dataset has no ground-truth labels"))
}

/// k-means on each modality's present rows, scored on those rows.
/// A modality with fewer than `k` present rows is skipped.
pub fn single_modality_scores(
    ds: &IncompleteDataset,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<(Option<MetricPair>, Option<MetricPair>)> {
    let truth = truth(ds)?;
    let run = |table: &crate::dataio::FeatureTable, rows: Vec<usize>, tag: &str| -> Result<Option<MetricPair>> {
        if rows.len() < k {
            log::warn!("skipping {tag}: {} present rows for {k} clusters", rows.len());
            return Ok(None);
        }
        let fit = kmeans(table.gather_f64(&rows).view(), k, restarts, seed::derive(seed, tag))?;
        let t: Vec<usize> = rows.iter().map(|&i| truth[i]).collect();
        Ok(Some(score(&fit.labels, &t)?))
    };
    Ok((
        run(&ds.img, ds.mask.img_rows(), "single/img")?,
        run(&ds.txt, ds.mask.txt_rows(), "single/txt")?,
    ))
}

/// The better (by accuracy) of the two single-modality k-means results.
pub fn best_single_modality(ds: &IncompleteDataset, k: usize, restarts: usize, seed: u64) -> Result<MetricPair> {
    match single_modality_scores(ds, k, restarts, seed)? {
        (Some(a), Some(b)) => Ok(if b.acc > a.acc { b } else { a }),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::invalid("neither modality has enough present rows")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeStrategy {
    Zero,
    Mean,
}

/// Both modalities side by side, absent rows filled by `strategy`.
pub fn impute(ds: &IncompleteDataset, strategy: ImputeStrategy) -> Array2<f64> {
    let fill = |table: &crate::dataio::FeatureTable, present: Vec<usize>| {
        let mut x = table.to_f64();
        let mut absent = vec![true; x.nrows()];
        for &i in &present {
            absent[i] = false;
        }
        let value = match strategy {
            ImputeStrategy::Zero => ndarray::Array1::zeros(x.ncols()),
            ImputeStrategy::Mean if present.is_empty() => ndarray::Array1::zeros(x.ncols()),
            ImputeStrategy::Mean => x.select(Axis(0), &present).mean_axis(Axis(0)).expect("non-empty"),
        };
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            if absent[i] {
                row.assign(&value);
            }
        }
        x
    };
    let img = fill(&ds.img, ds.mask.img_rows());
    let txt = fill(&ds.txt, ds.mask.txt_rows());
    concatenate![Axis(1), img, txt]
}

/// k-means on the imputed, concatenated features.
pub fn impute_baseline(
    ds: &IncompleteDataset,
    strategy: ImputeStrategy,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<MetricPair> {
    let truth = truth(ds)?;
    let x = impute(ds, strategy);
    let fit = kmeans(x.view(), k, restarts, seed::derive(seed, "impute"))?;
    score(&fit.labels, truth)
}

/// Train `variant` of the method on `ds` and score its clustering.
pub fn ablation_run(ds: &IncompleteDataset, cfg: &TrainConfig, variant: Variant) -> Result<MetricPair> {
    truth(ds)?;
    let cfg = TrainConfig { variant, ..cfg.clone() };
    let model = train(ds, &cfg)?;
    infer(&model, ds)?
        .metrics
        .ok_or_else(|| Error::invalid("dataset has no ground-truth labels"))
}

/// Methods compared in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClusterGan,
    BestSingle,
    ZeroFill,
    MeanFill,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ClusterGan, Method::BestSingle, Method::ZeroFill, Method::MeanFill];

    pub fn name(self) -> &'static str {
        match self {
            Method::ClusterGan => "cluster_gan",
            Method::BestSingle => "best_single",
            Method::ZeroFill => "zero_fill",
            Method::MeanFill => "mean_fill",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// One method's score on one masked dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub variant: Option<Variant>,
    pub missing_rate: f64,
    pub seed: u64,
    pub acc: f64,
    pub nmi: f64,
    pub runtime_s: f64,
}

/// Score `method` on `ds` (already masked).
pub fn run_method(ds: &IncompleteDataset, cfg: &TrainConfig, method: Method, seed: u64) -> Result<RunRecord> {
    let start = Instant::now();
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let m = match method {
        Method::ClusterGan => ablation_run(ds, &cfg, cfg.variant)?,
        Method::BestSingle => best_single_modality(ds, cfg.k, cfg.restarts, seed)?,
        Method::ZeroFill => impute_baseline(ds, ImputeStrategy::Zero, cfg.k, cfg.restarts, seed)?,
        Method::MeanFill => impute_baseline(ds, ImputeStrategy::Mean, cfg.k, cfg.restarts, seed)?,
    };
    Ok(RunRecord {
        method: method.name().to_string(),
        variant: (method == Method::ClusterGan).then_some(cfg.variant),
        missing_rate: ds.mask.missing_rate(),
        seed,
        acc: m.acc,
        nmi: m.nmi,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// One line of a sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub missing_rate: f64,
    pub seed: u64,
    pub method: String,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Split ratio used when a sweep masks the data.
pub const SWEEP_SPLIT_RATIO: f64 = 0.5;

/// Mask a fully present dataset at rate `p` with seed `seed`.
pub fn masked(base: &IncompleteDataset, p: f64, seed: u64) -> Result<IncompleteDataset> {
    let mask = make_missing_mask(base.n(), p, SWEEP_SPLIT_RATIO, seed)?;
    apply_mask(base, &mask)
}

fn key(p: f64, seed: u64, method: &str) -> (i64, u64, String) {
    ((p * 1e6).round() as i64, seed, method.to_string())
}

/// Read the rows of an existing sweep CSV; a missing file has none.
pub fn read_sweep(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Run every method for every `(p, seed)` pair on masks of `base`, appending
/// one CSV row per run. Rows already in the file are skipped, so an
/// interrupted sweep resumes where it stopped. A failing run is recorded with
/// its error in the status column and the sweep continues.
///
/// Returns every row of the grid, old and new, ordered by `p`, seed and method.
pub fn run_sweep(
    base: &IncompleteDataset,
    cfg: &TrainConfig,
    plist: &[f64],
    seeds: &[u64],
    methods: &[Method],
    csv_path: impl AsRef<Path>,
) -> Result<Vec<SweepRow>> {
    let csv_path = csv_path.as_ref();
    if !base.mask.is_fully_present() {
        return Err(Error::invalid("a sweep masks the data itself and needs a fully present dataset"));
    }
    truth(base)?;
    if let Some(p) = plist.iter().find(|p| !(0.0..=0.9).contains(*p)) {
        return Err(Error::invalid(format!("missing rate {p} outside [0, 0.9]")));
    }
    let existing = read_sweep(csv_path)?;
    let done: HashSet<_> = existing.iter().map(|r| key(r.missing_rate, r.seed, &r.method)).collect();
    let mut jobs = Vec::new();
    for &p in plist {
        for &s in seeds {
            for &m in methods {
                if !done.contains(&key(p, s, m.name())) {
                    jobs.push((p, s, m));
                }
            }
        }
    }
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = fs::OpenOptions::new().create(true).append(true).open(csv_path)?;
    let needs_header = file.metadata()?.len() == 0;
    let mut writer = csv::WriterBuilder::new().has_headers(needs_header).from_writer(file);

    let (tx, rx) = mpsc::channel::<SweepRow>();
    let mut new_rows = Vec::with_capacity(jobs.len());
    let mut write_err = None;
    std::thread::scope(|scope| {
        scope.spawn(move || {
            jobs.par_iter().for_each_with(tx, |tx, &(p, s, m)| {
                let outcome = masked(base, p, s).and_then(|ds| run_method(&ds, cfg, m, s));
                let row = match outcome {
                    Ok(r) => SweepRow {
                        missing_rate: p,
                        seed: s,
                        method: m.name().to_string(),
                        acc: Some(r.acc),
                        nmi: Some(r.nmi),
                        status: "ok".into(),
                    },
                    Err(e) => SweepRow {
                        missing_rate: p,
                        seed: s,
                        method: m.name().to_string(),
                        acc: None,
                        nmi: None,
                        status: format!("error: {e}"),
                    },
                };
                let _ = tx.send(row);
            });
        });
        for row in rx.iter() {
            log::info!("sweep p={} seed={} {}: {}", row.missing_rate, row.seed, row.method, row.status);
            if write_err.is_none() {
                if let Err(e) = writer.serialize(&row).and_then(|_| writer.flush().map_err(Into::into)) {
                    write_err = Some(e);
                }
            }
            new_rows.push(row);
        }
    });
    if let Some(e) = write_err {
        return Err(e.into());
    }

    let grid: HashSet<_> = plist
        .iter()
        .flat_map(|&p| seeds.iter().flat_map(move |&s| methods.iter().map(move |m| key(p, s, m.name()))))
        .collect();
    let mut rows: Vec<SweepRow> = existing
        .into_iter()
        .chain(new_rows)
        .filter(|r| grid.contains(&key(r.missing_rate, r.seed, &r.method)))
        .collect();
    let order = |r: &SweepRow| {
        let (p, s, _) = key(r.missing_rate, r.seed, &r.method);
        let mi = Method::ALL.iter().position(|m| m.name() == r.method).unwrap_or(usize::MAX);
        (p, s, mi)
    };
    rows.sort_by_key(order);
    Ok(rows)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}
