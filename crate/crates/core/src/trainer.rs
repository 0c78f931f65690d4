//! Alternating optimization of encoders, generators, discriminators and
//! centroids, plus inference and checkpoints.
//!
//! One outer iteration runs, in order: encoder steps for image and text,
//! generator steps for both directions, discriminator steps for both
//! directions, then a refresh of every representation and, on schedule, of
//! the centroids and target distributions.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cgan::{
    discriminator_objective, generate_train, generator_objective, mean_noise, sample_noise, DiscSpec,
    Discriminator, Direction, GanPair, GeneratorLossForm, NoiseSpec,
};
use crate::checkpoint::{assign_tensors, quantize, read_tensors, write_tensors};
use crate::clusterhead::{
    argmax_rows, kl_to_soft_assign, kmeans, lloyd, soft_assign, target_distribution, AssignKind, AssignMatrix,
    Centroids, Modality, KMEANS_MAX_ITER,
};
use crate::dataio::{IncompleteDataset, Presence};
use crate::encoders::{encode, fuse_matrix, fuse_row_with_fakes, fuse_with_fakes, FusionWeights, SubspaceState};
use crate::error::{Error, Result};
use crate::evalkit::{max_weight_matching, score, MetricPair};
use crate::nn::{init_params, MlpSpec, Mode, NetParams, DEFAULT_SLOPE};
use crate::optim::Sgd;
use crate::seed;

/// Which parts of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Generated representations carry no weight for complete instances and
    /// the generators and discriminators are never updated.
    NoGan,
    /// Encoders stay at their initialization; only the adversarial part trains.
    NoKl,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoGan, Variant::NoKl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGan => "no_gan",
            Variant::NoKl => "no_kl",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}; expected full, no_gan or no_kl")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub d_sub: usize,
    pub enc_hidden: Vec<usize>,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: usize,
    pub disc_mid: usize,
    pub mbd_kernels: usize,
    pub mbd_dim: usize,
    pub slope: f64,
    pub beta: f64,
    pub alpha: f64,
    pub eta_img: f64,
    pub eta_txt: f64,
    pub mu: f64,
    /// Student-t degrees of freedom.
    pub delta: f64,
    pub lr: f64,
    /// Learning rate for generators and discriminators; `lr` when absent.
    pub gan_lr: Option<f64>,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub enc_steps: usize,
    pub gen_steps: usize,
    pub disc_steps: usize,
    pub target_refresh_epochs: usize,
    pub d_gauss: usize,
    pub seed: u64,
    pub generator_loss_form: GeneratorLossForm,
    pub restarts: usize,
    pub freeze_fused_centroids_in_enc_step: bool,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 3,
            d_sub: 128,
            enc_hidden: vec![256, 256],
            gen_hidden: vec![256, 256],
            disc_hidden: 128,
            disc_mid: 64,
            mbd_kernels: 32,
            mbd_dim: 16,
            slope: DEFAULT_SLOPE,
            beta: 0.5,
            alpha: 1.0,
            eta_img: 0.1,
            eta_txt: 0.1,
            mu: 1.0,
            delta: 1.0,
            lr: 1e-3,
            gan_lr: None,
            momentum: 0.9,
            batch_size: 64,
            max_iters: 200,
            enc_steps: 1,
            gen_steps: 1,
            disc_steps: 1,
            target_refresh_epochs: 5,
            d_gauss: 32,
            seed: 0,
            generator_loss_form: GeneratorLossForm::Nonsaturating,
            restarts: 20,
            freeze_fused_centroids_in_enc_step: false,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    /// Layer widths sized for 4096-wide pretrained image features:
    /// 2048/1024 encoder layers, 1024-wide generator layers, a 512-wide
    /// stage after minibatch discrimination and 300 noise units in total.
    pub fn wide(k: usize) -> Self {
        Self {
            k,
            d_sub: 256,
            enc_hidden: vec![2048, 1024],
            gen_hidden: vec![1024, 1024],
            disc_hidden: 2048,
            disc_mid: 512,
            d_gauss: 300usize.saturating_sub(k).max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.k < 2 {
            return bad("K must be at least 2");
        }
        if self.d_sub == 0 || self.d_gauss == 0 || self.disc_hidden == 0 || self.disc_mid == 0 {
            return bad("layer widths must be positive");
        }
        if self.enc_hidden.contains(&0) || self.gen_hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        for (name, v) in [("alpha", self.alpha), ("eta_img", self.eta_img), ("eta_txt", self.eta_txt), ("mu", self.mu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.gan_lr.is_some_and(|g| !(g > 0.0 && g.is_finite())) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.delta > 0.0) {
            return bad("delta must be positive");
        }
        if self.max_iters == 0 {
            return bad("at least one iteration is required");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.restarts == 0 || self.target_refresh_epochs == 0 {
            return bad("restarts and target_refresh_epochs must be positive");
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return bad("leaky slope must lie in (0, 1)");
        }
        Ok(())
    }

    /// The configuration actually trained, with the variant's overrides applied.
    pub fn effective(&self) -> TrainConfig {
        let mut c = self.clone();
        match self.variant {
            Variant::Full => {}
            Variant::NoGan => {
                c.eta_img = 0.0;
                c.eta_txt = 0.0;
                c.gen_steps = 0;
                c.disc_steps = 0;
            }
            Variant::NoKl => {
                c.alpha = 0.0;
                c.enc_steps = 0;
            }
        }
        c
    }

    pub fn fusion_weights(&self) -> FusionWeights {
        FusionWeights {
            beta: self.beta,
            eta_img: self.eta_img,
            eta_txt: self.eta_txt,
        }
    }

    fn noise(&self) -> NoiseSpec {
        NoiseSpec { d_gauss: self.d_gauss, k: self.k }
    }

    fn disc_spec(&self) -> DiscSpec {
        DiscSpec {
            d_sub: self.d_sub,
            k: self.k,
            hidden: self.disc_hidden,
            kernels: self.mbd_kernels,
            kernel_dim: self.mbd_dim,
            mid: self.disc_mid,
        }
    }

    fn encoder_spec(&self, d_in: usize) -> Result<MlpSpec> {
        let mut dims = vec![d_in];
        dims.extend_from_slice(&self.enc_hidden);
        dims.push(self.d_sub);
        MlpSpec::new(dims, self.slope)
    }
}

pub const PHASE_ENC_IMG: &str = "enc_img";
pub const PHASE_ENC_TXT: &str = "enc_txt";
pub const PHASE_GEN_12: &str = "gen_12";
pub const PHASE_GEN_21: &str = "gen_21";
pub const PHASE_DISC_1: &str = "disc_1";
pub const PHASE_DISC_2: &str = "disc_2";
pub const PHASE_REFRESH: &str = "refresh";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iter: usize,
    pub phase: String,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    /// The configuration as given, variant included.
    pub config: TrainConfig,
    pub enc_img: NetParams,
    pub enc_txt: NetParams,
    pub g12: GanPair,
    pub g21: GanPair,
    /// Image, text and fused centroids.
    pub centroids: Vec<Centroids>,
    pub history: Vec<HistoryEntry>,
    /// Representations of the training set; absent after loading a checkpoint.
    pub state: Option<SubspaceState>,
    /// Labels of the training set at the final step; absent after loading.
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    pub labels: Vec<usize>,
    pub q_fus: AssignMatrix,
    pub z_fus: Array2<f64>,
    pub metrics: Option<MetricPair>,
}

/// Every representation and assignment for one dataset.
struct Snapshot {
    state: SubspaceState,
    q_img: Array2<f64>,
    q_txt: Array2<f64>,
    q_fus: Array2<f64>,
}

struct Parts<'a> {
    cfg: &'a TrainConfig,
    enc_img: &'a NetParams,
    enc_txt: &'a NetParams,
    g12: &'a GanPair,
    g21: &'a GanPair,
    centroids: &'a [Centroids],
}

impl TrainedModel {
    fn parts<'a>(&'a self, cfg: &'a TrainConfig) -> Parts<'a> {
        Parts {
            cfg,
            enc_img: &self.enc_img,
            enc_txt: &self.enc_txt,
            g12: &self.g12,
            g21: &self.g21,
            centroids: &self.centroids,
        }
    }

    fn quantize(&mut self) {
        quantize(self.enc_img.tensors_mut());
        quantize(self.enc_txt.tensors_mut());
        for pair in [&mut self.g12, &mut self.g21] {
            quantize(pair.gen.tensors_mut());
            quantize(pair.disc.tensors_mut());
        }
        for c in &mut self.centroids {
            c.mu.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

/// Apply `f` to `rows` of `x`; other rows of the result are zero.
fn on_rows(
    x: ArrayView2<'_, f64>,
    rows: &[usize],
    width: usize,
    f: impl FnOnce(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((x.nrows(), width));
    update_rows(&mut out, x, rows, f)?;
    Ok(out)
}

/// Overwrite `rows` of `dst` with `f` applied to the same rows of `x`.
fn update_rows(
    dst: &mut Array2<f64>,
    x: ArrayView2<'_, f64>,
    rows: &[usize],
    f: impl FnOnce(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let y = f(x.select(Axis(0), rows).view())?;
    for (r, &i) in rows.iter().enumerate() {
        dst.row_mut(i).assign(&y.row(r));
    }
    Ok(())
}

/// Generated counterparts for `rows`, with mean noise.
fn fakes(pair: &GanPair, z_src: &Array2<f64>, q_src: &Array2<f64>, rows: &[usize]) -> Result<Array2<f64>> {
    let q = q_src.select(Axis(0), rows);
    on_rows(z_src.view(), rows, pair.d_sub(), |z| {
        let noise = mean_noise(&pair.noise, &argmax_rows(q.view()))?;
        crate::cgan::generate(pair, noise.view(), z)
    })
}

fn assignments_and_fusion(
    parts: &Parts<'_>,
    ds: &IncompleteDataset,
    z_img: Array2<f64>,
    z_txt: Array2<f64>,
) -> Result<Snapshot> {
    let cfg = parts.cfg;
    let w = cfg.fusion_weights();
    let q_img = soft_assign(z_img.view(), &parts.centroids[0])?.q;
    let q_txt = soft_assign(z_txt.view(), &parts.centroids[1])?.q;
    let needed = |pick: fn((f64, f64)) -> f64| -> Vec<usize> {
        (0..ds.n()).filter(|&i| pick(w.fake_coefficients(ds.mask.get(i))) != 0.0).collect()
    };
    let fake_txt = fakes(parts.g12, &z_img, &q_img, &needed(|c| c.1))?;
    let fake_img = fakes(parts.g21, &z_txt, &q_txt, &needed(|c| c.0))?;
    let mut state = SubspaceState {
        z_img,
        z_txt,
        z_fus: Array2::zeros((0, 0)),
        fake_img,
        fake_txt,
        centroids: parts.centroids.to_vec(),
    };
    state.z_fus = fuse_with_fakes(&state, &ds.mask, &w)?;
    let q_fus = soft_assign(state.z_fus.view(), &parts.centroids[2])?.q;
    Ok(Snapshot { state, q_img, q_txt, q_fus })
}

/// Subspace representations of the present rows; absent rows stay zero.
fn encode_all(parts: &Parts<'_>, ds: &IncompleteDataset, x_img: &Array2<f64>, x_txt: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = parts.cfg.d_sub;
    Ok((
        on_rows(x_img.view(), &ds.mask.img_rows(), d, |x| encode(parts.enc_img, x))?,
        on_rows(x_txt.view(), &ds.mask.txt_rows(), d, |x| encode(parts.enc_txt, x))?,
    ))
}

fn check_compatible(model: &TrainedModel, ds: &IncompleteDataset) -> Result<()> {
    if ds.img.dim() != model.enc_img.input_dim() || ds.txt.dim() != model.enc_txt.input_dim() {
        return Err(Error::invalid(format!(
            "model expects feature widths {} and {}, dataset has {} and {}",
            model.enc_img.input_dim(),
            model.enc_txt.input_dim(),
            ds.img.dim(),
            ds.txt.dim()
        )));
    }
    Ok(())
}

fn snapshot(model: &TrainedModel, ds: &IncompleteDataset) -> Result<Snapshot> {
    check_compatible(model, ds)?;
    let cfg = model.config.effective();
    let parts = model.parts(&cfg);
    let (z_img, z_txt) = encode_all(&parts, ds, &ds.img.to_f64(), &ds.txt.to_f64())?;
    assignments_and_fusion(&parts, ds, z_img, z_txt)
}

/// Cluster `ds` with a trained model.
pub fn infer(model: &TrainedModel, ds: &IncompleteDataset) -> Result<ClusteringResult> {
    let snap = snapshot(model, ds)?;
    let labels = argmax_rows(snap.q_fus.view());
    let metrics = match &ds.labels {
        Some(truth) => Some(score(&labels, truth)?),
        None => None,
    };
    Ok(ClusteringResult {
        labels,
        q_fus: AssignMatrix {
            q: snap.q_fus,
            kind: AssignKind::Soft,
        },
        z_fus: snap.state.z_fus,
        metrics,
    })
}

/// Target distribution over `rows`, scattered into an `n x K` matrix.
/// Other rows are left uniform and never read.
fn targets_on(q: &Array2<f64>, rows: &[usize], phase: &str, iter: usize) -> Result<Array2<f64>> {
    let sub = AssignMatrix {
        q: q.select(Axis(0), rows),
        kind: AssignKind::Soft,
    };
    let p = target_distribution(&sub).map_err(|e| match e {
        Error::DegenerateCluster { cluster } => Error::Collapse {
            phase: phase.to_string(),
            iter,
            cluster,
        },
        other => other,
    })?;
    let k = q.ncols();
    let mut out = Array2::from_elem(q.raw_dim(), 1.0 / k as f64);
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(i).assign(&p.q.row(r));
    }
    Ok(out)
}

/// Relabel `mu` so that its clusters line up with the reference labels on
/// the rows both clusterings cover.
fn align_to(mu: Array2<f64>, own: &[usize], reference: &[usize]) -> Array2<f64> {
    let k = mu.nrows();
    let mut w = Array2::zeros((k, k));
    for (&a, &b) in own.iter().zip(reference) {
        w[[a, b]] += 1.0;
    }
    let matching = max_weight_matching(&w);
    let mut out = Array2::zeros(mu.raw_dim());
    for (from, to) in matching.iter().enumerate() {
        out.row_mut(to.expect("square matching")).assign(&mu.row(from));
    }
    out
}

struct Run<'a> {
    cfg: TrainConfig,
    ds: &'a IncompleteDataset,
    x_img: Array2<f64>,
    x_txt: Array2<f64>,
    rows_img: Vec<usize>,
    rows_txt: Vec<usize>,
    rows_complete: Vec<usize>,
    model: TrainedModel,
    snap: Snapshot,
    p_img: Array2<f64>,
    p_txt: Array2<f64>,
    p_fus: Array2<f64>,
}

/// Build the untrained model: initialized networks, k-means centroids and
/// the first target distributions.
pub fn initialize(ds: &IncompleteDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    Ok(Run::start(ds, cfg)?.finish_untrained())
}

impl<'a> Run<'a> {
    fn start(ds: &'a IncompleteDataset, given: &TrainConfig) -> Result<Self> {
        given.validate()?;
        ds.validate()?;
        let cfg = given.effective();
        if let Some(k) = ds.k {
            if k != cfg.k {
                return Err(Error::invalid(format!("dataset declares K={k}, config has K={}", cfg.k)));
            }
        }
        let rows_complete = ds.mask.complete_rows();
        if rows_complete.len() < cfg.k {
            return Err(Error::Initialization(format!(
                "{} complete instances cannot seed {} clusters",
                rows_complete.len(),
                cfg.k
            )));
        }
        let rows_img = ds.mask.img_rows();
        let rows_txt = ds.mask.txt_rows();
        let s = cfg.seed;
        let enc_img = init_params(&cfg.encoder_spec(ds.img.dim())?, seed::derive(s, "enc_img"))?;
        let enc_txt = init_params(&cfg.encoder_spec(ds.txt.dim())?, seed::derive(s, "enc_txt"))?;
        let noise = cfg.noise();
        let gen_spec = GanPair::generator_spec(cfg.d_sub, &noise, &cfg.gen_hidden, cfg.slope)?;
        let g12 = GanPair::new(
            Direction::ImgToTxt,
            noise,
            init_params(&gen_spec, seed::derive(s, "g12"))?,
            Discriminator::init(cfg.disc_spec(), cfg.slope, seed::derive(s, "d1"))?,
        )?;
        let g21 = GanPair::new(
            Direction::TxtToImg,
            noise,
            init_params(&gen_spec, seed::derive(s, "g21"))?,
            Discriminator::init(cfg.disc_spec(), cfg.slope, seed::derive(s, "d2"))?,
        )?;

        let x_img = ds.img.to_f64();
        let x_txt = ds.txt.to_f64();
        let z_img = on_rows(x_img.view(), &rows_img, cfg.d_sub, |x| encode(&enc_img, x))?;
        let z_txt = on_rows(x_txt.view(), &rows_txt, cfg.d_sub, |x| encode(&enc_txt, x))?;
        let zc_fus = fuse_matrix(
            z_img.select(Axis(0), &rows_complete).view(),
            z_txt.select(Axis(0), &rows_complete).view(),
            cfg.beta,
        )?;
        let km_fus = kmeans(zc_fus.view(), cfg.k, cfg.restarts, seed::derive(s, "kmeans/fus"))?;
        let mut centroids = Vec::with_capacity(3);
        for (m, z, rows) in [(Modality::Img, &z_img, &rows_img), (Modality::Txt, &z_txt, &rows_txt)] {
            let km = kmeans(
                z.select(Axis(0), rows).view(),
                cfg.k,
                cfg.restarts,
                seed::derive(s, &format!("kmeans/{}", m.name())),
            )?;
            let mut pos = vec![usize::MAX; ds.n()];
            for (r, &i) in rows.iter().enumerate() {
                pos[i] = r;
            }
            let own: Vec<usize> = rows_complete.iter().map(|&i| km.labels[pos[i]]).collect();
            let mu = align_to(km.centroids, &own, &km_fus.labels);
            centroids.push(Centroids { mu, modality: m, dof: cfg.delta });
        }
        centroids.push(Centroids {
            mu: km_fus.centroids,
            modality: Modality::Fus,
            dof: cfg.delta,
        });

        let model = TrainedModel {
            config: given.clone(),
            enc_img,
            enc_txt,
            g12,
            g21,
            centroids,
            history: Vec::new(),
            state: None,
            labels: None,
        };
        let snap = assignments_and_fusion(&model.parts(&cfg), ds, z_img, z_txt)?;
        let mut run = Self {
            ds,
            x_img,
            x_txt,
            rows_img,
            rows_txt,
            rows_complete,
            model,
            snap,
            p_img: Array2::zeros((0, 0)),
            p_txt: Array2::zeros((0, 0)),
            p_fus: Array2::zeros((0, 0)),
            cfg,
        };
        run.update_targets(0)?;
        Ok(run)
    }

    fn update_targets(&mut self, iter: usize) -> Result<()> {
        let all: Vec<usize> = (0..self.ds.n()).collect();
        self.p_img = targets_on(&self.snap.q_img, &self.rows_img, PHASE_REFRESH, iter)?;
        self.p_txt = targets_on(&self.snap.q_txt, &self.rows_txt, PHASE_REFRESH, iter)?;
        self.p_fus = targets_on(&self.snap.q_fus, &all, PHASE_REFRESH, iter)?;
        Ok(())
    }

    fn refresh(&mut self, iter: usize, recalc: bool) -> Result<()> {
        let (z_img, z_txt) = encode_all(&self.model.parts(&self.cfg), self.ds, &self.x_img, &self.x_txt)?;
        if !(z_img.iter().all(|v| v.is_finite()) && z_txt.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite {
                phase: PHASE_REFRESH.into(),
                iter,
            });
        }
        if recalc {
            for (c, z, rows) in [(0, &z_img, &self.rows_img), (1, &z_txt, &self.rows_txt)] {
                let fit = lloyd(
                    z.select(Axis(0), rows).view(),
                    self.model.centroids[c].mu.clone(),
                    KMEANS_MAX_ITER,
                )?;
                self.model.centroids[c].mu = fit.centroids;
            }
        }
        self.snap = assignments_and_fusion(&self.model.parts(&self.cfg), self.ds, z_img, z_txt)?;
        if recalc {
            let fit = lloyd(
                self.snap.state.z_fus.select(Axis(0), &self.rows_complete).view(),
                self.model.centroids[2].mu.clone(),
                KMEANS_MAX_ITER,
            )?;
            self.model.centroids[2].mu = fit.centroids;
            self.snap.q_fus = soft_assign(self.snap.state.z_fus.view(), &self.model.centroids[2])?.q;
            self.snap.state.centroids = self.model.centroids.clone();
            self.update_targets(iter)?;
        }
        if !self.snap.state.z_fus.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                phase: PHASE_REFRESH.into(),
                iter,
            });
        }
        Ok(())
    }

    /// Recompute representations and assignments on `rows` only. Between
    /// centroid recalculations the steps read nothing else.
    fn refresh_rows(&mut self, rows: &[usize], iter: usize) -> Result<()> {
        let parts = self.model.parts(&self.cfg);
        let w = self.cfg.fusion_weights();
        let mask = &self.ds.mask;
        let pick = |keep: &dyn Fn(Presence) -> bool| -> Vec<usize> {
            rows.iter().copied().filter(|&i| keep(mask.get(i))).collect()
        };
        let img = pick(&|p| p.has_img);
        let txt = pick(&|p| p.has_txt);
        let fake_txt_rows = pick(&|p| w.fake_coefficients(p).1 != 0.0);
        let fake_img_rows = pick(&|p| w.fake_coefficients(p).0 != 0.0);
        let s = &mut self.snap;
        update_rows(&mut s.state.z_img, self.x_img.view(), &img, |x| encode(parts.enc_img, x))?;
        update_rows(&mut s.state.z_txt, self.x_txt.view(), &txt, |x| encode(parts.enc_txt, x))?;
        let finite = |z: &Array2<f64>, rows: &[usize]| rows.iter().all(|&i| z.row(i).iter().all(|v| v.is_finite()));
        if !(finite(&s.state.z_img, &img) && finite(&s.state.z_txt, &txt)) {
            return Err(Error::NonFinite {
                phase: PHASE_REFRESH.into(),
                iter,
            });
        }
        update_rows(&mut s.q_img, s.state.z_img.view(), rows, |z| Ok(soft_assign(z, &parts.centroids[0])?.q))?;
        update_rows(&mut s.q_txt, s.state.z_txt.view(), rows, |z| Ok(soft_assign(z, &parts.centroids[1])?.q))?;
        let ft = fakes(parts.g12, &s.state.z_img, &s.q_img, &fake_txt_rows)?;
        let fi = fakes(parts.g21, &s.state.z_txt, &s.q_txt, &fake_img_rows)?;
        for &i in &fake_txt_rows {
            s.state.fake_txt.row_mut(i).assign(&ft.row(i));
        }
        for &i in &fake_img_rows {
            s.state.fake_img.row_mut(i).assign(&fi.row(i));
        }
        let st = &mut s.state;
        for &i in rows {
            let z = fuse_row_with_fakes(
                mask.get(i),
                st.z_img.row(i),
                st.z_txt.row(i),
                st.fake_img.row(i),
                st.fake_txt.row(i),
                &w,
            );
            st.z_fus.row_mut(i).assign(&z);
        }
        if !finite(&s.state.z_fus, rows) {
            return Err(Error::NonFinite {
                phase: PHASE_REFRESH.into(),
                iter,
            });
        }
        update_rows(&mut s.q_fus, s.state.z_fus.view(), rows, |z| Ok(soft_assign(z, &parts.centroids[2])?.q))?;
        s.state.centroids = self.model.centroids.clone();
        Ok(())
    }

    /// Rows the minibatches of the next iteration will draw.
    fn upcoming_rows(&self, rngs: &Streams) -> Vec<usize> {
        let c = &self.cfg;
        let mut need = vec![false; self.ds.n()];
        let mut mark = |pool: &[usize], steps: usize, rng: &seed::Rng| {
            let mut rng = rng.clone();
            for _ in 0..steps {
                for i in batch(pool, c.batch_size, &mut rng) {
                    need[i] = true;
                }
            }
        };
        mark(&self.rows_img, c.enc_steps, &rngs.enc[0]);
        mark(&self.rows_txt, c.enc_steps, &rngs.enc[1]);
        for d in 0..2 {
            mark(&self.rows_complete, c.gen_steps, &rngs.gen[d]);
            mark(&self.rows_complete, c.disc_steps, &rngs.disc[d]);
        }
        (0..need.len()).filter(|&i| need[i]).collect()
    }

    fn finish_untrained(self) -> TrainedModel {
        let labels = argmax_rows(self.snap.q_fus.view());
        TrainedModel {
            state: Some(self.snap.state),
            labels: Some(labels),
            ..self.model
        }
    }
}

fn batch(rows: &[usize], size: usize, rng: &mut seed::Rng) -> Vec<usize> {
    let take = size.min(rows.len());
    rand::seq::index::sample(rng, rows.len(), take)
        .into_iter()
        .map(|i| rows[i])
        .collect()
}

fn record(history: &mut Vec<HistoryEntry>, iter: usize, phase: &str, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            phase: phase.to_string(),
            iter,
        });
    }
    history.push(HistoryEntry {
        iter,
        phase: phase.to_string(),
        loss,
    });
    Ok(())
}

struct Optimizers {
    enc: [Sgd; 2],
    mu: [Sgd; 3],
    gen: [Sgd; 2],
    disc: [Sgd; 2],
}

struct Streams {
    enc: [seed::Rng; 2],
    gen: [seed::Rng; 2],
    disc: [seed::Rng; 2],
    noise_gen: [seed::Rng; 2],
    noise_disc: [seed::Rng; 2],
}

impl Streams {
    fn new(s: u64) -> Self {
        Self {
            enc: [seed::rng(s, "batch/enc_img"), seed::rng(s, "batch/enc_txt")],
            gen: [seed::rng(s, "batch/gen_12"), seed::rng(s, "batch/gen_21")],
            disc: [seed::rng(s, "batch/disc_1"), seed::rng(s, "batch/disc_2")],
            noise_gen: [seed::rng(s, "noise/gen_12"), seed::rng(s, "noise/gen_21")],
            noise_disc: [seed::rng(s, "noise/disc_1"), seed::rng(s, "noise/disc_2")],
        }
    }
}

impl Run<'_> {
    fn encoder_step(&mut self, m: usize, iter: usize, opt: &mut Optimizers, rng: &mut seed::Rng) -> Result<()> {
        let cfg = &self.cfg;
        let (rows_all, x, p_m, z_state, c_m, phase) = if m == 0 {
            (&self.rows_img, &self.x_img, &self.p_img, &self.snap.state.z_img, 1.0 - cfg.beta, PHASE_ENC_IMG)
        } else {
            (&self.rows_txt, &self.x_txt, &self.p_txt, &self.snap.state.z_txt, cfg.beta, PHASE_ENC_TXT)
        };
        let rows = batch(rows_all, cfg.batch_size, rng);
        let b = rows.len() as f64;
        let enc = if m == 0 { &self.model.enc_img } else { &self.model.enc_txt };
        let (z, cache) = enc.forward_cached(x.select(Axis(0), &rows).view(), Mode::Train)?;
        let target = AssignMatrix {
            q: p_m.select(Axis(0), &rows),
            kind: AssignKind::Target,
        };
        let (own, mut dz, dmu) = kl_to_soft_assign(z.view(), &self.model.centroids[m], &target)?;
        let mut loss = own;
        let mut dmu_fus = None;
        if cfg.alpha > 0.0 {
            let rest = self.snap.state.z_fus.select(Axis(0), &rows) - z_state.select(Axis(0), &rows) * c_m;
            let zf = rest + &z * c_m;
            let target_fus = AssignMatrix {
                q: self.p_fus.select(Axis(0), &rows),
                kind: AssignKind::Target,
            };
            let (fus, dzf, dmu3) = kl_to_soft_assign(zf.view(), &self.model.centroids[2], &target_fus)?;
            loss += cfg.alpha * fus;
            dz += &(dzf * (cfg.alpha * c_m));
            dmu_fus = Some(dmu3 * cfg.alpha);
        }
        record(&mut self.model.history, iter, phase, loss / b)?;
        dz /= b;
        let (grads, _) = enc.backward(&cache, dz.view());
        let dmu = dmu / b;
        let enc = if m == 0 { &mut self.model.enc_img } else { &mut self.model.enc_txt };
        opt.enc[m].step(enc.learnable_mut(), grads.tensors());
        opt.mu[m].step(
            vec![self.model.centroids[m].mu.view_mut().into_dyn()],
            vec![dmu.view().into_dyn()],
        );
        if let Some(d3) = dmu_fus {
            if !cfg.freeze_fused_centroids_in_enc_step {
                let d3 = d3 / b;
                opt.mu[2].step(
                    vec![self.model.centroids[2].mu.view_mut().into_dyn()],
                    vec![d3.view().into_dyn()],
                );
            }
        }
        Ok(())
    }

    /// Source and target representations and assignments for a direction.
    fn direction_views(&self, d: usize) -> (&Array2<f64>, &Array2<f64>, &Array2<f64>, &Array2<f64>) {
        let s = &self.snap;
        if d == 0 {
            (&s.state.z_img, &s.q_img, &s.state.z_txt, &s.q_txt)
        } else {
            (&s.state.z_txt, &s.q_txt, &s.state.z_img, &s.q_img)
        }
    }

    fn generator_step(&mut self, d: usize, iter: usize, opt: &mut Sgd, rng: &mut seed::Rng, noise_rng: &mut seed::Rng) -> Result<()> {
        let rows = batch(&self.rows_complete, self.cfg.batch_size, rng);
        let (z_src, q_src, z_tgt, _) = self.direction_views(d);
        let src = z_src.select(Axis(0), &rows);
        let q = q_src.select(Axis(0), &rows);
        let real = z_tgt.select(Axis(0), &rows);
        let pair = if d == 0 { &self.model.g12 } else { &self.model.g21 };
        let noise = sample_noise(rows.len(), &pair.noise, &argmax_rows(q.view()), noise_rng)?;
        let (fake, cache) = generate_train(pair, noise.view(), src.view())?;
        let (loss, dfake) = generator_objective(
            &pair.disc,
            fake.view(),
            q.view(),
            real.view(),
            self.cfg.mu,
            self.cfg.generator_loss_form,
        )?;
        record(&mut self.model.history, iter, if d == 0 { PHASE_GEN_12 } else { PHASE_GEN_21 }, loss)?;
        let (grads, _) = pair.gen.backward(&cache, dfake.view());
        let pair = if d == 0 { &mut self.model.g12 } else { &mut self.model.g21 };
        pair.gen.update_running_stats(&cache);
        opt.step(pair.gen.learnable_mut(), grads.tensors());
        Ok(())
    }

    fn discriminator_step(&mut self, d: usize, iter: usize, opt: &mut Sgd, rng: &mut seed::Rng, noise_rng: &mut seed::Rng) -> Result<()> {
        let rows = batch(&self.rows_complete, self.cfg.batch_size, rng);
        let (z_src, q_src, z_tgt, q_tgt) = self.direction_views(d);
        let src = z_src.select(Axis(0), &rows);
        let q_fake = q_src.select(Axis(0), &rows);
        let real = z_tgt.select(Axis(0), &rows);
        let q_real = q_tgt.select(Axis(0), &rows);
        let pair = if d == 0 { &self.model.g12 } else { &self.model.g21 };
        let noise = sample_noise(rows.len(), &pair.noise, &argmax_rows(q_fake.view()), noise_rng)?;
        let (fake, _) = generate_train(pair, noise.view(), src.view())?;
        let (loss, grads) = discriminator_objective(&pair.disc, real.view(), q_real.view(), fake.view(), q_fake.view())?;
        record(&mut self.model.history, iter, if d == 0 { PHASE_DISC_1 } else { PHASE_DISC_2 }, loss)?;
        let pair = if d == 0 { &mut self.model.g12 } else { &mut self.model.g21 };
        opt.step(pair.disc.learnable_mut(), grads.tensors());
        Ok(())
    }
}

/// Train on `ds` from scratch.
pub fn train(ds: &IncompleteDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    let mut run = Run::start(ds, cfg)?;
    let c = run.cfg.clone();
    let gan_lr = c.gan_lr.unwrap_or(c.lr);
    let mut opt = Optimizers {
        enc: [Sgd::new(c.lr, c.momentum), Sgd::new(c.lr, c.momentum)],
        mu: [Sgd::new(c.lr, c.momentum), Sgd::new(c.lr, c.momentum), Sgd::new(c.lr, c.momentum)],
        gen: [Sgd::new(gan_lr, c.momentum), Sgd::new(gan_lr, c.momentum)],
        disc: [Sgd::new(gan_lr, c.momentum), Sgd::new(gan_lr, c.momentum)],
    };
    let mut rngs = Streams::new(c.seed);
    for iter in 0..c.max_iters {
        for m in 0..2 {
            for _ in 0..c.enc_steps {
                run.encoder_step(m, iter, &mut opt, &mut rngs.enc[m])?;
            }
        }
        for d in 0..2 {
            for _ in 0..c.gen_steps {
                run.generator_step(d, iter, &mut opt.gen[d], &mut rngs.gen[d], &mut rngs.noise_gen[d])?;
            }
        }
        for d in 0..2 {
            for _ in 0..c.disc_steps {
                run.discriminator_step(d, iter, &mut opt.disc[d], &mut rngs.disc[d], &mut rngs.noise_disc[d])?;
            }
        }
        if (iter + 1) % c.target_refresh_epochs == 0 {
            run.refresh(iter, true)?;
        } else {
            let rows = run.upcoming_rows(&rngs);
            run.refresh_rows(&rows, iter)?;
        }
        log::debug!("iteration {iter} done");
    }
    run.model.quantize();
    run.refresh(c.max_iters, false)?;
    Ok(run.finish_untrained())
}

const CONFIG_FILE: &str = "config.json";
const CENTROIDS_FILE: &str = "centroids.f32";
const HISTORY_FILE: &str = "history.csv";

fn write_net(path: &Path, kind: &str, net: &NetParams) -> Result<()> {
    write_tensors(path, kind, serde_json::to_value(&net.spec)?, &net.named_tensors())
}

fn read_net(path: &Path, kind: &str) -> Result<NetParams> {
    let (header, loaded) = read_tensors(path)?;
    let spec: MlpSpec = serde_json::from_value(header.spec.clone())
        .map_err(|e| Error::format(path, format!("bad network spec: {e}")))?;
    let mut net = NetParams::zeros(&spec).map_err(|e| Error::format(path, e.to_string()))?;
    assign_tensors(path, &header, kind, loaded, net.tensors_mut())?;
    Ok(net)
}

#[derive(Serialize, Deserialize)]
struct DiscHeader {
    disc: DiscSpec,
    slope: f64,
}

fn write_disc(path: &Path, disc: &Discriminator) -> Result<()> {
    let spec = DiscHeader {
        disc: disc.spec,
        slope: disc.pre.spec.slope,
    };
    write_tensors(path, "discriminator", serde_json::to_value(&spec)?, &disc.named_tensors())
}

fn read_disc(path: &Path) -> Result<Discriminator> {
    let (header, loaded) = read_tensors(path)?;
    let spec: DiscHeader = serde_json::from_value(header.spec.clone())
        .map_err(|e| Error::format(path, format!("bad discriminator spec: {e}")))?;
    let mut disc = Discriminator::zeros(spec.disc, spec.slope).map_err(|e| Error::format(path, e.to_string()))?;
    assign_tensors(path, &header, "discriminator", loaded, disc.tensors_mut())?;
    Ok(disc)
}

impl TrainedModel {
    /// Write a checkpoint directory. Values are stored as `f32`; trained
    /// models are already rounded to `f32`, so loading them back is exact.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)? + "\n")?;
        write_net(&dir.join("enc_img.bin"), "encoder", &self.enc_img)?;
        write_net(&dir.join("enc_txt.bin"), "encoder", &self.enc_txt)?;
        for pair in [&self.g12, &self.g21] {
            let d = pair.direction;
            write_net(&dir.join(format!("{}.bin", d.name())), "generator", &pair.gen)?;
            write_disc(&dir.join(format!("{}.bin", d.disc_name())), &pair.disc)?;
        }
        let bytes: Vec<u8> = self
            .centroids
            .iter()
            .flat_map(|c| c.mu.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect::<Vec<_>>())
            .collect();
        fs::write(dir.join(CENTROIDS_FILE), bytes)?;
        let mut w = csv::Writer::from_path(dir.join(HISTORY_FILE))?;
        for h in &self.history {
            w.serialize(h)?;
        }
        if self.history.is_empty() {
            w.write_record(["iter", "phase", "loss"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config_path = dir.join(CONFIG_FILE);
        let config: TrainConfig = serde_json::from_str(&fs::read_to_string(&config_path)?)
            .map_err(|e| Error::format(&config_path, format!("malformed config: {e}")))?;
        config.validate().map_err(|e| Error::format(&config_path, e.to_string()))?;
        let enc_img = read_net(&dir.join("enc_img.bin"), "encoder")?;
        let enc_txt = read_net(&dir.join("enc_txt.bin"), "encoder")?;
        let noise = config.noise();
        let mut pairs = Vec::with_capacity(2);
        for d in [Direction::ImgToTxt, Direction::TxtToImg] {
            let gen = read_net(&dir.join(format!("{}.bin", d.name())), "generator")?;
            let disc = read_disc(&dir.join(format!("{}.bin", d.disc_name())))?;
            pairs.push(GanPair::new(d, noise, gen, disc).map_err(|e| Error::format(dir, e.to_string()))?);
        }
        let g21 = pairs.pop().expect("two pairs");
        let g12 = pairs.pop().expect("two pairs");
        for net in [&enc_img, &enc_txt] {
            if net.output_dim() != config.d_sub {
                return Err(Error::format(dir, "encoder width disagrees with config"));
            }
        }

        let cpath = dir.join(CENTROIDS_FILE);
        let bytes = fs::read(&cpath)?;
        let per = config.k * config.d_sub;
        if bytes.len() != 3 * per * 4 {
            return Err(Error::format(
                &cpath,
                format!("expected {} bytes, found {}", 3 * per * 4, bytes.len()),
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let centroids = Modality::ALL
            .iter()
            .enumerate()
            .map(|(i, &m)| Centroids {
                mu: Array2::from_shape_vec((config.k, config.d_sub), values[i * per..(i + 1) * per].to_vec())
                    .expect("length checked"),
                modality: m,
                dof: config.delta,
            })
            .collect();

        let mut history = Vec::new();
        let mut r = csv::Reader::from_path(dir.join(HISTORY_FILE))?;
        for row in r.deserialize() {
            history.push(row?);
        }
        Ok(Self {
            config,
            enc_img,
            enc_txt,
            g12,
            g21,
            centroids,
            history,
            state: None,
            labels: None,
        })
    }
}
