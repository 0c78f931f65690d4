//! Subspace conditional clustering GAN.
//!
//! `G12` turns an image representation into a fake text representation and
//! `D1` judges text representations; `G21` and `D2` mirror them. Generator
//! input is `[gaussian noise | one-hot cluster | source representation]`.
//! Discriminator input is `[representation | soft assignment]` and passes
//! through a dense layer, a minibatch-discrimination block, a second dense
//! layer and a sigmoid head.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clusterhead::{LOG_EPS, SIMPLEX_TOL};
use crate::error::{Error, Result};
use crate::nn::{init_params, sigmoid, ForwardCache, Layer, MlpSpec, Mode, NetGrads, NetParams};
use crate::seed;

/// Prior for the generator's noise input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub d_gauss: usize,
    pub k: usize,
}

impl NoiseSpec {
    pub fn new(d_gauss: usize, k: usize) -> Result<Self> {
        if d_gauss == 0 {
            return Err(Error::invalid("gaussian noise width must be at least 1"));
        }
        if k == 0 {
            return Err(Error::invalid("one-hot width must be at least 1"));
        }
        Ok(Self { d_gauss, k })
    }

    pub fn total(&self) -> usize {
        self.d_gauss + self.k
    }
}

fn one_hot_into(row: &mut ndarray::ArrayViewMut1<'_, f64>, spec: &NoiseSpec, label: usize) {
    row.slice_mut(s![spec.d_gauss..]).fill(0.0);
    row[spec.d_gauss + label] = 1.0;
}

fn check_labels(spec: &NoiseSpec, labels: &[usize]) -> Result<()> {
    if let Some(&l) = labels.iter().find(|&&l| l >= spec.k) {
        return Err(Error::invalid(format!("conditioning label {l} outside [0, {})", spec.k)));
    }
    Ok(())
}

/// Rows of `[g ~ N(0, I) | onehot(label)]`.
pub fn sample_noise(batch: usize, spec: &NoiseSpec, cond_labels: &[usize], rng: &mut seed::Rng) -> Result<Array2<f64>> {
    if cond_labels.len() != batch {
        return Err(Error::invalid(format!(
            "{} conditioning labels for a batch of {batch}",
            cond_labels.len()
        )));
    }
    check_labels(spec, cond_labels)?;
    let mut out = Array2::zeros((batch, spec.total()));
    for (mut row, &l) in out.rows_mut().into_iter().zip(cond_labels) {
        for v in row.slice_mut(s![..spec.d_gauss]).iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        one_hot_into(&mut row, spec, l);
    }
    Ok(out)
}

/// Noise at the prior mean: zero gaussian block plus the one-hot label.
/// Used whenever generated representations feed the fused representation,
/// so that fusion is a deterministic per-instance function.
pub fn mean_noise(spec: &NoiseSpec, cond_labels: &[usize]) -> Result<Array2<f64>> {
    check_labels(spec, cond_labels)?;
    let mut out = Array2::zeros((cond_labels.len(), spec.total()));
    for (mut row, &l) in out.rows_mut().into_iter().zip(cond_labels) {
        one_hot_into(&mut row, spec, l);
    }
    Ok(out)
}

/// Learned projection tensor of a minibatch-discrimination block:
/// `kernels` projections of width `dim`, stored as `in x (kernels * dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MinibatchKernel {
    pub t: Array2<f64>,
    pub kernels: usize,
    pub dim: usize,
}

impl MinibatchKernel {
    pub fn zeros(input: usize, kernels: usize, dim: usize) -> Self {
        Self {
            t: Array2::zeros((input, kernels * dim)),
            kernels,
            dim,
        }
    }
}

/// Append `o[i, b] = sum_j exp(-|M[i, b, :] - M[j, b, :]|_1)` to each row,
/// where `M = h T`. The sum includes `j = i`, so a batch of one gets the
/// constant 1 for every kernel.
pub fn minibatch_features(h: ArrayView2<'_, f64>, kernel: &MinibatchKernel) -> Result<Array2<f64>> {
    Ok(minibatch_forward(h, kernel)?.0)
}

/// Projections and pairwise kernel values kept for the backward pass.
pub struct MinibatchCache {
    /// `M` transposed: row `k * dim + c` holds that projection for the whole batch.
    mt: Array2<f64>,
    /// `exp(-|M_i - M_j|_1)` at `[k][i][j]` for `i < j`.
    e: Vec<f64>,
}

fn minibatch_forward(h: ArrayView2<'_, f64>, kernel: &MinibatchKernel) -> Result<(Array2<f64>, MinibatchCache)> {
    if h.ncols() != kernel.t.nrows() {
        return Err(Error::invalid(format!(
            "minibatch kernel expects width {}, got {}",
            kernel.t.nrows(),
            h.ncols()
        )));
    }
    let b = h.nrows();
    let (nk, c) = (kernel.kernels, kernel.dim);
    let mt = kernel.t.t().dot(&h.t()).as_standard_layout().into_owned();
    let rows = mt.as_slice().expect("standard layout");
    let mut e = vec![0.0; nk * b * b];
    let mut ot = vec![1.0; nk * b];
    let mut acc = vec![0.0; b];
    for k in 0..nk {
        let block = &rows[k * c * b..(k + 1) * c * b];
        let ok = &mut ot[k * b..(k + 1) * b];
        for i in 0..b {
            let acc = &mut acc[i + 1..];
            acc.fill(0.0);
            for row in block.chunks_exact(b) {
                let mi = row[i];
                for (a, &mj) in acc.iter_mut().zip(&row[i + 1..]) {
                    *a += (mi - mj).abs();
                }
            }
            let ek = &mut e[(k * b + i) * b + i + 1..(k * b + i + 1) * b];
            let (oh, tail) = ok.split_at_mut(i + 1);
            let mut own = 0.0;
            for ((v, a), oj) in ek.iter_mut().zip(acc.iter()).zip(tail) {
                *v = (-a).exp();
                own += *v;
                *oj += *v;
            }
            oh[i] += own;
        }
    }
    let o = Array2::from_shape_vec((nk, b), ot).expect("sized above");
    Ok((concatenate![Axis(1), h, o.t()], MinibatchCache { mt, e }))
}

fn sum_lanes(v: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut chunks = v.chunks_exact(4);
    for ch in &mut chunks {
        for (a, x) in acc.iter_mut().zip(ch) {
            *a += x;
        }
    }
    let rest: f64 = chunks.remainder().iter().sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

/// Reverse of [`minibatch_features`]: `(dT, dh)`.
pub fn minibatch_features_backward(
    h: ArrayView2<'_, f64>,
    kernel: &MinibatchKernel,
    grad_out: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (_, cache) = minibatch_forward(h, kernel).expect("width checked by caller");
    minibatch_backward(h, kernel, &cache, grad_out)
}

fn minibatch_backward(
    h: ArrayView2<'_, f64>,
    kernel: &MinibatchKernel,
    cache: &MinibatchCache,
    grad_out: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    let a = h.ncols();
    let b = h.nrows();
    let (nk, c) = (kernel.kernels, kernel.dim);
    let rows = cache.mt.as_slice().expect("standard layout");
    let g_o = grad_out.slice(s![.., a..]);
    let mut dmt = Array2::<f64>::zeros((nk * c, b));
    let dm = dmt.as_slice_mut().expect("standard layout");
    let g_t = g_o.t().as_standard_layout().into_owned();
    let mut g = vec![0.0; b];
    let mut t = vec![0.0; b];
    for k in 0..nk {
        let block = &rows[k * c * b..(k + 1) * c * b];
        let dblock = &mut dm[k * c * b..(k + 1) * c * b];
        let gk = g_t.row(k);
        let gk = gk.as_slice().expect("standard layout");
        for i in 0..b {
            let ek = &cache.e[(k * b + i) * b + i + 1..(k * b + i + 1) * b];
            let g = &mut g[i + 1..];
            let t = &mut t[i + 1..];
            for ((g, &e), &gj) in g.iter_mut().zip(ek).zip(&gk[i + 1..]) {
                *g = (gk[i] + gj) * e;
            }
            for (row, drow) in block.chunks_exact(b).zip(dblock.chunks_exact_mut(b)) {
                let mi = row[i];
                for ((t, &mj), &g) in t.iter_mut().zip(&row[i + 1..]).zip(g.iter()) {
                    *t = g * 1f64.copysign(mi - mj);
                }
                let (head, tail) = drow.split_at_mut(i + 1);
                for (d, &t) in tail.iter_mut().zip(t.iter()) {
                    *d += t;
                }
                head[i] -= sum_lanes(t);
            }
        }
    }
    let dt = h.t().dot(&dmt.t());
    let dh = grad_out.slice(s![.., ..a]).to_owned() + dmt.t().dot(&kernel.t.t());
    (dt, dh)
}

/// Widths of a discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscSpec {
    pub d_sub: usize,
    pub k: usize,
    /// Width of the first dense layer.
    pub hidden: usize,
    pub kernels: usize,
    pub kernel_dim: usize,
    /// Width of the dense layer after the minibatch block.
    pub mid: usize,
}

impl DiscSpec {
    pub fn input_dim(&self) -> usize {
        self.d_sub + self.k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub spec: DiscSpec,
    pub pre: NetParams,
    pub kernel: MinibatchKernel,
    pub post: NetParams,
    pub head: Layer,
}

pub struct DiscCache {
    pre_cache: ForwardCache,
    h1: Array2<f64>,
    mb_cache: MinibatchCache,
    post_cache: ForwardCache,
    h2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscGrads {
    pub pre: NetGrads,
    pub kernel: Array2<f64>,
    pub post: NetGrads,
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl DiscGrads {
    pub fn tensors(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = self.pre.tensors();
        out.push(self.kernel.view().into_dyn());
        out.extend(self.post.tensors());
        out.push(self.head_weight.view().into_dyn());
        out.push(self.head_bias.view().into_dyn());
        out
    }
}

impl Discriminator {
    fn specs(spec: &DiscSpec, slope: f64) -> Result<(MlpSpec, MlpSpec)> {
        Ok((
            MlpSpec::new(vec![spec.input_dim(), spec.hidden], slope)?,
            MlpSpec::new(vec![spec.hidden + spec.kernels, spec.mid], slope)?,
        ))
    }

    pub fn zeros(spec: DiscSpec, slope: f64) -> Result<Self> {
        let (pre, post) = Self::specs(&spec, slope)?;
        Ok(Self {
            spec,
            pre: NetParams::zeros(&pre)?,
            kernel: MinibatchKernel::zeros(spec.hidden, spec.kernels, spec.kernel_dim),
            post: NetParams::zeros(&post)?,
            head: Layer::zeros(spec.mid, 1, false),
        })
    }

    pub fn init(spec: DiscSpec, slope: f64, seed: u64) -> Result<Self> {
        let (pre, post) = Self::specs(&spec, slope)?;
        let mut rng = seed::rng(seed, "disc");
        let kernel_cols = spec.kernels * spec.kernel_dim;
        let t = if kernel_cols == 0 {
            Array2::zeros((spec.hidden, 0))
        } else {
            Layer::xavier(spec.hidden, kernel_cols, false, &mut rng).weight
        };
        Ok(Self {
            spec,
            pre: init_params(&pre, seed::derive(seed, "disc/pre"))?,
            kernel: MinibatchKernel {
                t,
                kernels: spec.kernels,
                dim: spec.kernel_dim,
            },
            post: init_params(&post, seed::derive(seed, "disc/post"))?,
            head: Layer::xavier(spec.mid, 1, false, &mut rng),
        })
    }

    fn input(&self, rep: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if rep.ncols() != self.spec.d_sub || q.ncols() != self.spec.k {
            return Err(Error::invalid(format!(
                "discriminator expects widths {} + {}, got {} + {}",
                self.spec.d_sub,
                self.spec.k,
                rep.ncols(),
                q.ncols()
            )));
        }
        if rep.nrows() != q.nrows() {
            return Err(Error::invalid("representation and assignment row counts differ"));
        }
        for (i, row) in q.rows().into_iter().enumerate() {
            if row.iter().any(|&v| v < 0.0) || (row.sum() - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::invalid(format!("assignment row {i} is not a probability vector")));
            }
        }
        Ok(concatenate![Axis(1), rep, q])
    }

    /// Forward on an already concatenated `[rep | q]` batch, returning logits.
    pub fn logits_from_input(&self, x: ArrayView2<'_, f64>) -> Result<(Array1<f64>, DiscCache)> {
        let (h1, pre_cache) = self.pre.forward_cached(x, Mode::Eval)?;
        let (mb, mb_cache) = minibatch_forward(h1.view(), &self.kernel)?;
        let (h2, post_cache) = self.post.forward_cached(mb.view(), Mode::Eval)?;
        let logits = self.head.affine(h2.view()).column(0).to_owned();
        Ok((
            logits,
            DiscCache {
                pre_cache,
                h1,
                mb_cache,
                post_cache,
                h2,
            },
        ))
    }

    pub fn logits(&self, rep: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> Result<(Array1<f64>, DiscCache)> {
        let x = self.input(rep, q)?;
        self.logits_from_input(x.view())
    }

    /// Gradients given `dL/dlogit`; also returns `dL/drep`.
    pub fn backward(&self, cache: &DiscCache, grad_logits: ArrayView1<'_, f64>) -> (DiscGrads, Array2<f64>) {
        let g = grad_logits.insert_axis(Axis(1));
        let (head_weight, head_bias, dh2) = self.head.affine_backward(cache.h2.view(), g);
        let (post, dmb) = self.post.backward(&cache.post_cache, dh2.view());
        let (kernel, dh1) = minibatch_backward(cache.h1.view(), &self.kernel, &cache.mb_cache, dmb.view());
        let (pre, dx) = self.pre.backward(&cache.pre_cache, dh1.view());
        let drep = dx.slice(s![.., ..self.spec.d_sub]).to_owned();
        (
            DiscGrads {
                pre,
                kernel,
                post,
                head_weight,
                head_bias,
            },
            drep,
        )
    }

    pub fn learnable_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = self.pre.learnable_mut();
        out.push(self.kernel.t.view_mut().into_dyn());
        out.extend(self.post.learnable_mut());
        out.push(self.head.weight.view_mut().into_dyn());
        out.push(self.head.bias.view_mut().into_dyn());
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<_> = self
            .pre
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("pre.{n}"), t))
            .collect();
        out.push(("minibatch.kernel".into(), self.kernel.t.view().into_dyn()));
        out.extend(self.post.named_tensors().into_iter().map(|(n, t)| (format!("post.{n}"), t)));
        out.push(("head.weight".into(), self.head.weight.view().into_dyn()));
        out.push(("head.bias".into(), self.head.bias.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = self.pre.tensors_mut();
        out.push(self.kernel.t.view_mut().into_dyn());
        out.extend(self.post.tensors_mut());
        out.push(self.head.weight.view_mut().into_dyn());
        out.push(self.head.bias.view_mut().into_dyn());
        out
    }
}

/// Which way a generator translates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `G12`: image representation in, fake text representation out; judged by `D1`.
    ImgToTxt,
    /// `G21`: text representation in, fake image representation out; judged by `D2`.
    TxtToImg,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::ImgToTxt => "g12",
            Direction::TxtToImg => "g21",
        }
    }

    pub fn disc_name(self) -> &'static str {
        match self {
            Direction::ImgToTxt => "d1",
            Direction::TxtToImg => "d2",
        }
    }
}

/// A generator and the discriminator that judges its output.
#[derive(Debug, Clone, PartialEq)]
pub struct GanPair {
    pub direction: Direction,
    pub noise: NoiseSpec,
    pub gen: NetParams,
    pub disc: Discriminator,
}

impl GanPair {
    pub fn generator_spec(d_sub: usize, noise: &NoiseSpec, hidden: &[usize], slope: f64) -> Result<MlpSpec> {
        let mut dims = vec![noise.total() + d_sub];
        dims.extend_from_slice(hidden);
        dims.push(d_sub);
        Ok(MlpSpec::new(dims, slope)?.with_hidden_batchnorm())
    }

    pub fn new(direction: Direction, noise: NoiseSpec, gen: NetParams, disc: Discriminator) -> Result<Self> {
        let d_sub = disc.spec.d_sub;
        if gen.output_dim() != d_sub {
            return Err(Error::invalid(format!(
                "generator emits width {}, discriminator judges width {d_sub}",
                gen.output_dim()
            )));
        }
        if gen.input_dim() != noise.total() + d_sub {
            return Err(Error::invalid("generator input width must be noise width + subspace width"));
        }
        if disc.spec.k != noise.k {
            return Err(Error::invalid("discriminator and noise disagree on cluster count"));
        }
        Ok(Self { direction, noise, gen, disc })
    }

    pub fn d_sub(&self) -> usize {
        self.disc.spec.d_sub
    }
}

fn generator_input(pair: &GanPair, noise: ArrayView2<'_, f64>, cond_rep: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if noise.ncols() != pair.noise.total() {
        return Err(Error::invalid(format!(
            "noise width {} differs from {}",
            noise.ncols(),
            pair.noise.total()
        )));
    }
    if cond_rep.ncols() != pair.d_sub() {
        return Err(Error::invalid(format!(
            "conditioning width {} differs from subspace width {}",
            cond_rep.ncols(),
            pair.d_sub()
        )));
    }
    if noise.nrows() != cond_rep.nrows() {
        return Err(Error::invalid("noise and conditioning row counts differ"));
    }
    Ok(concatenate![Axis(1), noise, cond_rep])
}

/// Fake target-subspace rows from `[noise | cond_rep]` (running batch statistics).
pub fn generate(pair: &GanPair, noise: ArrayView2<'_, f64>, cond_rep: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let x = generator_input(pair, noise, cond_rep)?;
    pair.gen.forward(x.view(), Mode::Eval)
}

/// Training-mode generation: batch statistics, with a cache for the reverse pass.
pub fn generate_train(
    pair: &GanPair,
    noise: ArrayView2<'_, f64>,
    cond_rep: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, ForwardCache)> {
    let x = generator_input(pair, noise, cond_rep)?;
    pair.gen.forward_cached(x.view(), Mode::Train)
}

/// Probability that each row is real, kept strictly inside `(0, 1)`.
pub fn discriminate(pair: &GanPair, rep: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let (logits, _) = pair.disc.logits(rep, q)?;
    Ok(logits.mapv(|l| sigmoid(l).clamp(LOG_EPS, 1.0 - LOG_EPS)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLossForm {
    /// `-mean log D(fake)`.
    #[default]
    Nonsaturating,
    /// `-mean log(1 - D(fake))`.
    AsPrinted,
}

fn ln_floor(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

fn check_probs(p: ArrayView1<'_, f64>) -> Result<()> {
    if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("discriminator outputs must lie in [0, 1]"));
    }
    Ok(())
}

/// Adversarial term plus `mu` times the mean squared distance to the real
/// target representations.
pub fn generator_loss(
    disc_out_fake: ArrayView1<'_, f64>,
    fake: ArrayView2<'_, f64>,
    real_target: ArrayView2<'_, f64>,
    mu: f64,
    form: GeneratorLossForm,
) -> Result<f64> {
    if fake.dim() != real_target.dim() || fake.nrows() != disc_out_fake.len() {
        return Err(Error::invalid("generator loss shapes disagree"));
    }
    if fake.nrows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    check_probs(disc_out_fake)?;
    let b = fake.nrows() as f64;
    let adv = match form {
        GeneratorLossForm::Nonsaturating => -disc_out_fake.iter().map(|&d| ln_floor(d)).sum::<f64>() / b,
        GeneratorLossForm::AsPrinted => -disc_out_fake.iter().map(|&d| ln_floor(1.0 - d)).sum::<f64>() / b,
    };
    let sim = (&fake - &real_target).mapv(|v| v * v).sum() / b;
    Ok(adv + mu * sim)
}

/// `-[mean log D(real) + mean log(1 - D(fake))]`.
pub fn discriminator_loss(disc_real: ArrayView1<'_, f64>, disc_fake: ArrayView1<'_, f64>) -> Result<f64> {
    if disc_real.is_empty() || disc_fake.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    check_probs(disc_real)?;
    check_probs(disc_fake)?;
    let real = disc_real.iter().map(|&d| ln_floor(d)).sum::<f64>() / disc_real.len() as f64;
    let fake = disc_fake.iter().map(|&d| ln_floor(1.0 - d)).sum::<f64>() / disc_fake.len() as f64;
    Ok(-(real + fake))
}

/// log(sigmoid(x)), stable.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Full generator objective with the discriminator frozen: loss and `dL/dfake`.
pub fn generator_objective(
    disc: &Discriminator,
    fake: ArrayView2<'_, f64>,
    q_cond: ArrayView2<'_, f64>,
    real_target: ArrayView2<'_, f64>,
    mu: f64,
    form: GeneratorLossForm,
) -> Result<(f64, Array2<f64>)> {
    if fake.dim() != real_target.dim() {
        return Err(Error::invalid("fake and real target shapes differ"));
    }
    let (logits, cache) = disc.logits(fake, q_cond)?;
    let b = fake.nrows() as f64;
    let (adv, grad_logits) = match form {
        GeneratorLossForm::Nonsaturating => (
            -logits.iter().map(|&l| log_sigmoid(l)).sum::<f64>() / b,
            logits.mapv(|l| -(1.0 - sigmoid(l)) / b),
        ),
        GeneratorLossForm::AsPrinted => (
            -logits.iter().map(|&l| log_sigmoid(-l)).sum::<f64>() / b,
            logits.mapv(|l| sigmoid(l) / b),
        ),
    };
    let diff = &fake - &real_target;
    let sim = diff.mapv(|v| v * v).sum() / b;
    let (_, d_adv) = disc.backward(&cache, grad_logits.view());
    let dfake = d_adv + diff * (2.0 * mu / b);
    Ok((adv + mu * sim, dfake))
}

/// Discriminator objective on one real and one fake batch, with gradients
/// for the discriminator's parameters.
pub fn discriminator_objective(
    disc: &Discriminator,
    real: ArrayView2<'_, f64>,
    q_real: ArrayView2<'_, f64>,
    fake: ArrayView2<'_, f64>,
    q_fake: ArrayView2<'_, f64>,
) -> Result<(f64, DiscGrads)> {
    let (lr, cr) = disc.logits(real, q_real)?;
    let (lf, cf) = disc.logits(fake, q_fake)?;
    let (br, bf) = (lr.len() as f64, lf.len() as f64);
    let loss = -(lr.iter().map(|&l| log_sigmoid(l)).sum::<f64>() / br
        + lf.iter().map(|&l| log_sigmoid(-l)).sum::<f64>() / bf);
    let (gr, _) = disc.backward(&cr, lr.mapv(|l| -(1.0 - sigmoid(l)) / br).view());
    let (gf, _) = disc.backward(&cf, lf.mapv(|l| sigmoid(l) / bf).view());
    Ok((loss, add_disc_grads(gr, &gf)))
}

fn add_disc_grads(mut a: DiscGrads, b: &DiscGrads) -> DiscGrads {
    for (x, y) in a.pre.layers.iter_mut().zip(&b.pre.layers) {
        x.weight += &y.weight;
        x.bias += &y.bias;
    }
    for (x, y) in a.post.layers.iter_mut().zip(&b.post.layers) {
        x.weight += &y.weight;
        x.bias += &y.bias;
    }
    a.kernel += &b.kernel;
    a.head_weight += &b.head_weight;
    a.head_bias += &b.head_bias;
    a
}
