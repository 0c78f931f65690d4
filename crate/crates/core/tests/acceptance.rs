//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! `ACCEPTANCE=1,4,9 cargo test --test acceptance` runs a subset.

mod common;

use std::time::{Duration, Instant};

use common::*;
use imclust::cgan::*;
use imclust::clusterhead::*;
use imclust::dataio::*;
use imclust::encoders::*;
use imclust::evalkit::*;
use imclust::nn::{init_params, sigmoid, Mode, MlpSpec, NetParams};
use imclust::trainer::*;
use ndarray::{array, Array1, Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(ok: bool, what: impl Into<String>, failures: &mut Vec<String>) {
    if !ok {
        failures.push(what.into());
    }
}

fn outcome(failures: Vec<String>, detail: String) -> Outcome {
    let pass = failures.is_empty();
    let detail = if pass {
        detail
    } else {
        format!("{detail}; failed: {}", failures.join("; "))
    };
    Outcome { pass, detail }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn blobs(seed: u64) -> IncompleteDataset {
    synth_paired_blobs(3, 600, 20, 10, 0.1, seed).unwrap()
}

// 1: formula oracles

fn criterion_1() -> Outcome {
    let mut fails = Vec::new();
    let mut evaluations = 0;

    // soft assignment
    let c = Centroids::new(array![[0.0, 0.0], [1.0, 0.0]], Modality::Img);
    let q = soft_assign(array![[0.0, 0.0]].view(), &c).unwrap();
    check(
        close(q.q[[0, 0]], 2.0 / 3.0, 1e-9) && close(q.q[[0, 1]], 1.0 / 3.0, 1e-9),
        "soft_assign [2/3, 1/3]",
        &mut fails,
    );
    evaluations += 1;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (n, k, d, dof) in [(1, 2, 1, 1.0), (3, 3, 2, 1.0), (4, 2, 3, 0.5), (5, 4, 2, 2.0), (2, 5, 4, 1.0)] {
        let z = gaussian(&mut rng, n, d, 1.0);
        let mu = gaussian(&mut rng, k, d, 1.0);
        let c = Centroids { mu: mu.clone(), modality: Modality::Fus, dof };
        let got = soft_assign(z.view(), &c).unwrap();
        let diff = max_abs_diff(&got.q, &soft_assign_oracle(&z, &mu, dof));
        check(diff <= 1e-9, format!("soft_assign n={n} K={k}: {diff:e}"), &mut fails);
        evaluations += 1;
    }

    // target distribution
    let q = AssignMatrix::new(array![[0.9, 0.1], [0.5, 0.5]], AssignKind::Soft).unwrap();
    let p = target_distribution(&q).unwrap();
    let expected = array![[0.972, 0.028], [0.3, 0.7]];
    check(max_abs_diff(&p.q, &expected) <= 1e-9, "target [[0.972,0.028],[0.3,0.7]]", &mut fails);
    evaluations += 1;
    for (n, k) in [(1, 2), (2, 3), (4, 2), (5, 3), (6, 4)] {
        let z = gaussian(&mut rng, n, 2, 1.0);
        let mu = gaussian(&mut rng, k, 2, 1.0);
        let q = soft_assign_oracle(&z, &mu, 1.0);
        let got = target_distribution(&AssignMatrix::new(q.clone(), AssignKind::Soft).unwrap()).unwrap();
        let diff = max_abs_diff(&got.q, &target_oracle(&q));
        check(diff <= 1e-9, format!("target n={n} K={k}: {diff:e}"), &mut fails);
        evaluations += 1;
    }
    check(
        matches!(
            target_distribution(&AssignMatrix::new(array![[1.0, 0.0], [1.0, 0.0]], AssignKind::Soft).unwrap()),
            Err(imclust::Error::DegenerateCluster { cluster: 1 })
        ),
        "empty cluster raises DegenerateCluster",
        &mut fails,
    );

    // encoder loss
    let one = |v: Array2<f64>, kind| AssignMatrix::new(v, kind).unwrap();
    let l = encoder_loss(
        &one(array![[0.5, 0.5]], AssignKind::Soft),
        &one(array![[1.0, 0.0]], AssignKind::Target),
        &one(array![[0.5, 0.5]], AssignKind::Soft),
        &one(array![[1.0, 0.0]], AssignKind::Target),
        0.0,
    )
    .unwrap();
    check(close(l, 2f64.ln(), 1e-9), format!("encoder_loss log 2: {l}"), &mut fails);
    evaluations += 1;
    for (n, k, alpha) in [(1, 2, 1.0), (3, 2, 0.5), (4, 3, 2.0), (5, 3, 0.0), (2, 4, 1.0)] {
        let mk = |rng: &mut ChaCha8Rng| {
            let q = soft_assign_oracle(&gaussian(rng, n, 2, 1.0), &gaussian(rng, k, 2, 1.0), 1.0);
            let p = target_oracle(&soft_assign_oracle(&gaussian(rng, n, 2, 1.0), &gaussian(rng, k, 2, 1.0), 1.0));
            (q, p)
        };
        let (qm, pm) = mk(&mut rng);
        let (qf, pf) = mk(&mut rng);
        let want = kl_oracle(&pm, &qm) + alpha * kl_oracle(&pf, &qf);
        let got = encoder_loss(
            &one(qm, AssignKind::Soft),
            &one(pm, AssignKind::Target),
            &one(qf, AssignKind::Soft),
            &one(pf, AssignKind::Target),
            alpha,
        )
        .unwrap();
        check(close(got, want, 1e-9), format!("encoder_loss n={n} K={k}: {got} vs {want}"), &mut fails);
        evaluations += 1;
    }

    // generator loss
    let form = GeneratorLossForm::Nonsaturating;
    let g = generator_loss(array![0.5, 0.5].view(), Array2::zeros((2, 3)).view(), Array2::ones((2, 3)).view(), 0.0, form)
        .unwrap();
    check(close(g, 2f64.ln(), 1e-9), format!("generator_loss D=0.5: {g}"), &mut fails);
    let g = generator_loss(array![1.0].view(), array![[1.0, 0.0]].view(), array![[0.0, 0.0]].view(), 1.0, form).unwrap();
    check(close(g, 1.0, 1e-9), format!("generator_loss mu=1 example: {g}"), &mut fails);
    evaluations += 2;
    for (b, d, mu) in [(1, 2, 0.5), (2, 3, 1.0), (3, 2, 0.0), (4, 4, 2.0), (5, 1, 1.0)] {
        let dv: Array1<f64> = (0..b).map(|_| rng.random_range(0.05..0.95)).collect();
        let fake = gaussian(&mut rng, b, d, 1.0);
        let real = gaussian(&mut rng, b, d, 1.0);
        let mut adv = 0.0;
        let mut adv_printed = 0.0;
        let mut sim = 0.0;
        for i in 0..b {
            adv -= dv[i].ln() / b as f64;
            adv_printed -= (1.0 - dv[i]).ln() / b as f64;
            for j in 0..d {
                sim += (fake[[i, j]] - real[[i, j]]).powi(2) / b as f64;
            }
        }
        let got = generator_loss(dv.view(), fake.view(), real.view(), mu, form).unwrap();
        check(close(got, adv + mu * sim, 1e-9), format!("generator_loss b={b}: {got}"), &mut fails);
        let got = generator_loss(dv.view(), fake.view(), real.view(), mu, GeneratorLossForm::AsPrinted).unwrap();
        check(close(got, adv_printed + mu * sim, 1e-9), format!("generator_loss as printed b={b}"), &mut fails);
        evaluations += 2;
    }

    // discriminator loss
    let dl = discriminator_loss(array![0.5].view(), array![0.5].view()).unwrap();
    check(close(dl, 2.0 * 2f64.ln(), 1e-9), format!("discriminator_loss 2 log 2: {dl}"), &mut fails);
    evaluations += 1;
    for (br, bf) in [(1, 1), (2, 3), (4, 2), (5, 5), (3, 1)] {
        let r: Array1<f64> = (0..br).map(|_| rng.random_range(0.01..0.99)).collect();
        let f: Array1<f64> = (0..bf).map(|_| rng.random_range(0.01..0.99)).collect();
        let want = -(r.iter().map(|v| v.ln()).sum::<f64>() / br as f64
            + f.iter().map(|v| (1.0 - v).ln()).sum::<f64>() / bf as f64);
        let got = discriminator_loss(r.view(), f.view()).unwrap();
        check(close(got, want, 1e-9), format!("discriminator_loss {br}/{bf}"), &mut fails);
        evaluations += 1;
    }
    outcome(fails, format!("{evaluations} oracle evaluations"))
}

// 2: gradients against central differences

fn net_param_fd(net: &NetParams, x: &Array2<f64>, r: &Array2<f64>, mode: Mode) -> (f64, f64) {
    let loss = |n: &NetParams, x: &Array2<f64>| (n.forward_cached(x.view(), mode).unwrap().0 * r).sum();
    let (_, cache) = net.forward_cached(x.view(), mode).unwrap();
    let (grads, dx) = net.backward(&cache, r.view());
    let num_dx = finite_diff(x, |xp| loss(net, xp));
    let err_x = rel_err(&dx, &num_dx);
    let mut err_p: f64 = 0.0;
    let analytic: Vec<ArrayD<f64>> = grads.tensors().into_iter().map(|t| t.to_owned()).collect();
    for (t, a) in analytic.iter().enumerate() {
        let base = a.clone();
        let orig: ArrayD<f64> = net.clone().learnable_mut()[t].to_owned();
        let num = finite_diff(&orig, |v| {
            let mut m = net.clone();
            m.learnable_mut()[t].assign(v);
            loss(&m, x)
        });
        err_p = err_p.max(rel_err(&base, &num));
    }
    (err_x, err_p)
}

fn criterion_2() -> Outcome {
    let mut fails = Vec::new();
    let mut worst = [0.0f64; 4];
    for inst in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let k = rng.random_range(2..=4);
        let d = rng.random_range(2..=6);
        let n = rng.random_range(2..=7);

        // encoder loss w.r.t. Z, own and fused terms
        let z = gaussian(&mut rng, n, d, 1.0);
        let other = gaussian(&mut rng, n, d, 1.0);
        let beta = rng.random_range(0.1..0.9);
        let alpha = rng.random_range(0.0..2.0);
        let c_m = Centroids { mu: gaussian(&mut rng, k, d, 1.0), modality: Modality::Img, dof: 1.0 };
        let c_f = Centroids { mu: gaussian(&mut rng, k, d, 1.0), modality: Modality::Fus, dof: 1.0 };
        let fused = |z: &Array2<f64>| fuse_matrix(z.view(), other.view(), beta).unwrap();
        let p_m = target_distribution(&soft_assign(z.view(), &c_m).unwrap()).unwrap();
        let p_f = target_distribution(&soft_assign(fused(&z).view(), &c_f).unwrap()).unwrap();
        let loss = |z: &Array2<f64>| {
            let q_m = soft_assign(z.view(), &c_m).unwrap();
            let q_f = soft_assign(fused(z).view(), &c_f).unwrap();
            encoder_loss(&q_m, &p_m, &q_f, &p_f, alpha).unwrap()
        };
        let (_, dz_m, _) = kl_to_soft_assign(z.view(), &c_m, &p_m).unwrap();
        let (_, dz_f, _) = kl_to_soft_assign(fused(&z).view(), &c_f, &p_f).unwrap();
        let analytic = dz_m + dz_f * (alpha * (1.0 - beta));
        let e = rel_err(&analytic, &finite_diff(&z, loss));
        worst[0] = worst[0].max(e);

        // generator loss w.r.t. fakes through a frozen discriminator
        let spec = DiscSpec { d_sub: d, k, hidden: 5, kernels: 3, kernel_dim: 2, mid: 4 };
        let disc = Discriminator::init(spec, 0.01, inst).unwrap();
        let fake = gaussian(&mut rng, n, d, 1.0);
        let real = gaussian(&mut rng, n, d, 1.0);
        let mut q = gaussian(&mut rng, n, k, 1.0).mapv(f64::exp);
        for mut row in q.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let mu = rng.random_range(0.0..2.0);
        for form in [GeneratorLossForm::Nonsaturating, GeneratorLossForm::AsPrinted] {
            let (_, dfake) = generator_objective(&disc, fake.view(), q.view(), real.view(), mu, form).unwrap();
            let num = finite_diff(&fake, |f| {
                let d_out = disc.logits(f.view(), q.view()).unwrap().0.mapv(sigmoid);
                generator_loss(d_out.view(), f.view(), real.view(), mu, form).unwrap()
            });
            worst[1] = worst[1].max(rel_err(&dfake, &num));
        }

        // encode w.r.t. inputs and parameters
        let din = rng.random_range(2..=8);
        let hidden = rng.random_range(2..=8);
        let enc = init_params(&MlpSpec::new(vec![din, hidden, d], 0.01).unwrap(), 7 + inst).unwrap();
        let x = gaussian(&mut rng, n, din, 1.0);
        let r = gaussian(&mut rng, n, d, 1.0);
        let (ex, ep) = net_param_fd(&enc, &x, &r, Mode::Eval);
        worst[2] = worst[2].max(ex);
        worst[3] = worst[3].max(ep);

        // generator network with batch-normalized hidden layers, training mode
        let gen = init_params(
            &MlpSpec::new(vec![din, hidden, d], 0.01).unwrap().with_hidden_batchnorm(),
            70 + inst,
        )
        .unwrap();
        let (gx, gp) = net_param_fd(&gen, &x, &r, Mode::Train);
        worst[2] = worst[2].max(gx);
        worst[3] = worst[3].max(gp);
    }
    let names = ["encoder_loss/Z", "generator_loss/fake", "network/input", "network/params"];
    for (name, w) in names.iter().zip(worst) {
        check(w < 1e-4, format!("{name} rel err {w:e}"), &mut fails);
    }
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(fails, format!("50 instances, worst relative errors: {detail}"))
}

// 3: metrics against brute force

fn criterion_3() -> Outcome {
    let mut fails = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_nmi: f64 = 0.0;
    for i in 0..200 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=3);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let acc = clustering_accuracy(&pred, &truth).unwrap();
        let want = brute_force_accuracy(&pred, &truth);
        check(acc == want, format!("instance {i}: acc {acc} vs {want}"), &mut fails);
        let got = nmi(&pred, &truth).unwrap();
        worst_nmi = worst_nmi.max((got - nmi_oracle(&pred, &truth)).abs());
    }
    let fixed = nmi(&[0, 0, 1, 2], &[0, 0, 1, 1]).unwrap();
    worst_nmi = worst_nmi.max((fixed - nmi_oracle(&[0, 0, 1, 2], &[0, 0, 1, 1])).abs());
    check(
        clustering_accuracy(&[1, 1, 1, 0], &[0, 0, 1, 1]).unwrap() == 0.75,
        "acc example 0.75",
        &mut fails,
    );
    check(worst_nmi <= 1e-10, format!("nmi off by {worst_nmi:e}"), &mut fails);

    let mut broken = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(2..=30);
        let k = rng.random_range(2..=5);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        for j in (1..k).rev() {
            perm.swap(j, rng.random_range(0..=j));
        }
        let relabelled: Vec<usize> = pred.iter().map(|&l| perm[l]).collect();
        let a = score(&pred, &truth).unwrap();
        let b = score(&relabelled, &truth).unwrap();
        if a.acc != b.acc || (a.nmi - b.nmi).abs() > 1e-12 {
            broken += 1;
        }
    }
    check(broken == 0, format!("{broken} permutation-invariance violations"), &mut fails);
    outcome(
        fails,
        format!("200 brute-force instances, nmi max error {worst_nmi:.1e}, 10000 relabelled pairs"),
    )
}

// 4: masking protocol

fn poisoned(ds: &IncompleteDataset, value: f32) -> IncompleteDataset {
    let mut img = ds.img.data().to_owned();
    let mut txt = ds.txt.data().to_owned();
    for i in 0..ds.n() {
        let f = ds.mask.get(i);
        if !f.has_img {
            img.row_mut(i).fill(value);
        }
        if !f.has_txt {
            txt.row_mut(i).fill(value);
        }
    }
    IncompleteDataset::new(
        FeatureTable::new(img).unwrap(),
        FeatureTable::new(txt).unwrap(),
        ds.mask.clone(),
        ds.labels.clone(),
        ds.k,
        ds.seed,
    )
    .unwrap()
}

fn criterion_4() -> Outcome {
    let mut fails = Vec::new();
    for n in [100usize, 1000] {
        for tenths in 1..=9usize {
            let p = tenths as f64 / 10.0;
            // round-half-up of n (10 - tenths) / 10 in integers
            let want = (n * (10 - tenths) * 2 + 10) / 20;
            let a = make_missing_mask(n, p, 0.5, 5).unwrap();
            let b = make_missing_mask(n, p, 0.5, 5).unwrap();
            let c = make_missing_mask(n, p, 0.5, 6).unwrap();
            check(a.complete_count() == want, format!("n={n} p={p}: {} complete", a.complete_count()), &mut fails);
            check(
                a.complete_count() + a.img_only_count() + a.txt_only_count() == n,
                format!("n={n} p={p}: counts do not add up"),
                &mut fails,
            );
            check(a == b, format!("n={n} p={p}: not deterministic"), &mut fails);
            check(a != c, format!("n={n} p={p}: seed ignored"), &mut fails);
        }
    }
    let m = make_missing_mask(100, 0.7, 0.3, 3).unwrap();
    check(
        (m.complete_count(), m.img_only_count(), m.txt_only_count()) == (30, 21, 49),
        "split example 30/21/49",
        &mut fails,
    );

    // absent rows are never read: fusion, imputation and inference
    let base = synth_paired_blobs(3, 90, 6, 4, 0.1, 2).unwrap();
    let ds = masked(&base, 0.5, 2).unwrap();
    let bad = poisoned(&ds, 1e9);
    let bad_neg = poisoned(&ds, -1e9);
    for s in [&bad, &bad_neg] {
        check(impute(&ds, ImputeStrategy::Zero) == impute(s, ImputeStrategy::Zero), "zero fill read a poisoned row", &mut fails);
        check(impute(&ds, ImputeStrategy::Mean) == impute(s, ImputeStrategy::Mean), "mean fill read a poisoned row", &mut fails);
    }
    let cfg = TrainConfig {
        k: 3,
        d_sub: 8,
        enc_hidden: vec![16],
        gen_hidden: vec![16],
        disc_hidden: 8,
        disc_mid: 4,
        mbd_kernels: 4,
        mbd_dim: 3,
        d_gauss: 4,
        max_iters: 3,
        restarts: 3,
        ..TrainConfig::default()
    };
    let model = train(&ds, &cfg).unwrap();
    let clean = infer(&model, &ds).unwrap();
    for s in [&bad, &bad_neg] {
        let r = infer(&model, s).unwrap();
        check(r.labels == clean.labels, "infer labels moved under poisoning", &mut fails);
        check(r.z_fus == clean.z_fus, "fused rows moved under poisoning", &mut fails);
        check(
            r.z_fus.iter().all(|v| v.abs() < 1e6),
            "poison sentinel reached the fused representation",
            &mut fails,
        );
        let trained = train(s, &cfg).unwrap();
        check(trained.labels == model.labels, "training read a poisoned row", &mut fails);
    }
    let state = model.state.clone().expect("trained model carries its state");
    let w = FusionWeights { beta: 0.4, eta_img: 0.1, eta_txt: 0.1 };
    let mut poisoned_state = state.clone();
    for i in 0..ds.n() {
        let f = ds.mask.get(i);
        if !f.has_img {
            poisoned_state.z_img.row_mut(i).fill(1e9);
            poisoned_state.fake_txt.row_mut(i).fill(-1e9);
        }
        if !f.has_txt {
            poisoned_state.z_txt.row_mut(i).fill(-1e9);
            poisoned_state.fake_img.row_mut(i).fill(1e9);
        }
    }
    check(
        fuse_with_fakes(&state, &ds.mask, &w).unwrap() == fuse_with_fakes(&poisoned_state, &ds.mask, &w).unwrap(),
        "fuse_with_fakes read a poisoned row",
        &mut fails,
    );
    outcome(fails, "18 (n, p) grids, split example, sentinel poisoning at +-1e9".into())
}

// 5: simplex invariants

fn criterion_5() -> Outcome {
    let mut fails = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_row: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    let mut self_kl: f64 = 0.0;
    let mut fixed_point: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let k = rng.random_range(2..=6);
        let d = rng.random_range(1..=5);
        let scale = 10f64.powf(rng.random_range(-1.0..1.5));
        let dof = rng.random_range(0.2..3.0);
        let c = Centroids { mu: gaussian(&mut rng, k, d, scale), modality: Modality::Fus, dof };
        let q = soft_assign(gaussian(&mut rng, n, d, scale).view(), &c).unwrap();
        let p = target_distribution(&q).unwrap();
        for m in [&q.q, &p.q] {
            for row in m.rows() {
                worst_row = worst_row.max((row.sum() - 1.0).abs());
            }
            check(m.iter().all(|&v| v >= 0.0), "negative assignment", &mut fails);
        }
        let other = soft_assign(gaussian(&mut rng, n, d, scale).view(), &c).unwrap();
        let kl = kl_divergence(&p, &other).unwrap();
        min_kl = min_kl.min(kl);
        if p.q != other.q {
            check(kl > 0.0, format!("KL {kl} for differing P and Q"), &mut fails);
        }
        self_kl = self_kl.max(kl_divergence(&q, &q).unwrap().abs());

        let single = q.select(&[0]);
        let ps = target_distribution(&single).unwrap();
        fixed_point = fixed_point.max(max_abs_diff(&ps.q, &single.q));
    }
    check(worst_row <= 1e-6, format!("row sum off by {worst_row:e}"), &mut fails);
    check(min_kl >= 0.0, format!("negative KL {min_kl}"), &mut fails);
    check(self_kl == 0.0, format!("KL(Q||Q) = {self_kl:e}"), &mut fails);
    check(fixed_point <= 1e-12, format!("single-row fixed point off by {fixed_point:e}"), &mut fails);
    outcome(
        fails,
        format!("1000 draws, row sums within {worst_row:.1e}, min KL {min_kl:.2e}, fixed point within {fixed_point:.1e}"),
    )
}

// 6: desk-scale clustering at p = 0.5

fn criterion_6() -> Outcome {
    let mut fails = Vec::new();
    let cfg = TrainConfig::default();
    let mut full = Vec::new();
    let mut zero = Vec::new();
    for seed in 0..5u64 {
        let ds = masked(&blobs(seed), 0.5, seed).unwrap();
        let c = TrainConfig { seed, ..cfg.clone() };
        full.push(run_method(&ds, &c, Method::ClusterGan, seed).unwrap().acc);
        zero.push(run_method(&ds, &c, Method::ZeroFill, seed).unwrap().acc);
    }
    let (mf, mz) = (median(&full).unwrap(), median(&zero).unwrap());
    check(mf >= 0.80, format!("median ACC {mf:.3} < 0.80"), &mut fails);
    check(mf >= mz, format!("median ACC {mf:.3} below zero fill {mz:.3}"), &mut fails);
    outcome(
        fails,
        format!("median ACC {mf:.3} (per seed {}), zero fill {mz:.3}", fmt(&full)),
    )
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

// 7: ablation ordering at p = 0.7

fn criterion_7() -> Outcome {
    let mut fails = Vec::new();
    let seeds = 10u64;
    let mut acc = [Vec::new(), Vec::new(), Vec::new()];
    let mut zero = Vec::new();
    for seed in 0..seeds {
        let ds = masked(&blobs(seed), 0.7, seed).unwrap();
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        for (slot, v) in Variant::ALL.into_iter().enumerate() {
            acc[slot].push(ablation_run(&ds, &cfg, v).unwrap().acc);
        }
        zero.push(run_method(&ds, &cfg, Method::ZeroFill, seed).unwrap().acc);
    }
    let med: Vec<f64> = acc.iter().map(|a| median(a).unwrap()).collect();
    let (full, no_gan, no_kl) = (med[0], med[1], med[2]);
    check(full >= no_gan, format!("full {full:.3} < no_gan {no_gan:.3}"), &mut fails);
    check(full >= no_kl, format!("full {full:.3} < no_kl {no_kl:.3}"), &mut fails);
    let mz = median(&zero).unwrap();
    outcome(
        fails,
        format!(
            "{seeds} seeds, median ACC full {full:.3}, no_gan {no_gan:.3}, no_kl {no_kl:.3} (zero fill {mz:.3}); full per seed {}",
            fmt(&acc[0])
        ),
    )
}

// 8: degradation with the missing rate

fn criterion_8() -> Outcome {
    let mut fails = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let plist = [0.1, 0.5, 0.9];
    let seeds = [0u64, 1, 2];
    let rows = run_sweep(&blobs(0), &TrainConfig::default(), &plist, &seeds, &Method::ALL, &csv).unwrap();
    check(rows.len() == plist.len() * seeds.len() * 4, format!("{} sweep rows", rows.len()), &mut fails);
    let mut parts = Vec::new();
    for m in Method::ALL {
        let med = |p: f64| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == m.name() && (r.missing_rate - p).abs() < 1e-9)
                .filter_map(|r| r.acc)
                .collect();
            median(&v).unwrap_or(f64::NAN)
        };
        let (lo, mid, hi) = (med(0.1), med(0.5), med(0.9));
        check(hi <= lo, format!("{}: {hi:.3} at p=0.9 > {lo:.3} at p=0.1", m.name()), &mut fails);
        parts.push(format!("{} {lo:.3}/{mid:.3}/{hi:.3}", m.name()));
    }
    check(rows.iter().all(|r| r.is_ok()), "a sweep run failed", &mut fails);
    outcome(fails, format!("median ACC at p=0.1/0.5/0.9: {}", parts.join(", ")))
}

// 9: determinism and persistence

fn criterion_9() -> Outcome {
    let mut fails = Vec::new();
    let ds = masked(&blobs(4), 0.5, 4).unwrap();
    let cfg = TrainConfig { seed: 4, max_iters: 40, ..TrainConfig::default() };
    let a = train(&ds, &cfg).unwrap();
    let b = train(&ds, &cfg).unwrap();
    check(a.labels == b.labels, "labels differ between identical runs", &mut fails);
    check(a.history == b.history, "loss curves differ between identical runs", &mut fails);

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path().join("ckpt")).unwrap();
    let loaded = TrainedModel::load(dir.path().join("ckpt")).unwrap();
    let before = infer(&a, &ds).unwrap();
    let after = infer(&loaded, &ds).unwrap();
    check(before.labels == after.labels, "labels changed across save/load", &mut fails);
    check(before.z_fus == after.z_fus, "fused representation changed across save/load", &mut fails);

    write_dataset(&ds, dir.path().join("data")).unwrap();
    let back = read_dataset(dir.path().join("data")).unwrap();
    check(back == ds, "dataset round trip is lossy", &mut fails);
    let rows_moved = (0..ds.n()).filter(|&i| ds.img.row(i) != back.img.row(i)).count();
    outcome(
        fails,
        format!(
            "{} history entries identical, ACC {:.3} after reload, {rows_moved} dataset rows changed",
            a.history.len(),
            before.metrics.map_or(f64::NAN, |m| m.acc)
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Duration, fn() -> Outcome); 9] = [
        (1, "formula oracles", Duration::from_secs(1), criterion_1),
        (2, "gradient suite", Duration::from_secs(30), criterion_2),
        (3, "metric oracles", Duration::from_secs(30), criterion_3),
        (4, "protocol exactness", Duration::from_secs(5), criterion_4),
        (5, "simplex invariants", Duration::from_secs(5), criterion_5),
        (6, "desk-scale clustering p=0.5", Duration::from_secs(5 * 60), criterion_6),
        (7, "ablation ordering p=0.7", Duration::from_secs(15 * 60), criterion_7),
        (8, "degradation monotonicity", Duration::from_secs(20 * 60), criterion_8),
        (9, "determinism and persistence", Duration::from_secs(2 * 60), criterion_9),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let in_time = took <= budget;
        let pass = out.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id} {name}: {} ({:.1} s of {} s) {}{}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs(),
            out.detail,
            if in_time { "" } else { "; over the time budget" }
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
