//! Modality-specific encoders and the fusion rules that combine real and
//! generated subspace representations.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use crate::clusterhead::Centroids;
use crate::dataio::{Presence, PresenceMask};
use crate::error::{Error, Result};
pub use crate::nn::{init_params, MlpSpec, Mode, NetParams};

/// Map a feature matrix into the encoder's subspace.
///
/// This is a pure matrix function: rows belonging to absent modalities are
/// transformed like any other row and it is up to the caller to ignore them.
pub fn encode(params: &NetParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    params.forward(x, Mode::Eval)
}

/// `(1 - beta) * z_img + beta * z_txt`.
pub fn fuse(z_img: ArrayView1<'_, f64>, z_txt: ArrayView1<'_, f64>, beta: f64) -> Result<Array1<f64>> {
    if z_img.len() != z_txt.len() {
        return Err(Error::invalid(format!(
            "cannot fuse rows of width {} and {}",
            z_img.len(),
            z_txt.len()
        )));
    }
    Ok(&z_img * (1.0 - beta) + &z_txt * beta)
}

/// Row-wise [`fuse`] over two equally shaped matrices.
pub fn fuse_matrix(z_img: ArrayView2<'_, f64>, z_txt: ArrayView2<'_, f64>, beta: f64) -> Result<Array2<f64>> {
    if z_img.dim() != z_txt.dim() {
        return Err(Error::invalid(format!(
            "cannot fuse matrices of shape {:?} and {:?}",
            z_img.dim(),
            z_txt.dim()
        )));
    }
    Ok(&z_img * (1.0 - beta) + &z_txt * beta)
}

/// Mixing weights for the fused representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub beta: f64,
    pub eta_img: f64,
    pub eta_txt: f64,
}

impl FusionWeights {
    /// Coefficients `(c_img, c_txt)` of the real representations for an
    /// instance with presence `p`. An absent modality contributes nothing.
    pub fn real_coefficients(&self, p: Presence) -> (f64, f64) {
        (
            if p.has_img { 1.0 - self.beta } else { 0.0 },
            if p.has_txt { self.beta } else { 0.0 },
        )
    }

    /// Coefficients `(c_fake_img, c_fake_txt)` of the generated representations.
    pub fn fake_coefficients(&self, p: Presence) -> (f64, f64) {
        match (p.has_img, p.has_txt) {
            (true, true) => (self.eta_img, self.eta_txt),
            (true, false) => (0.0, self.beta),
            (false, true) => (1.0 - self.beta, 0.0),
            (false, false) => (0.0, 0.0),
        }
    }
}

/// Fuse one instance. Only the inputs with a non-zero coefficient are read:
/// the absent modality's real row never enters the sum.
pub fn fuse_row_with_fakes(
    p: Presence,
    z_img: ArrayView1<'_, f64>,
    z_txt: ArrayView1<'_, f64>,
    fake_img: ArrayView1<'_, f64>,
    fake_txt: ArrayView1<'_, f64>,
    w: &FusionWeights,
) -> Array1<f64> {
    assert!(p.has_img || p.has_txt, "instance has neither modality");
    let (ci, ct) = w.real_coefficients(p);
    let (cfi, cft) = w.fake_coefficients(p);
    let mut out = Array1::zeros(z_img.len());
    for (c, row) in [(ci, z_img), (ct, z_txt), (cfi, fake_img), (cft, fake_txt)] {
        if c != 0.0 {
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o += c * v);
        }
    }
    out
}

/// Per-instance subspace representations and centroids.
///
/// Rows of `z_img` (and `fake_txt`, which is generated from it) are only
/// meaningful where the instance has an image; likewise `z_txt` and
/// `fake_img` need the text.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceState {
    pub z_img: Array2<f64>,
    pub z_txt: Array2<f64>,
    pub z_fus: Array2<f64>,
    pub fake_img: Array2<f64>,
    pub fake_txt: Array2<f64>,
    /// Centroids for image, text and fused representations, in that order.
    pub centroids: Vec<Centroids>,
}

/// Fused representation using generated counterparts.
///
/// * both present: `(1-b) z_img + b z_txt + eta_img fake_img + eta_txt fake_txt`
/// * text absent: `(1-b) z_img + b fake_txt`
/// * image absent: `(1-b) fake_img + b z_txt`
pub fn fuse_with_fakes(state: &SubspaceState, mask: &PresenceMask, w: &FusionWeights) -> Result<Array2<f64>> {
    let n = mask.n();
    let d = state.z_img.ncols();
    for (name, m) in [
        ("z_img", &state.z_img),
        ("z_txt", &state.z_txt),
        ("fake_img", &state.fake_img),
        ("fake_txt", &state.fake_txt),
    ] {
        if m.dim() != (n, d) {
            return Err(Error::invalid(format!(
                "{name} has shape {:?}, expected ({n}, {d})",
                m.dim()
            )));
        }
    }
    if w.eta_img < 0.0 || w.eta_txt < 0.0 {
        return Err(Error::invalid("eta weights must be non-negative"));
    }
    let mut out = Array2::zeros((n, d));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row.assign(&fuse_row_with_fakes(
            mask.get(i),
            state.z_img.row(i),
            state.z_txt.row(i),
            state.fake_img.row(i),
            state.fake_txt.row(i),
            w,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grad_close, finite_diff};
    use ndarray::array;

    fn state(z_img: Array2<f64>, z_txt: Array2<f64>, fake_img: Array2<f64>, fake_txt: Array2<f64>) -> SubspaceState {
        let n = z_img.nrows();
        let d = z_img.ncols();
        SubspaceState {
            z_img,
            z_txt,
            z_fus: Array2::zeros((n, d)),
            fake_img,
            fake_txt,
            centroids: Vec::new(),
        }
    }

    #[test]
    fn fuse_endpoints_and_midpoint() {
        let a = array![1.5, -2.0, 3.25];
        let b = array![0.5, 4.0, -1.0];
        assert_eq!(fuse(a.view(), b.view(), 0.0).unwrap(), a);
        assert_eq!(fuse(a.view(), b.view(), 1.0).unwrap(), b);
        assert_eq!(
            fuse(array![2.0, 0.0].view(), array![0.0, 2.0].view(), 0.5).unwrap(),
            array![1.0, 1.0]
        );
        assert!(fuse(a.view(), array![1.0].view(), 0.5).is_err());
    }

    #[test]
    fn fuse_is_homogeneous() {
        let a = array![1.0, -2.0];
        let b = array![3.0, 0.5];
        let scaled = fuse((&a * 3.5).view(), (&b * 3.5).view(), 0.3).unwrap();
        let direct = fuse(a.view(), b.view(), 0.3).unwrap() * 3.5;
        for (x, y) in scaled.iter().zip(&direct) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fakes_with_zero_eta_reduce_to_plain_fusion() {
        let z_img = array![[1.0, 2.0], [3.0, -1.0]];
        let z_txt = array![[0.0, 1.0], [2.0, 2.0]];
        let fakes = array![[9.0, 9.0], [9.0, 9.0]];
        let s = state(z_img.clone(), z_txt.clone(), fakes.clone(), fakes);
        let w = FusionWeights { beta: 0.3, eta_img: 0.0, eta_txt: 0.0 };
        let out = fuse_with_fakes(&s, &PresenceMask::all_present(2), &w).unwrap();
        assert_eq!(out, fuse_matrix(z_img.view(), z_txt.view(), 0.3).unwrap());
    }

    #[test]
    fn text_absent_row_uses_generated_text() {
        let s = state(
            array![[1.0, 1.0]],
            array![[1e9, -1e9]],
            array![[5.0, 5.0]],
            array![[0.0, 1.0]],
        );
        let mask = PresenceMask::from_flags(vec![Presence::IMG_ONLY], 0.5).unwrap();
        let w = FusionWeights { beta: 0.4, eta_img: 0.1, eta_txt: 0.1 };
        let out = fuse_with_fakes(&s, &mask, &w).unwrap();
        assert!((out[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((out[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn absent_real_rows_are_never_read() {
        let mask = PresenceMask::from_flags(
            vec![Presence::BOTH, Presence::IMG_ONLY, Presence::TXT_ONLY, Presence::BOTH],
            0.5,
        )
        .unwrap();
        let base = state(
            Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.1),
            Array2::from_shape_fn((4, 3), |(i, j)| (i * j) as f64 * 0.2),
            Array2::from_shape_fn((4, 3), |(i, j)| i as f64 - j as f64),
            Array2::from_shape_fn((4, 3), |(i, j)| (i as f64) * 0.5 + j as f64),
        );
        let w = FusionWeights { beta: 0.6, eta_img: 0.1, eta_txt: 0.2 };
        let clean = fuse_with_fakes(&base, &mask, &w).unwrap();
        for poison in [1e9, -1e9] {
            let mut p = base.clone();
            p.z_txt.row_mut(1).fill(poison);
            p.fake_img.row_mut(1).fill(poison);
            p.z_img.row_mut(2).fill(poison);
            p.fake_txt.row_mut(2).fill(poison);
            assert_eq!(fuse_with_fakes(&p, &mask, &w).unwrap(), clean);
        }
    }

    #[test]
    fn encode_shapes_and_errors() {
        let spec = MlpSpec::new(vec![6, 5, 4], 0.01).unwrap();
        let p = init_params(&spec, 0).unwrap();
        let z = encode(&p, Array2::ones((7, 6)).view()).unwrap();
        assert_eq!(z.dim(), (7, 4));
        assert!(encode(&p, Array2::ones((7, 5)).view()).is_err());
    }

    #[test]
    fn wide_image_encoder_shape() {
        let spec = MlpSpec::new(vec![4096, 2048, 1024, 256], 0.01).unwrap();
        let p = init_params(&spec, 1).unwrap();
        let x = Array2::from_shape_fn((32, 4096), |(i, j)| ((i * 31 + j) % 17) as f64 / 17.0);
        let z = encode(&p, x.view()).unwrap();
        assert_eq!(z.dim(), (32, 256));
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_input_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(vec![3, 4, 2], 0.05).unwrap();
        let p = init_params(&spec, 9).unwrap();
        let x = array![[0.3, -0.7, 1.1], [0.9, 0.2, -0.4]];
        let (_, cache) = p.forward_cached(x.view(), Mode::Eval).unwrap();
        let (_, dx) = p.backward(&cache, Array2::ones((2, 2)).view());
        let fd = finite_diff(&x, |xp| encode(&p, xp.view()).unwrap().sum());
        assert_grad_close(&dx, &fd, 1e-4);
    }
}
