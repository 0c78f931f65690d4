use ndarray::{Array, Dimension};

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of `f` at `x`.
pub fn finite_diff<D: Dimension>(x: &Array<f64, D>, f: impl Fn(&Array<f64, D>) -> f64) -> Array<f64, D> {
    let mut grad = Array::zeros(x.raw_dim());
    let mut xp = x.as_standard_layout().into_owned();
    for i in 0..xp.len() {
        let orig = xp.as_slice().expect("standard layout")[i];
        xp.as_slice_mut().expect("standard layout")[i] = orig + FD_STEP;
        let up = f(&xp);
        xp.as_slice_mut().expect("standard layout")[i] = orig - FD_STEP;
        let down = f(&xp);
        xp.as_slice_mut().expect("standard layout")[i] = orig;
        grad.as_slice_mut().expect("standard layout")[i] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

pub fn rel_err<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

#[track_caller]
pub fn assert_grad_close<D: Dimension>(analytic: &Array<f64, D>, numeric: &Array<f64, D>, tol: f64) {
    let e = rel_err(analytic, numeric);
    assert!(e < tol, "relative gradient error {e:e}\nanalytic {analytic}\nnumeric {numeric}");
}
