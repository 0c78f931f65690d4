//! Stochastic gradient descent with heavy-ball momentum.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v = momentum * v + g; p -= lr * v` for each tensor pair.
    ///
    /// The same optimizer must always be stepped with the same tensor list.
    pub fn step(&mut self, params: Vec<ArrayViewMutD<'_, f64>>, grads: Vec<ArrayViewD<'_, f64>>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        assert_eq!(self.velocity.len(), grads.len(), "optimizer reused for a different parameter set");
        for ((mut p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            assert_eq!(p.shape(), g.shape());
            let (lr, mom) = (self.lr, self.momentum);
            Zip::from(&mut p).and(&g).and(v).for_each(|p, &g, v| {
                *v = mom * *v + g;
                *p -= lr * *v;
            });
        }
    }
}
