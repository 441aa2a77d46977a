use super::Tensor;
use crate::error::{Error, Result};

/// Plain gradient descent with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: Option<f64>,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Sgd {
            lr,
            momentum: None,
            velocity: Vec::new(),
        })
    }

    pub fn with_momentum(mut self, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {beta}")));
        }
        self.momentum = (beta > 0.0).then_some(beta);
        Ok(self)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// `p ← p − η·g` (or `v ← βv + g; p ← p − η·v` with momentum).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidShape {
                op: "sgd_step",
                msg: format!("{} parameters but {} gradients", params.len(), grads.len()),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            p.same_shape(g, "sgd_step")?;
        }
        match self.momentum {
            None => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            Some(beta) => {
                if self.velocity.is_empty() {
                    self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                }
                for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
                    v.same_shape(g, "sgd_step")?;
                    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vv = beta * *vv + gv;
                        *pv -= self.lr * *vv;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Zero-lr-tolerant single update used where a caller may legitimately pass
/// `η = 0` (fixed-point checks).
pub(crate) fn descend(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if lr == 0.0 {
        return Ok(());
    }
    Sgd::new(lr)?.step(params, grads)
}
