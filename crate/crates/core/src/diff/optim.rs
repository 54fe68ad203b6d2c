use alloc::vec;
use alloc::vec::Vec;

use crate::codec::{DecodeError, Reader, Writer};

/// Plain gradient descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut [f64], grad: &[f64]) {
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= self.lr * g;
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let t = self.t as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= self.lr * mh / (libm::sqrt(vh) + self.eps);
        }
    }

    pub fn encode(&self, w: &mut Writer) {
        w.f64(self.lr);
        w.f64(self.beta1);
        w.f64(self.beta2);
        w.f64(self.eps);
        w.u64(self.t);
        w.f64s(&self.m);
        w.f64s(&self.v);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let lr = r.f64("adam lr")?;
        let beta1 = r.f64("adam beta1")?;
        let beta2 = r.f64("adam beta2")?;
        let eps = r.f64("adam eps")?;
        let t = r.u64("adam step")?;
        let m = r.f64s("adam m")?;
        let v = r.f64s("adam v")?;
        if m.len() != v.len() {
            return Err(DecodeError::Invalid { what: "adam moments" });
        }
        Ok(Self { lr, beta1, beta2, eps, m, v, t })
    }
}

/// Optimizer selected per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd(o) => o.step(params, grad),
            Optimizer::Adam(o) => o.step(params, grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_follows_negative_gradient() {
        let mut p = [1.0, -2.0];
        Sgd { lr: 0.5 }.step(&mut p, &[2.0, -2.0]);
        assert_eq!(p, [0.0, -1.0]);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut p = [0.0, 0.0];
        let mut adam = Adam::new(0.01, 2);
        adam.step(&mut p, &[3.0, -0.001]);
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = [3.0, -4.0];
        let mut adam = Adam::new(0.05, 2);
        for _ in 0..3000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            adam.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn adam_state_round_trips() {
        let mut adam = Adam::new(0.1, 3);
        let mut p = [1.0, 2.0, 3.0];
        adam.step(&mut p, &[0.1, 0.2, 0.3]);
        let mut w = Writer::new();
        adam.encode(&mut w);
        let bytes = w.into_bytes();
        let back = Adam::decode(&mut Reader::new(&bytes)).unwrap();
        assert_eq!(back, adam);
    }
}
