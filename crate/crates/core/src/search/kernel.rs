//! Fast criterion evaluation for allocations given as pool indices.
//!
//! Information contributions are stored with the nuisance columns first and
//! the treatment effects last, so `Lambda_q` is the inverse of the trailing
//! Schur complement, read off the trailing block of one Cholesky factor.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::inference::{meets_power, per_hypothesis_power, PowerSpec, PowerType};
use crate::model::{n_fixed_effects, InformationEngine, Sequence, VarianceComponents};

use super::Criterion;

pub(crate) struct Kernel {
    p: usize,
    q: usize,
    contributions: Vec<Vec<f64>>,
}

pub(crate) struct Scratch {
    a: Vec<f64>,
    inv: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Kernel {
    pub fn new(
        pool: &[Sequence],
        m: usize,
        periods: usize,
        arms: usize,
        vc: &VarianceComponents<f64>,
    ) -> Result<Self> {
        let engine = InformationEngine::new(m, periods, arms, vc)?;
        let p = n_fixed_effects(arms, periods);
        let q = arms - 1;
        let perm: Vec<usize> = (q..p).chain(0..q).collect();
        let contributions = pool
            .iter()
            .map(|s| {
                let k = engine.sequence_information(s);
                let mut out = vec![0.0; p * p];
                for (r, &pr) in perm.iter().enumerate() {
                    for (c, &pc) in perm.iter().enumerate() {
                        out[r * p + c] = k[(pr, pc)];
                    }
                }
                out
            })
            .collect();
        Ok(Kernel { p, q, contributions })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn scratch(&self) -> Scratch {
        Scratch {
            a: vec![0.0; self.p * self.p],
            inv: vec![0.0; self.q * self.q],
            lambda: vec![0.0; self.q * self.q],
        }
    }

    /// Fills `scratch.lambda` (row-major `q x q`) and returns `det(Lambda)`,
    /// or `None` when the information is not numerically positive definite.
    pub fn lambda(&self, indices: &[u16], s: &mut Scratch) -> Option<f64> {
        let p = self.p;
        let q = self.q;
        let a = &mut s.a;
        a.copy_from_slice(&self.contributions[usize::from(indices[0])]);
        for &i in &indices[1..] {
            for (x, y) in a.iter_mut().zip(&self.contributions[usize::from(i)]) {
                *x += y;
            }
        }
        let scale = (0..p).fold(0.0f64, |acc, i| acc.max(a[i * p + i]));
        let floor = scale * 1e-13;
        // In-place lower Cholesky factor.
        for j in 0..p {
            let mut d = a[j * p + j];
            for k in 0..j {
                d -= a[j * p + k] * a[j * p + k];
            }
            if !(d > floor) {
                return None;
            }
            let d = d.sqrt();
            a[j * p + j] = d;
            for i in j + 1..p {
                let mut v = a[i * p + j];
                for k in 0..j {
                    v -= a[i * p + k] * a[j * p + k];
                }
                a[i * p + j] = v / d;
            }
        }
        // Inverse of the trailing q x q factor, then Lambda = M' M.
        let off = p - q;
        let l = |r: usize, c: usize| a[(off + r) * p + off + c];
        let inv = &mut s.inv;
        inv.iter_mut().for_each(|x| *x = 0.0);
        let mut det_l = 1.0;
        for i in 0..q {
            det_l *= l(i, i);
            inv[i * q + i] = 1.0 / l(i, i);
            for j in 0..i {
                let mut v = 0.0;
                for k in j..i {
                    v -= l(i, k) * inv[k * q + j];
                }
                inv[i * q + j] = v / l(i, i);
            }
        }
        for r in 0..q {
            for c in 0..=r {
                let v: f64 = (r..q).map(|k| inv[k * q + r] * inv[k * q + c]).sum();
                s.lambda[r * q + c] = v;
                s.lambda[c * q + r] = v;
            }
        }
        Some(1.0 / (det_l * det_l))
    }

    pub fn criterion(&self, criterion: Criterion, det: f64, s: &Scratch) -> f64 {
        let q = self.q;
        match criterion {
            Criterion::D => det,
            Criterion::A => (0..q).map(|i| s.lambda[i * q + i]).sum::<f64>() / q as f64,
            Criterion::E => (0..q).fold(0.0f64, |acc, i| acc.max(s.lambda[i * q + i])),
        }
    }
}

/// Power check on the kernel's `Lambda`, with the critical value precomputed.
pub(crate) struct PowerGate<'a> {
    spec: &'a PowerSpec,
    e: f64,
    ignore: bool,
}

impl<'a> PowerGate<'a> {
    pub fn new(spec: &'a PowerSpec, e: f64) -> Self {
        PowerGate {
            spec,
            e,
            ignore: spec.target() <= 0.0,
        }
    }

    pub fn passes(&self, q: usize, lambda: &[f64]) -> bool {
        if self.ignore {
            return true;
        }
        let target = self.spec.target();
        match self.spec.power_type {
            PowerType::Individual => (0..q).all(|f| {
                per_hypothesis_power(self.spec.delta[f], 1.0 / lambda[f * q + f], self.e) >= target
            }),
            PowerType::Combined => {
                let m = DMatrix::from_row_slice(q, q, lambda);
                meets_power(&m, self.spec, self.e)
            }
        }
    }
}
