//! Plane-wave discretization of periodic functions on the unit torus and the
//! layout of fiber states `(psi1, psi2, q, p)`.

use std::f64::consts::PI;

use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Modes `m` with `|m|_inf <= N`, lexicographic in `(m1, m2, m3)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaneWaveBasis {
    cutoff: usize,
    modes: Vec<[i32; 3]>,
}

impl PlaneWaveBasis {
    pub fn new(cutoff: usize) -> Result<Self> {
        if cutoff < 1 {
            return Err(Error::Precondition("basis cutoff N must be at least 1".into()));
        }
        let n = cutoff as i32;
        let mut modes = Vec::with_capacity((2 * cutoff + 1).pow(3));
        for a in -n..=n {
            for b in -n..=n {
                for c in -n..=n {
                    modes.push([a, b, c]);
                }
            }
        }
        Ok(Self { cutoff, modes })
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn modes(&self) -> &[[i32; 3]] {
        &self.modes
    }

    /// Number of modes `B = (2N+1)^3`.
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// State dimension `D = 2B + 6`.
    pub fn dim(&self) -> usize {
        2 * self.len() + 6
    }

    pub fn layout(&self) -> Layout {
        Layout { b: self.len() }
    }

    pub fn index_of(&self, m: [i32; 3]) -> Option<usize> {
        let n = self.cutoff as i32;
        if m.iter().any(|&x| x < -n || x > n) {
            return None;
        }
        let w = 2 * n + 1;
        Some((((m[0] + n) * w + (m[1] + n)) * w + (m[2] + n)) as usize)
    }

    /// `xi_m = theta - 2 pi m` for every mode.
    pub fn shifted_momenta(&self, theta: [f64; 3]) -> Vec<[f64; 3]> {
        self.modes
            .iter()
            .map(|m| {
                [
                    theta[0] - 2.0 * PI * m[0] as f64,
                    theta[1] - 2.0 * PI * m[1] as f64,
                    theta[2] - 2.0 * PI * m[2] as f64,
                ]
            })
            .collect()
    }

    /// Sobolev weights `1 + |2 pi m|^2`.
    pub fn sobolev_weights(&self) -> Vec<f64> {
        self.modes
            .iter()
            .map(|m| {
                1.0 + 4.0 * PI * PI * (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]) as f64
            })
            .collect()
    }
}

/// Offsets of the four blocks inside a state vector of length `2B + 6`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub b: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        2 * self.b + 6
    }
    pub fn psi1(&self) -> std::ops::Range<usize> {
        0..self.b
    }
    pub fn psi2(&self) -> std::ops::Range<usize> {
        self.b..2 * self.b
    }
    pub fn q(&self) -> std::ops::Range<usize> {
        2 * self.b..2 * self.b + 3
    }
    pub fn p(&self) -> std::ops::Range<usize> {
        2 * self.b + 3..2 * self.b + 6
    }

    /// Size of each of the two blocks `(psi1, q)` and `(psi2, p)`.
    pub fn half(&self) -> usize {
        self.b + 3
    }

    /// Position of entry `k` of the `(psi1, q)` block in the full vector.
    pub fn c_index(&self, k: usize) -> usize {
        if k < self.b {
            k
        } else {
            2 * self.b + (k - self.b)
        }
    }

    /// Position of entry `k` of the `(psi2, p)` block in the full vector.
    pub fn d_index(&self, k: usize) -> usize {
        if k < self.b {
            self.b + k
        } else {
            2 * self.b + 3 + (k - self.b)
        }
    }

    pub fn split(&self, v: &[c64]) -> (Vec<c64>, Vec<c64>) {
        assert_eq!(v.len(), self.dim());
        let c = (0..self.half()).map(|k| v[self.c_index(k)]).collect();
        let d = (0..self.half()).map(|k| v[self.d_index(k)]).collect();
        (c, d)
    }

    pub fn join(&self, c: &[c64], d: &[c64]) -> Vec<c64> {
        let mut v = vec![c64::new(0.0, 0.0); self.dim()];
        for k in 0..self.half() {
            v[self.c_index(k)] = c[k];
            v[self.d_index(k)] = d[k];
        }
        v
    }
}

/// A fiber state; coefficients of `e^{i 2 pi m y}` for the field parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlochState {
    pub psi1: Vec<c64>,
    pub psi2: Vec<c64>,
    pub q: [c64; 3],
    pub p: [c64; 3],
}

impl BlochState {
    pub fn zeros(basis: &PlaneWaveBasis) -> Self {
        let z = c64::new(0.0, 0.0);
        Self {
            psi1: vec![z; basis.len()],
            psi2: vec![z; basis.len()],
            q: [z; 3],
            p: [z; 3],
        }
    }

    pub fn from_vector(v: &[c64]) -> Result<Self> {
        if v.len() < 6 || (v.len() - 6) % 2 != 0 {
            return Err(Error::Precondition(format!("state length {} is not 2B+6", v.len())));
        }
        let l = Layout { b: (v.len() - 6) / 2 };
        Ok(Self {
            psi1: v[l.psi1()].to_vec(),
            psi2: v[l.psi2()].to_vec(),
            q: [v[l.q().start], v[l.q().start + 1], v[l.q().start + 2]],
            p: [v[l.p().start], v[l.p().start + 1], v[l.p().start + 2]],
        })
    }

    pub fn to_vector(&self) -> Vec<c64> {
        let mut v = Vec::with_capacity(2 * self.psi1.len() + 6);
        v.extend_from_slice(&self.psi1);
        v.extend_from_slice(&self.psi2);
        v.extend_from_slice(&self.q);
        v.extend_from_slice(&self.p);
        v
    }

    /// `X^0` norm; by Plancherel on the unit cell it is the Euclidean norm of
    /// the coefficient vector.
    pub fn x0_norm(&self) -> f64 {
        self.xs_norm(0.0, &vec![1.0; self.psi1.len()])
    }

    /// `X^s` norm with weights `(1 + |2 pi m|^2)^s` on the field blocks.
    pub fn xs_norm(&self, s: f64, sobolev: &[f64]) -> f64 {
        assert_eq!(sobolev.len(), self.psi1.len());
        let field: f64 = self
            .psi1
            .iter()
            .zip(&self.psi2)
            .zip(sobolev)
            .map(|((a, b), w)| w.powf(s) * (a.norm_sqr() + b.norm_sqr()))
            .sum();
        let ions: f64 = self.q.iter().chain(&self.p).map(|z| z.norm_sqr()).sum();
        (field + ions).sqrt()
    }
}
