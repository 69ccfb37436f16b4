//! Shifted uniform quadrature grid on the Brillouin zone `[0, 2pi]^3`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `theta_j = 2pi (j + 1/2) / L` componentwise, `j` in `{0..L-1}^3`, stored in
/// lexicographic order of `(j1, j2, j3)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaGrid {
    l: usize,
    points: Vec<[f64; 3]>,
}

impl ThetaGrid {
    pub fn new(l: usize) -> Result<Self> {
        if l < 2 {
            return Err(Error::Precondition(format!("grid size L = {l} must be at least 2")));
        }
        let mut points = Vec::with_capacity(l * l * l);
        let c = |j: usize| 2.0 * PI * (j as f64 + 0.5) / l as f64;
        for j1 in 0..l {
            for j2 in 0..l {
                for j3 in 0..l {
                    points.push([c(j1), c(j2), c(j3)]);
                }
            }
        }
        Ok(Self { l, points })
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn point(&self, idx: usize) -> [f64; 3] {
        self.points[idx]
    }

    /// Uniform quadrature weight `(2pi/L)^3`.
    pub fn weight(&self) -> f64 {
        (2.0 * PI / self.l as f64).powi(3)
    }

    pub fn total_weight(&self) -> f64 {
        self.weight() * self.len() as f64
    }

    pub fn index(&self, j: [usize; 3]) -> usize {
        (j[0] * self.l + j[1]) * self.l + j[2]
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let l = self.l;
        [idx / (l * l), (idx / l) % l, idx % l]
    }

    /// Periodic neighbour of `idx` along `axis` by `step` cells.
    pub fn neighbor(&self, idx: usize, axis: usize, step: isize) -> usize {
        let mut j = self.coords(idx);
        let l = self.l as isize;
        j[axis] = (j[axis] as isize + step).rem_euclid(l) as usize;
        self.index(j)
    }

    /// Index of the reflected point `2pi - theta`.
    pub fn reflect(&self, idx: usize) -> usize {
        let j = self.coords(idx);
        let l = self.l;
        self.index([l - 1 - j[0], l - 1 - j[1], l - 1 - j[2]])
    }

    /// Lexicographic predecessor used as the anchor for band continuation:
    /// the neighbour one step back along the last axis that is not at zero.
    pub fn predecessor(&self, idx: usize) -> Option<usize> {
        let j = self.coords(idx);
        (0..3)
            .rev()
            .find(|&a| j[a] > 0)
            .map(|a| {
                let mut p = j;
                p[a] -= 1;
                self.index(p)
            })
    }

    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.l as f64
    }
}

/// Euclidean distance from `theta` to the dual lattice `2pi Z^3`.
pub fn dist_to_dual_lattice(theta: [f64; 3]) -> f64 {
    theta
        .iter()
        .map(|&t| {
            let r = t - 2.0 * PI * (t / (2.0 * PI)).round();
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

pub fn check_off_lattice(theta: [f64; 3], delta_min: f64) -> Result<()> {
    let dist = dist_to_dual_lattice(theta);
    if dist < delta_min {
        return Err(Error::ThetaOnDualLattice {
            theta,
            dist,
            delta_min,
        });
    }
    Ok(())
}
