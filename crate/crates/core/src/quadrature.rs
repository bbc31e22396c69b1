//! Gauss–Hermite rules for expectations under Gaussians.
//!
//! Nodes are the roots of the physicists' Hermite polynomial `H_n`, found by
//! Newton iteration on the orthonormal recurrence.

use std::f64::consts::PI;

use crate::error::{LpfError, Result};

#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Rule with `order` nodes, exact for `∫ e^{-x²} p(x) dx` with `deg p < 2·order`.
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(LpfError::Range(
                "quadrature order must be at least 1".into(),
            ));
        }
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let pim4 = PI.powf(-0.25);
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..m {
            // Initial guesses for the largest roots, then each root from its
            // predecessors.
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let step = p1 / pp;
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(Z)]` for `Z ~ N(0, 1)`.
    pub fn standard_normal_expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        let scale = std::f64::consts::SQRT_2;
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(scale * x))
            .sum::<f64>()
            / PI.sqrt()
    }

    /// Tensor-grid nodes for `N(0, I_d)`: standard-normal points paired with
    /// probability weights summing to one.
    pub fn standard_normal_grid(&self, d: usize) -> Vec<(Vec<f64>, f64)> {
        let scale = std::f64::consts::SQRT_2;
        let norm = PI.sqrt();
        let mut grid: Vec<(Vec<f64>, f64)> = vec![(Vec::with_capacity(d), 1.0)];
        for _ in 0..d {
            let mut next = Vec::with_capacity(grid.len() * self.order());
            for (point, w) in &grid {
                for (x, wx) in self.nodes.iter().zip(&self.weights) {
                    let mut p = point.clone();
                    p.push(scale * x);
                    next.push((p, w * wx / norm));
                }
            }
            grid = next;
        }
        grid
    }
}
