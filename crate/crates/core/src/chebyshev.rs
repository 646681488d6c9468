//! Chebyshev–Gauss–Lobatto grids, the collocation differentiation matrix, and
//! barycentric evaluation of the interpolant.

use std::f64::consts::PI;

use thiserror::Error;

use crate::linalg::{DenseMatrix, Vector};

/// Slack allowed when deciding whether an evaluation point lies in the interval.
pub const DOMAIN_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChebyshevError {
    #[error("polynomial degree must be at least 1, got {0}")]
    InvalidDegree(usize),
    #[error("invalid interval [{0}, {1}]")]
    InvalidInterval(f64, f64),
    #[error("point {x} outside [{a}, {b}]")]
    OutOfDomain { x: f64, a: f64, b: f64 },
    #[error("expected {expected} node values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Gauss–Lobatto nodes `x_j = cos(πj/N)`, `j = 0..=N`, stored in reference
/// coordinates (descending from 1 to −1) together with the physical interval
/// they are mapped onto.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebyshevGrid {
    degree: usize,
    nodes: Vec<f64>,
    interval: (f64, f64),
}

impl ChebyshevGrid {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reference nodes in `[-1, 1]`, descending.
    pub fn reference_nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn interval(&self) -> (f64, f64) {
        self.interval
    }

    pub fn is_reference(&self) -> bool {
        self.interval == (-1.0, 1.0)
    }

    /// Node `j` in physical coordinates. Endpoints map exactly.
    pub fn physical_node(&self, j: usize) -> f64 {
        let (a, b) = self.interval;
        if j == 0 {
            b
        } else if j == self.degree {
            a
        } else {
            a + (b - a) * (self.nodes[j] + 1.0) / 2.0
        }
    }

    pub fn physical_nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.physical_node(j)).collect()
    }

    /// Same reference nodes, mapped onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> Result<ChebyshevGrid, ChebyshevError> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(ChebyshevError::InvalidInterval(a, b));
        }
        Ok(ChebyshevGrid { degree: self.degree, nodes: self.nodes.clone(), interval: (a, b) })
    }

    /// Evaluates `f` at every physical node.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector::new((0..self.len()).map(|j| f(self.physical_node(j))).collect())
    }
}

pub fn gauss_lobatto_nodes(degree: usize) -> Result<ChebyshevGrid, ChebyshevError> {
    if degree == 0 {
        return Err(ChebyshevError::InvalidDegree(0));
    }
    let n = degree as f64;
    // sin form of cos(πj/N): exact zero at the midpoint and exact symmetry.
    let nodes = (0..=degree)
        .map(|j| {
            let k = degree as i64 - 2 * j as i64;
            (PI * k as f64 / (2.0 * n)).sin()
        })
        .collect();
    Ok(ChebyshevGrid { degree, nodes, interval: (-1.0, 1.0) })
}

/// Differentiation matrix together with the grid it acts on.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMatrix {
    matrix: DenseMatrix,
    grid: ChebyshevGrid,
}

impl DiffMatrix {
    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn grid(&self) -> &ChebyshevGrid {
        &self.grid
    }

    pub fn apply(&self, values: &[f64]) -> Vector {
        self.matrix.matvec(values).expect("node count matches differentiation matrix")
    }
}

fn weight_c(j: usize, degree: usize) -> f64 {
    if j == 0 || j == degree {
        2.0
    } else {
        1.0
    }
}

/// Differentiation matrix on the reference nodes of `grid`.
///
/// Off-diagonal entries are `(c_i/c_j)(−1)^{i+j}/(x_i − x_j)` with
/// `c_0 = c_N = 2`, `c_j = 1` otherwise. The diagonal is the negative row sum
/// of the off-diagonal entries, which makes `D·1 = 0` hold to rounding. The
/// result always lives on the reference interval; use [`scale_to_interval`]
/// for a physical domain.
pub fn diff_matrix(grid: &ChebyshevGrid) -> DiffMatrix {
    let n = grid.degree;
    let x = &grid.nodes;
    let size = n + 1;
    let mut d = DenseMatrix::zeros(size, size);
    for i in 0..size {
        let mut row_sum = 0.0;
        for j in 0..size {
            if i == j {
                continue;
            }
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            let v = weight_c(i, n) / weight_c(j, n) * sign / (x[i] - x[j]);
            d[(i, j)] = v;
            row_sum += v;
        }
        d[(i, i)] = -row_sum;
    }
    let reference = ChebyshevGrid { degree: n, nodes: x.clone(), interval: (-1.0, 1.0) };
    DiffMatrix { matrix: d, grid: reference }
}

/// Diagonal entries from the closed-form expressions, for cross-checking the
/// negative-sum diagonal.
pub fn closed_form_diagonal(degree: usize) -> Result<Vec<f64>, ChebyshevError> {
    let grid = gauss_lobatto_nodes(degree)?;
    let n = degree as f64;
    let corner = (2.0 * n * n + 1.0) / 6.0;
    Ok((0..=degree)
        .map(|i| {
            if i == 0 {
                corner
            } else if i == degree {
                -corner
            } else {
                let xi = grid.nodes[i];
                -xi / (2.0 * (1.0 - xi * xi))
            }
        })
        .collect())
}

/// Rescales a reference differentiation matrix to `[a, b]` by the chain rule.
pub fn scale_to_interval(d: &DiffMatrix, a: f64, b: f64) -> Result<DiffMatrix, ChebyshevError> {
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(ChebyshevError::InvalidInterval(a, b));
    }
    let (a0, b0) = d.grid.interval;
    let factor = (b0 - a0) / (b - a);
    let matrix = if factor == 1.0 { d.matrix.clone() } else { d.matrix.scale(factor) };
    Ok(DiffMatrix { matrix, grid: d.grid.mapped(a, b)? })
}

/// Barycentric evaluation of the interpolant through `values` at physical
/// point `x`, with Lobatto weights `(−1)^j δ_j`, `δ_0 = δ_N = 1/2`.
pub fn barycentric_eval(grid: &ChebyshevGrid, values: &[f64], x: f64) -> Result<f64, ChebyshevError> {
    if values.len() != grid.len() {
        return Err(ChebyshevError::LengthMismatch { expected: grid.len(), got: values.len() });
    }
    let (a, b) = grid.interval;
    let slack = DOMAIN_SLACK * (b - a).max(1.0);
    if !(x >= a - slack && x <= b + slack) {
        return Err(ChebyshevError::OutOfDomain { x, a, b });
    }
    for j in 0..grid.len() {
        if x == grid.physical_node(j) {
            return Ok(values[j]);
        }
    }
    let t = 2.0 * (x - a) / (b - a) - 1.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for (j, (&xj, &fj)) in grid.nodes.iter().zip(values).enumerate() {
        let diff = t - xj;
        if diff == 0.0 {
            return Ok(fj);
        }
        let delta = if j == 0 || j == grid.degree { 0.5 } else { 1.0 };
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        let w = sign * delta / diff;
        num += w * fj;
        den += w;
    }
    Ok(num / den)
}

/// Maximum node error of the collocation derivative of `u` against `du`, on
/// `[-1, 1]`, for each degree in `degrees`.
pub fn convergence_profile(
    u: impl Fn(f64) -> f64,
    du: impl Fn(f64) -> f64,
    degrees: &[usize],
) -> Result<Vec<(usize, f64)>, ChebyshevError> {
    degrees
        .iter()
        .map(|&n| {
            let grid = gauss_lobatto_nodes(n)?;
            let d = diff_matrix(&grid);
            let approx = d.apply(&grid.sample(&u));
            let err = grid
                .reference_nodes()
                .iter()
                .zip(approx.iter())
                .map(|(&x, &v)| (v - du(x)).abs())
                .fold(0.0, f64::max);
            Ok((n, err))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_small_degrees() {
        assert_eq!(gauss_lobatto_nodes(1).unwrap().reference_nodes(), &[1.0, -1.0]);
        assert_eq!(gauss_lobatto_nodes(2).unwrap().reference_nodes(), &[1.0, 0.0, -1.0]);
        let g = gauss_lobatto_nodes(4).unwrap();
        let h = 2f64.sqrt() / 2.0;
        let expected = [1.0, h, 0.0, -h, -1.0];
        for (a, b) in g.reference_nodes().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(gauss_lobatto_nodes(0), Err(ChebyshevError::InvalidDegree(0)));
    }

    #[test]
    fn nodes_strictly_decreasing() {
        for n in 1..40 {
            let g = gauss_lobatto_nodes(n).unwrap();
            assert!(g.reference_nodes().windows(2).all(|w| w[0] > w[1]));
            assert_eq!(g.reference_nodes()[0], 1.0);
            assert_eq!(g.reference_nodes()[n], -1.0);
        }
    }

    #[test]
    fn degree_one_matrix() {
        let d = diff_matrix(&gauss_lobatto_nodes(1).unwrap());
        assert_eq!(d.matrix().data(), &[0.5, -0.5, 0.5, -0.5]);
        assert_eq!(d.apply(&[1.0, -1.0]).as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn constants_and_linears() {
        for n in [3, 8, 17, 64] {
            let g = gauss_lobatto_nodes(n).unwrap();
            let d = diff_matrix(&g);
            assert!(d.apply(&vec![3.0; n + 1]).norm_inf() < 1e-10);
            let ones = d.apply(g.reference_nodes());
            assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-10));
        }
    }

    #[test]
    fn quintic_at_degree_16() {
        let g = gauss_lobatto_nodes(16).unwrap();
        let d = diff_matrix(&g);
        let du = d.apply(&g.sample(|x| x.powi(5)));
        for (x, v) in g.reference_nodes().iter().zip(du.iter()) {
            assert!((v - 5.0 * x.powi(4)).abs() < 1e-9);
        }
    }

    #[test]
    fn negative_sum_diagonal_matches_closed_form() {
        for n in 1..=64 {
            let d = diff_matrix(&gauss_lobatto_nodes(n).unwrap());
            let cf = closed_form_diagonal(n).unwrap();
            for (i, c) in cf.iter().enumerate() {
                let v = d.matrix()[(i, i)];
                assert!((v - c).abs() <= 1e-8 * c.abs().max(1.0), "N={n} i={i}: {v} vs {c}");
            }
        }
    }

    #[test]
    fn interval_scaling() {
        let d = diff_matrix(&gauss_lobatto_nodes(6).unwrap());
        assert_eq!(scale_to_interval(&d, -1.0, 1.0).unwrap().matrix(), d.matrix());
        let s = scale_to_interval(&d, 0.0, 2.0).unwrap();
        assert_eq!(s.matrix(), d.matrix());
        assert_eq!(s.grid().physical_node(0), 2.0);
        assert_eq!(s.grid().physical_node(6), 0.0);
        let s = scale_to_interval(&d, 0.0, 7.5).unwrap();
        let ones = s.apply(&s.grid().physical_nodes());
        assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-10));
        let nodes = s.grid().physical_nodes();
        assert!(nodes.iter().rev().collect::<Vec<_>>().windows(2).all(|w| w[0] < w[1]));
        assert!(scale_to_interval(&d, 1.0, 1.0).is_err());
    }

    #[test]
    fn barycentric_interpolation() {
        let g = gauss_lobatto_nodes(8).unwrap();
        let vals = g.sample(f64::cos);
        for j in 0..=8 {
            assert_eq!(barycentric_eval(&g, &vals, g.physical_node(j)).unwrap(), vals[j]);
        }
        assert!((barycentric_eval(&g, &vals, 0.3).unwrap() - 0.3f64.cos()).abs() < 1e-8);
        let c = vec![2.5; 9];
        assert!((barycentric_eval(&g, &c, -0.77).unwrap() - 2.5).abs() < 1e-14);
        assert!(matches!(barycentric_eval(&g, &vals, 1.1), Err(ChebyshevError::OutOfDomain { .. })));
        assert!(barycentric_eval(&g, &vals[..3], 0.0).is_err());
        let m = g.mapped(0.0, 7.5).unwrap();
        let vals = m.sample(|x| (0.2 * x).sin());
        assert!((barycentric_eval(&m, &vals, 3.3).unwrap() - 0.66f64.sin()).abs() < 1e-8);
    }

    #[test]
    fn profile_constant_and_cubic() {
        let p = convergence_profile(|_| 4.0, |_| 0.0, &[2, 5, 9]).unwrap();
        assert!(p.iter().all(|(_, e)| *e <= 1e-12));
        let p = convergence_profile(|x| x.powi(3), |x| 3.0 * x * x, &[3, 6, 12]).unwrap();
        assert!(p.iter().all(|(_, e)| *e <= 1e-10));
    }

    #[test]
    fn exp_decays_geometrically() {
        let p = convergence_profile(f64::exp, f64::exp, &[8, 16]).unwrap();
        assert!(p[1].1 * 1e3 <= p[0].1, "{p:?}");
    }
}
