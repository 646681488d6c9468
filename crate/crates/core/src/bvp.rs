//! Spectral discretization of the 1D diffusion family
//!
//! ```text
//! −(K u′)′            = f     diffusion
//! −(K u′)′ + q u      = f     reaction–diffusion
//! −(K u′)′ + (v u)′   = f     advection–diffusion
//! ```
//!
//! on `[0, 7.5]` with homogeneous Dirichlet conditions, random coefficient
//! sampling, labeled dataset generation, and the `lsd-v1` on-disk format.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio;
use crate::chebyshev::{self, ChebyshevError, ChebyshevGrid, DiffMatrix};
use crate::linalg::{self, DenseMatrix, LinalgError, Vector};
use crate::seeding::{self, streams, Rng};

pub const DOMAIN: (f64, f64) = (0.0, 7.5);
pub const K_ALPHA_RANGE: (f64, f64) = (0.25, 0.75);
pub const K_OMEGA_RANGE: (f64, f64) = (0.01, 0.75);
pub const F_ALPHA_RANGE: (f64, f64) = (0.0, 1.0);
pub const VELOCITY_RANGE: (f64, f64) = (-2.0, 2.0);
pub const FOURIER_MODES: usize = 8;
pub const ABSORPTION_INTERVAL: (f64, f64) = (3.0, 4.5);
pub const ABSORPTION_VALUE: f64 = 1.0 / 3.0;
/// Labels larger than this (in max norm) are rejected at generation time.
pub const MAX_LABEL_MAGNITUDE: f64 = 1e6;
/// Relative residual every emitted sample must satisfy.
pub const LABEL_TOLERANCE: f64 = 1e-8;
pub const MAX_REJECTION_RATE: f64 = 0.1;
pub const MAX_ATTEMPTS_PER_SAMPLE: u64 = 32;
pub const FORMAT_TAG: &str = "lsd-v1";
pub const GENERATOR_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum BvpError {
    #[error(transparent)]
    Chebyshev(#[from] ChebyshevError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EquationKind {
    #[serde(rename = "diffusion")]
    Diffusion,
    #[serde(rename = "reaction")]
    ReactionDiffusion,
    #[serde(rename = "advection")]
    AdvectionDiffusion,
}

impl EquationKind {
    pub const ALL: [EquationKind; 3] =
        [EquationKind::Diffusion, EquationKind::ReactionDiffusion, EquationKind::AdvectionDiffusion];

    pub fn as_str(self) -> &'static str {
        match self {
            EquationKind::Diffusion => "diffusion",
            EquationKind::ReactionDiffusion => "reaction",
            EquationKind::AdvectionDiffusion => "advection",
        }
    }
}

impl fmt::Display for EquationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EquationKind {
    type Err = BvpError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "diffusion" => Ok(EquationKind::Diffusion),
            "reaction" | "reaction-diffusion" => Ok(EquationKind::ReactionDiffusion),
            "advection" | "advection-diffusion" => Ok(EquationKind::AdvectionDiffusion),
            other => Err(BvpError::Format(format!("unknown equation kind {other:?}"))),
        }
    }
}

/// `K(x) = 1 + α cos(2πωx)` at the physical nodes.
pub fn k_field(alpha: f64, omega: f64, grid: &ChebyshevGrid) -> Vector {
    grid.sample(|x| 1.0 + alpha * (2.0 * std::f64::consts::PI * omega * x).cos())
}

fn draw_k_params(rng: &mut Rng) -> (f64, f64) {
    let alpha = rng.random_range(K_ALPHA_RANGE.0..K_ALPHA_RANGE.1);
    let omega = rng.random_range(K_OMEGA_RANGE.0..K_OMEGA_RANGE.1);
    (alpha, omega)
}

pub fn sample_k(rng: &mut Rng, grid: &ChebyshevGrid) -> Vector {
    let (alpha, omega) = draw_k_params(rng);
    k_field(alpha, omega, grid)
}

/// Smooth nonnegative field with unit node average: a random trigonometric
/// polynomial with `FOURIER_MODES` harmonics of the domain length and
/// amplitudes `U[-1, 1]/k`, shifted to a zero minimum and rescaled.
pub fn random_field(rng: &mut Rng, grid: &ChebyshevGrid) -> Vector {
    let (a, b) = grid.interval();
    let length = b - a;
    let coeffs: Vec<(f64, f64)> = (1..=FOURIER_MODES)
        .map(|k| {
            let ak = rng.random_range(-1.0..1.0) / k as f64;
            let bk = rng.random_range(-1.0..1.0) / k as f64;
            (ak, bk)
        })
        .collect();
    let raw = grid.sample(|x| {
        coeffs
            .iter()
            .enumerate()
            .map(|(i, (ak, bk))| {
                let phase = 2.0 * std::f64::consts::PI * (i + 1) as f64 * (x - a) / length;
                ak * phase.cos() + bk * phase.sin()
            })
            .sum()
    });
    normalize_unit_mean(raw)
}

fn normalize_unit_mean(raw: Vector) -> Vector {
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = raw.iter().map(|v| v - min).collect();
    let mean = crate::stats::mean(&shifted);
    if !(mean > 0.0) {
        return Vector::new(vec![1.0; shifted.len()]);
    }
    let mut r: Vec<f64> = shifted.iter().map(|v| v / mean).collect();
    // Remove the last rounding residue of the mean.
    let drift = crate::stats::mean(&r) - 1.0;
    r.iter_mut().for_each(|v| *v -= drift);
    Vector::new(r)
}

/// `f = (1 − α) + α r`.
pub fn f_field(alpha: f64, r: &[f64]) -> Vector {
    Vector::new(r.iter().map(|ri| (1.0 - alpha) + alpha * ri).collect())
}

fn draw_f_params(rng: &mut Rng, grid: &ChebyshevGrid) -> (f64, Vector) {
    let alpha = rng.random_range(F_ALPHA_RANGE.0..F_ALPHA_RANGE.1);
    let r = random_field(rng, grid);
    (alpha, r)
}

pub fn sample_f(rng: &mut Rng, grid: &ChebyshevGrid) -> Vector {
    let (alpha, r) = draw_f_params(rng, grid);
    f_field(alpha, &r)
}

/// `q = 1/3` on nodes inside the absorption interval, zero elsewhere.
pub fn absorption_field(grid: &ChebyshevGrid) -> Vector {
    grid.sample(|x| {
        if (ABSORPTION_INTERVAL.0..=ABSORPTION_INTERVAL.1).contains(&x) {
            ABSORPTION_VALUE
        } else {
            0.0
        }
    })
}

/// All random coefficients of one boundary value problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSample {
    pub alpha_k: f64,
    pub omega: f64,
    pub alpha_f: f64,
    pub r_field: Vector,
    pub q_values: Vector,
    pub v_alpha: f64,
}

impl CoefficientSample {
    /// Draws every coefficient regardless of the equation kind, so the three
    /// kinds built from one seed share `K` and `f`.
    pub fn draw(rng: &mut Rng, grid: &ChebyshevGrid) -> Self {
        let (alpha_k, omega) = draw_k_params(rng);
        let (alpha_f, r_field) = draw_f_params(rng, grid);
        let v_alpha = rng.random_range(VELOCITY_RANGE.0..VELOCITY_RANGE.1);
        CoefficientSample { alpha_k, omega, alpha_f, r_field, q_values: absorption_field(grid), v_alpha }
    }

    /// `K ≡ 1`, `f ≡ 1`, no advection.
    pub fn homogeneous(grid: &ChebyshevGrid) -> Self {
        CoefficientSample {
            alpha_k: 0.0,
            omega: 0.0,
            alpha_f: 0.0,
            r_field: Vector::new(vec![1.0; grid.len()]),
            q_values: absorption_field(grid),
            v_alpha: 0.0,
        }
    }

    pub fn k_values(&self, grid: &ChebyshevGrid) -> Vector {
        k_field(self.alpha_k, self.omega, grid)
    }

    pub fn f_values(&self) -> Vector {
        f_field(self.alpha_f, &self.r_field)
    }
}

/// Interior node indices ordered by ascending physical coordinate.
pub fn interior_indices(grid: &ChebyshevGrid) -> Vec<usize> {
    (1..grid.degree()).rev().collect()
}

pub fn interior_nodes(grid: &ChebyshevGrid) -> Vec<f64> {
    interior_indices(grid).into_iter().map(|j| grid.physical_node(j)).collect()
}

/// Full-grid operator before boundary restriction.
pub fn full_operator(kind: EquationKind, coeffs: &CoefficientSample, d: &DiffMatrix) -> DenseMatrix {
    let grid = d.grid();
    let dm = d.matrix();
    let size = grid.len();
    let k = coeffs.k_values(grid);
    let mut dk = dm.clone();
    for i in 0..size {
        for j in 0..size {
            dk[(i, j)] *= k[j];
        }
    }
    let mut op = dk.matmul(dm).expect("square differentiation matrices").scale(-1.0);
    match kind {
        EquationKind::Diffusion => {}
        EquationKind::ReactionDiffusion => {
            for i in 0..size {
                op[(i, i)] += coeffs.q_values[i];
            }
        }
        EquationKind::AdvectionDiffusion => {
            // D·diag(v) with constant v
            for i in 0..size {
                for j in 0..size {
                    op[(i, j)] += dm[(i, j)] * coeffs.v_alpha;
                }
            }
        }
    }
    op
}

/// Interior (Dirichlet-restricted) operator in ascending node order. `d`
/// must already be scaled to the physical interval.
pub fn assemble_operator(kind: EquationKind, coeffs: &CoefficientSample, d: &DiffMatrix) -> DenseMatrix {
    let idx = interior_indices(d.grid());
    full_operator(kind, coeffs, d).select(&idx, &idx)
}

pub fn interior_rhs(coeffs: &CoefficientSample, grid: &ChebyshevGrid) -> Vector {
    let f = coeffs.f_values();
    Vector::new(interior_indices(grid).into_iter().map(|j| f[j]).collect())
}

/// Scaled differentiation matrix for an `dim`-dimensional interior system
/// (polynomial degree `dim + 1`) on the physical domain.
pub fn domain_diff_matrix(dim: usize) -> Result<DiffMatrix, BvpError> {
    let grid = chebyshev::gauss_lobatto_nodes(dim + 1)?;
    let d = chebyshev::diff_matrix(&grid);
    Ok(chebyshev::scale_to_interval(&d, DOMAIN.0, DOMAIN.1)?)
}

/// One labeled linear system.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystemSample {
    pub a: DenseMatrix,
    pub b: Vector,
    pub x: Vector,
    pub cond: f64,
    pub kind: EquationKind,
    pub seed: u64,
}

impl LinearSystemSample {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn relative_residual(&self) -> f64 {
        let r = self.a.matvec(&self.x).expect("square sample").sub(&self.b);
        r.norm2() / self.b.norm2()
    }
}

/// Why a candidate sample was discarded.
#[derive(Debug, Clone, PartialEq)]
pub enum Rejection {
    Singular,
    LabelTooLarge(f64),
    Inconsistent(f64),
    BadConditioning(f64),
}

/// Builds and labels one system from its own seed.
pub fn generate_sample(kind: EquationKind, d: &DiffMatrix, seed: u64) -> Result<LinearSystemSample, Rejection> {
    let mut rng = seeding::rng(seed);
    let coeffs = CoefficientSample::draw(&mut rng, d.grid());
    let a = assemble_operator(kind, &coeffs, d);
    let b = interior_rhs(&coeffs, d.grid());
    let x = linalg::lu_solve(&a, &b).map_err(|_| Rejection::Singular)?;
    let mag = x.norm_inf();
    if !(mag <= MAX_LABEL_MAGNITUDE) {
        return Err(Rejection::LabelTooLarge(mag));
    }
    let cond = linalg::condition_number(&a).map_err(|_| Rejection::BadConditioning(f64::NAN))?;
    if !(cond.is_finite() && cond > 1.0) {
        return Err(Rejection::BadConditioning(cond));
    }
    let sample = LinearSystemSample { a, b, x, cond, kind, seed };
    let res = sample.relative_residual();
    if !(res <= LABEL_TOLERANCE) {
        return Err(Rejection::Inconsistent(res));
    }
    Ok(sample)
}

/// A generated dataset plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: EquationKind,
    pub dim: usize,
    pub seed: u64,
    pub rejected: usize,
    pub samples: Vec<LinearSystemSample>,
}

impl Dataset {
    pub fn conditions(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.cond).collect()
    }
}

/// Generates `count` labeled systems of interior dimension `dim`.
///
/// Sample `i` tries seeds derived from `(seed, i, attempt)` until one passes
/// the labeling checks, so the output is independent of thread scheduling.
pub fn generate_dataset(kind: EquationKind, count: usize, dim: usize, seed: u64) -> Result<Dataset, BvpError> {
    if dim < 4 {
        return Err(BvpError::Dataset(format!("dimension must be at least 4, got {dim}")));
    }
    let d = domain_diff_matrix(dim)?;
    let results: Vec<Result<(LinearSystemSample, usize), BvpError>> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            for attempt in 0..MAX_ATTEMPTS_PER_SAMPLE {
                let s = seeding::derive(seed, streams::BVP_SAMPLE, i * MAX_ATTEMPTS_PER_SAMPLE + attempt);
                if let Ok(sample) = generate_sample(kind, &d, s) {
                    return Ok((sample, attempt as usize));
                }
            }
            Err(BvpError::Dataset(format!("sample {i} rejected {MAX_ATTEMPTS_PER_SAMPLE} times")))
        })
        .collect();
    let mut samples = Vec::with_capacity(count);
    let mut rejected = 0;
    for r in results {
        let (s, rej) = r?;
        rejected += rej;
        samples.push(s);
    }
    if count > 0 && rejected as f64 > MAX_REJECTION_RATE * count as f64 {
        return Err(BvpError::Dataset(format!("rejection rate {rejected}/{count} exceeds 10%")));
    }
    Ok(Dataset { kind, dim, seed, rejected, samples })
}

/// `b + level·‖b‖·g/‖g‖` with `g` standard Gaussian.
pub fn add_noise(b: &[f64], level: f64, rng: &mut Rng) -> Vector {
    if level == 0.0 || b.is_empty() {
        return Vector::from_slice(b);
    }
    let g: Vec<f64> = (0..b.len()).map(|_| rng.sample(StandardNormal)).collect();
    let scale = level * linalg::norm2(b) / linalg::norm2(&g);
    Vector::new(b.iter().zip(&g).map(|(bi, gi)| bi + scale * gi).collect())
}

/// `manifest.json` of an `lsd-v1` dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub kind: EquationKind,
    pub count: usize,
    pub n: usize,
    pub seed: u64,
    pub generator_version: String,
    pub rejected: usize,
    pub domain: (f64, f64),
    pub f_alpha_range: (f64, f64),
    pub random_field: String,
    pub sample_seeds: Vec<u64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";

impl DatasetManifest {
    pub fn for_dataset(ds: &Dataset) -> Self {
        DatasetManifest {
            format: FORMAT_TAG.to_string(),
            kind: ds.kind,
            count: ds.samples.len(),
            n: ds.dim,
            seed: ds.seed,
            generator_version: GENERATOR_VERSION.to_string(),
            rejected: ds.rejected,
            domain: DOMAIN,
            f_alpha_range: F_ALPHA_RANGE,
            random_field: format!("fourier-{FOURIER_MODES}"),
            sample_seeds: ds.samples.iter().map(|s| s.seed).collect(),
        }
    }
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), BvpError> {
    std::fs::create_dir_all(dir)?;
    let manifest = DatasetManifest::for_dataset(ds);
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    let mut w = BufWriter::new(File::create(dir.join(SAMPLES_FILE))?);
    for s in &ds.samples {
        binio::write_u32(&mut w, s.dim() as u32)?;
        binio::write_f64s(&mut w, s.a.data())?;
        binio::write_f64s(&mut w, &s.b)?;
        binio::write_f64s(&mut w, &s.x)?;
        binio::write_f64s(&mut w, &[s.cond])?;
    }
    use std::io::Write as _;
    w.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, BvpError> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_TAG {
        return Err(BvpError::Format(format!("expected format {FORMAT_TAG}, found {}", manifest.format)));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, BvpError> {
    let manifest = read_manifest(dir)?;
    let mut r = BufReader::new(File::open(dir.join(SAMPLES_FILE))?);
    let mut samples = Vec::with_capacity(manifest.count);
    while let Some(n) = binio::read_u32_opt(&mut r)? {
        let n = n as usize;
        if n != manifest.n {
            return Err(BvpError::Format(format!("record of dimension {n} in a dimension-{} dataset", manifest.n)));
        }
        let a = DenseMatrix::new(n, n, binio::read_f64s(&mut r, n * n)?)?;
        let b = Vector::new(binio::read_f64s(&mut r, n)?);
        let x = Vector::new(binio::read_f64s(&mut r, n)?);
        let cond = binio::read_f64s(&mut r, 1)?[0];
        let seed = manifest.sample_seeds.get(samples.len()).copied().unwrap_or(0);
        samples.push(LinearSystemSample { a, b, x, cond, kind: manifest.kind, seed });
    }
    if samples.len() != manifest.count {
        return Err(BvpError::Format(format!(
            "manifest announces {} samples, file holds {}",
            manifest.count,
            samples.len()
        )));
    }
    Ok(Dataset { kind: manifest.kind, dim: manifest.n, seed: manifest.seed, rejected: manifest.rejected, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mapped_grid(degree: usize) -> ChebyshevGrid {
        chebyshev::gauss_lobatto_nodes(degree).unwrap().mapped(DOMAIN.0, DOMAIN.1).unwrap()
    }

    #[test]
    fn k_bounds_and_slow_limit() {
        let g = mapped_grid(32);
        let k = k_field(0.25, 0.01, &g);
        assert_eq!(k[g.degree()], 1.25);
        assert!(k.iter().all(|v| *v <= 1.25 && *v > 1.2));
        let mut rng = seeding::rng(3);
        for _ in 0..50 {
            let k = sample_k(&mut rng, &g);
            assert!(k.iter().all(|v| (0.25..=1.75).contains(v)));
        }
    }

    #[test]
    fn samplers_are_deterministic() {
        let g = mapped_grid(20);
        let k1 = sample_k(&mut seeding::rng(42), &g);
        let k2 = sample_k(&mut seeding::rng(42), &g);
        assert_eq!(k1, k2);
        let f1 = sample_f(&mut seeding::rng(42), &g);
        let f2 = sample_f(&mut seeding::rng(42), &g);
        assert_eq!(f1, f2);
    }

    #[test]
    fn f_has_unit_mean() {
        let g = mapped_grid(40);
        assert!(f_field(0.0, &[3.0, 0.1, 7.0]).iter().all(|v| *v == 1.0));
        let mut rng = seeding::rng(8);
        for _ in 0..50 {
            let f = sample_f(&mut rng, &g);
            assert!((crate::stats::mean(&f) - 1.0).abs() < 1e-12);
            let r = random_field(&mut rng, &g);
            assert!(r.iter().all(|v| *v >= -1e-15));
            assert!((crate::stats::mean(&r) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn absorption_support() {
        let g = mapped_grid(64);
        let q = absorption_field(&g);
        for (j, x) in g.physical_nodes().iter().enumerate() {
            let inside = (3.0..=4.5).contains(x);
            assert_eq!(q[j], if inside { 1.0 / 3.0 } else { 0.0 });
        }
    }

    #[test]
    fn one_interior_node_reference_operator() {
        let g = chebyshev::gauss_lobatto_nodes(2).unwrap();
        let d = chebyshev::diff_matrix(&g);
        let a = assemble_operator(EquationKind::Diffusion, &CoefficientSample::homogeneous(&g), &d);
        assert_eq!(a.shape(), (1, 1));
        assert!((a[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn parabola_solution() {
        let d = chebyshev::scale_to_interval(
            &chebyshev::diff_matrix(&chebyshev::gauss_lobatto_nodes(64).unwrap()),
            DOMAIN.0,
            DOMAIN.1,
        )
        .unwrap();
        let c = CoefficientSample::homogeneous(d.grid());
        let a = assemble_operator(EquationKind::Diffusion, &c, &d);
        let u = linalg::lu_solve(&a, &interior_rhs(&c, d.grid())).unwrap();
        let l = DOMAIN.1;
        for (ui, x) in u.iter().zip(interior_nodes(d.grid())) {
            assert!((ui - x * (l - x) / 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn reaction_differs_only_on_absorbing_diagonal() {
        let d = domain_diff_matrix(40).unwrap();
        let c = CoefficientSample::draw(&mut seeding::rng(5), d.grid());
        let a0 = assemble_operator(EquationKind::Diffusion, &c, &d);
        let a1 = assemble_operator(EquationKind::ReactionDiffusion, &c, &d);
        let nodes = interior_nodes(d.grid());
        for i in 0..a0.rows() {
            for j in 0..a0.cols() {
                let diff = a1[(i, j)] - a0[(i, j)];
                if i == j && (3.0..=4.5).contains(&nodes[i]) {
                    assert!((diff - 1.0 / 3.0).abs() < 1e-12);
                } else {
                    assert_eq!(diff, 0.0);
                }
            }
        }
    }

    #[test]
    fn dataset_rejects_small_dimension() {
        assert!(matches!(generate_dataset(EquationKind::Diffusion, 1, 3, 0), Err(BvpError::Dataset(_))));
    }

    #[test]
    fn single_sample_is_consistent() {
        for kind in EquationKind::ALL {
            let ds = generate_dataset(kind, 1, 12, 9).unwrap();
            assert_eq!(ds.samples.len(), 1);
            assert!(ds.samples[0].relative_residual() <= LABEL_TOLERANCE);
            assert!(ds.samples[0].cond > 1.0);
        }
    }

    #[test]
    fn noise_has_exact_relative_magnitude() {
        let b = vec![1.0, -2.0, 0.5, 4.0];
        let mut rng = seeding::rng(1);
        assert_eq!(add_noise(&b, 0.0, &mut rng).as_slice(), b.as_slice());
        let noisy = add_noise(&b, 1e-3, &mut rng);
        let got = noisy.sub(&b).norm2();
        assert!((got - 1e-3 * linalg::norm2(&b)).abs() < 1e-15);
    }

    #[test]
    fn kind_parsing() {
        for k in EquationKind::ALL {
            assert_eq!(k.as_str().parse::<EquationKind>().unwrap(), k);
        }
        assert!("heat".parse::<EquationKind>().is_err());
    }
}
