//! Newton's method for `min Σ |(Ax − b)_i|^p`, trajectory datasets of
//! (state, direction) pairs, and a solver loop with a pluggable direction
//! provider.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio;
use crate::linalg::{self, DenseMatrix, LinalgError, LuFactorization, Vector};
use crate::model::{self, ModelError, ModelWeights};
use crate::seeding::{self, streams};
use crate::training::{Example, SupervisedSet, TrainError};

/// Floor on |r_i| inside the Hessian weights.
pub const RESIDUAL_FLOOR: f64 = 1e-8;
pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const LEVENBERG_START: f64 = 1e-10;
pub const LEVENBERG_FACTOR: f64 = 10.0;
const LEVENBERG_MAX: f64 = 1e10;
const ARMIJO_C: f64 = 1e-4;
const ARMIJO_MAX_HALVINGS: usize = 50;
pub const TRAJECTORY_FORMAT: &str = "ntd-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAIRS_FILE: &str = "pairs.bin";

#[derive(Debug, Error)]
pub enum NewtonError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("direction provider returned {got} entries, expected {expected}")]
    ProviderDimension { expected: usize, got: usize },
    #[error("direction provider failed: {0}")]
    Provider(String),
    #[error("trajectory format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `min_x ‖Ax − b‖_p^p` with `m ≥ n` and `p > 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub a: DenseMatrix,
    pub b: Vector,
    pub p: f64,
}

impl LpProblem {
    pub fn new(a: DenseMatrix, b: Vector, p: f64) -> Result<Self, NewtonError> {
        if a.rows() != b.len() {
            return Err(NewtonError::InvalidArgument(format!("A has {} rows but b has {}", a.rows(), b.len())));
        }
        if a.rows() < a.cols() {
            return Err(NewtonError::InvalidArgument(format!("need m >= n, got {}x{}", a.rows(), a.cols())));
        }
        if !(p > 1.0 && p.is_finite()) {
            return Err(NewtonError::InvalidArgument(format!("p must exceed 1, got {p}")));
        }
        Ok(LpProblem { a, b, p })
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn n(&self) -> usize {
        self.a.cols()
    }

    pub fn residual(&self, x: &[f64]) -> Vector {
        let ax = self.a.matvec(x).expect("x has n entries");
        ax.sub(&self.b)
    }

    pub fn atb(&self) -> Vector {
        self.a.tr_matvec(&self.b).expect("b has m entries")
    }
}

/// `Σ |r_i|^p`.
pub fn objective(prob: &LpProblem, x: &[f64]) -> f64 {
    prob.residual(x).iter().map(|r| r.abs().powf(prob.p)).sum()
}

/// `p·Aᵀ(|r|^{p−1} ⊙ sign(r))`.
pub fn gradient(prob: &LpProblem, x: &[f64]) -> Vector {
    let p = prob.p;
    let w: Vec<f64> = prob.residual(x).iter().map(|&r| p * r.abs().powf(p - 1.0) * r.signum_or_zero()).collect();
    prob.a.tr_matvec(&w).expect("residual has m entries")
}

/// `p(p−1)·Aᵀ diag(max(|r|, RESIDUAL_FLOOR)^{p−2}) A`.
pub fn hessian(prob: &LpProblem, x: &[f64]) -> DenseMatrix {
    let p = prob.p;
    let (m, n) = (prob.m(), prob.n());
    let w: Vec<f64> =
        prob.residual(x).iter().map(|r| p * (p - 1.0) * r.abs().max(RESIDUAL_FLOOR).powf(p - 2.0)).collect();
    let a = prob.a.data();
    let mut h = vec![0.0; n * n];
    for k in 0..m {
        let row = &a[k * n..(k + 1) * n];
        let wk = w[k];
        for i in 0..n {
            let s = wk * row[i];
            if s == 0.0 {
                continue;
            }
            for j in i..n {
                h[i * n + j] += s * row[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            h[i * n + j] = h[j * n + i];
        }
    }
    DenseMatrix::new(n, n, h).expect("n×n")
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

/// Solves `H p = g`, adding `λI` with a growing `λ` while `H` is singular.
pub fn damped_solve(h: &DenseMatrix, g: &[f64]) -> Result<Vector, NewtonError> {
    match LuFactorization::factor(h) {
        Ok(lu) => return Ok(lu.solve(g)?),
        Err(LinalgError::SingularMatrix { .. }) => {}
        Err(e) => return Err(e.into()),
    }
    let mut lambda = LEVENBERG_START;
    while lambda <= LEVENBERG_MAX {
        let mut damped = h.clone();
        for i in 0..h.rows() {
            damped[(i, i)] += lambda;
        }
        match LuFactorization::factor(&damped) {
            Ok(lu) => return Ok(lu.solve(g)?),
            Err(LinalgError::SingularMatrix { .. }) => lambda *= LEVENBERG_FACTOR,
            Err(e) => return Err(e.into()),
        }
    }
    Err(LinalgError::SingularMatrix { step: 0, pivot: 0.0, threshold: 0.0 }.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    GradientNorm,
    ObjectiveDecrement,
}

impl std::str::FromStr for StopRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gradient_norm" | "gradient" => Ok(StopRule::GradientNorm),
            "objective_decrement" | "objective" => Ok(StopRule::ObjectiveDecrement),
            _ => Err(format!("unknown stop rule {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientNorm,
    ObjectiveDecrement,
    MaxIterExceeded,
    SingularHessian,
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub stop: StopRule,
    /// Measure the objective decrement against `f(x_{k−1})` and the gradient
    /// norm against `‖g(x_0)‖` instead of in absolute terms.
    pub relative: bool,
    /// Armijo backtracking (halving, c = 1e−4).
    pub line_search: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            stop: StopRule::ObjectiveDecrement,
            relative: true,
            line_search: false,
        }
    }
}

impl NewtonOptions {
    pub fn validate(&self) -> Result<(), NewtonError> {
        if !(self.tol > 0.0) {
            return Err(NewtonError::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonTrajectory {
    /// `x_0 … x_K`.
    pub iterates: Vec<Vector>,
    /// `p_0 … p_{K−1}` with `x_{k+1} = x_k − t_k p_k`.
    pub directions: Vec<Vector>,
    pub step_sizes: Vec<f64>,
    pub objectives: Vec<f64>,
    pub gradient_norms: Vec<f64>,
    pub converged: bool,
    pub stop_reason: StopReason,
}

impl NewtonTrajectory {
    pub fn iterations(&self) -> usize {
        self.directions.len()
    }

    pub fn final_iterate(&self) -> &Vector {
        self.iterates.last().expect("trajectory holds x_0")
    }

    pub fn final_objective(&self) -> f64 {
        *self.objectives.last().expect("trajectory holds f(x_0)")
    }

    /// `‖g_{k+1}‖ / ‖g_k‖` for consecutive iterates.
    pub fn gradient_ratios(&self) -> Vec<f64> {
        self.gradient_norms.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

/// What a provider sees at iterate `x_k`.
pub struct NewtonState<'a> {
    pub problem: &'a LpProblem,
    pub x: &'a Vector,
    pub gradient: &'a Vector,
    pub atb: &'a Vector,
    pub iteration: usize,
}

pub type CustomDirection<'a> = Box<dyn FnMut(&NewtonState<'_>) -> Result<Vector, NewtonError> + 'a>;

/// Source of the Newton direction `p_k`.
pub enum DirectionProvider<'a> {
    /// Solve `H(x_k) p = g(x_k)` exactly (with Levenberg fallback).
    ExactSolve,
    /// Predict `p_k` from `(Aᵀb, x_k)` tokens.
    LearnedModel(&'a ModelWeights),
    Custom(CustomDirection<'a>),
}

impl DirectionProvider<'_> {
    pub fn direction(&mut self, state: &NewtonState<'_>) -> Result<Vector, NewtonError> {
        let n = state.problem.n();
        let p = match self {
            DirectionProvider::ExactSolve => damped_solve(&hessian(state.problem, state.x), state.gradient)?,
            DirectionProvider::LearnedModel(w) => {
                let tokens = model::encode_newton_state(state.atb, state.x)?;
                model::forward(w, &tokens)?
            }
            DirectionProvider::Custom(f) => f(state)?,
        };
        if p.len() != n {
            return Err(NewtonError::ProviderDimension { expected: n, got: p.len() });
        }
        Ok(p)
    }
}

/// Wall-clock seconds spent in each part of an accelerated run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingReport {
    /// Direction computation time per iteration.
    pub per_iteration: Vec<f64>,
    pub first_direction: f64,
    pub total: f64,
}

/// Newton's method with exact directions.
pub fn newton_solve(prob: &LpProblem, x0: &[f64], opts: &NewtonOptions) -> Result<NewtonTrajectory, NewtonError> {
    Ok(accelerated_newton(prob, x0, &mut DirectionProvider::ExactSolve, opts)?.0)
}

/// The Newton loop with directions from `provider`.
pub fn accelerated_newton(
    prob: &LpProblem,
    x0: &[f64],
    provider: &mut DirectionProvider<'_>,
    opts: &NewtonOptions,
) -> Result<(NewtonTrajectory, TimingReport), NewtonError> {
    opts.validate()?;
    if x0.len() != prob.n() {
        return Err(NewtonError::InvalidArgument(format!("x0 has {} entries, expected {}", x0.len(), prob.n())));
    }
    let started = Instant::now();
    let atb = prob.atb();
    let mut x = Vector::from_slice(x0);
    let mut f = objective(prob, &x);
    let mut g = gradient(prob, &x);
    let g0 = g.norm2();
    let mut traj = NewtonTrajectory {
        iterates: vec![x.clone()],
        directions: Vec::new(),
        step_sizes: Vec::new(),
        objectives: vec![f],
        gradient_norms: vec![g0],
        converged: false,
        stop_reason: StopReason::MaxIterExceeded,
    };
    let mut timing = TimingReport::default();
    let grad_threshold = if opts.relative { opts.tol * g0 } else { opts.tol };
    let grad_done = |norm: f64| norm == 0.0 || norm < grad_threshold;

    let mut k = 0;
    loop {
        if opts.stop == StopRule::GradientNorm && grad_done(*traj.gradient_norms.last().unwrap()) {
            traj.converged = true;
            traj.stop_reason = StopReason::GradientNorm;
            break;
        }
        if k == opts.max_iter {
            break;
        }
        let t0 = Instant::now();
        let state = NewtonState { problem: prob, x: &x, gradient: &g, atb: &atb, iteration: k };
        let p = match provider.direction(&state) {
            Ok(p) => p,
            Err(NewtonError::Linalg(LinalgError::SingularMatrix { .. })) => {
                traj.stop_reason = StopReason::SingularHessian;
                break;
            }
            Err(e) => return Err(e),
        };
        let dt = t0.elapsed().as_secs_f64();
        if k == 0 {
            timing.first_direction = dt;
        }
        timing.per_iteration.push(dt);
        if !p.is_finite() {
            traj.stop_reason = StopReason::NonFinite;
            break;
        }

        let mut t = 1.0;
        let mut x_new = x.sub(&p.scale(t));
        let mut f_new = objective(prob, &x_new);
        if opts.line_search {
            let slope = linalg::dot(&g, &p);
            let mut halvings = 0;
            while !(f_new <= f - ARMIJO_C * t * slope) && halvings < ARMIJO_MAX_HALVINGS {
                t *= 0.5;
                x_new = x.sub(&p.scale(t));
                f_new = objective(prob, &x_new);
                halvings += 1;
            }
        }
        if !f_new.is_finite() || !x_new.is_finite() {
            traj.stop_reason = StopReason::NonFinite;
            break;
        }
        let moved = p.norm_inf() > 0.0 && t > 0.0;
        let decrement = (f - f_new).abs();
        let f_prev = f;
        x = x_new;
        f = f_new;
        g = gradient(prob, &x);
        traj.iterates.push(x.clone());
        traj.directions.push(p);
        traj.step_sizes.push(t);
        traj.objectives.push(f);
        traj.gradient_norms.push(g.norm2());
        k += 1;

        if opts.stop == StopRule::ObjectiveDecrement {
            let threshold = if opts.relative { opts.tol * f_prev } else { opts.tol };
            if moved && decrement < threshold {
                traj.converged = true;
                traj.stop_reason = StopReason::ObjectiveDecrement;
                break;
            }
        }
    }
    timing.total = started.elapsed().as_secs_f64();
    Ok((traj, timing))
}

/// Entries of `A`, `b` drawn from U[0, 1); `A` scaled to unit Frobenius norm
/// and `b` to unit Euclidean norm.
pub fn sample_problem(m: usize, n: usize, p: f64, seed: u64) -> Result<LpProblem, NewtonError> {
    if n == 0 || m < n {
        return Err(NewtonError::InvalidArgument(format!("need m >= n >= 1, got m = {m}, n = {n}")));
    }
    let mut rng = seeding::rng(seed);
    let a: Vec<f64> = (0..m * n).map(|_| rng.random::<f64>()).collect();
    let b: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
    let a = DenseMatrix::new(m, n, a)?;
    let fro = a.norm_fro();
    let b = Vector::new(b);
    let bn = b.norm2();
    LpProblem::new(a.scale(1.0 / fro), b.scale(1.0 / bn), p)
}

/// Every (state, direction) pair of one converged trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub problem_seed: u64,
    pub atb: Vector,
    pub states: Vec<Vector>,
    pub directions: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub format: String,
    pub m: usize,
    pub n: usize,
    pub p: f64,
    pub tol: f64,
    pub stop: StopRule,
    pub count: usize,
    pub converged: usize,
    pub seed: u64,
    pub problem_seeds: Vec<u64>,
    pub trajectory_lengths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub manifest: TrajectoryManifest,
    pub trajectories: Vec<TrajectoryRecord>,
}

impl TrajectoryDataset {
    pub fn pair_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.directions.len()).sum()
    }

    /// Splits by whole trajectory: the first `n_train` go to the first half.
    pub fn split(&self, n_train: usize) -> (Vec<TrajectoryRecord>, Vec<TrajectoryRecord>) {
        let k = n_train.min(self.trajectories.len());
        (self.trajectories[..k].to_vec(), self.trajectories[k..].to_vec())
    }

    pub fn problem(&self, index: usize) -> Result<LpProblem, NewtonError> {
        let m = &self.manifest;
        sample_problem(m.m, m.n, m.p, self.trajectories[index].problem_seed)
    }
}

/// Tokens `(Aᵀb, x_k)` with target `p_k`.
pub fn supervised_pairs(trajectories: &[TrajectoryRecord]) -> Result<SupervisedSet, NewtonError> {
    let mut examples = Vec::new();
    for t in trajectories {
        for (x, p) in t.states.iter().zip(&t.directions) {
            examples.push(Example { tokens: model::encode_newton_state(&t.atb, x)?, target: p.clone() });
        }
    }
    Ok(SupervisedSet::new(examples, None)?)
}

/// Runs Newton from `x_0 = 0` on `count` sampled problems and keeps the
/// converged trajectories.
pub fn generate_trajectories(
    count: usize,
    m: usize,
    n: usize,
    p: f64,
    opts: &NewtonOptions,
    seed: u64,
) -> Result<TrajectoryDataset, NewtonError> {
    let seeds: Vec<u64> = (0..count as u64).map(|i| seeding::derive(seed, streams::NEWTON_PROBLEM, i)).collect();
    let runs = seeds
        .par_iter()
        .map(|&s| {
            let prob = sample_problem(m, n, p, s)?;
            let traj = newton_solve(&prob, &vec![0.0; n], opts)?;
            Ok(traj.converged.then(|| {
                let k = traj.directions.len();
                TrajectoryRecord {
                    problem_seed: s,
                    atb: prob.atb(),
                    states: traj.iterates[..k].to_vec(),
                    directions: traj.directions,
                }
            }))
        })
        .collect::<Result<Vec<_>, NewtonError>>()?;
    let trajectories: Vec<TrajectoryRecord> = runs.into_iter().flatten().collect();
    let manifest = TrajectoryManifest {
        format: TRAJECTORY_FORMAT.to_string(),
        m,
        n,
        p,
        tol: opts.tol,
        stop: opts.stop,
        count,
        converged: trajectories.len(),
        seed,
        problem_seeds: trajectories.iter().map(|t| t.problem_seed).collect(),
        trajectory_lengths: trajectories.iter().map(|t| t.directions.len()).collect(),
    };
    Ok(TrajectoryDataset { manifest, trajectories })
}

pub fn write_trajectories(dir: &Path, ds: &TrajectoryDataset) -> Result<(), NewtonError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&ds.manifest)?)?;
    let mut w = BufWriter::new(File::create(dir.join(PAIRS_FILE))?);
    for t in &ds.trajectories {
        for (x, p) in t.states.iter().zip(&t.directions) {
            binio::write_u32(&mut w, t.atb.len() as u32)?;
            binio::write_f64s(&mut w, &t.atb)?;
            binio::write_f64s(&mut w, x)?;
            binio::write_f64s(&mut w, p)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories(dir: &Path) -> Result<TrajectoryDataset, NewtonError> {
    let manifest: TrajectoryManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != TRAJECTORY_FORMAT {
        return Err(NewtonError::Format(format!("expected format {TRAJECTORY_FORMAT}, found {}", manifest.format)));
    }
    if manifest.problem_seeds.len() != manifest.trajectory_lengths.len() {
        return Err(NewtonError::Format("problem_seeds and trajectory_lengths differ in length".into()));
    }
    let mut r = BufReader::new(File::open(dir.join(PAIRS_FILE))?);
    let mut trajectories = Vec::with_capacity(manifest.trajectory_lengths.len());
    for (&seed, &len) in manifest.problem_seeds.iter().zip(&manifest.trajectory_lengths) {
        let mut rec = TrajectoryRecord { problem_seed: seed, atb: Vector::zeros(0), states: Vec::new(), directions: Vec::new() };
        for _ in 0..len {
            let n = binio::read_u32_opt(&mut r)?
                .ok_or_else(|| NewtonError::Format("pairs file ends early".into()))? as usize;
            if n != manifest.n {
                return Err(NewtonError::Format(format!("record dimension {n}, manifest says {}", manifest.n)));
            }
            rec.atb = Vector::new(binio::read_f64s(&mut r, n)?);
            rec.states.push(Vector::new(binio::read_f64s(&mut r, n)?));
            rec.directions.push(Vector::new(binio::read_f64s(&mut r, n)?));
        }
        trajectories.push(rec);
    }
    if binio::read_u32_opt(&mut r)?.is_some() {
        return Err(NewtonError::Format("trailing records after the last trajectory".into()));
    }
    Ok(TrajectoryDataset { manifest, trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> LpProblem {
        sample_problem(500, 20, 6.0, 42).unwrap()
    }

    #[test]
    fn objective_examples() {
        let prob = LpProblem::new(DenseMatrix::identity(2), Vector::zeros(2), 2.0).unwrap();
        assert_eq!(objective(&prob, &[3.0, 4.0]), 25.0);
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let x = [1.0, -1.0];
        let b = a.matvec(&x).unwrap();
        let prob = LpProblem::new(a, b, 3.0).unwrap();
        assert_eq!(objective(&prob, &x), 0.0);
        assert!(gradient(&prob, &x).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn objective_matches_elementwise_oracle() {
        let prob = desk();
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut direct = 0.0;
        for i in 0..prob.m() {
            let mut r = -prob.b[i];
            for j in 0..prob.n() {
                r += prob.a[(i, j)] * x[j];
            }
            direct += r.powi(6);
        }
        assert!((objective(&prob, &x) - direct).abs() <= 1e-12 * direct.abs().max(1e-300));
    }

    #[test]
    fn quadratic_case_closed_forms() {
        let prob = sample_problem(30, 5, 2.0, 1).unwrap();
        let x: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let r = prob.residual(&x);
        let expected = prob.a.tr_matvec(&r).unwrap().scale(2.0);
        assert!(gradient(&prob, &x).sub(&expected).norm_inf() <= 1e-12 * expected.norm_inf());
        let h = hessian(&prob, &x);
        let ata = prob.a.transpose().matmul(&prob.a).unwrap().scale(2.0);
        assert!(h.sub(&ata).unwrap().norm_inf() <= 1e-14 * ata.norm_inf());
    }

    #[test]
    fn hessian_symmetric() {
        let prob = desk();
        let h = hessian(&prob, &[0.3; 20]);
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn sampler_normalizes_and_is_deterministic() {
        let prob = desk();
        assert!((prob.a.norm_fro() - 1.0).abs() < 1e-12);
        assert!((prob.b.norm2() - 1.0).abs() < 1e-12);
        assert_eq!(prob, desk());
        assert_ne!(prob, sample_problem(500, 20, 6.0, 43).unwrap());
        assert!(sample_problem(3, 4, 6.0, 0).is_err());
    }

    #[test]
    fn p2_converges_in_one_iteration() {
        let prob = sample_problem(50, 6, 2.0, 3).unwrap();
        let opts = NewtonOptions { stop: StopRule::GradientNorm, ..Default::default() };
        let traj = newton_solve(&prob, &[0.0; 6], &opts).unwrap();
        assert!(traj.converged);
        assert_eq!(traj.iterations(), 1);
        let ls = linalg::qr_least_squares(&prob.a, &prob.b).unwrap();
        assert!(traj.final_iterate().sub(&ls).norm_inf() < 1e-9 * ls.norm_inf());
    }

    #[test]
    fn desk_instance_superlinear_tail() {
        let prob = desk();
        let traj = newton_solve(&prob, &[0.0; 20], &NewtonOptions::default()).unwrap();
        assert!(traj.converged, "{:?}", traj.stop_reason);
        assert!(traj.iterations() <= 100);
        let ratios = traj.gradient_ratios();
        assert!(ratios.len() >= 3);
        assert!(ratios[ratios.len() - 3..].iter().all(|r| *r < 0.5), "{ratios:?}");
        assert!(traj.objectives.windows(2).all(|w| w[1] < w[0]), "{:?}", traj.objectives);
        assert!(traj.final_objective() > 0.0);
    }

    #[test]
    fn stop_rules_agree_on_desk_instance() {
        let prob = desk();
        let a = newton_solve(&prob, &[0.0; 20], &NewtonOptions::default()).unwrap();
        let opts = NewtonOptions { stop: StopRule::GradientNorm, ..Default::default() };
        let b = newton_solve(&prob, &[0.0; 20], &opts).unwrap();
        assert!(b.converged);
        assert!((a.final_objective() - b.final_objective()).abs() < 1e-6);
    }

    #[test]
    fn warm_start_terminates_quickly() {
        let prob = desk();
        let ls = linalg::qr_least_squares(&prob.a, &prob.b).unwrap();
        let cold = newton_solve(&prob, &[0.0; 20], &NewtonOptions::default()).unwrap();
        let warm = newton_solve(&prob, &ls, &NewtonOptions::default()).unwrap();
        assert!(warm.converged);
        assert!(warm.iterations() <= cold.iterations());
    }

    #[test]
    fn exact_provider_matches_and_zero_provider_stalls() {
        let prob = desk();
        let opts = NewtonOptions::default();
        let reference = newton_solve(&prob, &[0.0; 20], &opts).unwrap();
        let (acc, timing) = accelerated_newton(&prob, &[0.0; 20], &mut DirectionProvider::ExactSolve, &opts).unwrap();
        assert_eq!(acc, reference);
        assert_eq!(timing.per_iteration.len(), acc.iterations());

        let mut zero = DirectionProvider::Custom(Box::new(|s: &NewtonState| Ok(Vector::zeros(s.problem.n()))));
        let opts = NewtonOptions { max_iter: 7, ..Default::default() };
        let (stalled, _) = accelerated_newton(&prob, &[0.0; 20], &mut zero, &opts).unwrap();
        assert!(!stalled.converged);
        assert_eq!(stalled.stop_reason, StopReason::MaxIterExceeded);
        assert_eq!(stalled.iterations(), 7);

        let mut short = DirectionProvider::Custom(Box::new(|_: &NewtonState| Ok(Vector::zeros(3))));
        assert!(matches!(
            accelerated_newton(&prob, &[0.0; 20], &mut short, &opts),
            Err(NewtonError::ProviderDimension { expected: 20, got: 3 })
        ));
    }

    #[test]
    fn levenberg_handles_singular_hessian() {
        let h = DenseMatrix::zeros(3, 3);
        let p = damped_solve(&h, &[1.0, 0.0, 0.0]).unwrap();
        assert!(p.is_finite());
        let mut h = DenseMatrix::identity(2);
        h[(1, 1)] = 0.0;
        let p = damped_solve(&h, &[1.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn line_search_keeps_descent() {
        let prob = sample_problem(40, 4, 6.0, 9).unwrap();
        let opts = NewtonOptions { line_search: true, ..Default::default() };
        let traj = newton_solve(&prob, &[5.0; 4], &opts).unwrap();
        assert!(traj.objectives.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn trajectory_labels_replay_and_round_trip() {
        let opts = NewtonOptions::default();
        let ds = generate_trajectories(3, 60, 5, 6.0, &opts, 11).unwrap();
        assert_eq!(ds.manifest.converged, ds.trajectories.len());
        assert!(ds.trajectories.iter().all(|t| t.directions.len() >= 2));
        for (i, t) in ds.trajectories.iter().enumerate() {
            let prob = ds.problem(i).unwrap();
            assert_eq!(prob.atb(), t.atb);
            for (x, p) in t.states.iter().zip(&t.directions) {
                let g = gradient(&prob, x);
                let hp = hessian(&prob, x).matvec(p).unwrap();
                assert!(hp.sub(&g).norm2() <= 1e-8 * g.norm2());
            }
        }
        assert_eq!(ds, generate_trajectories(3, 60, 5, 6.0, &opts, 11).unwrap());
        let dir = tempfile::tempdir().unwrap();
        write_trajectories(dir.path(), &ds).unwrap();
        assert_eq!(read_trajectories(dir.path()).unwrap(), ds);
        let set = supervised_pairs(&ds.trajectories).unwrap();
        assert_eq!(set.len(), ds.pair_count());
        assert_eq!(set.token_shape(), Some((5, 2)));
    }
}
