//! Discrete α-energy gradient descent for SO(3) link fields on a periodic
//! 4-torus.
//!
//! A link `U` acts on the algebra by the adjoint action, so a rotation vector
//! `w` (with `U = exp[w]ₓ`) corresponds to the algebra element `w/2`. The
//! plaquette curvature estimate is that element divided by `a²`, giving
//! `|F̂|² = |w|²/a⁴` in the algebra norm.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::algebra::{mat3_apply, mat3_identity, mat3_mul, mat3_transpose, orthogonality_residual, Mat3};
use crate::quadrature::Neumaier;

const MAGIC: &[u8; 8] = b"IFORGELT";
/// Plaquette angles within this distance of π are treated as on the cut.
const BRANCH_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("plaquette at site {site}, plane ({mu}, {nu}) has rotation angle π")]
    PlaquetteBranchCut { site: usize, mu: usize, nu: usize },
    #[error("line search failed at iteration {iter} after {backtracks} backtracks")]
    LineSearchFailed { iter: usize, backtracks: usize },
    #[error("invalid flow configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `[v]ₓ`.
pub fn hat(v: &[f64; 3]) -> Mat3 {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

/// Rotation `exp[v]ₓ` by Rodrigues' formula.
pub fn rotation_exp(v: &[f64; 3]) -> Mat3 {
    let th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let th = th2.sqrt();
    let (a, b) = if th < 1e-4 {
        (1.0 - th2 / 6.0 + th2 * th2 / 120.0, 0.5 - th2 / 24.0 + th2 * th2 / 720.0)
    } else {
        (th.sin() / th, (1.0 - th.cos()) / th2)
    };
    let k = hat(v);
    let k2 = mat3_mul(&k, &k);
    let mut r = mat3_identity();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Principal rotation vector of `r`, or `None` on the branch cut.
pub fn rotation_log(r: &Mat3) -> Option<[f64; 3]> {
    let vee = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    let s = 0.5 * (vee[0] * vee[0] + vee[1] * vee[1] + vee[2] * vee[2]).sqrt();
    let c = 0.5 * (r[0][0] + r[1][1] + r[2][2] - 1.0);
    let th = s.atan2(c);
    if th > PI - BRANCH_TOL {
        return None;
    }
    let f = if s < 1e-8 { 0.5 * (1.0 + th * th / 6.0) } else { 0.5 * th / s };
    Some(vee.map(|v| v * f))
}

/// Nearest rotation by Gram–Schmidt on the rows.
pub fn reorthonormalize(r: &Mat3) -> Mat3 {
    let norm = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.map(|x| x / n)
    };
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let e0 = norm(r[0]);
    let d = dot(&r[1], &e0);
    let e1 = norm([r[1][0] - d * e0[0], r[1][1] - d * e0[1], r[1][2] - d * e0[2]]);
    let e2 = [e0[1] * e1[2] - e0[2] * e1[1], e0[2] * e1[0] - e0[0] * e1[2], e0[0] * e1[1] - e0[1] * e1[0]];
    [e0, e1, e2]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeField {
    pub extent: [usize; 4],
    pub spacing: f64,
    /// Site-major, direction-minor.
    pub links: Vec<Mat3>,
}

impl LatticeField {
    pub fn identity(extent: [usize; 4], spacing: f64) -> Result<Self, FlowError> {
        Self::from_fn(extent, spacing, |_, _| mat3_identity())
    }

    /// Links `f(site coordinates, μ)`.
    pub fn from_fn(extent: [usize; 4], spacing: f64, f: impl Fn([usize; 4], usize) -> Mat3) -> Result<Self, FlowError> {
        if extent.iter().any(|&n| n < 2) {
            return Err(FlowError::InvalidLattice(format!("every extent must be at least 2, got {extent:?}")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(FlowError::InvalidLattice(format!("spacing must be positive, got {spacing}")));
        }
        let n: usize = extent.iter().product();
        let mut links = Vec::with_capacity(4 * n);
        let lat = LatticeField { extent, spacing, links: Vec::new() };
        for s in 0..n {
            let c = lat.coords(s);
            for mu in 0..4 {
                links.push(f(c, mu));
            }
        }
        Ok(LatticeField { links, ..lat })
    }

    /// Each link `exp[ε]ₓ` with entries of `ε` uniform in `(-amplitude, amplitude)`.
    pub fn random_perturbation(extent: [usize; 4], spacing: f64, amplitude: f64, seed: u64) -> Result<Self, FlowError> {
        let mut lat = Self::identity(extent, spacing)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in lat.links.iter_mut() {
            let v = [0; 3].map(|_| rng.gen_range(-amplitude..amplitude));
            *l = rotation_exp(&v);
        }
        Ok(lat)
    }

    pub fn sites(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn volume(&self) -> f64 {
        self.sites() as f64 * self.spacing.powi(4)
    }

    pub fn coords(&self, s: usize) -> [usize; 4] {
        let mut c = [0; 4];
        let mut r = s;
        for d in (0..4).rev() {
            c[d] = r % self.extent[d];
            r /= self.extent[d];
        }
        c
    }

    pub fn index(&self, c: [usize; 4]) -> usize {
        c.iter().zip(self.extent.iter()).fold(0, |acc, (&x, &n)| acc * n + x)
    }

    /// Neighbour of `s` one step along `mu` (backwards when `forward` is false).
    pub fn shift(&self, s: usize, mu: usize, forward: bool) -> usize {
        let mut c = self.coords(s);
        let n = self.extent[mu];
        c[mu] = if forward { (c[mu] + 1) % n } else { (c[mu] + n - 1) % n };
        self.index(c)
    }

    pub fn link(&self, s: usize, mu: usize) -> &Mat3 {
        &self.links[4 * s + mu]
    }

    pub fn max_orthogonality_drift(&self) -> f64 {
        self.links.iter().map(orthogonality_residual).fold(0.0, f64::max)
    }

    /// `U_μ(x)U_ν(x+μ)U_μ(x+ν)ᵀU_ν(x)ᵀ`.
    pub fn plaquette(&self, s: usize, mu: usize, nu: usize) -> Mat3 {
        let a = mat3_mul(self.link(s, mu), self.link(self.shift(s, mu, true), nu));
        let b = mat3_mul(&a, &mat3_transpose(self.link(self.shift(s, nu, true), mu)));
        mat3_mul(&b, &mat3_transpose(self.link(s, nu)))
    }

    /// Gauge transform `U_μ(x) → g(x)U_μ(x)g(x+μ)ᵀ`.
    pub fn gauge_transform(&self, g: &[Mat3]) -> Self {
        let mut out = self.clone();
        for s in 0..self.sites() {
            for mu in 0..4 {
                let t = mat3_mul(&g[s], self.link(s, mu));
                out.links[4 * s + mu] = mat3_mul(&t, &mat3_transpose(&g[self.shift(s, mu, true)]));
            }
        }
        out
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<(), FlowError> {
        w.write_all(MAGIC)?;
        for n in self.extent {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        w.write_all(&self.spacing.to_le_bytes())?;
        for l in &self.links {
            for row in l {
                for v in row {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self, FlowError> {
        let mut head = [0u8; 32];
        r.read_exact(&mut head)?;
        if &head[..8] != MAGIC {
            return Err(FlowError::BadCheckpoint("wrong magic".into()));
        }
        let mut extent = [0usize; 4];
        for (d, e) in extent.iter_mut().enumerate() {
            *e = u32::from_le_bytes(head[8 + 4 * d..12 + 4 * d].try_into().unwrap()) as usize;
        }
        let spacing = f64::from_le_bytes(head[24..32].try_into().unwrap());
        let mut lat = Self::identity(extent, spacing)?;
        let mut buf = [0u8; 8];
        for l in lat.links.iter_mut() {
            for row in l.iter_mut() {
                for v in row.iter_mut() {
                    r.read_exact(&mut buf)
                        .map_err(|_| FlowError::BadCheckpoint("truncated link data".into()))?;
                    *v = f64::from_le_bytes(buf);
                }
            }
        }
        Ok(lat)
    }
}

const PLANES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

fn plane_index(mu: usize, nu: usize) -> usize {
    PLANES.iter().position(|&p| p == (mu, nu)).unwrap()
}

struct SiteData {
    logs: [[f64; 3]; 6],
    plaquettes: [Mat3; 6],
    density: f64,
    weight: f64,
}

fn site_data(lat: &LatticeField, s: usize, alpha: f64) -> Result<SiteData, FlowError> {
    let a4 = lat.spacing.powi(4);
    let mut logs = [[0.0; 3]; 6];
    let mut plaquettes = [mat3_identity(); 6];
    let mut sq = 0.0;
    for (p, &(mu, nu)) in PLANES.iter().enumerate() {
        plaquettes[p] = lat.plaquette(s, mu, nu);
        logs[p] = rotation_log(&plaquettes[p]).ok_or(FlowError::PlaquetteBranchCut { site: s, mu, nu })?;
        sq += logs[p].iter().map(|v| v * v).sum::<f64>();
    }
    let base = 1.0 + sq / a4;
    Ok(SiteData { logs, plaquettes, density: a4 * base.powf(alpha), weight: 2.0 * alpha * base.powf(alpha - 1.0) })
}

fn all_sites(lat: &LatticeField, alpha: f64) -> Result<Vec<SiteData>, FlowError> {
    (0..lat.sites()).into_par_iter().map(|s| site_data(lat, s, alpha)).collect()
}

/// `Σ a⁴ (1 + |F̂|²)^α` over sites.
pub fn alpha_energy(lat: &LatticeField, alpha: f64) -> Result<f64, FlowError> {
    let data = all_sites(lat, alpha)?;
    let mut acc = Neumaier::default();
    for d in &data {
        acc.add(d.density);
    }
    Ok(acc.total())
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn link_gradient(lat: &LatticeField, data: &[SiteData], s: usize, rho: usize) -> [f64; 3] {
    let mut g = [0.0; 3];
    let mut add = |c: f64, v: [f64; 3]| {
        for k in 0..3 {
            g[k] += c * v[k];
        }
    };
    for sigma in 0..4 {
        if sigma == rho {
            continue;
        }
        if rho < sigma {
            let p = plane_index(rho, sigma);
            // first factor of P_{ρσ}(x)
            let d = &data[s];
            add(d.weight, d.logs[p]);
            // U_μ(x+ν)ᵀ in P_{ρσ}(x-σ)
            let x = lat.shift(s, sigma, false);
            let d = &data[x];
            let a = mat3_mul(lat.link(x, rho), lat.link(lat.shift(x, rho, true), sigma));
            let m = mat3_mul(&a, &mat3_transpose(lat.link(s, rho)));
            add(-d.weight, mat3_apply(&mat3_transpose(&m), &d.logs[p]));
        } else {
            let p = plane_index(sigma, rho);
            // U_ν(x+μ) in P_{σρ}(x-σ)
            let x = lat.shift(s, sigma, false);
            let d = &data[x];
            add(d.weight, mat3_apply(&mat3_transpose(lat.link(x, sigma)), &d.logs[p]));
            // last factor U_ν(x)ᵀ of P_{σρ}(x)
            let d = &data[s];
            add(-d.weight, mat3_apply(&mat3_transpose(&d.plaquettes[p]), &d.logs[p]));
        }
    }
    g
}

/// Gradient with respect to left perturbations `U → exp[ε]ₓ U`, per link.
pub fn alpha_gradient(lat: &LatticeField, alpha: f64) -> Result<Vec<[f64; 3]>, FlowError> {
    let data = all_sites(lat, alpha)?;
    Ok((0..4 * lat.sites())
        .into_par_iter()
        .map(|l| link_gradient(lat, &data, l / 4, l % 4))
        .collect())
}

fn norm_of(g: &[[f64; 3]]) -> f64 {
    let mut acc = Neumaier::default();
    for v in g {
        acc.add(dot3(v, v));
    }
    acc.total().sqrt()
}

/// `U → exp[-s·g]ₓ U`, re-orthonormalized.
pub fn retract(lat: &LatticeField, grad: &[[f64; 3]], step: f64) -> LatticeField {
    let links = lat
        .links
        .par_iter()
        .zip(grad.par_iter())
        .map(|(u, g)| reorthonormalize(&mat3_mul(&rotation_exp(&g.map(|v| -step * v)), u)))
        .collect();
    LatticeField { links, ..lat.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowConfig {
    pub alpha: f64,
    pub step: f64,
    pub shrink: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { alpha: 1.1, step: 0.1, shrink: 0.5, armijo: 1e-4, max_backtracks: 40, max_iters: 5000, grad_tol: 1e-9 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.alpha >= 1.0) {
            return Err(FlowError::InvalidConfig(format!("α must be at least 1, got {}", self.alpha)));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(FlowError::InvalidConfig(format!("shrink must lie in (0, 1), got {}", self.shrink)));
        }
        if !(self.step > 0.0 && self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(FlowError::InvalidConfig("step must be positive and armijo in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub energy: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub field: LatticeField,
    pub energy: f64,
    pub step_used: f64,
    pub grad_norm: f64,
}

/// Predicted decreases below this fraction of the energy are lost in the
/// summation roundoff; a failed line search there counts as converged.
const ROUNDOFF_FLOOR: f64 = 1e3 * f64::EPSILON;

fn step_from(lat: &LatticeField, energy: f64, cfg: &FlowConfig, first_try: f64, iter: usize) -> Result<StepOutcome, FlowError> {
    let grad = alpha_gradient(lat, cfg.alpha)?;
    let gn = norm_of(&grad);
    if gn < cfg.grad_tol {
        return Ok(StepOutcome { field: lat.clone(), energy, step_used: 0.0, grad_norm: gn });
    }
    let mut s = first_try;
    for _ in 0..=cfg.max_backtracks {
        let cand = retract(lat, &grad, s);
        if let Ok(e) = alpha_energy(&cand, cfg.alpha) {
            if e <= energy - cfg.armijo * s * gn * gn && e <= energy {
                return Ok(StepOutcome { field: cand, energy: e, step_used: s, grad_norm: gn });
            }
        }
        s *= cfg.shrink;
    }
    if first_try * gn * gn < ROUNDOFF_FLOOR * energy.abs() {
        return Ok(StepOutcome { field: lat.clone(), energy, step_used: 0.0, grad_norm: gn });
    }
    Err(FlowError::LineSearchFailed { iter, backtracks: cfg.max_backtracks })
}

/// One Armijo-backtracked descent step starting from `cfg.step`.
pub fn flow_step(lat: &LatticeField, cfg: &FlowConfig) -> Result<StepOutcome, FlowError> {
    cfg.validate()?;
    let e = alpha_energy(lat, cfg.alpha)?;
    step_from(lat, e, cfg, cfg.step, 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowRun {
    pub trace: Vec<TraceRow>,
    pub field: LatticeField,
}

impl FlowRun {
    pub fn energies(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.energy).collect()
    }

    pub fn final_energy(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.energy)
    }
}

/// Descends until the gradient tolerance, the roundoff floor or `max_iters`. Row 0 holds the
/// initial energy; each later row an accepted step with the gradient norm
/// it descended along. The first trial step
/// of each iteration grows from the previous accepted one, capped at `cfg.step`.
pub fn flow_run(lat: &LatticeField, cfg: &FlowConfig) -> Result<FlowRun, FlowError> {
    cfg.validate()?;
    let mut field = lat.clone();
    let mut energy = alpha_energy(&field, cfg.alpha)?;
    let mut trace = vec![TraceRow { iter: 0, energy, grad_norm: f64::NAN, step: 0.0 }];
    let mut trial = cfg.step;
    for iter in 1..=cfg.max_iters {
        let out = step_from(&field, energy, cfg, trial, iter)?;
        if iter == 1 {
            trace[0].grad_norm = out.grad_norm;
        }
        if out.step_used == 0.0 {
            break;
        }
        trial = (out.step_used / cfg.shrink).min(cfg.step);
        field = out.field;
        energy = out.energy;
        trace.push(TraceRow { iter, energy, grad_norm: out.grad_norm, step: out.step_used });
    }
    Ok(FlowRun { trace, field })
}

pub fn write_trace_csv(trace: &[TraceRow], w: impl Write) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    for r in trace {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
