//! Command-line interface: `verify`, `energy`, `glue-scan` and `flow`.
//!
//! Settings come from built-in defaults, then an optional `key = value`
//! config file, then flags. Exit codes: 0 success, 1 failed check or
//! numerical error, 2 configuration error.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::algebra::{bracket, choose_positive_basis, inner, Alg, NORMALIZATION_TAG};
use crate::background::{BackgroundConnection, QuadTerm};
use crate::flow::{flow_run, write_trace_csv, FlowConfig, LatticeField};
use crate::forms::{
    curvature, hodge_star, isotropy_matrix, sd_asd_split, CylPoint, DerivativeMode, MetricModel, OneFormField,
    OrientationReversed, Point, RiemannTensor, TwoForm,
};
use crate::gluing::{
    bubble_basis, c0_at, c0_constant, energy_comparison_scan, energy_split, fitted_limit, interaction_prediction,
    obv_identity_check, pontryagin_change, slice_pairing, three_line_terms, twist_identity_residual, twist_matrix,
    BasisChoice, GluedConnection, Part, ScanConfig, ScanRow,
};
use crate::instanton::{d_linear, Family, GaugeKind, InstantonGauge};
use crate::quadrature::{pontryagin_number, ym_energy, RegionSpec, Resolution, SphereRule};

const MIN_SPHERE: usize = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "iforge", version, about = "Instanton gluing and Yang-Mills energy toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Plain-text `key = value` config file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for output files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "IFORGE_WORKERS")]
    pub workers: Option<usize>,
    /// Order of the S³ rule.
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    /// Comma-separated δ values.
    #[arg(long, global = true)]
    pub delta_grid: Option<String>,
    /// Comma-separated λ values; replaces the default δ³-scaled grid.
    #[arg(long, global = true)]
    pub lambda_grid: Option<String>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Drops the algebra normalization from the energy check.
    #[arg(long, global = true, hide = true)]
    pub sabotage_normalization: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run invariant checks.
    Verify {
        #[arg(value_enum, default_value_t = Suite::All)]
        suite: Suite,
    },
    /// Yang–Mills energy and Pontryagin number of a connection.
    Energy {
        #[arg(long)]
        connection: Option<String>,
        /// fullr4[:R], ball:R, annulus:R1:R2 or cylinder:T0:T1.
        #[arg(long)]
        region: Option<String>,
        /// flat, cylinder, ricci-flat or constant:K.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Energy comparison over the (δ, λ) grid.
    GlueScan {
        /// positive, flipped or default.
        #[arg(long)]
        basis: Option<String>,
        #[arg(long)]
        metric: Option<String>,
    },
    /// α-energy descent on a lattice.
    Flow {
        /// Comma-separated sites per axis.
        #[arg(long)]
        extent: Option<String>,
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        step: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Algebra,
    Forms,
    Instanton,
    Cylinder,
    Gluing,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectionKind {
    Instanton,
    Background,
    Glued,
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub resolution: Resolution,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub deltas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub lambda_factors: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub basis: BasisChoice,
    pub metric: String,
    pub connection: ConnectionKind,
    pub region: Option<String>,
    pub lambda: f64,
    pub delta: f64,
    pub extent: [usize; 4],
    pub amplitude: f64,
    pub max_iters: usize,
    pub step: f64,
    pub f0: [[f64; 3]; 6],
    pub quad_scale: f64,
    pub radius: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            resolution: Resolution::default(),
            workers: None,
            out: None,
            deltas: vec![0.2, 0.1, 0.05],
            lambdas: Vec::new(),
            lambda_factors: vec![1.0, 0.5, 0.25, 0.125],
            alpha: 1.1,
            seed: 11,
            basis: BasisChoice::Positive,
            metric: "flat".into(),
            connection: ConnectionKind::Instanton,
            region: None,
            lambda: 1e-4,
            delta: 0.1,
            extent: [4; 4],
            amplitude: 0.05,
            max_iters: 5000,
            step: FlowConfig::default().step,
            f0: DEFAULT_F0,
            quad_scale: 0.3,
            radius: 1.0,
        }
    }
}

/// Background curvature entries in the order F12, F13, F14, F23, F24, F34.
pub const DEFAULT_F0: [[f64; 3]; 6] =
    [[0.3, -0.2, 0.5], [0.1, 0.4, -0.3], [-0.6, 0.2, 0.1], [0.2, 0.7, -0.1], [0.5, -0.4, 0.2], [-0.1, 0.3, 0.6]];

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| CliError::Config(format!("{key}: cannot parse {s:?}"))))
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.trim()
        .parse::<T>()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "resolution" => self.resolution = Resolution::with_sphere(parse_one(key, v)?),
            "radial_order" => self.resolution.radial_order = parse_one(key, v)?,
            "workers" => self.workers = Some(parse_one(key, v)?),
            "out" => self.out = Some(PathBuf::from(v.trim())),
            "delta_grid" => self.deltas = parse_list(key, v)?,
            "lambda_grid" => self.lambdas = parse_list(key, v)?,
            "lambda_factors" => self.lambda_factors = parse_list(key, v)?,
            "alpha" => self.alpha = parse_one(key, v)?,
            "seed" => self.seed = parse_one(key, v)?,
            "basis" => {
                self.basis = match v.trim() {
                    "positive" => BasisChoice::Positive,
                    "flipped" => BasisChoice::Flipped,
                    "default" => BasisChoice::Default,
                    o => return Err(CliError::Config(format!("basis: unknown choice {o:?}"))),
                }
            }
            "metric" => self.metric = v.trim().to_string(),
            "connection" => {
                self.connection = match v.trim() {
                    "instanton" => ConnectionKind::Instanton,
                    "background" => ConnectionKind::Background,
                    "glued" => ConnectionKind::Glued,
                    o => return Err(CliError::Config(format!("connection: unknown kind {o:?}"))),
                }
            }
            "region" => self.region = Some(v.trim().to_string()),
            "lambda" => self.lambda = parse_one(key, v)?,
            "delta" => self.delta = parse_one(key, v)?,
            "extent" => {
                let e: Vec<usize> = parse_list(key, v)?;
                self.extent = e.try_into().map_err(|_| CliError::Config("extent needs four values".into()))?;
            }
            "amplitude" => self.amplitude = parse_one(key, v)?,
            "max_iters" => self.max_iters = parse_one(key, v)?,
            "step" => self.step = parse_one(key, v)?,
            "f0" => {
                let e: Vec<f64> = parse_list(key, v)?;
                if e.len() != 18 {
                    return Err(CliError::Config(format!("f0 needs 18 values, got {}", e.len())));
                }
                for (i, row) in self.f0.iter_mut().enumerate() {
                    row.copy_from_slice(&e[3 * i..3 * i + 3]);
                }
            }
            "quad_scale" => self.quad_scale = parse_one(key, v)?,
            "radius" => self.radius = parse_one(key, v)?,
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.resolution.sphere < MIN_SPHERE || self.resolution.radial_order < 2 {
            return bad(format!("resolution must be at least {MIN_SPHERE}"));
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        if !(self.alpha >= 1.0) {
            return bad(format!("alpha must be at least 1, got {}", self.alpha));
        }
        if self.deltas.is_empty() || self.deltas.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
            return bad("every δ must lie in (0, 1)".into());
        }
        for &d in &self.deltas {
            for &l in &self.lambdas {
                if !(l > 0.0 && l < d) {
                    return bad(format!("λ = {l} must satisfy 0 < λ < δ = {d}"));
                }
            }
        }
        if self.lambda_factors.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("lambda factors must lie in (0, 1]".into());
        }
        if !(self.lambda > 0.0 && self.lambda < self.delta && self.delta < 1.0) {
            return bad(format!("need 0 < λ < δ < 1, got λ = {}, δ = {}", self.lambda, self.delta));
        }
        if self.delta > self.radius {
            return bad("δ exceeds the background radius".into());
        }
        if self.extent.iter().any(|&n| n < 2) || !(self.amplitude >= 0.0) || !(self.step > 0.0) {
            return bad("flow needs extents ≥ 2, amplitude ≥ 0 and step > 0".into());
        }
        parse_metric(&self.metric)?;
        if let Some(r) = &self.region {
            parse_region(r)?;
        }
        Ok(())
    }

    pub fn background(&self) -> Result<BackgroundConnection, CliError> {
        let quad = (self.quad_scale != 0.0).then(|| QuadTerm::random(self.seed, self.quad_scale));
        BackgroundConnection::from_entries(self.f0, quad, self.radius).map_err(|e| CliError::Config(e.to_string()))
    }
}

pub fn parse_metric(s: &str) -> Result<MetricModel, CliError> {
    let s = s.trim();
    match s {
        "flat" => Ok(MetricModel::Flat),
        "cylinder" => Ok(MetricModel::CylinderProduct),
        "ricci-flat" => Ok(MetricModel::ConformalNormal(RiemannTensor::ricci_flat_sample())),
        _ => match s.strip_prefix("constant:") {
            Some(k) => Ok(MetricModel::ConformalNormal(RiemannTensor::constant_curvature(parse_one("metric", k)?))),
            None => Err(CliError::Config(format!("unknown metric {s:?}"))),
        },
    }
}

pub fn parse_region(s: &str) -> Result<RegionSpec, CliError> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    let num = |i: usize| -> Result<f64, CliError> {
        parts.get(i).ok_or_else(|| CliError::Config(format!("region {s:?} is missing a value"))).and_then(|v| parse_one("region", v))
    };
    let r = match parts[0] {
        "fullr4" if parts.len() == 1 => RegionSpec::FullR4 { r_max: 1e3 },
        "fullr4" => RegionSpec::FullR4 { r_max: num(1)? },
        "ball" => RegionSpec::Ball { r: num(1)? },
        "annulus" => RegionSpec::Annulus { r_in: num(1)?, r_out: num(2)? },
        "cylinder" => RegionSpec::CylinderSegment { t_min: num(1)?, t_max: num(2)? },
        o => return Err(CliError::Config(format!("unknown region {o:?}"))),
    };
    r.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(r)
}

// ---------------------------------------------------------------------------
// Verification suites

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: &'static str,
    pub measured: f64,
    /// `measured < bound` (or `measured > bound` for lower bounds).
    pub bound: f64,
    pub lower_bound: bool,
    pub pass: bool,
}

impl Check {
    fn below(suite: &'static str, name: &'static str, measured: f64, bound: f64) -> Self {
        Check { suite, name, measured, bound, lower_bound: false, pass: measured.is_finite() && measured < bound }
    }

    fn above(suite: &'static str, name: &'static str, measured: f64, bound: f64) -> Self {
        Check { suite, name, measured, bound, lower_bound: true, pass: measured.is_finite() && measured > bound }
    }

    pub fn line(&self) -> String {
        let rel = if self.lower_bound { ">" } else { "<" };
        format!(
            "{} {}/{} measured={:.3e} bound{rel}{:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            self.bound
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub resolution: Resolution,
    pub seed: u64,
    pub sabotage_normalization: bool,
}

fn rand_alg(rng: &mut ChaCha8Rng) -> Alg {
    Alg::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

fn rand_point(rng: &mut ChaCha8Rng, scale: f64) -> Point {
    [0; 4].map(|_| rng.gen_range(-scale..scale))
}

fn rand_cyl(rng: &mut ChaCha8Rng) -> CylPoint {
    let d = rand_point(rng, 1.0);
    CylPoint::from_direction(rng.gen_range(-4.0..3.0), d)
}

fn wrap<E: std::fmt::Display>(r: Result<f64, E>) -> f64 {
    r.unwrap_or(f64::NAN)
}

fn suite_algebra(o: &VerifyOptions) -> Vec<Check> {
    const S: &str = "algebra";
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let (mut anti, mut jac, mut inv) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (x, y, z) = (rand_alg(&mut rng), rand_alg(&mut rng), rand_alg(&mut rng));
        anti = anti.max((bracket(&x, &y) + bracket(&y, &x)).norm_sq().sqrt());
        let j = bracket(&x, &bracket(&y, &z)) + bracket(&y, &bracket(&z, &x)) + bracket(&z, &bracket(&x, &y));
        jac = jac.max(j.norm_sq().sqrt());
        inv = inv.max((inner(&bracket(&x, &y), &z) + inner(&y, &bracket(&x, &z))).abs());
    }
    let (mut resid, mut wrong, mut min_obj) = (0.0f64, 0.0f64, f64::INFINITY);
    for n in 0..10_000 {
        let f: [[f64; 3]; 3] = [0; 3].map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0)));
        let orient: i8 = if n % 2 == 0 { 1 } else { -1 };
        match choose_positive_basis(f, orient) {
            Ok(b) => {
                resid = resid.max(b.orthonormality_residual());
                if b.determinant().signum() as i8 != orient {
                    wrong += 1.0;
                }
                min_obj = min_obj.min(b.objective(&f));
            }
            Err(_) => wrong += 1.0,
        }
    }
    vec![
        Check::below(S, "bracket_antisymmetry", anti, 1e-14),
        Check::below(S, "jacobi_identity", jac, 1e-13),
        Check::below(S, "inner_ad_invariance", inv, 1e-13),
        Check::below(S, "positive_basis_orthonormality", resid, 1e-12),
        Check::below(S, "positive_basis_orientation_errors", wrong, 0.5),
        Check::above(S, "positive_basis_min_objective", min_obj, 0.0),
    ]
}

fn suite_forms(o: &VerifyOptions) -> Vec<Check> {
    const S: &str = "forms";
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(1));
    let (mut invol, mut asd, mut sd, mut curv) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let gauge = InstantonGauge::new(GaugeKind::Regular, 1.0).expect("unit scale");
    for _ in 0..200 {
        let x = rand_point(&mut rng, 1.5);
        let mut w = TwoForm::ZERO;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let a = rand_alg(&mut rng);
                w.0[i][j] = a;
                w.0[j][i] = -a;
            }
        }
        let m = &MetricModel::Flat;
        invol = invol.max(wrap(hodge_star(&w, m, &x).and_then(|s| hodge_star(&s, m, &x)).map(|s| (s - w).max_abs())));
        for k in 0..3 {
            let dt = TwoForm::from_real(&d_linear(Family::Theta, k), Alg::I);
            let dp = TwoForm::from_real(&d_linear(Family::Psi, k), Alg::I);
            asd = asd.max(wrap(hodge_star(&dt, m, &x).map(|s| (s + dt).max_abs())));
            sd = sd.max(wrap(hodge_star(&dp, m, &x).map(|s| (s - dp).max_abs())));
        }
        let c = curvature(&gauge, &x, DerivativeMode::ClosedForm);
        let f = curvature(&gauge, &x, DerivativeMode::FiniteDifference(1e-4));
        curv = curv.max(match (c, f) {
            (Ok(c), Ok(f)) => (c - f).max_abs() / (1.0 + c.max_abs()),
            _ => f64::NAN,
        });
    }
    vec![
        Check::below(S, "hodge_involution", invol, 1e-12),
        Check::below(S, "dtheta_asd", asd, 1e-12),
        Check::below(S, "dpsi_sd", sd, 1e-12),
        Check::below(S, "curvature_closed_vs_fd", curv, 1e-6),
    ]
}

fn suite_instanton(o: &VerifyOptions) -> Vec<Check> {
    const S: &str = "instanton";
    let res = &o.resolution;
    let g = InstantonGauge::new(GaugeKind::Regular, 1.0).expect("unit scale");
    let inv = InstantonGauge::new(GaugeKind::Inverted, 1.0).expect("unit scale");
    let full = RegionSpec::FullR4 { r_max: 1e3 };
    let flat = &MetricModel::Flat;
    let mode = DerivativeMode::ClosedForm;
    let target = 16.0 * PI * PI;
    let scale = if o.sabotage_normalization { 0.25 } else { 1.0 };
    let energy = wrap(ym_energy(&g, &full, flat, res, mode).map(|i| scale * i.value));
    let p1 = wrap(pontryagin_number(&g, &full, flat, res, mode).map(|i| i.value));
    let p1r = wrap(pontryagin_number(&OrientationReversed(&g), &full, flat, res, mode).map(|i| i.value));
    let origin = wrap(g.curvature_closed(&[0.0; 4]).map(|f| (f.norm_sq_flat() - 96.0).abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(2));
    let (mut sd_part, mut off, mut spread) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let x = rand_point(&mut rng, 2.0);
        if let Ok(f) = inv.curvature_closed(&x) {
            sd_part = sd_part.max(wrap(sd_asd_split(&f, flat, &x).map(|(p, _)| p.max_abs() / f.max_abs())));
        }
        match g.curvature_closed(&x).map_err(|e| e.to_string()).and_then(|f| isotropy_matrix(&f, flat, &x).map_err(|e| e.to_string())) {
            Ok(m) => {
                let d: Vec<f64> = (0..4).map(|p| m[p][p]).collect();
                let mx = d.iter().cloned().fold(f64::MIN, f64::max);
                let mn = d.iter().cloned().fold(f64::MAX, f64::min);
                spread = spread.max((mx - mn) / mx);
                for p in 0..4 {
                    for q in 0..4 {
                        if p != q {
                            off = off.max(m[p][q].abs() / mx);
                        }
                    }
                }
            }
            Err(_) => off = f64::NAN,
        }
    }
    vec![
        Check::below(S, "energy_16pi2", ((energy - target) / target).abs(), 1e-5),
        Check::below(S, "pontryagin_minus_4", (p1 + 4.0).abs(), 1e-5),
        Check::below(S, "pontryagin_reversed_plus_4", (p1r - 4.0).abs(), 1e-5),
        Check::below(S, "origin_norm_96", origin, 1e-10),
        Check::below(S, "inverted_gauge_asd", sd_part, 1e-10),
        Check::below(S, "isotropy_off_diagonal", off, 1e-10),
        Check::below(S, "isotropy_diagonal_spread", spread, 1e-10),
    ]
}

fn suite_cylinder(o: &VerifyOptions) -> Vec<Check> {
    const S: &str = "cylinder";
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(3));
    let (mut twist, mut obv) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let p = rand_cyl(&mut rng);
        twist = twist.max(wrap(twist_identity_residual(&p)));
        match obv_identity_check(&p) {
            Ok((a, b)) => obv = obv.max(a).max(b),
            Err(_) => obv = f64::NAN,
        }
    }
    let rule = SphereRule::new(o.resolution.sphere);
    let mut t_int = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let v = rule.integrate(|w| twist_matrix(w).map(|t| t[i][j]));
            t_int = t_int.max(wrap(v).abs());
        }
    }
    let c0 = c0_constant(&o.resolution);
    let cs: Vec<f64> = [-3.0, -1.0, 0.0, 1.0, 3.0].iter().map(|&t| c0_at(t, &o.resolution)).collect();
    let spread = cs.iter().cloned().fold(f64::MIN, f64::max) - cs.iter().cloned().fold(f64::MAX, f64::min);
    vec![
        Check::below(S, "twist_identity", twist, 1e-10),
        Check::below(S, "obv_identity", obv, 1e-10),
        Check::below(S, "twist_sphere_integral", t_int, 1e-10),
        Check::below(S, "c0_equals_4pi2", (c0 - 4.0 * PI * PI).abs(), 1e-8),
        Check::below(S, "c0_t_spread", spread, 1e-10),
    ]
}

fn suite_gluing(o: &VerifyOptions) -> Vec<Check> {
    const S: &str = "gluing";
    let res = &o.resolution;
    let bg = match BackgroundConnection::from_entries(DEFAULT_F0, Some(QuadTerm::random(o.seed, 0.3)), 1.0) {
        Ok(b) => b,
        Err(_) => return vec![Check::below(S, "background", f64::NAN, 0.0)],
    };
    let basis = match bubble_basis(&bg.split(), BasisChoice::Positive) {
        Ok(b) => b,
        Err(_) => return vec![Check::below(S, "bubble_basis", f64::NAN, 0.0)],
    };
    let g = match GluedConnection::new(bg, 1e-6, 0.1, basis) {
        Ok(g) => g,
        Err(_) => return vec![Check::below(S, "glued_connection", f64::NAN, 0.0)],
    };
    let (a, b) = g.cutoffs.neck();
    let mut slice = 0.0f64;
    for k in 0..=20 {
        let t = a + (b - a) * k as f64 / 20.0;
        slice = slice.max(wrap(slice_pairing(&g, t, res).map(|(p, nr, nl)| p.abs() / (nr * nl))));
    }
    let expect = -c0_constant(res) * g.lambda().powi(2) * g.interaction_coefficient();
    let lines = three_line_terms(&g, res).map(|l| l.map(|v| ((v - expect) / expect).abs()));
    let (l2, l3) = match lines {
        Ok(l) => (l[1], l[2]),
        Err(_) => (f64::NAN, f64::NAN),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_add(4));
    let mut ends = 0.0f64;
    for _ in 0..50 {
        let d = rand_point(&mut rng, 1.0);
        let ob = CylPoint::from_direction(b, d).to_euclidean();
        let ib = CylPoint::from_direction(a, d).to_euclidean();
        let e1 = match (g.part_at(Part::Full, &ob), g.background.eval(&ob)) {
            (Ok(f), Ok(e)) => (f.0 - e).norm_sq().sqrt(),
            _ => f64::NAN,
        };
        let e2 = match (g.part_at(Part::Full, &ib), g.bubble.eval(&ib)) {
            (Ok(f), Ok(e)) => (f.0 - e).norm_sq().sqrt() / (1.0 + e.norm_sq().sqrt()),
            _ => f64::NAN,
        };
        ends = ends.max(e1).max(e2);
    }
    let g4 = GluedConnection::new(g.background.clone(), 1e-4, 0.1, basis).expect("valid parameters");
    let dp1 = wrap(pontryagin_change(&g4, res));
    let inter = wrap(energy_split(&g4, &MetricModel::Flat, res).map(|s| s.e_inter));
    vec![
        Check::below(S, "slice_pairing_vanishes", slice, 1e-9),
        Check::below(S, "three_line_phi4_term", l2, 1e-6),
        Check::below(S, "three_line_phi3_term", l3, 1e-6),
        Check::below(S, "cutoff_boundary_consistency", ends, 1e-12),
        Check::below(S, "pontryagin_change_minus_4", (dp1 + 4.0).abs(), 1e-4),
        Check::below(S, "interaction_negative_for_positive_basis", inter, 0.0),
    ]
}

pub fn verify_suite(suite: Suite, o: &VerifyOptions) -> Vec<Check> {
    match suite {
        Suite::Algebra => suite_algebra(o),
        Suite::Forms => suite_forms(o),
        Suite::Instanton => suite_instanton(o),
        Suite::Cylinder => suite_cylinder(o),
        Suite::Gluing => suite_gluing(o),
        Suite::All => [Suite::Algebra, Suite::Forms, Suite::Instanton, Suite::Cylinder, Suite::Gluing]
            .into_iter()
            .flat_map(|s| verify_suite(s, o))
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Commands

fn resolution_json(r: &Resolution) -> serde_json::Value {
    json!({
        "sphere": r.sphere,
        "radial_order": r.radial_order,
        "panel_width": r.panel_width,
        "log_span": r.log_span,
    })
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(runtime)?;
    fs::write(dir.join(name), bytes).map_err(runtime)
}

fn to_json(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn cmd_verify(cfg: &RunConfig, suite: Suite, sabotage: bool) -> Result<String, CliError> {
    let opts = VerifyOptions { resolution: cfg.resolution, seed: cfg.seed, sabotage_normalization: sabotage };
    let checks = verify_suite(suite, &opts);
    let mut text = String::new();
    for c in &checks {
        text.push_str(&c.line());
        text.push('\n');
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if let Some(dir) = &cfg.out {
        let v = json!({
            "normalization": NORMALIZATION_TAG,
            "suite": suite,
            "seed": cfg.seed,
            "resolution": resolution_json(&cfg.resolution),
            "checks": checks,
            "failed": failed,
        });
        write_out(dir, "verify.json", to_json(&v).as_bytes())?;
    }
    print!("{text}");
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(text)
}

pub fn cmd_energy(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    let metric = parse_metric(&cfg.metric)?;
    let res = &cfg.resolution;
    let mode = DerivativeMode::ClosedForm;
    let region_text = cfg.region.clone().unwrap_or_else(|| match cfg.connection {
        ConnectionKind::Instanton => "fullr4".into(),
        _ => format!("ball:{}", cfg.radius),
    });
    let mut v = json!({
        "normalization": NORMALIZATION_TAG,
        "connection": cfg.connection,
        "metric": cfg.metric,
        "region": region_text,
        "resolution": resolution_json(res),
    });
    let (energy, p1, err) = match cfg.connection {
        ConnectionKind::Instanton => {
            let g = InstantonGauge::new(GaugeKind::Regular, 1.0).map_err(runtime)?;
            let region = parse_region(&region_text)?;
            let e = ym_energy(&g, &region, &metric, res, mode).map_err(runtime)?;
            let p = pontryagin_number(&g, &region, &metric, res, mode).map_err(runtime)?;
            (e.value, p.value, e.error)
        }
        ConnectionKind::Background => {
            let bg = cfg.background()?;
            let region = parse_region(&region_text)?;
            let e = ym_energy(&bg, &region, &metric, res, mode).map_err(runtime)?;
            let p = pontryagin_number(&bg, &region, &metric, res, mode).map_err(runtime)?;
            (e.value, p.value, e.error)
        }
        ConnectionKind::Glued => {
            // D′ over the background's ball, assembled from its three pieces.
            let bg = cfg.background()?;
            let basis = bubble_basis(&bg.split(), cfg.basis).map_err(runtime)?;
            let g = GluedConnection::new(bg.clone(), cfg.lambda, cfg.delta, basis).map_err(runtime)?;
            let outer = RegionSpec::Annulus { r_in: cfg.delta, r_out: cfg.radius };
            let inner_ball = RegionSpec::Ball { r: cfg.lambda / cfg.delta };
            let e_out = ym_energy(&bg, &outer, &metric, res, mode).map_err(runtime)?;
            let e_in = ym_energy(&g.bubble, &inner_ball, &metric, res, mode).map_err(runtime)?;
            let split = energy_split(&g, &metric, res).map_err(runtime)?;
            let e_bg = ym_energy(&bg, &RegionSpec::Ball { r: cfg.radius }, &metric, res, mode).map_err(runtime)?;
            let p_bg = pontryagin_number(&bg, &RegionSpec::Ball { r: cfg.radius }, &MetricModel::Flat, res, mode).map_err(runtime)?;
            let dp = pontryagin_change(&g, res).map_err(runtime)?;
            v["lambda"] = json!(cfg.lambda);
            v["delta"] = json!(cfg.delta);
            v["background_energy"] = json!(e_bg.value);
            v["neck_energy"] = json!(split.e_gain);
            v["predicted_interaction"] = json!(interaction_prediction(&bg.split(), &basis, res) * cfg.lambda.powi(2));
            v["delta_YM"] = json!(split.delta_ym);
            (e_out.value + split.e_gain + e_in.value, p_bg.value + dp, e_out.error + split.gain_err + e_in.error)
        }
    };
    v["energy"] = json!(energy);
    v["p1"] = json!(p1);
    v["quad_err"] = json!(err);
    if let Some(dir) = &cfg.out {
        write_out(dir, "energy.json", to_json(&v).as_bytes())?;
    }
    Ok(v)
}

pub const SCAN_HEADER: [&str; 11] = [
    "delta",
    "lambda",
    "E_gain",
    "E_loss",
    "diff",
    "predicted_per_lambda2",
    "delta_YM",
    "quad_err",
    "E_inter",
    "boundary_consistent",
    "overlap_factor",
];

pub fn scan_csv(rows: &[ScanRow], meta: &str) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(format!("# normalization={NORMALIZATION_TAG}; {meta}\n").as_bytes());
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(SCAN_HEADER).map_err(runtime)?;
        for r in rows {
            w.write_record([
                r.delta.to_string(),
                r.lambda.to_string(),
                r.e_gain.to_string(),
                r.e_loss.to_string(),
                r.diff.to_string(),
                r.predicted_per_lambda2.to_string(),
                r.delta_ym.to_string(),
                r.quad_err.to_string(),
                r.e_inter.to_string(),
                r.boundary_consistent.to_string(),
                r.overlap_factor.to_string(),
            ])
            .map_err(runtime)?;
        }
        w.flush().map_err(runtime)?;
    }
    Ok(buf)
}

pub fn cmd_glue_scan(cfg: &RunConfig) -> Result<(Vec<ScanRow>, Vec<u8>), CliError> {
    let metric = parse_metric(&cfg.metric)?;
    let bg = cfg.background()?;
    let scan = ScanConfig {
        deltas: cfg.deltas.clone(),
        lambda_factors: cfg.lambda_factors.clone(),
        lambdas: cfg.lambdas.clone(),
        basis: cfg.basis,
        metric,
        resolution: cfg.resolution,
    };
    let rows = energy_comparison_scan(&bg, &scan).map_err(runtime)?;
    let grid = scan.grid();
    let meta = format!(
        "metric={}; basis={:?}; seed={}; sphere={}; radial_order={}; grid={}",
        cfg.metric,
        cfg.basis,
        cfg.seed,
        cfg.resolution.sphere,
        cfg.resolution.radial_order,
        grid.iter().map(|(d, l)| format!("{d}/{l}")).collect::<Vec<_>>().join(" ")
    );
    let csv = scan_csv(&rows, &meta)?;
    let mut deltas = cfg.deltas.clone();
    deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    deltas.dedup();
    let limits: BTreeMap<String, f64> = deltas
        .iter()
        .map(|d| {
            let sel: Vec<ScanRow> = rows.iter().filter(|r| r.delta == *d).cloned().collect();
            (d.to_string(), fitted_limit(&sel))
        })
        .collect();
    let summary = json!({
        "normalization": NORMALIZATION_TAG,
        "metric": cfg.metric,
        "basis": format!("{:?}", cfg.basis),
        "seed": cfg.seed,
        "resolution": resolution_json(&cfg.resolution),
        "predicted_per_lambda2": rows.first().map(|r| r.predicted_per_lambda2),
        "fitted_limit_by_delta": limits,
        "rows": rows.len(),
    });
    match &cfg.out {
        Some(dir) => {
            write_out(dir, "glue_scan.csv", &csv)?;
            write_out(dir, "glue_scan.json", to_json(&summary).as_bytes())?;
            print!("{}", to_json(&summary));
        }
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    Ok((rows, csv))
}

pub fn cmd_flow(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    let lat = LatticeField::random_perturbation(cfg.extent, 1.0, cfg.amplitude, cfg.seed).map_err(runtime)?;
    let fc = FlowConfig { alpha: cfg.alpha, step: cfg.step, max_iters: cfg.max_iters, ..Default::default() };
    fc.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let run = flow_run(&lat, &fc).map_err(runtime)?;
    let mut csv = format!(
        "# normalization={NORMALIZATION_TAG}; extent={:?}; spacing=1; alpha={}; seed={}; amplitude={}\n",
        cfg.extent, cfg.alpha, cfg.seed, cfg.amplitude
    )
    .into_bytes();
    write_trace_csv(&run.trace, &mut csv).map_err(runtime)?;
    let summary = json!({
        "normalization": NORMALIZATION_TAG,
        "extent": cfg.extent,
        "alpha": cfg.alpha,
        "seed": cfg.seed,
        "amplitude": cfg.amplitude,
        "config": fc,
        "initial_energy": run.trace[0].energy,
        "final_energy": run.final_energy(),
        "volume": lat.volume(),
        "steps": run.trace.len() - 1,
    });
    match &cfg.out {
        Some(dir) => {
            write_out(dir, "flow_trace.csv", &csv)?;
            let mut bin = Vec::new();
            run.field.write_checkpoint(&mut bin).map_err(runtime)?;
            write_out(dir, "flow_checkpoint.bin", &bin)?;
            write_out(dir, "flow.json", to_json(&summary).as_bytes())?;
            print!("{}", to_json(&summary));
        }
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    Ok(summary)
}

/// Resolves the settings for a parsed command line.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_file(&text)?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(v) = &cli.out {
        flags.push(("out", v.display().to_string()));
    }
    if let Some(v) = cli.workers {
        flags.push(("workers", v.to_string()));
    }
    if let Some(v) = cli.resolution {
        flags.push(("resolution", v.to_string()));
    }
    if let Some(v) = &cli.delta_grid {
        flags.push(("delta_grid", v.clone()));
    }
    if let Some(v) = &cli.lambda_grid {
        flags.push(("lambda_grid", v.clone()));
    }
    if let Some(v) = cli.alpha {
        flags.push(("alpha", v.to_string()));
    }
    if let Some(v) = cli.seed {
        flags.push(("seed", v.to_string()));
    }
    match &cli.command {
        Command::Verify { .. } => {}
        Command::Energy { connection, region, metric, lambda, delta } => {
            if let Some(v) = connection {
                flags.push(("connection", v.clone()));
            }
            if let Some(v) = region {
                flags.push(("region", v.clone()));
            }
            if let Some(v) = metric {
                flags.push(("metric", v.clone()));
            }
            if let Some(v) = lambda {
                flags.push(("lambda", v.to_string()));
            }
            if let Some(v) = delta {
                flags.push(("delta", v.to_string()));
            }
        }
        Command::GlueScan { basis, metric } => {
            if let Some(v) = basis {
                flags.push(("basis", v.clone()));
            }
            if let Some(v) = metric {
                flags.push(("metric", v.clone()));
            }
        }
        Command::Flow { extent, amplitude, max_iters, step } => {
            if let Some(v) = extent {
                flags.push(("extent", v.clone()));
            }
            if let Some(v) = amplitude {
                flags.push(("amplitude", v.to_string()));
            }
            if let Some(v) = max_iters {
                flags.push(("max_iters", v.to_string()));
            }
            if let Some(v) = step {
                flags.push(("step", v.to_string()));
            }
        }
    }
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    if let Some(n) = cfg.workers {
        // Fails only when a global pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Verify { suite } => cmd_verify(&cfg, *suite, cli.sabotage_normalization).map(|_| ()),
        Command::Energy { .. } => cmd_energy(&cfg).map(|v| print!("{}", to_json(&v))),
        Command::GlueScan { .. } => cmd_glue_scan(&cfg).map(|_| ()),
        Command::Flow { .. } => cmd_flow(&cfg).map(|_| ()),
    }
}

/// Parses `std::env::args`, runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_and_flag_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# comment\nseed = 5\nalpha = 1.3\ndelta_grid = 0.1, 0.05\n").unwrap();
        let cli = Cli::try_parse_from(["iforge", "--config", path.to_str().unwrap(), "--alpha", "1.2", "glue-scan"]).unwrap();
        let cfg = resolve(&cli).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.alpha, 1.2);
        assert_eq!(cfg.deltas, vec![0.1, 0.05]);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("nonsense", "1"), Err(CliError::Config(_))));
        assert!(cfg.apply_file("alpha 1.0").is_err());
        cfg.alpha = 0.5;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let mut cfg = RunConfig::default();
        cfg.lambdas = vec![0.3];
        assert!(cfg.validate().is_err());
        assert!(parse_region("annulus:2:1").is_err());
        assert!(parse_metric("hyperbolic").is_err());
        assert!(matches!(parse_region("cylinder:-1:1").unwrap(), RegionSpec::CylinderSegment { .. }));
    }

    #[test]
    fn algebra_suite_passes() {
        let o = VerifyOptions { resolution: Resolution::default(), seed: 1, sabotage_normalization: false };
        let checks = verify_suite(Suite::Algebra, &o);
        assert!(checks.iter().all(|c| c.pass), "{checks:?}");
    }

    #[test]
    fn scan_csv_layout() {
        let row = ScanRow {
            delta: 0.1,
            lambda: 1e-4,
            e_gain: 1.0,
            e_loss: 2.0,
            diff: -1.0,
            predicted_per_lambda2: -3.0,
            delta_ym: -1.5,
            quad_err: 1e-9,
            e_inter: -0.5,
            interaction_coefficient: 1.0,
            boundary_consistent: true,
            overlap_factor: 1.0,
        };
        let csv = String::from_utf8(scan_csv(&[row], "grid=x").unwrap()).unwrap();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().contains("inner=-2tr"));
        assert_eq!(lines.next().unwrap(), SCAN_HEADER.join(","));
        assert!(lines.next().unwrap().starts_with("0.1,0.0001,1,2,-1,-3,-1.5,"));
    }
}
