//! Gluing a scaled instanton into a background connection across a neck.
//!
//! With `a = log λ - log δ` and `b = log δ`, the neck is the annulus
//! `e^a < |x| < e^b`. All fields are handled through their Euclidean
//! coefficients; the cylinder quantities `θ′, ψ′` enter through
//! `e^{2t}θ′ = Π*θ` and `e^{-2t}ψ′ = Π*(|x|⁻⁴ψ)`, and cutoffs `φ(log|x|)`
//! are differentiated analytically, `∂ᵢφ = φ′ xᵢ/|x|²`.

use std::f64::consts::PI;

use rayon::prelude::*;
use thiserror::Error;

use crate::algebra::{choose_positive_basis, inner, Alg, AlgBasis, AlgebraError};
use crate::background::{BackgroundConnection, BackgroundError, CurvatureSplit};
use crate::forms::{
    curvature_from_parts, energy_density_correction, mat4_det_inv, norm4, pullback_one, pullback_two,
    two_form_inner, wedge_bracket, CylPoint, DerivativeMode, FieldError, Jacobian, Mat4, MetricFrame,
    MetricModel, OneForm, OneFormField, Point, RiemannTensor, TwoForm,
};
use crate::instanton::{d_linear, linear_matrix, Family, GaugeKind, InstantonError, InstantonGauge};
use crate::quadrature::{integrate_euclidean_n, ym_energy, QuadError, RegionSpec, Resolution, SphereRule};

pub const CUTOFF_PROFILE: &str = "smoothstep 6u^5-15u^4+10u^3";

/// Outer radius for the instanton energy outside the neck; the remainder is
/// covered by the `|F|² ≤ 96λ⁴/r⁸` tail bound.
const OUTER_RADIUS: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GluingError {
    #[error("invalid gluing parameters: {0}")]
    InvalidParameters(String),
    #[error("twist matrix is undefined at the origin")]
    OriginSingular,
    #[error("quadrature error estimate {estimate:.3e} exceeds 1% of the interaction energy {value:.3e}")]
    ResolutionInsufficient { estimate: f64, value: f64 },
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Instanton(#[from] InstantonError),
    #[error(transparent)]
    Background(#[from] BackgroundError),
}

/// `s(u) = 6u⁵ - 15u⁴ + 10u³` clamped to [0, 1], and `s′(u)`.
pub fn smoothstep(u: f64) -> (f64, f64) {
    if u <= 0.0 {
        (0.0, 0.0)
    } else if u >= 1.0 {
        (1.0, 0.0)
    } else {
        let u2 = u * u;
        (u2 * u * (10.0 - 15.0 * u + 6.0 * u2), 30.0 * u2 * (1.0 - u) * (1.0 - u))
    }
}

/// The four cutoffs as functions of `t`, each returned as `(φ, φ′)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffSet {
    pub lambda: f64,
    pub delta: f64,
}

impl CutoffSet {
    pub fn new(lambda: f64, delta: f64) -> Result<Self, GluingError> {
        if !(lambda > 0.0 && lambda < delta && delta < 1.0) {
            return Err(GluingError::InvalidParameters(format!("need 0 < λ < δ < 1, got λ = {lambda}, δ = {delta}")));
        }
        Ok(CutoffSet { lambda, delta })
    }

    /// `(log λ - log δ, log δ)`.
    pub fn neck(&self) -> (f64, f64) {
        (self.lambda.ln() - self.delta.ln(), self.delta.ln())
    }

    fn a(&self) -> f64 {
        self.lambda.ln() - self.delta.ln()
    }

    fn m(&self) -> f64 {
        0.5 * self.lambda.ln()
    }

    /// 0 below `½log λ - 1`, 1 above `½log λ + 1`.
    pub fn phi1(&self, t: f64) -> (f64, f64) {
        let (v, d) = smoothstep((t - (self.m() - 1.0)) / 2.0);
        (v, d / 2.0)
    }

    pub fn phi2(&self, t: f64) -> (f64, f64) {
        let (v, d) = self.phi1(t);
        (1.0 - v, -d)
    }

    /// 0 below `a + 1`, 1 above `a + 2`.
    pub fn phi3(&self, t: f64) -> (f64, f64) {
        smoothstep(t - (self.a() + 1.0))
    }

    /// `φ₄(t) = φ₃(log λ - t)`: 1 below `log δ - 2`, 0 above `log δ - 1`.
    pub fn phi4(&self, t: f64) -> (f64, f64) {
        let (v, d) = self.phi3(self.lambda.ln() - t);
        (v, -d)
    }

    /// Ends of every transition interval.
    pub fn breakpoints(&self) -> Vec<f64> {
        let (a, b, m) = (self.a(), self.delta.ln(), self.m());
        vec![a + 1.0, a + 2.0, m - 1.0, m + 1.0, b - 2.0, b - 1.0]
    }

    /// Whether every cutoff is constant at both neck ends, so the glued
    /// connection matches the background at `|x| = δ` and the bubble at
    /// `|x| = λ/δ`. Equivalent to `λ ≤ δ² e⁻²`.
    pub fn boundary_consistent(&self) -> bool {
        let (a, b) = self.neck();
        let eps = 1e-12;
        self.phi3(b).0 >= 1.0 - eps
            && self.phi1(b).0 >= 1.0 - eps
            && self.phi4(b).0 <= eps
            && self.phi3(a).0 <= eps
            && self.phi1(a).0 <= eps
            && self.phi4(a).0 >= 1.0 - eps
    }

    /// `∫ φ₃′ φ₄ dt` over the neck; 1 when the φ₃ and φ₄ transitions are
    /// disjoint (`λ ≤ δ² e⁻⁴`).
    pub fn overlap_factor(&self) -> f64 {
        let (a, b) = self.neck();
        let nodes = crate::quadrature::t_nodes(a, b, &self.breakpoints(), &Resolution { radial_order: 16, ..Default::default() });
        nodes.iter().map(|&(t, w)| w * self.phi3(t).1 * self.phi4(t).0).sum()
    }
}

// ---------------------------------------------------------------------------
// Radially scaled linear forms

/// `|x|^p Lₖ(x) X` for the θ/ψ family member `Lₖ`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledLinear {
    pub family: Family,
    pub k: usize,
    pub alg: Alg,
    pub power: i32,
}

impl ScaledLinear {
    fn real(&self, x: &Point) -> Result<(Point, Mat4), FieldError> {
        let s: f64 = x.iter().map(|v| v * v).sum();
        if s == 0.0 && self.power < 0 {
            return Err(FieldError::SingularPoint);
        }
        let m = linear_matrix(self.family, self.k);
        let p = f64::from(self.power);
        let rp = if self.power == 0 { 1.0 } else { s.powf(p / 2.0) };
        let c: Point = std::array::from_fn(|j| (0..4).map(|i| m[j][i] * x[i]).sum::<f64>());
        let mut jac = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let radial = if self.power == 0 { 0.0 } else { p * rp / s * x[i] * c[j] };
                jac[i][j] = radial + rp * m[j][i];
            }
        }
        Ok((c.map(|v| v * rp), jac))
    }
}

impl OneFormField for ScaledLinear {
    fn eval(&self, x: &Point) -> Result<OneForm, FieldError> {
        Ok(OneForm::from_real(&self.real(x)?.0, self.alg))
    }

    fn jacobian(&self, x: &Point) -> Option<Result<Jacobian, FieldError>> {
        Some(self.real(x).map(|(_, j)| {
            let mut out = [[Alg::ZERO; 4]; 4];
            for i in 0..4 {
                for l in 0..4 {
                    out[i][l] = self.alg * j[i][l];
                }
            }
            out
        }))
    }
}

fn real_d(field: &ScaledLinear, x: &Point) -> Result<Mat4, FieldError> {
    let (_, j) = field.real(x)?;
    let mut d = [[0.0; 4]; 4];
    for i in 0..4 {
        for l in 0..4 {
            d[i][l] = j[i][l] - j[l][i];
        }
    }
    Ok(d)
}

fn pull_real_two(c: &Mat4, p: &CylPoint) -> Mat4 {
    pullback_two(&TwoForm::from_real(c, Alg::I), p).component(0)
}

fn real_norm_sq(c: &Mat4) -> f64 {
    let mut s = 0.0;
    for i in 0..4 {
        for j in (i + 1)..4 {
            s += c[i][j] * c[i][j];
        }
    }
    s
}

fn max_abs(c: &Mat4) -> f64 {
    c.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Cylinder-frame coefficients of `dt ∧ α` for a 1-form `α` given in the
/// cylinder coframe.
fn dt_wedge(a: &OneForm) -> TwoForm {
    let mut f = TwoForm::ZERO;
    for b in 1..4 {
        f.0[0][b] = a.0[b];
        f.0[b][0] = -a.0[b];
    }
    f
}

// ---------------------------------------------------------------------------
// Twist matrix and pointwise identities

/// The transition matrix with `d(e^{-2t}ψ′ᵢ) = e^{-4t} Σⱼ Tᵢⱼ d(e^{2t}θ′ⱼ)`.
pub fn twist_matrix(x: &Point) -> Result<[[f64; 3]; 3], GluingError> {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    if r2 == 0.0 {
        return Err(GluingError::OriginSingular);
    }
    let [x1, x2, x3, x4] = *x;
    let m = [
        [(x1 * x1 + x2 * x2 - x3 * x3 - x4 * x4) / (2.0 * r2), (x2 * x3 - x1 * x4) / r2, (x1 * x3 + x2 * x4) / r2],
        [(x1 * x4 + x2 * x3) / r2, (x1 * x1 + x3 * x3 - x2 * x2 - x4 * x4) / (2.0 * r2), (x3 * x4 - x1 * x2) / r2],
        [(x2 * x4 - x1 * x3) / r2, (x1 * x2 + x3 * x4) / r2, (x1 * x1 + x4 * x4 - x2 * x2 - x3 * x3) / (2.0 * r2)],
    ];
    Ok(m.map(|row| row.map(|v| -2.0 * v)))
}

/// Max residual of the twist identity at `p`, relative to the size of its
/// left-hand side.
pub fn twist_identity_residual(p: &CylPoint) -> Result<f64, GluingError> {
    let x = p.to_euclidean();
    let t = twist_matrix(&x)?;
    let e4 = (-4.0 * p.t).exp();
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        let lhs = pull_real_two(&real_d(&ScaledLinear { family: Family::Psi, k: i, alg: Alg::I, power: -4 }, &x)?, p);
        let mut rhs = [[0.0; 4]; 4];
        for j in 0..3 {
            let dth = pull_real_two(&d_linear(Family::Theta, j), p);
            for a in 0..4 {
                for b in 0..4 {
                    rhs[a][b] += e4 * t[i][j] * dth[a][b];
                }
            }
        }
        let mut diff = lhs;
        for a in 0..4 {
            for b in 0..4 {
                diff[a][b] -= rhs[a][b];
            }
        }
        worst = worst.max(max_abs(&diff) / max_abs(&lhs).max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

/// Residuals at `p` of `4 dt∧ψ′₁ = e^{-2t}d(e^{2t}ψ′₁) - e^{2t}d(e^{-2t}ψ′₁)` and
/// of the same identity with θ′₁.
pub fn obv_identity_check(p: &CylPoint) -> Result<(f64, f64), GluingError> {
    let x = p.to_euclidean();
    let mut out = [0.0; 2];
    for (n, fam) in [Family::Psi, Family::Theta].into_iter().enumerate() {
        let up = ScaledLinear { family: fam, k: 0, alg: Alg::I, power: 0 };
        let down = ScaledLinear { family: fam, k: 0, alg: Alg::I, power: -4 };
        let d_up = pull_real_two(&real_d(&up, &x)?, p);
        let d_down = pull_real_two(&real_d(&down, &x)?, p);
        // L′ = e^{-2t} Π*L in the coframe
        let prime = pullback_one(&up.eval(&x)?, p) * (-2.0 * p.t).exp();
        let lhs = dt_wedge(&prime).component(0);
        let (em, ep) = ((-2.0 * p.t).exp(), (2.0 * p.t).exp());
        let mut r: f64 = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                r = r.max((4.0 * lhs[a][b] - (em * d_up[a][b] - ep * d_down[a][b])).abs());
            }
        }
        out[n] = r;
    }
    Ok((out[0], out[1]))
}

/// `¼ e^{-4t} ‖d(e^{2t}ψ′₁)‖²_{L²(S³)}` on the slice at `t`.
pub fn c0_at(t: f64, res: &Resolution) -> f64 {
    let rule = SphereRule::new(res.sphere);
    let d = d_linear(Family::Psi, 0);
    let v = rule
        .integrate::<()>(|w| {
            let p = CylPoint { t, omega: *w };
            Ok(real_norm_sq(&pull_real_two(&d, &p)))
        })
        .unwrap();
    0.25 * (-4.0 * t).exp() * v
}

pub fn c0_constant(res: &Resolution) -> f64 {
    c0_at(0.0, res)
}

/// `𝒫 = Σᵢ inner(eᵢ, F₊,ᵢ)`.
pub fn interaction_coefficient(split: &CurvatureSplit, basis: &AlgBasis) -> f64 {
    (0..3).map(|i| inner(&basis.e[i], &split.plus[i])).sum()
}

/// `-2 c₀ 𝒫`, the predicted `(E_gain - E_loss)/λ²`.
pub fn interaction_prediction(split: &CurvatureSplit, basis: &AlgBasis, res: &Resolution) -> f64 {
    -2.0 * c0_constant(res) * interaction_coefficient(split, basis)
}

/// How the bubble frame is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisChoice {
    /// Positive objective against `F₊`, so `𝒫 > 0`.
    Positive,
    /// Positive objective against `-F₊`, so `𝒫 < 0`.
    Flipped,
    /// The gauge's default frame.
    Default,
}

/// Bubble frame for the Inverted gauge (negatively oriented).
pub fn bubble_basis(split: &CurvatureSplit, choice: BasisChoice) -> Result<AlgBasis, GluingError> {
    let orient = GaugeKind::Inverted.required_orientation();
    let f = split.plus_coords();
    match choice {
        BasisChoice::Default => Ok(GaugeKind::Inverted.default_basis()),
        BasisChoice::Positive => Ok(choose_positive_basis(f, orient)?),
        BasisChoice::Flipped => Ok(choose_positive_basis(f.map(|r| r.map(|v| -v)), orient)?),
    }
}

// ---------------------------------------------------------------------------
// Glued connection

/// Pieces of the glued connection, each selectable as a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    /// `A_(λ) = A_L + A_R`.
    Full,
    /// `A_L = φ₃ L + φ₁ w_l`.
    Left,
    /// `A_R = φ₄ R + φ₂ w_r`.
    Right,
    /// `φ₃ L`.
    LeftPrime,
    /// `φ₄ R`.
    RightPrime,
    /// `L`, the leading background term.
    LeftBare,
    /// `R = λ²|x|⁻⁴ Σ ψₖ eₖ`, the leading bubble term.
    RightBare,
    /// `L + w_l`, the background itself.
    Background,
    /// `R + w_r`, the bubble itself.
    Bubble,
}

struct Pieces {
    l: OneForm,
    jl: Jacobian,
    q: OneForm,
    jq: Jacobian,
    r0: OneForm,
    jr0: Jacobian,
    w: OneForm,
    jw: Jacobian,
    grad_t: Point,
    phi: [(f64, f64); 4],
}

fn accumulate(terms: &[((f64, f64), &OneForm, &Jacobian)], grad_t: &Point) -> (OneForm, Jacobian) {
    let mut a = OneForm::ZERO;
    let mut j = [[Alg::ZERO; 4]; 4];
    for &((v, d), f, jf) in terms {
        if v == 0.0 && d == 0.0 {
            continue;
        }
        a = a + *f * v;
        for i in 0..4 {
            for l in 0..4 {
                j[i][l] += jf[i][l] * v + f.0[l] * (d * grad_t[i]);
            }
        }
    }
    (a, j)
}

#[derive(Debug, Clone)]
pub struct GluedConnection {
    pub background: BackgroundConnection,
    pub bubble: InstantonGauge,
    pub cutoffs: CutoffSet,
}

impl GluedConnection {
    pub fn new(background: BackgroundConnection, lambda: f64, delta: f64, basis: AlgBasis) -> Result<Self, GluingError> {
        let cutoffs = CutoffSet::new(lambda, delta)?;
        if background.radius < delta {
            return Err(GluingError::InvalidParameters(format!(
                "background radius {} is smaller than δ = {delta}",
                background.radius
            )));
        }
        let bubble = InstantonGauge::new(GaugeKind::Inverted, lambda)?.with_basis(basis)?;
        Ok(GluedConnection { background, bubble, cutoffs })
    }

    pub fn lambda(&self) -> f64 {
        self.cutoffs.lambda
    }

    pub fn delta(&self) -> f64 {
        self.cutoffs.delta
    }

    pub fn split(&self) -> CurvatureSplit {
        self.background.split()
    }

    pub fn interaction_coefficient(&self) -> f64 {
        interaction_coefficient(&self.split(), &self.bubble.basis)
    }

    fn pieces(&self, x: &Point) -> Result<Pieces, FieldError> {
        let s: f64 = x.iter().map(|v| v * v).sum();
        if s == 0.0 {
            return Err(FieldError::SingularPoint);
        }
        let t = 0.5 * s.ln();
        let c = &self.cutoffs;
        let l2 = c.lambda * c.lambda;
        let bg = &self.background;
        // R = λ² s⁻² Σψₖeₖ and w_r = -λ⁴/((λ² + s)s²) Σψₖeₖ, as f(s) Σψₖeₖ.
        let profiles = [(l2 / (s * s), -2.0 * l2 / (s * s * s)), {
            let d = l2 + s;
            (-l2 * l2 / (d * s * s), l2 * l2 * (3.0 * s + 2.0 * l2) / (d * d * s * s * s))
        }];
        let mut radial = [(OneForm::ZERO, [[Alg::ZERO; 4]; 4]); 2];
        for (n, (f, fp)) in profiles.iter().enumerate() {
            for k in 0..3 {
                let m = linear_matrix(Family::Psi, k);
                let e = self.bubble.basis.e[k];
                let cvec: Point = std::array::from_fn(|j| (0..4).map(|i| m[j][i] * x[i]).sum::<f64>());
                for j in 0..4 {
                    radial[n].0 .0[j] += e * (f * cvec[j]);
                    for i in 0..4 {
                        radial[n].1[i][j] += e * (2.0 * x[i] * fp * cvec[j] + f * m[j][i]);
                    }
                }
            }
        }
        let [(r0, jr0), (w, jw)] = radial;
        Ok(Pieces {
            l: bg.linear(x),
            jl: bg.linear_jacobian(),
            q: bg.quad_part(x),
            jq: bg.quad_jacobian(x),
            r0,
            jr0,
            w,
            jw,
            grad_t: x.map(|v| v / s),
            phi: [c.phi1(t), c.phi2(t), c.phi3(t), c.phi4(t)],
        })
    }

    fn assemble(p: &Pieces, part: Part) -> (OneForm, Jacobian) {
        let one = (1.0, 0.0);
        let [p1, p2, p3, p4] = p.phi;
        let terms: Vec<((f64, f64), &OneForm, &Jacobian)> = match part {
            Part::Full => vec![(p3, &p.l, &p.jl), (p1, &p.q, &p.jq), (p4, &p.r0, &p.jr0), (p2, &p.w, &p.jw)],
            Part::Left => vec![(p3, &p.l, &p.jl), (p1, &p.q, &p.jq)],
            Part::Right => vec![(p4, &p.r0, &p.jr0), (p2, &p.w, &p.jw)],
            Part::LeftPrime => vec![(p3, &p.l, &p.jl)],
            Part::RightPrime => vec![(p4, &p.r0, &p.jr0)],
            Part::LeftBare => vec![(one, &p.l, &p.jl)],
            Part::RightBare => vec![(one, &p.r0, &p.jr0)],
            Part::Background => vec![(one, &p.l, &p.jl), (one, &p.q, &p.jq)],
            Part::Bubble => vec![(one, &p.r0, &p.jr0), (one, &p.w, &p.jw)],
        };
        accumulate(&terms, &p.grad_t)
    }

    /// Potential and Jacobian of one part at `x`.
    pub fn part_at(&self, part: Part, x: &Point) -> Result<(OneForm, Jacobian), FieldError> {
        Ok(Self::assemble(&self.pieces(x)?, part))
    }

    pub fn part(&self, part: Part) -> PartField<'_> {
        PartField { glued: self, part }
    }

    /// The connection `D′`: background for `|x| ≥ δ`, glued on the neck, and
    /// the bubble for `|x| ≤ λ/δ`.
    pub fn d_prime(&self) -> DPrime<'_> {
        DPrime(self)
    }
}

/// One part of a glued connection as a field.
pub struct PartField<'a> {
    glued: &'a GluedConnection,
    part: Part,
}

impl OneFormField for PartField<'_> {
    fn eval(&self, x: &Point) -> Result<OneForm, FieldError> {
        Ok(self.glued.part_at(self.part, x)?.0)
    }

    fn jacobian(&self, x: &Point) -> Option<Result<Jacobian, FieldError>> {
        Some(self.glued.part_at(self.part, x).map(|p| p.1))
    }
}

pub struct DPrime<'a>(&'a GluedConnection);

impl DPrime<'_> {
    fn region(&self, x: &Point) -> u8 {
        let r = norm4(x);
        if r >= self.0.delta() {
            0
        } else if r <= self.0.lambda() / self.0.delta() {
            2
        } else {
            1
        }
    }
}

impl OneFormField for DPrime<'_> {
    fn eval(&self, x: &Point) -> Result<OneForm, FieldError> {
        match self.region(x) {
            0 => self.0.background.eval(x),
            2 => self.0.bubble.eval(x),
            _ => Ok(self.0.part_at(Part::Full, x)?.0),
        }
    }

    fn jacobian(&self, x: &Point) -> Option<Result<Jacobian, FieldError>> {
        match self.region(x) {
            0 => self.0.background.jacobian(x),
            2 => self.0.bubble.jacobian(x),
            _ => Some(self.0.part_at(Part::Full, x).map(|p| p.1)),
        }
    }
}

fn curvature_of(p: &Pieces, part: Part) -> TwoForm {
    let (a, j) = GluedConnection::assemble(p, part);
    curvature_from_parts(&a, &j)
}

// ---------------------------------------------------------------------------
// Slice diagnostics

/// `(∫⟨dA″_R, dA″_L⟩dω, ‖dA″_R‖, ‖dA″_L‖)` on the slice `{t} × S³`,
/// in the cylinder metric.
pub fn slice_pairing(g: &GluedConnection, t: f64, res: &Resolution) -> Result<(f64, f64, f64), GluingError> {
    let rule = SphereRule::new(res.sphere);
    let (mut pr, mut nr, mut nl) = (0.0, 0.0, 0.0);
    for (w, wt) in &rule.nodes {
        let p = CylPoint { t, omega: *w };
        let pc = g.pieces(&p.to_euclidean())?;
        let dl = pullback_two(&crate::forms::d_from_jacobian(&pc.jl), &p);
        let dr = pullback_two(&crate::forms::d_from_jacobian(&pc.jr0), &p);
        pr += wt * dl.inner_flat(&dr);
        nr += wt * dr.norm_sq_flat();
        nl += wt * dl.norm_sq_flat();
    }
    Ok((pr, nr.sqrt(), nl.sqrt()))
}

/// The three neck integrals of `⟨dA′_R, dA′_L⟩` after expanding the cutoffs:
/// `⟨φ₄dA″_R, φ₃dA″_L⟩`, `⟨φ₄′dt∧A″_R, φ₃dA″_L⟩`, `⟨φ₄dA″_R, φ₃′dt∧A″_L⟩`.
pub fn three_line_terms(g: &GluedConnection, res: &Resolution) -> Result<[f64; 3], GluingError> {
    let (t0, t1) = g.cutoffs.neck();
    let f = |x: &Point| -> Result<[f64; 3], QuadError> {
        let p = CylPoint::from_euclidean(x)?;
        let pc = g.pieces(x)?;
        let (_, phi3) = (0, pc.phi[2]);
        let phi4 = pc.phi[3];
        let dl = pullback_two(&crate::forms::d_from_jacobian(&pc.jl), &p);
        let dr = pullback_two(&crate::forms::d_from_jacobian(&pc.jr0), &p);
        let dt_l = dt_wedge(&pullback_one(&pc.l, &p));
        let dt_r = dt_wedge(&pullback_one(&pc.r0, &p));
        // dt dω = r⁻⁴ d⁴x
        let vol = (-4.0 * p.t).exp();
        Ok([
            vol * phi4.0 * phi3.0 * dr.inner_flat(&dl),
            vol * phi4.1 * phi3.0 * dt_r.inner_flat(&dl),
            vol * phi4.0 * phi3.1 * dr.inner_flat(&dt_l),
        ])
    };
    Ok(integrate_euclidean_n(&f, t0, t1, &g.cutoffs.breakpoints(), None, res)?)
}

// ---------------------------------------------------------------------------
// Energy split

enum PointMetric {
    Flat,
    Curved(MetricFrame),
}

impl PointMetric {
    fn at(g: &MetricModel, x: &Point) -> Result<Self, FieldError> {
        match g {
            MetricModel::ConformalNormal(_) => Ok(PointMetric::Curved(g.frame_at(x)?)),
            _ => Ok(PointMetric::Flat),
        }
    }

    /// `⟨a, b⟩_g √det g`.
    fn dens(&self, a: &TwoForm, b: &TwoForm) -> f64 {
        match self {
            PointMetric::Flat => a.inner_flat(b),
            PointMetric::Curved(m) => two_form_inner(a, b, m) * m.sqrt_det,
        }
    }
}

/// Energies of the glued connection on the neck and the comparison terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySplit {
    pub e_left: f64,
    pub e_right: f64,
    pub e_inter: f64,
    pub e_gain: f64,
    pub e_loss: f64,
    /// `E_gain - E_loss`, assembled from pointwise differences.
    pub diff: f64,
    /// `𝒴ℳ(D′) - 𝒴ℳ(D) - 16π²`.
    pub delta_ym: f64,
    /// `𝒴ℳ_g(D_stan,λ, B_{λ/δ}) - 𝒴ℳ(D_stan, B_{1/δ})`.
    pub inner_metric_correction: f64,
    /// Error estimate for `diff`.
    pub quad_err: f64,
    /// Error estimate for `e_inter`.
    pub inter_err: f64,
    /// Error estimate for `e_gain`.
    pub gain_err: f64,
}

const NECK_TERMS: usize = 7;

fn neck_integrals(
    g: &GluedConnection,
    metric: &MetricModel,
    res: &Resolution,
) -> Result<[f64; NECK_TERMS], GluingError> {
    let (t0, t1) = g.cutoffs.neck();
    let f = |x: &Point| -> Result<[f64; NECK_TERMS], QuadError> {
        let pc = g.pieces(x)?;
        let pm = PointMetric::at(metric, x)?;
        let (al, jl) = GluedConnection::assemble(&pc, Part::Left);
        let (ar, jr) = GluedConnection::assemble(&pc, Part::Right);
        let fl = curvature_from_parts(&al, &jl);
        let fr = curvature_from_parts(&ar, &jr);
        let xw = wedge_bracket(&al, &ar);
        let fd = curvature_of(&pc, Part::Background);
        let fs = g.bubble.curvature_closed(x)?;
        let e_left = pm.dens(&fl, &fl);
        let e_right = pm.dens(&fr, &fr);
        // |F_L + F_R + 2X|² - |F_L|² - |F_R|²
        let e_inter = 2.0 * pm.dens(&fl, &fr) + 4.0 * pm.dens(&(fl + fr), &xw) + 4.0 * pm.dens(&xw, &xw);
        let fs_e = fs.norm_sq_flat();
        let corr_s = energy_density_correction(&fs, metric, x)?;
        let fd_g = pm.dens(&fd, &fd);
        let diff = e_inter + pm.dens(&(fl - fd), &(fl + fd)) + pm.dens(&(fr - fs), &(fr + fs)) + corr_s;
        Ok([e_left, e_right, e_inter, diff, fd_g, fs_e, corr_s])
    };
    Ok(integrate_euclidean_n(&f, t0, t1, &g.cutoffs.breakpoints(), None, res)?)
}

/// Energy split of the glued connection with comparison terms. The metric is
/// either flat (the cylinder metric gives the same energies) or a conformal
/// normal model.
pub fn energy_split(g: &GluedConnection, metric: &MetricModel, res: &Resolution) -> Result<EnergySplit, GluingError> {
    let metric = match metric {
        MetricModel::CylinderProduct => MetricModel::Flat,
        m => m.clone(),
    };
    let fine = neck_integrals(g, &metric, res)?;
    let coarse = neck_integrals(g, &metric, &res.coarse())?;
    let (lambda, delta) = (g.lambda(), g.delta());
    let mode = DerivativeMode::ClosedForm;
    let ym_bg_inner = ym_energy(&g.background, &RegionSpec::Ball { r: lambda / delta }, &metric, res, mode)?;
    let ym_bg_ball = ym_energy(&g.background, &RegionSpec::Ball { r: delta }, &metric, res, mode)?;
    let outer = RegionSpec::Annulus { r_in: delta, r_out: OUTER_RADIUS };
    let mut ym_stan_outer = ym_energy(&g.bubble, &outer, &MetricModel::Flat, res, mode)?;
    let tail = 2.0 * PI * PI * 96.0 * lambda.powi(4) / (4.0 * OUTER_RADIUS.powi(4));
    ym_stan_outer.error += tail;
    let inner_corr = if metric.is_flat() {
        0.0
    } else {
        let bubble = &g.bubble;
        let m = &metric;
        let f = |x: &Point| -> Result<f64, QuadError> {
            let fs = bubble.curvature_closed(x)?;
            Ok(energy_density_correction(&fs, m, x)?)
        };
        crate::quadrature::integrate_scalar(f, &RegionSpec::Ball { r: lambda / delta }, &MetricModel::Flat, res)?.value
    };
    let [e_left, e_right, e_inter, diff_neck, _fd_g, fs_e, _] = fine;
    let e_gain = e_left + e_right + e_inter;
    let e_loss = ym_bg_ball.value + fs_e + ym_stan_outer.value;
    let diff = diff_neck - ym_bg_inner.value - ym_stan_outer.value;
    let quad_err = (fine[3] - coarse[3]).abs() + ym_bg_inner.error + ym_stan_outer.error;
    let inter_err = (fine[2] - coarse[2]).abs();
    let gain_err = (fine[0] + fine[1] + fine[2] - coarse[0] - coarse[1] - coarse[2]).abs();
    Ok(EnergySplit {
        e_left,
        e_right,
        e_inter,
        e_gain,
        e_loss,
        diff,
        delta_ym: diff + inner_corr,
        inner_metric_correction: inner_corr,
        quad_err,
        inter_err,
        gain_err,
    })
}

/// `energy_split`, failing when the interaction energy is under-resolved.
pub fn energy_split_checked(
    g: &GluedConnection,
    metric: &MetricModel,
    res: &Resolution,
) -> Result<EnergySplit, GluingError> {
    let s = energy_split(g, metric, res)?;
    let floor = 1e-13 * (s.e_left + s.e_right).abs();
    if s.inter_err > 0.01 * s.e_inter.abs() && s.inter_err > floor {
        return Err(GluingError::ResolutionInsufficient { estimate: s.inter_err, value: s.e_inter });
    }
    Ok(s)
}

/// Change of `(‖F⁺‖² - ‖F⁻‖²)/4π²` over `B_δ` when `D` is replaced by `D′`
/// (flat metric).
pub fn pontryagin_change(g: &GluedConnection, res: &Resolution) -> Result<f64, GluingError> {
    let (t0, t1) = g.cutoffs.neck();
    let chern = |f: &TwoForm| -> f64 {
        // |F⁺|² - |F⁻|² = ⟨F, *F⟩
        let star = crate::forms::hodge_star(f, &MetricModel::Flat, &[0.0; 4]).expect("flat metric");
        f.inner_flat(&star)
    };
    let neck = |x: &Point| -> Result<[f64; 1], QuadError> {
        let pc = g.pieces(x)?;
        Ok([chern(&curvature_of(&pc, Part::Full)) - chern(&curvature_of(&pc, Part::Background))])
    };
    let [neck_v] = integrate_euclidean_n(&neck, t0, t1, &g.cutoffs.breakpoints(), None, res)?;
    let inner = |x: &Point| -> Result<[f64; 1], QuadError> {
        let fs = g.bubble.curvature_closed(x)?;
        let fd = curvature_of(&g.pieces(x)?, Part::Background);
        Ok([chern(&fs) - chern(&fd)])
    };
    let ri = (g.lambda() / g.delta()).ln();
    let [inner_v] = integrate_euclidean_n(&inner, ri - res.log_span, ri, &[], Some((ri - res.log_span).exp()), res)?;
    Ok((neck_v + inner_v) / (4.0 * PI * PI))
}

// ---------------------------------------------------------------------------
// Scans

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanRow {
    pub delta: f64,
    pub lambda: f64,
    pub e_gain: f64,
    pub e_loss: f64,
    pub diff: f64,
    pub predicted_per_lambda2: f64,
    pub delta_ym: f64,
    pub quad_err: f64,
    pub e_inter: f64,
    pub interaction_coefficient: f64,
    pub boundary_consistent: bool,
    pub overlap_factor: f64,
}

impl ScanRow {
    pub fn ratio(&self) -> f64 {
        self.diff / (self.lambda * self.lambda)
    }
}

#[derive(Debug, Clone)]
pub struct ScanConfig {
    pub deltas: Vec<f64>,
    /// Each λ is `δ³ · factor`.
    pub lambda_factors: Vec<f64>,
    /// Explicit λ values; used instead of the factors when non-empty.
    pub lambdas: Vec<f64>,
    pub basis: BasisChoice,
    pub metric: MetricModel,
    pub resolution: Resolution,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            deltas: vec![0.2, 0.1, 0.05],
            lambda_factors: vec![1.0, 0.5, 0.25, 0.125],
            lambdas: Vec::new(),
            basis: BasisChoice::Positive,
            metric: MetricModel::Flat,
            resolution: Resolution::default(),
        }
    }
}

impl ScanConfig {
    pub fn grid(&self) -> Vec<(f64, f64)> {
        let mut rows = Vec::new();
        for &d in &self.deltas {
            if self.lambdas.is_empty() {
                for &f in &self.lambda_factors {
                    rows.push((d, d.powi(3) * f));
                }
            } else {
                for &l in &self.lambdas {
                    rows.push((d, l));
                }
            }
        }
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows
    }
}

/// One row per `(δ, λ)`, sorted by `(δ, λ)`.
pub fn energy_comparison_scan(bg: &BackgroundConnection, cfg: &ScanConfig) -> Result<Vec<ScanRow>, GluingError> {
    let split = bg.split();
    let basis = bubble_basis(&split, cfg.basis)?;
    let predicted = interaction_prediction(&split, &basis, &cfg.resolution);
    let p = interaction_coefficient(&split, &basis);
    let grid = cfg.grid();
    grid.par_iter()
        .map(|&(delta, lambda)| {
            let g = GluedConnection::new(bg.clone(), lambda, delta, basis)?;
            let s = energy_split_checked(&g, &cfg.metric, &cfg.resolution)?;
            Ok(ScanRow {
                delta,
                lambda,
                e_gain: s.e_gain,
                e_loss: s.e_loss,
                diff: s.diff,
                predicted_per_lambda2: predicted,
                delta_ym: s.delta_ym,
                quad_err: s.quad_err,
                e_inter: s.e_inter,
                interaction_coefficient: p,
                boundary_consistent: g.cutoffs.boundary_consistent(),
                overlap_factor: g.cutoffs.overlap_factor(),
            })
        })
        .collect()
}

/// Intercept at `λ = 0` of the least-squares line through `(λ, diff/λ²)`.
pub fn fitted_limit(rows: &[ScanRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.lambda, r.ratio())).collect();
    linear_fit(&pts).0
}

/// `(intercept, slope)` of the least-squares line.
pub fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return (my, 0.0);
    }
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    (my - slope * mx, slope)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricCorrectionRow {
    pub lambda: f64,
    /// `𝒴ℳ_g(D_stan,λ, B_{λ/δ}) - 𝒴ℳ(D_stan, B_{1/δ})`.
    pub ball: f64,
    /// `𝒴ℳ_g(D_stan,λ, B_δ∖B_{λ/δ}) - 𝒴ℳ(D_stan, B_{δ/λ}∖B_{1/δ})`.
    pub neck: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricCorrectionScan {
    pub rows: Vec<MetricCorrectionRow>,
    pub ball_slope: f64,
    pub neck_slope: f64,
}

/// Metric corrections to the bubble energy for the model metric of `tensor`,
/// with log-log slopes in λ.
pub fn lemma28_scan(
    tensor: &RiemannTensor,
    lambdas: &[f64],
    delta: f64,
    res: &Resolution,
) -> Result<MetricCorrectionScan, GluingError> {
    let metric = MetricModel::ConformalNormal(tensor.clone());
    let rows: Result<Vec<MetricCorrectionRow>, GluingError> = lambdas
        .par_iter()
        .map(|&lambda| {
            if !(lambda > 0.0 && lambda < delta * delta) {
                return Err(GluingError::InvalidParameters(format!("need 0 < λ < δ², got λ = {lambda}, δ = {delta}")));
            }
            let bubble = InstantonGauge::new(GaugeKind::Regular, lambda)?;
            let m = &metric;
            let f = |x: &Point| -> Result<f64, QuadError> {
                let fs = bubble.curvature_closed(x)?;
                // Positivity over the whole ball, not just det > 0.
                m.frame_at(x)?;
                Ok(energy_density_correction(&fs, m, x)?)
            };
            let ball = crate::quadrature::integrate_scalar(&f, &RegionSpec::Ball { r: lambda / delta }, &MetricModel::Flat, res)?;
            let neck = crate::quadrature::integrate_scalar(
                &f,
                &RegionSpec::Annulus { r_in: lambda / delta, r_out: delta },
                &MetricModel::Flat,
                res,
            )?;
            Ok(MetricCorrectionRow { lambda, ball: ball.value, neck: neck.value })
        })
        .collect();
    let rows = rows?;
    let slope = |sel: fn(&MetricCorrectionRow) -> f64| {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.lambda.ln(), sel(r).abs().ln())).collect();
        linear_fit(&pts).1
    };
    let ball_slope = slope(|r| r.ball);
    let neck_slope = slope(|r| r.neck);
    Ok(MetricCorrectionScan { rows, ball_slope, neck_slope })
}

/// Determinant guard used by callers that sample a metric over a ball.
pub fn metric_positive_on_ball(metric: &MetricModel, radius: f64, res: &Resolution) -> bool {
    let rule = SphereRule::new(res.sphere.min(6));
    rule.nodes.iter().all(|(w, _)| {
        let x = w.map(|v| v * radius);
        let g = metric.metric_at(&x);
        mat4_det_inv(&g).0 > 0.0 && metric.frame_at(&x).is_ok()
    })
}
