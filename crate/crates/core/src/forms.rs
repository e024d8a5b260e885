//! Lie-algebra-valued differential forms on ℝ⁴ and on the cylinder ℝ×S³.
//!
//! Every field is represented by its Euclidean coefficients on ℝ⁴ (or on
//! ℝ⁴∖{0}); the cylinder chart reads the same field through the pullback
//! of `Π(t, ω) = eᵗω`, expressed in the orthonormal, positively oriented
//! coframe `(dt, ψ′₁, ψ′₂, ψ′₃)` of the product metric `dt² + dω²`.
//! A 2-form is stored as a full antisymmetric 4×4 array, `ω = Σ_{i<j} ω_ij dxᵢ∧dxⱼ`,
//! with `{dxᵢ∧dxⱼ}_{i<j}` orthonormal.

use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

use crate::algebra::{bracket, inner, Alg};

pub type Point = [f64; 4];
pub type Mat4 = [[f64; 4]; 4];

const UNIT_TOL: f64 = 1e-12;
const TENSOR_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("metric is degenerate at the evaluation point (det = {0})")]
    DegenerateMetric(f64),
    #[error("point outside the field's domain: {0}")]
    OutOfDomain(String),
    #[error("field is singular at the origin")]
    SingularPoint,
    #[error("forms live on different charts")]
    ChartMismatch,
    #[error("coefficient array is not antisymmetric (residual {0:.3e})")]
    NotAntisymmetric(f64),
    #[error("invalid curvature tensor: {0}")]
    InvalidTensor(String),
}

/// Coordinate chart of a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chart {
    Euclidean4,
    Cylinder,
}

/// A cylinder point `(t, ω)` with `|ω| = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylPoint {
    pub t: f64,
    pub omega: Point,
}

impl CylPoint {
    pub fn new(t: f64, omega: Point) -> Result<Self, FieldError> {
        let n = norm4(&omega);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(FieldError::OutOfDomain(format!("|ω| = {n} is not 1")));
        }
        Ok(CylPoint { t, omega })
    }

    /// Normalizes `omega`; for sampling.
    pub fn from_direction(t: f64, dir: Point) -> Self {
        let n = norm4(&dir);
        CylPoint { t, omega: [dir[0] / n, dir[1] / n, dir[2] / n, dir[3] / n] }
    }

    pub fn from_euclidean(x: &Point) -> Result<Self, FieldError> {
        let r = norm4(x);
        if r == 0.0 {
            return Err(FieldError::SingularPoint);
        }
        Ok(CylPoint { t: r.ln(), omega: [x[0] / r, x[1] / r, x[2] / r, x[3] / r] })
    }

    /// `Π(t, ω) = eᵗ ω`.
    pub fn to_euclidean(&self) -> Point {
        let s = self.t.exp();
        [s * self.omega[0], s * self.omega[1], s * self.omega[2], s * self.omega[3]]
    }
}

pub fn norm4(x: &Point) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3]).sqrt()
}

pub fn dot4(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

/// Algebra-valued 1-form coefficients `A = Σ Aᵢ dxᵢ`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OneForm(pub [Alg; 4]);

/// Algebra-valued 2-form coefficients, antisymmetric.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TwoForm(pub [[Alg; 4]; 4]);

/// `jac[i][j] = ∂ᵢ Aⱼ`.
pub type Jacobian = [[Alg; 4]; 4];

impl OneForm {
    pub const ZERO: OneForm = OneForm([Alg::ZERO; 4]);

    /// Real 1-form times a fixed algebra element.
    pub fn from_real(c: &Point, x: Alg) -> Self {
        OneForm([x * c[0], x * c[1], x * c[2], x * c[3]])
    }

    /// Contraction with a vector.
    pub fn contract(&self, v: &Point) -> Alg {
        let mut s = Alg::ZERO;
        for i in 0..4 {
            s += self.0[i] * v[i];
        }
        s
    }

    /// Pointwise norm squared for the flat (or orthonormal-frame) metric.
    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|a| a.norm_sq()).sum()
    }

    pub fn map(&self, f: impl Fn(&Alg) -> Alg) -> OneForm {
        OneForm([f(&self.0[0]), f(&self.0[1]), f(&self.0[2]), f(&self.0[3])])
    }
}

impl Add for OneForm {
    type Output = OneForm;
    fn add(self, o: OneForm) -> OneForm {
        OneForm([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2], self.0[3] + o.0[3]])
    }
}

impl Sub for OneForm {
    type Output = OneForm;
    fn sub(self, o: OneForm) -> OneForm {
        OneForm([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2], self.0[3] - o.0[3]])
    }
}

impl Mul<f64> for OneForm {
    type Output = OneForm;
    fn mul(self, s: f64) -> OneForm {
        self.map(|a| *a * s)
    }
}

impl TwoForm {
    pub const ZERO: TwoForm = TwoForm([[Alg::ZERO; 4]; 4]);

    /// Real antisymmetric coefficients times a fixed algebra element.
    pub fn from_real(c: &Mat4, x: Alg) -> Self {
        let mut f = TwoForm::ZERO;
        for i in 0..4 {
            for j in 0..4 {
                f.0[i][j] = x * c[i][j];
            }
        }
        f
    }

    /// Single component `c dxᵢ∧dxⱼ`.
    pub fn basis(i: usize, j: usize, x: Alg) -> Self {
        let mut f = TwoForm::ZERO;
        f.0[i][j] = x;
        f.0[j][i] = -x;
        f
    }

    /// Real coefficients of one algebra coordinate.
    pub fn component(&self, k: usize) -> Mat4 {
        let mut c = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                c[i][j] = self.0[i][j].0[k];
            }
        }
        c
    }

    pub fn from_components(c: [Mat4; 3]) -> Self {
        let mut f = TwoForm::ZERO;
        for i in 0..4 {
            for j in 0..4 {
                f.0[i][j] = Alg([c[0][i][j], c[1][i][j], c[2][i][j]]);
            }
        }
        f
    }

    pub fn map_real(&self, op: impl Fn(&Mat4) -> Mat4) -> TwoForm {
        TwoForm::from_components([op(&self.component(0)), op(&self.component(1)), op(&self.component(2))])
    }

    /// Max residual of `ω_ij + ω_ji`.
    pub fn antisymmetry_residual(&self) -> f64 {
        let mut r: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let s = self.0[i][j] + self.0[j][i];
                r = r.max(s.0.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            }
        }
        r
    }

    /// Flat pointwise inner product `Σ_{i<j} (ω_ij, η_ij)_g`.
    pub fn inner_flat(&self, o: &TwoForm) -> f64 {
        let mut s = 0.0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                s += inner(&self.0[i][j], &o.0[i][j]);
            }
        }
        s
    }

    pub fn norm_sq_flat(&self) -> f64 {
        self.inner_flat(self)
    }

    /// Largest absolute coordinate over all components.
    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                for v in self.0[i][j].0 {
                    m = m.max(v.abs());
                }
            }
        }
        m
    }
}

impl Add for TwoForm {
    type Output = TwoForm;
    fn add(self, o: TwoForm) -> TwoForm {
        let mut f = self;
        for i in 0..4 {
            for j in 0..4 {
                f.0[i][j] += o.0[i][j];
            }
        }
        f
    }
}

impl Sub for TwoForm {
    type Output = TwoForm;
    fn sub(self, o: TwoForm) -> TwoForm {
        let mut f = self;
        for i in 0..4 {
            for j in 0..4 {
                f.0[i][j] -= o.0[i][j];
            }
        }
        f
    }
}

impl Neg for TwoForm {
    type Output = TwoForm;
    fn neg(self) -> TwoForm {
        self * -1.0
    }
}

impl Mul<f64> for TwoForm {
    type Output = TwoForm;
    fn mul(self, s: f64) -> TwoForm {
        let mut f = self;
        for i in 0..4 {
            for j in 0..4 {
                f.0[i][j] = f.0[i][j] * s;
            }
        }
        f
    }
}

// ---------------------------------------------------------------------------
// 4×4 linear algebra

pub fn mat4_identity() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn mat4_transpose(a: &Mat4) -> Mat4 {
    let mut t = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            t[i][j] = a[j][i];
        }
    }
    t
}

/// Determinant and inverse by Gauss-Jordan with partial pivoting.
pub fn mat4_det_inv(a: &Mat4) -> (f64, Option<Mat4>) {
    let mut m = *a;
    let mut inv = mat4_identity();
    let mut det = 1.0;
    for col in 0..4 {
        let mut piv = col;
        for r in (col + 1)..4 {
            if m[r][col].abs() > m[piv][col].abs() {
                piv = r;
            }
        }
        if m[piv][col] == 0.0 {
            return (0.0, None);
        }
        if piv != col {
            m.swap(piv, col);
            inv.swap(piv, col);
            det = -det;
        }
        let p = m[col][col];
        det *= p;
        for k in 0..4 {
            m[col][k] /= p;
            inv[col][k] /= p;
        }
        for r in 0..4 {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for k in 0..4 {
                        m[r][k] -= f * m[col][k];
                        inv[r][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    (det, Some(inv))
}

/// `det(I + h) - 1` without cancellation, from power traces of `h`.
pub fn det_identity_plus_minus_one(h: &Mat4) -> f64 {
    let h2 = mat4_mul(h, h);
    let h3 = mat4_mul(&h2, h);
    let tr = |m: &Mat4| m[0][0] + m[1][1] + m[2][2] + m[3][3];
    let (p1, p2, p3) = (tr(h), tr(&h2), tr(&h3));
    let p4: f64 = (0..4).map(|i| (0..4).map(|k| h2[i][k] * h2[k][i]).sum::<f64>()).sum();
    let e1 = p1;
    let e2 = (e1 * p1 - p2) / 2.0;
    let e3 = (e2 * p1 - e1 * p2 + p3) / 3.0;
    let e4 = (e3 * p1 - e2 * p2 + e1 * p3 - p4) / 4.0;
    e1 + e2 + e3 + e4
}

// ---------------------------------------------------------------------------
// Curvature tensors and metrics

/// Algebraic curvature tensor `R_{pijq}` at the center of the chart, with the
/// symmetries of the metric model `g_pq = δ_pq + ⅓ R_pijq xᵢxⱼ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiemannTensor {
    c: Vec<f64>,
}

fn ridx(p: usize, i: usize, j: usize, q: usize) -> usize {
    ((p * 4 + i) * 4 + j) * 4 + q
}

/// Residuals of (antisymmetry in (p,i), antisymmetry in (j,q), pair symmetry,
/// first Bianchi, Ricci contraction).
fn tensor_residuals(c: &[f64]) -> [f64; 5] {
    let mut r = [0.0f64; 5];
    for p in 0..4 {
        for i in 0..4 {
            for j in 0..4 {
                for q in 0..4 {
                    let v = c[ridx(p, i, j, q)];
                    r[0] = r[0].max((v + c[ridx(i, p, j, q)]).abs());
                    r[1] = r[1].max((v + c[ridx(p, i, q, j)]).abs());
                    r[2] = r[2].max((v - c[ridx(j, q, p, i)]).abs());
                    r[3] = r[3].max((v + c[ridx(i, j, p, q)] + c[ridx(j, p, i, q)]).abs());
                }
            }
        }
    }
    for i in 0..4 {
        for j in 0..4 {
            let ric: f64 = (0..4).map(|p| c[ridx(p, i, j, p)]).sum();
            r[4] = r[4].max(ric.abs());
        }
    }
    r
}

impl RiemannTensor {
    /// Validated constructor: all symmetries, Bianchi, and `R_pijq δ_pq = 0`.
    pub fn new(components: Vec<f64>) -> Result<Self, FieldError> {
        if components.len() != 256 {
            return Err(FieldError::InvalidTensor(format!("expected 256 components, got {}", components.len())));
        }
        let res = tensor_residuals(&components);
        let names = ["antisymmetry (p,i)", "antisymmetry (j,q)", "pair symmetry", "Bianchi identity", "Ricci-flatness"];
        for (k, name) in names.iter().enumerate() {
            if res[k] > TENSOR_TOL {
                return Err(FieldError::InvalidTensor(format!("{name} violated (residual {:.3e})", res[k])));
            }
        }
        Ok(RiemannTensor { c: components })
    }

    /// Skips all checks. Used for the non-Ricci-flat control in the metric
    /// correction scan.
    pub fn new_unchecked(components: Vec<f64>) -> Self {
        assert_eq!(components.len(), 256);
        RiemannTensor { c: components }
    }

    pub fn zero() -> Self {
        RiemannTensor { c: vec![0.0; 256] }
    }

    /// `κ (δ_pq δ_ij - δ_pj δ_iq)`: constant sectional curvature, so
    /// `R_pijp = 3κ δ_ij` and the tensor is not Ricci-flat.
    pub fn constant_curvature(kappa: f64) -> Self {
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        let mut c = vec![0.0; 256];
        for p in 0..4 {
            for i in 0..4 {
                for j in 0..4 {
                    for q in 0..4 {
                        c[ridx(p, i, j, q)] = kappa * (d(p, q) * d(i, j) - d(p, j) * d(i, q));
                    }
                }
            }
        }
        RiemannTensor { c }
    }

    /// A unit-norm Ricci-flat tensor: the first null vector (in free-variable
    /// order) of the linear symmetry, Bianchi and Ricci constraints.
    pub fn ricci_flat_sample() -> Self {
        let basis = ricci_flat_basis();
        let v = &basis[0];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let c: Vec<f64> = v.iter().map(|x| x / n).collect();
        RiemannTensor::new(c).expect("null vector satisfies the constraints")
    }

    pub fn get(&self, p: usize, i: usize, j: usize, q: usize) -> f64 {
        self.c[ridx(p, i, j, q)]
    }

    pub fn components(&self) -> &[f64] {
        &self.c
    }

    pub fn scaled(&self, s: f64) -> Self {
        RiemannTensor { c: self.c.iter().map(|v| v * s).collect() }
    }

    /// `R_pijp` summed over p.
    pub fn ricci(&self) -> Mat4 {
        let mut r = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                r[i][j] = (0..4).map(|p| self.get(p, i, j, p)).sum();
            }
        }
        r
    }

    /// `h_pq(x) = ⅓ R_pijq xᵢ xⱼ`.
    pub fn perturbation(&self, x: &Point) -> Mat4 {
        let mut h = [[0.0; 4]; 4];
        for p in 0..4 {
            for q in 0..4 {
                let mut s = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        s += self.get(p, i, j, q) * x[i] * x[j];
                    }
                }
                h[p][q] = s / 3.0;
            }
        }
        h
    }
}

/// Null space of the curvature-tensor constraints by Gaussian elimination
/// with first-nonzero pivoting.
pub fn ricci_flat_basis() -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut push = |terms: &[(usize, f64)]| {
        let mut r = vec![0.0; 256];
        for &(k, s) in terms {
            r[k] += s;
        }
        if r.iter().any(|v| *v != 0.0) {
            rows.push(r);
        }
    };
    for p in 0..4 {
        for i in 0..4 {
            for j in 0..4 {
                for q in 0..4 {
                    let v = ridx(p, i, j, q);
                    push(&[(v, 1.0), (ridx(i, p, j, q), 1.0)]);
                    push(&[(v, 1.0), (ridx(p, i, q, j), 1.0)]);
                    push(&[(v, 1.0), (ridx(j, q, p, i), -1.0)]);
                    push(&[(v, 1.0), (ridx(i, j, p, q), 1.0), (ridx(j, p, i, q), 1.0)]);
                }
            }
        }
    }
    for i in 0..4 {
        for j in 0..4 {
            let terms: Vec<(usize, f64)> = (0..4).map(|p| (ridx(p, i, j, p), 1.0)).collect();
            push(&terms);
        }
    }
    null_space(rows, 256)
}

fn null_space(mut rows: Vec<Vec<f64>>, n: usize) -> Vec<Vec<f64>> {
    const EPS: f64 = 1e-10;
    let mut pivots: Vec<usize> = Vec::new();
    let mut r = 0;
    for col in 0..n {
        let Some(pr) = (r..rows.len()).find(|&k| rows[k][col].abs() > EPS) else {
            continue;
        };
        rows.swap(r, pr);
        let p = rows[r][col];
        for v in rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = rows[r].clone();
        for (k, row) in rows.iter_mut().enumerate() {
            if k != r && row[col].abs() > 0.0 {
                let f = row[col];
                for (c, v) in row.iter_mut().enumerate() {
                    *v -= f * pivot_row[c];
                }
            }
        }
        pivots.push(col);
        r += 1;
        if r == rows.len() {
            break;
        }
    }
    let free: Vec<usize> = (0..n).filter(|c| !pivots.contains(c)).collect();
    free.iter()
        .map(|&f| {
            let mut v = vec![0.0; n];
            v[f] = 1.0;
            for (k, &pc) in pivots.iter().enumerate() {
                v[pc] = -rows[k][f];
            }
            v
        })
        .collect()
}

/// Metric models. For `CylinderProduct`, coefficients are taken in the
/// orthonormal cylinder coframe, where the metric is the identity.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricModel {
    Flat,
    CylinderProduct,
    ConformalNormal(RiemannTensor),
}

impl MetricModel {
    pub fn metric_at(&self, x: &Point) -> Mat4 {
        match self {
            MetricModel::Flat | MetricModel::CylinderProduct => mat4_identity(),
            MetricModel::ConformalNormal(r) => {
                let mut g = r.perturbation(x);
                for (i, row) in g.iter_mut().enumerate() {
                    row[i] += 1.0;
                }
                g
            }
        }
    }

    pub fn is_flat(&self) -> bool {
        !matches!(self, MetricModel::ConformalNormal(_))
    }

    /// Metric, inverse and `√det g` at `x`.
    pub fn frame_at(&self, x: &Point) -> Result<MetricFrame, FieldError> {
        let g = self.metric_at(x);
        let (det, inv) = mat4_det_inv(&g);
        if det <= 0.0 || !det.is_finite() {
            return Err(FieldError::DegenerateMetric(det));
        }
        let inv = inv.ok_or(FieldError::DegenerateMetric(det))?;
        // Sylvester: every leading minor positive.
        let m1 = g[0][0];
        let m2 = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        let m3 = g[0][0] * (g[1][1] * g[2][2] - g[1][2] * g[2][1]) - g[0][1] * (g[1][0] * g[2][2] - g[1][2] * g[2][0])
            + g[0][2] * (g[1][0] * g[2][1] - g[1][1] * g[2][0]);
        if m1 <= 0.0 || m2 <= 0.0 || m3 <= 0.0 {
            return Err(FieldError::DegenerateMetric(det));
        }
        Ok(MetricFrame { g, inv, sqrt_det: det.sqrt() })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MetricFrame {
    pub g: Mat4,
    pub inv: Mat4,
    pub sqrt_det: f64,
}

impl MetricFrame {
    pub fn identity() -> Self {
        MetricFrame { g: mat4_identity(), inv: mat4_identity(), sqrt_det: 1.0 }
    }
}

/// Levi-Civita symbol on four indices.
pub fn levi_civita(i: usize, j: usize, k: usize, l: usize) -> f64 {
    let p = [i, j, k, l];
    for a in 0..4 {
        for b in (a + 1)..4 {
            if p[a] == p[b] {
                return 0.0;
            }
        }
    }
    let mut sign = 1.0;
    for a in 0..4 {
        for b in (a + 1)..4 {
            if p[a] > p[b] {
                sign = -sign;
            }
        }
    }
    sign
}

/// `(*ω)_kl = ½ √g ω^{ij} ε_ijkl`, lowered with `g`.
pub fn hodge_star_real(omega: &Mat4, m: &MetricFrame) -> Mat4 {
    // Raise both indices.
    let up = mat4_mul(&mat4_mul(&m.inv, omega), &mat4_transpose(&m.inv));
    // Dual with upper ε density gives a covariant 2-form directly from ω^{ij}.
    let mut s = [[0.0; 4]; 4];
    for k in 0..4 {
        for l in 0..4 {
            let mut v = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    v += up[i][j] * levi_civita(i, j, k, l);
                }
            }
            s[k][l] = 0.5 * m.sqrt_det * v;
        }
    }
    s
}

/// Hodge star of a 2-form at `x` for metric `g`.
pub fn hodge_star(omega: &TwoForm, g: &MetricModel, x: &Point) -> Result<TwoForm, FieldError> {
    let m = g.frame_at(x)?;
    Ok(omega.map_real(|c| hodge_star_real(c, &m)))
}

/// `(ω⁺, ω⁻) = ((ω + *ω)/2, (ω - *ω)/2)`.
pub fn sd_asd_split(omega: &TwoForm, g: &MetricModel, x: &Point) -> Result<(TwoForm, TwoForm), FieldError> {
    let star = hodge_star(omega, g, x)?;
    Ok(((*omega + star) * 0.5, (*omega - star) * 0.5))
}

/// Pointwise inner product of two algebra-valued 2-forms for a metric,
/// `½ g^{ia} g^{jb} (ω_ij, η_ab)`.
pub fn two_form_inner(a: &TwoForm, b: &TwoForm, m: &MetricFrame) -> f64 {
    let mut s = 0.0;
    for k in 0..3 {
        let ak = a.component(k);
        let bk = b.component(k);
        let up = mat4_mul(&mat4_mul(&m.inv, &bk), &mat4_transpose(&m.inv));
        for i in 0..4 {
            for j in 0..4 {
                s += ak[i][j] * up[i][j];
            }
        }
    }
    // ½ from the full double sum, 4 from the algebra normalization.
    0.5 * crate::algebra::INNER_SCALE * s
}

pub fn two_form_norm_sq(a: &TwoForm, g: &MetricModel, x: &Point) -> Result<f64, FieldError> {
    if g.is_flat() {
        return Ok(a.norm_sq_flat());
    }
    Ok(two_form_inner(a, a, &g.frame_at(x)?))
}

/// `|F|²_g √det g - |F|²_flat`, evaluated without cancellation between the
/// two energy densities.
pub fn energy_density_correction(f: &TwoForm, g: &MetricModel, x: &Point) -> Result<f64, FieldError> {
    let MetricModel::ConformalNormal(r) = g else {
        return Ok(0.0);
    };
    let h = r.perturbation(x);
    let mut gm = h;
    for (i, row) in gm.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let (det, inv) = mat4_det_inv(&gm);
    let inv = match inv {
        Some(inv) if det > 0.0 => inv,
        _ => return Err(FieldError::DegenerateMetric(det)),
    };
    // g⁻¹ - I = -(I + h)⁻¹ h
    let mut dinv = mat4_mul(&inv, &h);
    for row in dinv.iter_mut() {
        for v in row.iter_mut() {
            *v = -*v;
        }
    }
    let det_m1 = det_identity_plus_minus_one(&h);
    let sqrt_m1 = det_m1 / ((1.0 + det_m1).sqrt() + 1.0);
    let mut delta_norm = 0.0;
    for k in 0..3 {
        let c = f.component(k);
        // ½ Σ (H_ia δ_jb + δ_ia H_jb + H_ia H_jb) c_ij c_ab = Σ (H c Hᵀ)·c/2 + (H c)·c
        let hc = mat4_mul(&dinv, &c);
        let hch = mat4_mul(&hc, &mat4_transpose(&dinv));
        for i in 0..4 {
            for j in 0..4 {
                delta_norm += hc[i][j] * c[i][j] + 0.5 * hch[i][j] * c[i][j];
            }
        }
    }
    // The two linear terms are equal by antisymmetry, hence the single hc·c.
    let delta_norm = crate::algebra::INNER_SCALE * delta_norm;
    let flat = f.norm_sq_flat();
    Ok((flat + delta_norm) * (1.0 + sqrt_m1) - flat)
}

/// `M_pq = Σ_{s,s'} g^{ss'} (F_ps, F_qs')_g`.
pub fn isotropy_matrix(f: &TwoForm, g: &MetricModel, x: &Point) -> Result<Mat4, FieldError> {
    let m = if g.is_flat() { MetricFrame::identity() } else { g.frame_at(x)? };
    let mut out = [[0.0; 4]; 4];
    for p in 0..4 {
        for q in 0..4 {
            let mut s = 0.0;
            for a in 0..4 {
                for b in 0..4 {
                    if m.inv[a][b] != 0.0 {
                        s += m.inv[a][b] * inner(&f.0[p][a], &f.0[q][b]);
                    }
                }
            }
            out[p][q] = s;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fields, exterior derivative and curvature

/// How `exterior_d` obtains derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivativeMode {
    ClosedForm,
    FiniteDifference(f64),
}

pub const DEFAULT_FD_STEP: f64 = 1e-4;

impl Default for DerivativeMode {
    fn default() -> Self {
        DerivativeMode::ClosedForm
    }
}

/// An algebra-valued 1-form field with Euclidean coefficients.
pub trait OneFormField: Sync {
    fn eval(&self, x: &Point) -> Result<OneForm, FieldError>;

    /// Closed-form `∂ᵢ Aⱼ`, when the field has one.
    fn jacobian(&self, _x: &Point) -> Option<Result<Jacobian, FieldError>> {
        None
    }

    fn chart(&self) -> Chart {
        Chart::Euclidean4
    }
}

impl<F: OneFormField + ?Sized> OneFormField for &F {
    fn eval(&self, x: &Point) -> Result<OneForm, FieldError> {
        (**self).eval(x)
    }
    fn jacobian(&self, x: &Point) -> Option<Result<Jacobian, FieldError>> {
        (**self).jacobian(x)
    }
    fn chart(&self) -> Chart {
        (**self).chart()
    }
}

/// The zero connection.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl OneFormField for ZeroField {
    fn eval(&self, _x: &Point) -> Result<OneForm, FieldError> {
        Ok(OneForm::ZERO)
    }
    fn jacobian(&self, _x: &Point) -> Option<Result<Jacobian, FieldError>> {
        Some(Ok([[Alg::ZERO; 4]; 4]))
    }
}

/// Central-difference Jacobian.
pub fn jacobian_fd<F: OneFormField + ?Sized>(field: &F, x: &Point, h: f64) -> Result<Jacobian, FieldError> {
    let mut jac = [[Alg::ZERO; 4]; 4];
    for i in 0..4 {
        let mut xp = *x;
        let mut xm = *x;
        xp[i] += h;
        xm[i] -= h;
        let ap = field.eval(&xp)?;
        let am = field.eval(&xm)?;
        for j in 0..4 {
            jac[i][j] = (ap.0[j] - am.0[j]) * (0.5 / h);
        }
    }
    Ok(jac)
}

pub fn jacobian_with<F: OneFormField + ?Sized>(field: &F, x: &Point, mode: DerivativeMode) -> Result<Jacobian, FieldError> {
    match mode {
        DerivativeMode::ClosedForm => match field.jacobian(x) {
            Some(j) => j,
            None => jacobian_fd(field, x, DEFAULT_FD_STEP),
        },
        DerivativeMode::FiniteDifference(h) => jacobian_fd(field, x, h),
    }
}

/// `(dA)_ij = ∂ᵢAⱼ - ∂ⱼAᵢ` from a Jacobian.
pub fn d_from_jacobian(jac: &Jacobian) -> TwoForm {
    let mut f = TwoForm::ZERO;
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                f.0[i][j] = jac[i][j] - jac[j][i];
            }
        }
    }
    f
}

pub fn exterior_d<F: OneFormField + ?Sized>(field: &F, x: &Point, mode: DerivativeMode) -> Result<TwoForm, FieldError> {
    Ok(d_from_jacobian(&jacobian_with(field, x, mode)?))
}

/// `[A∧B]_ij = ½([Aᵢ,Bⱼ] - [Aⱼ,Bᵢ])`, so `[A∧A]_ij = [Aᵢ,Aⱼ]`.
pub fn wedge_bracket(a: &OneForm, b: &OneForm) -> TwoForm {
    let mut f = TwoForm::ZERO;
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                f.0[i][j] = (bracket(&a.0[i], &b.0[j]) - bracket(&a.0[j], &b.0[i])) * 0.5;
            }
        }
    }
    f
}

/// Field-level wedge-bracket; both fields must share a chart.
pub fn wedge_bracket_fields<A: OneFormField + ?Sized, B: OneFormField + ?Sized>(
    a: &A,
    b: &B,
    x: &Point,
) -> Result<TwoForm, FieldError> {
    if a.chart() != b.chart() {
        return Err(FieldError::ChartMismatch);
    }
    Ok(wedge_bracket(&a.eval(x)?, &b.eval(x)?))
}

/// Curvature from potential and Jacobian: `Fᵢⱼ = ∂ᵢAⱼ - ∂ⱼAᵢ + [Aᵢ,Aⱼ]`.
pub fn curvature_from_parts(a: &OneForm, jac: &Jacobian) -> TwoForm {
    let mut f = d_from_jacobian(jac);
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                f.0[i][j] += bracket(&a.0[i], &a.0[j]);
            }
        }
    }
    f
}

pub fn curvature<F: OneFormField + ?Sized>(field: &F, x: &Point, mode: DerivativeMode) -> Result<TwoForm, FieldError> {
    let a = field.eval(x)?;
    let jac = jacobian_with(field, x, mode)?;
    Ok(curvature_from_parts(&a, &jac))
}

/// Sum of two fields.
pub struct SumField<A, B>(pub A, pub B);

impl<A: OneFormField, B: OneFormField> OneFormField for SumField<A, B> {
    fn eval(&self, x: &Point) -> Result<OneForm, FieldError> {
        Ok(self.0.eval(x)? + self.1.eval(x)?)
    }
    fn jacobian(&self, x: &Point) -> Option<Result<Jacobian, FieldError>> {
        let ja = self.0.jacobian(x)?;
        let jb = self.1.jacobian(x)?;
        Some(ja.and_then(|ja| {
            let jb = jb?;
            let mut j = ja;
            for i in 0..4 {
                for k in 0..4 {
                    j[i][k] += jb[i][k];
                }
            }
            Ok(j)
        }))
    }
}

/// The field pulled back by the orientation-reversing swap `x₃ ↔ x₄`.
pub struct OrientationReversed<F>(pub F);

fn swap34(x: &Point) -> Point {
    [x[0], x[1], x[3], x[2]]
}

impl<F: OneFormField> OneFormField for OrientationReversed<F> {
    fn eval(&self, x: &Point) -> Result<OneForm, FieldError> {
        let a = self.0.eval(&swap34(x))?;
        Ok(OneForm([a.0[0], a.0[1], a.0[3], a.0[2]]))
    }
    fn jacobian(&self, x: &Point) -> Option<Result<Jacobian, FieldError>> {
        let p = [0usize, 1, 3, 2];
        Some(self.0.jacobian(&swap34(x))?.map(|j| {
            let mut out = [[Alg::ZERO; 4]; 4];
            for i in 0..4 {
                for k in 0..4 {
                    out[i][k] = j[p[i]][p[k]];
                }
            }
            out
        }))
    }
}

/// A field with a constant adjoint rotation applied to its coefficients.
pub struct GaugeRotated<F> {
    pub field: F,
    pub rotation: crate::algebra::Mat3,
}

impl<F: OneFormField> OneFormField for GaugeRotated<F> {
    fn eval(&self, x: &Point) -> Result<OneForm, FieldError> {
        Ok(self.field.eval(x)?.map(|a| Alg(crate::algebra::mat3_apply(&self.rotation, &a.0))))
    }
    fn jacobian(&self, x: &Point) -> Option<Result<Jacobian, FieldError>> {
        Some(self.field.jacobian(x)?.map(|j| {
            let mut out = j;
            for row in out.iter_mut() {
                for a in row.iter_mut() {
                    *a = Alg(crate::algebra::mat3_apply(&self.rotation, &a.0));
                }
            }
            out
        }))
    }
}

// ---------------------------------------------------------------------------
// Cylinder chart

/// Columns `(ω, V₁, V₂, V₃)` where `Vₐ` are the vector fields dual to ψₐ.
/// Orthogonal with determinant +1, so `(dt, ψ′₁, ψ′₂, ψ′₃)` is an oriented
/// orthonormal coframe of `dt² + dω²`.
pub fn cylinder_frame(omega: &Point) -> Mat4 {
    let [x1, x2, x3, x4] = *omega;
    let cols = [[x1, x2, x3, x4], [-x2, x1, -x4, x3], [-x3, x4, x1, -x2], [-x4, -x3, x2, x1]];
    let mut o = [[0.0; 4]; 4];
    for (a, col) in cols.iter().enumerate() {
        for i in 0..4 {
            o[i][a] = col[i];
        }
    }
    o
}

/// `Π*` of a Euclidean 1-form at `Π(p)`, in the cylinder coframe.
pub fn pullback_one(a: &OneForm, p: &CylPoint) -> OneForm {
    let o = cylinder_frame(&p.omega);
    let s = p.t.exp();
    let mut out = OneForm::ZERO;
    for b in 0..4 {
        let mut v = Alg::ZERO;
        for i in 0..4 {
            v += a.0[i] * o[i][b];
        }
        out.0[b] = v * s;
    }
    out
}

pub fn pullback_real_one(c: &Point, p: &CylPoint) -> Point {
    let o = cylinder_frame(&p.omega);
    let s = p.t.exp();
    let mut out = [0.0; 4];
    for b in 0..4 {
        out[b] = s * (0..4).map(|i| c[i] * o[i][b]).sum::<f64>();
    }
    out
}

/// `Π*` of a Euclidean 2-form at `Π(p)`, in the cylinder coframe.
pub fn pullback_two(f: &TwoForm, p: &CylPoint) -> TwoForm {
    let o = cylinder_frame(&p.omega);
    let s = (2.0 * p.t).exp();
    f.map_real(|c| {
        let m = mat4_mul(&mat4_mul(&mat4_transpose(&o), c), &o);
        let mut out = m;
        for row in out.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        out
    })
}

/// A Euclidean field read in the cylinder chart on `t ∈ [t_min, t_max]`.
pub struct CylinderField<F> {
    pub field: F,
    pub t_min: f64,
    pub t_max: f64,
}

impl<F: OneFormField> CylinderField<F> {
    pub fn new(field: F, t_min: f64, t_max: f64) -> Self {
        CylinderField { field, t_min, t_max }
    }

    fn check(&self, p: &CylPoint) -> Result<(), FieldError> {
        if p.t < self.t_min || p.t > self.t_max {
            return Err(FieldError::OutOfDomain(format!("t = {} outside [{}, {}]", p.t, self.t_min, self.t_max)));
        }
        Ok(())
    }

    pub fn chart(&self) -> Chart {
        Chart::Cylinder
    }

    pub fn eval_at(&self, p: &CylPoint) -> Result<OneForm, FieldError> {
        self.check(p)?;
        Ok(pullback_one(&self.field.eval(&p.to_euclidean())?, p))
    }

    pub fn exterior_d_at(&self, p: &CylPoint, mode: DerivativeMode) -> Result<TwoForm, FieldError> {
        self.check(p)?;
        Ok(pullback_two(&exterior_d(&self.field, &p.to_euclidean(), mode)?, p))
    }

    pub fn curvature_at(&self, p: &CylPoint, mode: DerivativeMode) -> Result<TwoForm, FieldError> {
        self.check(p)?;
        Ok(pullback_two(&curvature(&self.field, &p.to_euclidean(), mode)?, p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instanton::{linear_form, Family};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut ChaCha8Rng, scale: f64) -> Point {
        [rng.gen_range(-scale..scale), rng.gen_range(-scale..scale), rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)]
    }

    fn random_two(rng: &mut ChaCha8Rng) -> TwoForm {
        let mut f = TwoForm::ZERO;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let a = Alg([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
                f.0[i][j] = a;
                f.0[j][i] = -a;
            }
        }
        f
    }

    fn weyl_metric() -> MetricModel {
        MetricModel::ConformalNormal(RiemannTensor::ricci_flat_sample())
    }

    #[test]
    fn flat_star_of_basis() {
        let s = hodge_star(&TwoForm::basis(0, 1, Alg::I), &MetricModel::Flat, &[0.0; 4]).unwrap();
        assert_eq!(s, TwoForm::basis(2, 3, Alg::I));
        let s = hodge_star(&TwoForm::basis(0, 2, Alg::I), &MetricModel::Flat, &[0.0; 4]).unwrap();
        assert_eq!(s, TwoForm::basis(3, 1, Alg::I));
    }

    #[test]
    fn split_of_basis_form() {
        let (p, m) = sd_asd_split(&TwoForm::basis(0, 1, Alg::I), &MetricModel::Flat, &[0.0; 4]).unwrap();
        let half = TwoForm::basis(0, 1, Alg::I * 0.5);
        assert_eq!(p, half + TwoForm::basis(2, 3, Alg::I * 0.5));
        assert_eq!(m, half - TwoForm::basis(2, 3, Alg::I * 0.5));
    }

    #[test]
    fn star_is_an_involution_for_every_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let metrics = [MetricModel::Flat, MetricModel::CylinderProduct, weyl_metric(), MetricModel::ConformalNormal(RiemannTensor::constant_curvature(0.3))];
        for g in &metrics {
            for _ in 0..50 {
                let x = random_point(&mut rng, 0.8);
                let w = random_two(&mut rng);
                let ss = hodge_star(&hodge_star(&w, g, &x).unwrap(), g, &x).unwrap();
                assert!((ss - w).max_abs() < 1e-10);
                let (p, m) = sd_asd_split(&w, g, &x).unwrap();
                assert!((hodge_star(&p, g, &x).unwrap() - p).max_abs() < 1e-10);
                assert!((hodge_star(&m, g, &x).unwrap() + m).max_abs() < 1e-10);
                let fr = g.frame_at(&x).unwrap();
                assert!(two_form_inner(&p, &m, &fr).abs() < 1e-10);
                let total = two_form_inner(&w, &w, &fr);
                assert!((total - two_form_inner(&p, &p, &fr) - two_form_inner(&m, &m, &fr)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn degenerate_metric_is_rejected() {
        let g = MetricModel::ConformalNormal(RiemannTensor::constant_curvature(-3.0));
        let err = hodge_star(&TwoForm::basis(0, 1, Alg::I), &g, &[2.0, 0.0, 0.0, 0.0]);
        assert!(matches!(err, Err(FieldError::DegenerateMetric(_))));
    }

    #[test]
    fn d_theta_closed_form_and_fd() {
        let theta = linear_form(Family::Theta, 0, Alg::I);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random_point(&mut rng, 2.0);
            let d = exterior_d(&theta, &x, DerivativeMode::ClosedForm).unwrap();
            let expect = TwoForm::basis(0, 1, Alg::I * 2.0) - TwoForm::basis(2, 3, Alg::I * 2.0);
            assert!((d - expect).max_abs() < 1e-14);
            let fd = exterior_d(&theta, &x, DerivativeMode::FiniteDifference(1e-4)).unwrap();
            assert!((fd - expect).max_abs() < 1e-8);
        }
        let d0 = exterior_d(&ZeroField, &[1.0, 2.0, 3.0, 4.0], DerivativeMode::FiniteDifference(1e-4)).unwrap();
        assert_eq!(d0, TwoForm::ZERO);
    }

    #[test]
    fn wedge_bracket_examples() {
        let a = OneForm([Alg::I, Alg::ZERO, Alg::ZERO, Alg::ZERO]);
        let b = OneForm([Alg::ZERO, Alg::J, Alg::ZERO, Alg::ZERO]);
        let w = wedge_bracket(&a, &b);
        assert_eq!(w.0[0][1], Alg::K);
        assert_eq!(w.0[1][0], -Alg::K);
        assert_eq!(w.antisymmetry_residual(), 0.0);
        let single = OneForm([Alg::ZERO, Alg::new(0.3, -1.0, 2.0), Alg::ZERO, Alg::ZERO]);
        assert_eq!(wedge_bracket(&single, &single), TwoForm::ZERO);
        // [A∧A]_ij = [Aᵢ, Aⱼ]
        let aa = a + b;
        assert_eq!(wedge_bracket(&aa, &aa).0[0][1], bracket(&Alg::I, &Alg::J));
    }

    #[test]
    fn wedge_bracket_chart_mismatch() {
        struct OnCylinder;
        impl OneFormField for OnCylinder {
            fn eval(&self, _x: &Point) -> Result<OneForm, FieldError> {
                Ok(OneForm::ZERO)
            }
            fn chart(&self) -> Chart {
                Chart::Cylinder
            }
        }
        assert_eq!(wedge_bracket_fields(&ZeroField, &OnCylinder, &[1.0; 4]), Err(FieldError::ChartMismatch));
    }

    #[test]
    fn riemann_sample_is_weyl() {
        let basis = ricci_flat_basis();
        assert_eq!(basis.len(), 10);
        let r = RiemannTensor::ricci_flat_sample();
        let n: f64 = r.components().iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
        let ric = r.ricci();
        assert!(ric.iter().flatten().all(|v| v.abs() < 1e-12));
        // The constant-curvature tensor satisfies the symmetries but not Ricci-flatness.
        let err = RiemannTensor::new(RiemannTensor::constant_curvature(1.0).components().to_vec());
        assert!(matches!(err, Err(FieldError::InvalidTensor(m)) if m.contains("Ricci")));
        let mut broken = r.components().to_vec();
        broken[ridx(0, 1, 2, 3)] += 0.1;
        assert!(RiemannTensor::new(broken).is_err());
    }

    #[test]
    fn conformal_normal_metric_properties() {
        let r = RiemannTensor::ricci_flat_sample();
        let g = MetricModel::ConformalNormal(r.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let x = random_point(&mut rng, 0.5);
            let m = g.metric_at(&x);
            for p in 0..4 {
                for q in 0..4 {
                    assert!((m[p][q] - m[q][p]).abs() < 1e-14);
                }
            }
            // Radial lines: g(x)·x = x.
            let gx: Vec<f64> = (0..4).map(|p| (0..4).map(|q| m[p][q] * x[q]).sum()).collect();
            for p in 0..4 {
                assert!((gx[p] - x[p]).abs() < 1e-14);
            }
            let (det, _) = mat4_det_inv(&m);
            let r = norm4(&x);
            worst = worst.max((det - 1.0).abs() / r.powi(3));
            let accurate = det_identity_plus_minus_one(&r_h(&g, &x));
            assert!((accurate - (det - 1.0)).abs() < 1e-13);
        }
        assert!(worst < 1.0, "|det g - 1| / |x|³ = {worst}");
    }

    fn r_h(g: &MetricModel, x: &Point) -> Mat4 {
        match g {
            MetricModel::ConformalNormal(r) => r.perturbation(x),
            _ => [[0.0; 4]; 4],
        }
    }

    #[test]
    fn energy_correction_matches_direct_difference() {
        let g = MetricModel::ConformalNormal(RiemannTensor::constant_curvature(0.4));
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let x = random_point(&mut rng, 0.7);
            let f = random_two(&mut rng);
            let fr = g.frame_at(&x).unwrap();
            let direct = two_form_inner(&f, &f, &fr) * fr.sqrt_det - f.norm_sq_flat();
            let c = energy_density_correction(&f, &g, &x).unwrap();
            assert!((direct - c).abs() < 1e-12 * (1.0 + f.norm_sq_flat()));
        }
    }

    #[test]
    fn cylinder_frame_is_oriented_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let p = CylPoint::from_direction(0.0, random_point(&mut rng, 1.0));
            let o = cylinder_frame(&p.omega);
            let oto = mat4_mul(&mat4_transpose(&o), &o);
            let (det, _) = mat4_det_inv(&o);
            assert!((det - 1.0).abs() < 1e-12);
            for i in 0..4 {
                for j in 0..4 {
                    assert!((oto[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
        assert!(CylPoint::new(0.0, [1.0, 1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn cylinder_field_domain() {
        let f = CylinderField::new(ZeroField, -1.0, 1.0);
        let p = CylPoint::new(2.0, [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(f.eval_at(&p), Err(FieldError::OutOfDomain(_))));
        assert_eq!(f.chart(), Chart::Cylinder);
    }
}
