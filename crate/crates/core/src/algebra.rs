//! The Lie algebra so(3) ≅ su(2).
//!
//! Elements are stored as coefficients in the ordered basis (𝐢, 𝐣, 𝐤) of
//! quaternionic su(2). The inner product is `-2 tr(XY)` in the 2×2 picture,
//! so every basis vector has squared norm 4, and the bracket is the matrix
//! commutator, `[𝐢, 𝐣] = 2𝐤`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use thiserror::Error;

/// Tag written into every output so results carry their normalization.
pub const NORMALIZATION_TAG: &str = "inner=-2tr";

/// Scale factor between `inner` and the coordinate dot product.
pub const INNER_SCALE: f64 = 4.0;

const ROTATION_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgebraError {
    #[error("matrix is not a rotation (orthogonality residual {orth:.3e}, det {det})")]
    NotARotation { orth: f64, det: f64 },
    #[error("all three vectors vanish; no positive basis exists")]
    AllZero,
}

/// An element of so(3) ≅ su(2).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Alg(pub [f64; 3]);

impl Alg {
    pub const ZERO: Alg = Alg([0.0; 3]);
    pub const I: Alg = Alg([1.0, 0.0, 0.0]);
    pub const J: Alg = Alg([0.0, 1.0, 0.0]);
    pub const K: Alg = Alg([0.0, 0.0, 1.0]);

    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Alg([a, b, c])
    }

    /// Basis element 𝐢, 𝐣 or 𝐤 for `k` = 0, 1, 2.
    pub fn basis(k: usize) -> Self {
        let mut c = [0.0; 3];
        c[k] = 1.0;
        Alg(c)
    }

    pub fn coords(&self) -> [f64; 3] {
        self.0
    }

    pub fn dot(&self, other: &Alg) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1] + self.0[2] * other.0[2]
    }

    pub fn norm_sq(&self) -> f64 {
        inner(self, self)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Add for Alg {
    type Output = Alg;
    fn add(self, o: Alg) -> Alg {
        Alg([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl AddAssign for Alg {
    fn add_assign(&mut self, o: Alg) {
        for k in 0..3 {
            self.0[k] += o.0[k];
        }
    }
}

impl Sub for Alg {
    type Output = Alg;
    fn sub(self, o: Alg) -> Alg {
        Alg([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl SubAssign for Alg {
    fn sub_assign(&mut self, o: Alg) {
        for k in 0..3 {
            self.0[k] -= o.0[k];
        }
    }
}

impl Neg for Alg {
    type Output = Alg;
    fn neg(self) -> Alg {
        Alg([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl Mul<f64> for Alg {
    type Output = Alg;
    fn mul(self, s: f64) -> Alg {
        Alg([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
}

impl Mul<Alg> for f64 {
    type Output = Alg;
    fn mul(self, x: Alg) -> Alg {
        x * self
    }
}

/// `(X, Y)_g = -2 tr(XY) = 4 (x · y)`.
pub fn inner(x: &Alg, y: &Alg) -> f64 {
    INNER_SCALE * x.dot(y)
}

/// Matrix commutator `[X, Y]`; in coordinates `2 (x × y)`.
pub fn bracket(x: &Alg, y: &Alg) -> Alg {
    let a = x.0;
    let b = y.0;
    Alg([
        2.0 * (a[1] * b[2] - a[2] * b[1]),
        2.0 * (a[2] * b[0] - a[0] * b[2]),
        2.0 * (a[0] * b[1] - a[1] * b[0]),
    ])
}

pub type Mat3 = [[f64; 3]; 3];

pub fn mat3_identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn mat3_apply(a: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn mat3_det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Max-entry residual of `RᵀR - I`.
pub fn orthogonality_residual(r: &Mat3) -> f64 {
    let rtr = mat3_mul(&mat3_transpose(r), r);
    let id = mat3_identity();
    let mut res: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            res = res.max((rtr[i][j] - id[i][j]).abs());
        }
    }
    res
}

/// Adjoint action of a rotation on the algebra: coordinates map to `R·x`.
pub fn adjoint_rotate(r: &Mat3, x: &Alg) -> Result<Alg, AlgebraError> {
    let orth = orthogonality_residual(r);
    let det = mat3_det(r);
    if orth > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
        return Err(AlgebraError::NotARotation { orth, det });
    }
    Ok(Alg(mat3_apply(r, &x.0)))
}

/// Orthonormal (after dividing by 2) oriented basis of the algebra.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgBasis {
    pub e: [Alg; 3],
    pub orientation: i8,
}

impl AlgBasis {
    pub fn identity() -> Self {
        AlgBasis { e: [Alg::I, Alg::J, Alg::K], orientation: 1 }
    }

    /// Basis from three unit coordinate vectors. The orientation is read from
    /// the determinant.
    pub fn from_unit_vectors(e: [[f64; 3]; 3]) -> Self {
        let m = [e[0], e[1], e[2]];
        let orientation = if mat3_det(&m) >= 0.0 { 1 } else { -1 };
        AlgBasis { e: [Alg(e[0]), Alg(e[1]), Alg(e[2])], orientation }
    }

    /// Rows are the basis vectors in coordinates.
    pub fn matrix(&self) -> Mat3 {
        [self.e[0].0, self.e[1].0, self.e[2].0]
    }

    /// Rotation sending (𝐢, 𝐣, 𝐤) to (e₁, e₂, e₃); columns are the eᵢ.
    pub fn rotation(&self) -> Mat3 {
        mat3_transpose(&self.matrix())
    }

    /// Max residual of `inner(eᵢ, eⱼ) - 4δᵢⱼ`, measured on the unit vectors.
    pub fn orthonormality_residual(&self) -> f64 {
        let mut res: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                res = res.max((self.e[i].dot(&self.e[j]) - target).abs());
            }
        }
        res
    }

    pub fn determinant(&self) -> f64 {
        mat3_det(&self.matrix())
    }

    /// `Σ Fᵢ · eᵢ` with the coordinate dot product.
    pub fn objective(&self, f: &[[f64; 3]; 3]) -> f64 {
        (0..3).map(|i| dot3(&f[i], &self.e[i].0)).sum()
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn scale3(a: &[f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Any unit vector orthogonal to `u` (|u| = 1), chosen from the coordinate
/// axis least aligned with it.
fn orthogonal_unit(u: &[f64; 3]) -> [f64; 3] {
    let mut axis = 0;
    for k in 1..3 {
        if u[k].abs() < u[axis].abs() {
            axis = k;
        }
    }
    let mut a = [0.0; 3];
    a[axis] = 1.0;
    let v = sub3(&a, &scale3(u, dot3(&a, u)));
    scale3(&v, 1.0 / norm3(&v))
}

// Relative size below which a Gram-Schmidt residual counts as linear dependence.
const DEPENDENCE_TOL: f64 = 1e-12;

/// Oriented orthonormal basis with `F₁·e₁ + F₂·e₂ + F₃·e₃ > 0`, built by the
/// three-case construction: `e` of the longest vector first, then
/// Gram-Schmidt on the next independent one, the last vector fixed by the
/// orientation.
pub fn choose_positive_basis(f: [[f64; 3]; 3], orientation: i8) -> Result<AlgBasis, AlgebraError> {
    let sign = if orientation >= 0 { 1.0 } else { -1.0 };
    // Sort by decreasing norm; the stable sort keeps original order on ties.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| norm3(&f[b]).partial_cmp(&norm3(&f[a])).unwrap_or(std::cmp::Ordering::Equal));
    let g = [f[order[0]], f[order[1]], f[order[2]]];
    let n1 = norm3(&g[0]);
    if n1 == 0.0 || !n1.is_finite() {
        return Err(AlgebraError::AllZero);
    }
    let e1 = scale3(&g[0], 1.0 / n1);

    // Sorted slots (s1, s2, s3) receive (e1, e2, e3); the orientation is
    // fixed in the original index order afterwards.
    let perp = |v: &[f64; 3]| sub3(v, &scale3(&e1, dot3(v, &e1)));
    let r2 = perp(&g[1]);
    let r3 = perp(&g[2]);
    let (e2, e3) = if norm3(&r2) > DEPENDENCE_TOL * n1 {
        // Case (2): F₁, F₂ independent.
        let e2 = scale3(&r2, 1.0 / norm3(&r2));
        (e2, cross3(&e1, &e2))
    } else if norm3(&r3) > DEPENDENCE_TOL * n1 {
        // Case (3): F₁, F₃ independent.
        let e3 = scale3(&r3, 1.0 / norm3(&r3));
        (cross3(&e3, &e1), e3)
    } else {
        // Case (1): everything is parallel to F₁.
        let e2 = orthogonal_unit(&e1);
        (e2, cross3(&e1, &e2))
    };
    let mut sorted = [e1, e2, e3];
    // The free vector of the case is the one that may be flipped.
    let free = if norm3(&r2) > DEPENDENCE_TOL * n1 || norm3(&r3) <= DEPENDENCE_TOL * n1 { 2 } else { 1 };
    let mut out = [[0.0; 3]; 3];
    for (slot, &orig) in order.iter().enumerate() {
        out[orig] = sorted[slot];
    }
    if mat3_det(&out).signum() != sign {
        sorted[free] = scale3(&sorted[free], -1.0);
        for (slot, &orig) in order.iter().enumerate() {
            out[orig] = sorted[slot];
        }
    }
    let basis = AlgBasis::from_unit_vectors(out);
    debug_assert_eq!(basis.orientation as f64, sign);
    Ok(basis)
}
