//! The standard charge-one instanton on ℝ⁴ in two gauges.
//!
//! Both gauges have the shape `A = f(|x|²) Σₖ Lₖ(x) eₖ`, where `Lₖ` is one of
//! the linear 1-forms θₖ or ψₖ and `(e₁, e₂, e₃)` is the bubble basis, so the
//! connection, its Jacobian and its curvature are all available in closed
//! form.

use thiserror::Error;

use crate::algebra::{Alg, AlgBasis};
use crate::forms::{
    pullback_one, CylPoint, FieldError, Jacobian, Mat4, OneForm, OneFormField, Point, TwoForm,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InstantonError {
    #[error("instanton scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("bubble basis must be orthonormal with the orientation required by the gauge")]
    BadBasis,
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// The two families of linear 1-forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// ASD family θₖ, e.g. `θ₁ = x₁dx₂ - x₂dx₁ - x₃dx₄ + x₄dx₃`.
    Theta,
    /// SD family ψₖ, e.g. `ψ₁ = x₁dx₂ - x₂dx₁ + x₃dx₄ - x₄dx₃`.
    Psi,
}

/// Coefficient matrix `M` with `Lₖ(x)ⱼ = Σᵢ M[j][i] xᵢ`, for `k ∈ 0..3`.
pub fn linear_matrix(family: Family, k: usize) -> Mat4 {
    let rows: [[f64; 4]; 4] = match (family, k) {
        (Family::Theta, 0) => [[0., -1., 0., 0.], [1., 0., 0., 0.], [0., 0., 0., 1.], [0., 0., -1., 0.]],
        (Family::Theta, 1) => [[0., 0., -1., 0.], [0., 0., 0., -1.], [1., 0., 0., 0.], [0., 1., 0., 0.]],
        (Family::Theta, 2) => [[0., 0., 0., -1.], [0., 0., 1., 0.], [0., -1., 0., 0.], [1., 0., 0., 0.]],
        (Family::Psi, 0) => [[0., -1., 0., 0.], [1., 0., 0., 0.], [0., 0., 0., -1.], [0., 0., 1., 0.]],
        (Family::Psi, 1) => [[0., 0., -1., 0.], [0., 0., 0., 1.], [1., 0., 0., 0.], [0., -1., 0., 0.]],
        (Family::Psi, 2) => [[0., 0., 0., -1.], [0., 0., -1., 0.], [0., 1., 0., 0.], [1., 0., 0., 0.]],
        _ => panic!("linear form index {k} out of range"),
    };
    rows
}

fn apply(m: &Mat4, x: &Point) -> Point {
    let mut c = [0.0; 4];
    for j in 0..4 {
        c[j] = (0..4).map(|i| m[j][i] * x[i]).sum();
    }
    c
}

/// Real coefficients of θₖ at `x` (`k ∈ 0..3`).
pub fn theta(k: usize, x: &Point) -> Point {
    apply(&linear_matrix(Family::Theta, k), x)
}

/// Real coefficients of ψₖ at `x` (`k ∈ 0..3`).
pub fn psi(k: usize, x: &Point) -> Point {
    apply(&linear_matrix(Family::Psi, k), x)
}

/// Constant coefficients of `dLₖ`: `(dL)_ij = M[j][i] - M[i][j]`.
pub fn d_linear(family: Family, k: usize) -> Mat4 {
    let m = linear_matrix(family, k);
    let mut d = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            d[i][j] = m[j][i] - m[i][j];
        }
    }
    d
}

/// The field `Lₖ · X` for a fixed algebra element `X`.
#[derive(Debug, Clone, Copy)]
pub struct LinearForm {
    pub family: Family,
    pub k: usize,
    pub alg: Alg,
}

pub fn linear_form(family: Family, k: usize, alg: Alg) -> LinearForm {
    LinearForm { family, k, alg }
}

impl OneFormField for LinearForm {
    fn eval(&self, x: &Point) -> Result<OneForm, FieldError> {
        Ok(OneForm::from_real(&apply(&linear_matrix(self.family, self.k), x), self.alg))
    }

    fn jacobian(&self, _x: &Point) -> Option<Result<Jacobian, FieldError>> {
        let m = linear_matrix(self.family, self.k);
        let mut j = [[Alg::ZERO; 4]; 4];
        for i in 0..4 {
            for l in 0..4 {
                j[i][l] = self.alg * m[l][i];
            }
        }
        Some(Ok(j))
    }
}

/// `τ(x) = (x₁, x₂, x₄, x₃)/|x|²`: inversion composed with `x₃ ↔ x₄`.
pub fn trans(x: &Point) -> Result<Point, FieldError> {
    let s = x.iter().map(|v| v * v).sum::<f64>();
    if s == 0.0 {
        return Err(FieldError::SingularPoint);
    }
    Ok([x[0] / s, x[1] / s, x[3] / s, x[2] / s])
}

/// `J[a][i] = ∂τₐ/∂xᵢ`.
pub fn trans_jacobian(x: &Point) -> Result<Mat4, FieldError> {
    let s = x.iter().map(|v| v * v).sum::<f64>();
    if s == 0.0 {
        return Err(FieldError::SingularPoint);
    }
    let perm = [0usize, 1, 3, 2];
    let mut j = [[0.0; 4]; 4];
    for a in 0..4 {
        let src = perm[a];
        for i in 0..4 {
            let delta = if src == i { 1.0 } else { 0.0 };
            j[a][i] = delta / s - 2.0 * x[src] * x[i] / (s * s);
        }
    }
    Ok(j)
}

/// Pullback of a 2-form by `τ`, with the orientation check.
pub fn trans_pullback_two(f_at_image: &TwoForm, x: &Point) -> Result<TwoForm, FieldError> {
    let j = trans_jacobian(x)?;
    let (det, _) = crate::forms::mat4_det_inv(&j);
    assert!(det > 0.0, "τ must preserve orientation (det = {det})");
    Ok(f_at_image.map_real(|c| {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for l in 0..4 {
                let mut v = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        v += j[a][i] * j[b][l] * c[a][b];
                    }
                }
                out[i][l] = v;
            }
        }
        out
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaugeKind {
    /// `A = Σ θₖ eₖ / (λ² + |x|²)`, smooth on ℝ⁴.
    Regular,
    /// `A = λ² Σ ψₖ eₖ / ((λ² + |x|²)|x|²)`, smooth on ℝ⁴∖{0}. The frame
    /// `(e₁, e₂, e₃)` must be negatively oriented: `τ* θ₂ = ψ₃/|x|⁴` and
    /// `τ* θ₃ = ψ₂/|x|⁴`, so the pullback of the Regular gauge in the frame
    /// `(𝐢, 𝐣, 𝐤)` is the Inverted gauge in the frame `(𝐢, 𝐤, 𝐣)`.
    Inverted,
}

impl GaugeKind {
    /// Orientation a bubble basis must have for the connection to be ASD.
    pub fn required_orientation(self) -> i8 {
        match self {
            GaugeKind::Regular => 1,
            GaugeKind::Inverted => -1,
        }
    }

    pub fn default_basis(self) -> AlgBasis {
        match self {
            GaugeKind::Regular => AlgBasis::identity(),
            GaugeKind::Inverted => AlgBasis::from_unit_vectors([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]),
        }
    }
}

/// The scaled instanton `D_stan,λ` in a chosen gauge and bubble basis.
#[derive(Debug, Clone, PartialEq)]
pub struct InstantonGauge {
    pub kind: GaugeKind,
    pub lambda: f64,
    pub basis: AlgBasis,
}

impl InstantonGauge {
    pub fn new(kind: GaugeKind, lambda: f64) -> Result<Self, InstantonError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(InstantonError::InvalidScale(lambda));
        }
        Ok(InstantonGauge { kind, lambda, basis: kind.default_basis() })
    }

    pub fn with_basis(mut self, basis: AlgBasis) -> Result<Self, InstantonError> {
        let det = basis.determinant() * f64::from(self.kind.required_orientation());
        if det <= 0.0 || basis.orthonormality_residual() > 1e-10 {
            return Err(InstantonError::BadBasis);
        }
        self.basis = basis;
        Ok(self)
    }

    fn family(&self) -> Family {
        match self.kind {
            GaugeKind::Regular => Family::Theta,
            GaugeKind::Inverted => Family::Psi,
        }
    }

    fn e(&self, k: usize) -> Alg {
        self.basis.e[k]
    }

    /// Radial profile `f(s)` and `f′(s)` at `s = |x|²`.
    fn profile(&self, s: f64) -> Result<(f64, f64), FieldError> {
        let l2 = self.lambda * self.lambda;
        match self.kind {
            GaugeKind::Regular => {
                let d = l2 + s;
                Ok((1.0 / d, -1.0 / (d * d)))
            }
            GaugeKind::Inverted => {
                if s == 0.0 {
                    return Err(FieldError::SingularPoint);
                }
                let d = l2 + s;
                Ok((l2 / (d * s), -l2 * (l2 + 2.0 * s) / (d * d * s * s)))
            }
        }
    }

    pub fn connection(&self, x: &Point) -> Result<OneForm, FieldError> {
        let s = x.iter().map(|v| v * v).sum::<f64>();
        let (f, _) = self.profile(s)?;
        let fam = self.family();
        let mut a = OneForm::ZERO;
        for k in 0..3 {
            let c = apply(&linear_matrix(fam, k), x);
            let e = self.e(k);
            for j in 0..4 {
                a.0[j] += e * (f * c[j]);
            }
        }
        Ok(a)
    }

    fn jacobian_closed(&self, x: &Point) -> Result<Jacobian, FieldError> {
        let s = x.iter().map(|v| v * v).sum::<f64>();
        let (f, fp) = self.profile(s)?;
        let fam = self.family();
        let mut jac = [[Alg::ZERO; 4]; 4];
        for k in 0..3 {
            let m = linear_matrix(fam, k);
            let c = apply(&m, x);
            let e = self.e(k);
            for i in 0..4 {
                for j in 0..4 {
                    jac[i][j] += e * (2.0 * x[i] * fp * c[j] + f * m[j][i]);
                }
            }
        }
        Ok(jac)
    }

    /// Closed-form curvature. Regular gauge:
    /// `F = λ²/(λ² + |x|²)² Σ dθₖ eₖ`; Inverted gauge: the `τ`-pullback of
    /// the Regular curvature at scale `1/λ`.
    pub fn curvature_closed(&self, x: &Point) -> Result<TwoForm, FieldError> {
        match self.kind {
            GaugeKind::Regular => {
                let s = x.iter().map(|v| v * v).sum::<f64>();
                let l2 = self.lambda * self.lambda;
                let p = l2 / ((l2 + s) * (l2 + s));
                let mut f = TwoForm::ZERO;
                for k in 0..3 {
                    f = f + TwoForm::from_real(&d_linear(Family::Theta, k), self.e(k) * p);
                }
                Ok(f)
            }
            GaugeKind::Inverted => {
                let y = trans(x)?;
                let b = self.basis.e;
                let basis = AlgBasis { e: [b[0], b[2], b[1]], orientation: 1 };
                let reg = InstantonGauge { kind: GaugeKind::Regular, lambda: 1.0 / self.lambda, basis };
                trans_pullback_two(&reg.curvature_closed(&y)?, x)
            }
        }
    }

    /// The constant `c` in `|F(x)| ≤ c λ²/|x|⁴`.
    pub fn decay_constant() -> f64 {
        96f64.sqrt()
    }
}

impl OneFormField for InstantonGauge {
    fn eval(&self, x: &Point) -> Result<OneForm, FieldError> {
        self.connection(x)
    }

    fn jacobian(&self, x: &Point) -> Option<Result<Jacobian, FieldError>> {
        Some(self.jacobian_closed(x))
    }
}

/// Cylinder form of the Inverted-gauge instanton:
/// `Π*A = λ² e^{-2t} Σ ψ′ₖ eₖ + w_r` with
/// `w_r = -λ⁴ Σ ψ′ₖ eₖ / (e^{2t}(λ² + e^{2t}))`.
/// Coefficients are in the cylinder coframe, where ψ′ₖ is the (k+1)-th
/// coframe vector.
pub fn cylinder_expansion(
    lambda: f64,
    delta: f64,
    basis: &AlgBasis,
    p: &CylPoint,
) -> Result<(OneForm, OneForm), FieldError> {
    let t_min = lambda.ln() - delta.ln();
    if p.t <= t_min {
        return Err(FieldError::OutOfDomain(format!("t = {} must exceed log λ - log δ = {t_min}", p.t)));
    }
    let l2 = lambda * lambda;
    let e2t = (2.0 * p.t).exp();
    let lead = l2 / e2t;
    let rem = -l2 * l2 / (e2t * (l2 + e2t));
    let mut leading = OneForm::ZERO;
    let mut remainder = OneForm::ZERO;
    for k in 0..3 {
        leading.0[k + 1] = basis.e[k] * lead;
        remainder.0[k + 1] = basis.e[k] * rem;
    }
    Ok((leading, remainder))
}

/// Exact cylinder pullback of a gauge at `p`.
pub fn cylinder_pullback(gauge: &InstantonGauge, p: &CylPoint) -> Result<OneForm, FieldError> {
    Ok(pullback_one(&gauge.connection(&p.to_euclidean())?, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::choose_positive_basis;
    use crate::forms::{
        curvature, exterior_d, hodge_star, jacobian_fd, pullback_two, sd_asd_split, CylinderField,
        DerivativeMode, MetricModel, OrientationReversed,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rp(rng: &mut ChaCha8Rng, s: f64) -> Point {
        [rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s)]
    }

    fn real_form(c: &Mat4) -> TwoForm {
        TwoForm::from_real(c, Alg::I)
    }

    #[test]
    fn theta_and_psi_basics() {
        assert_eq!(theta(0, &[1.0, 0.0, 0.0, 0.0]), [0.0, 1.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = rp(&mut rng, 3.0);
            let d: Vec<f64> = (0..4).map(|j| psi(0, &x)[j] - theta(0, &x)[j]).collect();
            // 2(x₃dx₄ - x₄dx₃)
            assert_eq!(d, vec![0.0, 0.0, -2.0 * x[3], 2.0 * x[2]]);
            for k in 0..3 {
                let rt: f64 = (0..4).map(|j| theta(k, &x)[j] * x[j]).sum();
                let rs: f64 = (0..4).map(|j| psi(k, &x)[j] * x[j]).sum();
                assert!(rt.abs() < 1e-14 && rs.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dtheta_asd_dpsi_sd() {
        let x = [0.3, -0.1, 0.7, 0.2];
        for k in 0..3 {
            let dt = real_form(&d_linear(Family::Theta, k));
            let dp = real_form(&d_linear(Family::Psi, k));
            assert_eq!(hodge_star(&dt, &MetricModel::Flat, &x).unwrap(), -dt);
            assert_eq!(hodge_star(&dp, &MetricModel::Flat, &x).unwrap(), dp);
            let (p, m) = sd_asd_split(&dt, &MetricModel::Flat, &x).unwrap();
            assert_eq!((p, m), (TwoForm::ZERO, dt));
            // |dθₖ|² = 8 with |𝐢|² = 4 over the four nonzero components
            assert!((dt.norm_sq_flat() - 32.0).abs() < 1e-14);
        }
        let d1 = d_linear(Family::Theta, 0);
        assert_eq!((d1[0][1], d1[2][3]), (2.0, -2.0));
    }

    #[test]
    fn regular_connection_values() {
        let g = InstantonGauge::new(GaugeKind::Regular, 1.0).unwrap();
        assert_eq!(g.connection(&[0.0; 4]).unwrap(), OneForm::ZERO);
        let far = g.connection(&[1e3, 0.0, 0.0, 0.0]).unwrap();
        let n = far.norm_sq().sqrt();
        // three coordinates of size 1e3 / (1 + 1e6), each of norm² 4
        assert!((n * 1e3 / 12f64.sqrt() - 1.0).abs() < 1e-5, "{n}");
        assert!(InstantonGauge::new(GaugeKind::Regular, 0.0).is_err());
        assert!(InstantonGauge::new(GaugeKind::Inverted, -1.0).is_err());
    }

    #[test]
    fn inverted_is_trans_pullback_of_regular() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reg = InstantonGauge::new(GaugeKind::Regular, 1.0).unwrap();
        let inv = InstantonGauge::new(GaugeKind::Inverted, 1.0).unwrap();
        for _ in 0..20 {
            let x = CylPoint::from_direction(0.0, rp(&mut rng, 1.0)).omega;
            let y = trans(&x).unwrap();
            let j = trans_jacobian(&x).unwrap();
            let a = reg.connection(&y).unwrap();
            let mut pulled = OneForm::ZERO;
            for i in 0..4 {
                for b in 0..4 {
                    pulled.0[i] += a.0[b] * j[b][i];
                }
            }
            let direct = inv.connection(&x).unwrap();
            for i in 0..4 {
                assert!((pulled.0[i] - direct.0[i]).norm_sq() < 1e-26);
            }
        }
        assert_eq!(inv.connection(&[0.0; 4]), Err(FieldError::SingularPoint));
    }

    #[test]
    fn trans_jacobian_matches_fd_and_preserves_orientation() {
        let x = [0.4, -0.9, 0.3, 1.1];
        let j = trans_jacobian(&x).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let (p, m) = (trans(&xp).unwrap(), trans(&xm).unwrap());
            for a in 0..4 {
                assert!(((p[a] - m[a]) / (2.0 * h) - j[a][i]).abs() < 1e-8);
            }
        }
        assert!(crate::forms::mat4_det_inv(&j).0 > 0.0);
    }

    #[test]
    fn closed_forms_match_numeric_curvature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [GaugeKind::Regular, GaugeKind::Inverted] {
            let f = [[0.3, 1.0, -0.2], [0.5, 0.1, 0.9], [-1.0, 0.2, 0.4]];
            let basis = choose_positive_basis(f, kind.required_orientation()).unwrap();
            for lambda in [1.0, 0.3] {
                let g = InstantonGauge::new(kind, lambda).unwrap().with_basis(basis.clone()).unwrap();
                for _ in 0..10 {
                    let x = rp(&mut rng, 1.5);
                    let closed = g.curvature_closed(&x).unwrap();
                    let analytic = curvature(&g, &x, DerivativeMode::ClosedForm).unwrap();
                    let fd = curvature(&g, &x, DerivativeMode::FiniteDifference(1e-4)).unwrap();
                    let scale = 1.0 + closed.max_abs();
                    assert!((closed - analytic).max_abs() < 1e-10 * scale, "{kind:?} {lambda}");
                    assert!((closed - fd).max_abs() < 1e-6 * scale, "{kind:?} {lambda}");
                    let jf = jacobian_fd(&g, &x, 1e-4).unwrap();
                    let ja = g.jacobian(&x).unwrap().unwrap();
                    for i in 0..4 {
                        for l in 0..4 {
                            assert!((jf[i][l] - ja[i][l]).norm_sq().sqrt() < 1e-7 * scale);
                        }
                    }
                    let (plus, _) = sd_asd_split(&closed, &MetricModel::Flat, &x).unwrap();
                    assert!(plus.max_abs() < 1e-10 * scale);
                }
            }
        }
    }

    #[test]
    fn curvature_at_origin() {
        let g = InstantonGauge::new(GaugeKind::Regular, 1.0).unwrap();
        let f = curvature(&g, &[0.0; 4], DerivativeMode::ClosedForm).unwrap();
        assert!((f.norm_sq_flat() - 96.0).abs() < 1e-12);
        let expect = TwoForm::from_real(&d_linear(Family::Theta, 0), Alg::I)
            + TwoForm::from_real(&d_linear(Family::Theta, 1), Alg::J)
            + TwoForm::from_real(&d_linear(Family::Theta, 2), Alg::K);
        assert!((f - expect).max_abs() < 1e-14);
    }

    #[test]
    fn basis_orientation_is_enforced() {
        let inv = InstantonGauge::new(GaugeKind::Inverted, 1.0).unwrap();
        assert!(inv.clone().with_basis(AlgBasis::identity()).is_err());
        let reg = InstantonGauge::new(GaugeKind::Regular, 1.0).unwrap();
        assert!(reg.with_basis(GaugeKind::Inverted.default_basis()).is_err());
        // The literal frame (𝐢, 𝐣, 𝐤) on the ψ family gives a non-ASD field.
        let wrong = InstantonGauge { basis: AlgBasis::identity(), ..inv };
        let x = [0.3, 0.2, -0.5, 0.4];
        let f = curvature(&wrong, &x, DerivativeMode::ClosedForm).unwrap();
        let (plus, _) = sd_asd_split(&f, &MetricModel::Flat, &x).unwrap();
        assert!(plus.norm_sq_flat() > 1.0);
    }

    #[test]
    fn inverted_curvature_is_bounded_near_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = InstantonGauge::new(GaugeKind::Inverted, 1.0).unwrap();
        for _ in 0..10 {
            let dir = CylPoint::from_direction(0.0, rp(&mut rng, 1.0)).omega;
            for e in 1..8 {
                let r = 10f64.powi(-e);
                let f = g.curvature_closed(&dir.map(|v| v * r)).unwrap();
                assert!(f.norm_sq_flat() < 96.0 * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn decay_bound() {
        let delta = 0.2;
        let lambda = 0.01;
        let g = InstantonGauge::new(GaugeKind::Regular, lambda).unwrap();
        let r = 2.0 * lambda / delta;
        let f = g.curvature_closed(&[0.0, r, 0.0, 0.0]).unwrap();
        assert!(f.norm_sq_flat().sqrt() <= InstantonGauge::decay_constant() * lambda * lambda / r.powi(4));
    }

    #[test]
    fn orientation_reversal_swaps_duality() {
        let g = OrientationReversed(InstantonGauge::new(GaugeKind::Regular, 1.0).unwrap());
        let x = [0.2, 0.5, -0.3, 0.1];
        let f = curvature(&g, &x, DerivativeMode::ClosedForm).unwrap();
        let (_, minus) = sd_asd_split(&f, &MetricModel::Flat, &x).unwrap();
        assert!(minus.max_abs() < 1e-12);
    }

    #[test]
    fn cylinder_expansion_is_exact_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lambda: f64 = 0.01;
        let delta: f64 = 0.2;
        let basis = choose_positive_basis([[0.1, 0.0, 0.7], [1.0, 0.2, 0.0], [0.0, -0.5, 0.3]], -1).unwrap();
        let g = InstantonGauge::new(GaugeKind::Inverted, lambda).unwrap().with_basis(basis.clone()).unwrap();
        let t_min = lambda.ln() - delta.ln();
        let mut fitted = Vec::new();
        for _ in 0..50 {
            let t = rng.gen_range(t_min + 0.01..0.0);
            let p = CylPoint::from_direction(t, rp(&mut rng, 1.0));
            let (lead, rem) = cylinder_expansion(lambda, delta, &basis, &p).unwrap();
            let exact = cylinder_pullback(&g, &p).unwrap();
            let diff = exact - (lead + rem);
            assert!(diff.norm_sq().sqrt() < 1e-12 * (1.0 + exact.norm_sq().sqrt()));
            let expect_lead = lambda * lambda * (-2.0 * t).exp() * (3.0 * 4.0f64).sqrt();
            assert!((lead.norm_sq().sqrt() - expect_lead).abs() < 1e-12 * expect_lead);
            fitted.push(rem.norm_sq().sqrt() / (lambda.powi(4) * (-4.0 * t).exp()));
        }
        let (lo, hi) = fitted.iter().fold((f64::MAX, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(hi < 12f64.sqrt() * 1.0001 && lo > 0.5 * hi);
        let bad = CylPoint::new(t_min - 1.0, [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(cylinder_expansion(lambda, delta, &basis, &bad).is_err());
    }

    #[test]
    fn cylinder_forms_are_translation_invariant_and_conformal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let dir = rp(&mut rng, 1.0);
            let p0 = CylPoint::from_direction(0.0, dir);
            let p1 = CylPoint::from_direction(rng.gen_range(-3.0..3.0), dir);
            for fam in [Family::Theta, Family::Psi] {
                for k in 0..3 {
                    let f = linear_form(fam, k, Alg::I);
                    // θ′ = e^{-2t} Π*θ
                    let c0 = pullback_one(&f.eval(&p0.to_euclidean()).unwrap(), &p0);
                    let c1 = pullback_one(&f.eval(&p1.to_euclidean()).unwrap(), &p1) * (-2.0 * p1.t).exp();
                    assert!((c0 - c1).norm_sq() < 1e-24);
                    let d = pullback_two(&exterior_d(&f, &p1.to_euclidean(), DerivativeMode::ClosedForm).unwrap(), &p1);
                    let star = hodge_star(&d, &MetricModel::CylinderProduct, &[0.0; 4]).unwrap();
                    let sign = if fam == Family::Theta { -1.0 } else { 1.0 };
                    assert!((star - d * sign).max_abs() < 1e-10 * (1.0 + d.max_abs()));
                }
            }
        }
    }

    #[test]
    fn d_of_scaled_psi_prime() {
        // e^{2t}ψ′₁ is Π*ψ₁, so d(e^{2t}ψ′₁) = 2Π*(dx₁∧dx₂ + dx₃∧dx₄).
        let cf = CylinderField::new(linear_form(Family::Psi, 0, Alg::I), -3.0, 3.0);
        let p = CylPoint::from_direction(0.7, [0.3, -0.2, 0.5, 0.9]);
        let d = cf.exterior_d_at(&p, DerivativeMode::FiniteDifference(1e-4)).unwrap();
        let target = TwoForm::basis(0, 1, Alg::I * 2.0) + TwoForm::basis(2, 3, Alg::I * 2.0);
        let expect = pullback_two(&target, &p);
        assert!((d - expect).max_abs() < 1e-7 * (1.0 + expect.max_abs()));
    }

    #[test]
    fn gauge_rotation_preserves_curvature_norm() {
        let r = crate::algebra::tests::random_rotation(&mut ChaCha8Rng::seed_from_u64(7));
        let g = InstantonGauge::new(GaugeKind::Regular, 0.7).unwrap();
        let rot = crate::forms::GaugeRotated { field: g.clone(), rotation: r };
        let x = [0.1, 0.4, -0.8, 0.3];
        let a = curvature(&g, &x, DerivativeMode::ClosedForm).unwrap().norm_sq_flat();
        let b = curvature(&rot, &x, DerivativeMode::ClosedForm).unwrap().norm_sq_flat();
        assert!((a - b).abs() < 1e-12 * a);
    }
}
