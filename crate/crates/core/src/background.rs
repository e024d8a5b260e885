//! Synthetic background connections in radial gauge around a point.
//!
//! The connection is `Aᵢ = ½ Σⱼ F⁰ⱼᵢ xⱼ + Σⱼₖ Qᵢⱼₖ xⱼ xₖ` with `Q` antisymmetric
//! in its first two indices, so `A(∂_r) = 0`, `A(0) = 0` and the curvature at
//! the origin is `F⁰`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::algebra::Alg;
use crate::forms::{
    norm4, pullback_one, CylPoint, FieldError, Jacobian, OneForm, OneFormField, Point, TwoForm,
};
use crate::instanton::{linear_form, Family};

const ANTISYM_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackgroundError {
    #[error("background curvature is not antisymmetric (residual {0:.3e})")]
    NotAntisymmetric(f64),
    #[error("domain radius must be positive, got {0}")]
    BadRadius(f64),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Quadratic correction `Aᵢ += Σⱼₖ Qᵢⱼₖ xⱼ xₖ`, `Qᵢⱼₖ = -Qⱼᵢₖ`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadTerm {
    pub q: [[[Alg; 4]; 4]; 4],
}

impl QuadTerm {
    /// Seeded random coefficients of size `scale`.
    pub fn random(seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = [[[Alg::ZERO; 4]; 4]; 4];
        for i in 0..4 {
            for j in (i + 1)..4 {
                for k in 0..4 {
                    let a = Alg([rng.gen_range(-scale..scale), rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)]);
                    q[i][j][k] = a;
                    q[j][i][k] = -a;
                }
            }
        }
        QuadTerm { q }
    }

    pub fn eval(&self, x: &Point) -> OneForm {
        let mut a = OneForm::ZERO;
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    a.0[i] += self.q[i][j][k] * (x[j] * x[k]);
                }
            }
        }
        a
    }

    /// `jac[l][i] = ∂ₗ(Σⱼₖ Qᵢⱼₖ xⱼxₖ) = Σₖ (Qᵢₗₖ + Qᵢₖₗ) xₖ`.
    pub fn jacobian(&self, x: &Point) -> Jacobian {
        let mut jac = [[Alg::ZERO; 4]; 4];
        for l in 0..4 {
            for i in 0..4 {
                for k in 0..4 {
                    jac[l][i] += (self.q[i][l][k] + self.q[i][k][l]) * x[k];
                }
            }
        }
        jac
    }
}

/// `(F₋,ᵢ, F₊,ᵢ)` with `½ F⁰ⱼᵢ xⱼ dxᵢ = Σᵢ (F₋,ᵢ θᵢ + F₊,ᵢ ψᵢ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureSplit {
    pub minus: [Alg; 3],
    pub plus: [Alg; 3],
}

impl CurvatureSplit {
    pub fn plus_coords(&self) -> [[f64; 3]; 3] {
        [self.plus[0].0, self.plus[1].0, self.plus[2].0]
    }

    pub fn minus_coords(&self) -> [[f64; 3]; 3] {
        [self.minus[0].0, self.minus[1].0, self.minus[2].0]
    }
}

pub fn split_curvature(f0: &TwoForm) -> Result<CurvatureSplit, BackgroundError> {
    let r = f0.antisymmetry_residual();
    if r > ANTISYM_TOL {
        return Err(BackgroundError::NotAntisymmetric(r));
    }
    let f = |i: usize, j: usize| f0.0[i][j];
    Ok(CurvatureSplit {
        minus: [(f(0, 1) - f(2, 3)) * 0.25, (f(0, 2) + f(1, 3)) * 0.25, (f(0, 3) - f(1, 2)) * 0.25],
        plus: [(f(0, 1) + f(2, 3)) * 0.25, (f(0, 2) - f(1, 3)) * 0.25, (f(0, 3) + f(1, 2)) * 0.25],
    })
}

/// Background connection on the ball of radius `radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundConnection {
    pub f0: TwoForm,
    pub quad: Option<QuadTerm>,
    pub radius: f64,
}

impl BackgroundConnection {
    pub fn new(f0: TwoForm, quad: Option<QuadTerm>, radius: f64) -> Result<Self, BackgroundError> {
        let r = f0.antisymmetry_residual();
        if r > ANTISYM_TOL {
            return Err(BackgroundError::NotAntisymmetric(r));
        }
        if !(radius > 0.0) {
            return Err(BackgroundError::BadRadius(radius));
        }
        Ok(BackgroundConnection { f0, quad, radius })
    }

    /// From the six entries `F⁰₁₂, F⁰₁₃, F⁰₁₄, F⁰₂₃, F⁰₂₄, F⁰₃₄`.
    pub fn from_entries(entries: [[f64; 3]; 6], quad: Option<QuadTerm>, radius: f64) -> Result<Self, BackgroundError> {
        Self::new(two_form_from_entries(entries), quad, radius)
    }

    pub fn flat(radius: f64) -> Self {
        BackgroundConnection { f0: TwoForm::ZERO, quad: None, radius }
    }

    pub fn split(&self) -> CurvatureSplit {
        split_curvature(&self.f0).expect("checked at construction")
    }

    fn check(&self, x: &Point) -> Result<(), FieldError> {
        let r = norm4(x);
        if r > self.radius {
            return Err(FieldError::OutOfDomain(format!("|x| = {r} exceeds the background radius {}", self.radius)));
        }
        Ok(())
    }

    /// The linear part `½ Σⱼ F⁰ⱼᵢ xⱼ dxᵢ`.
    pub fn linear(&self, x: &Point) -> OneForm {
        let mut a = OneForm::ZERO;
        for i in 0..4 {
            for j in 0..4 {
                a.0[i] += self.f0.0[j][i] * (0.5 * x[j]);
            }
        }
        a
    }

    pub fn linear_jacobian(&self) -> Jacobian {
        let mut jac = [[Alg::ZERO; 4]; 4];
        for l in 0..4 {
            for i in 0..4 {
                jac[l][i] = self.f0.0[l][i] * 0.5;
            }
        }
        jac
    }

    pub fn quad_part(&self, x: &Point) -> OneForm {
        self.quad.as_ref().map_or(OneForm::ZERO, |q| q.eval(x))
    }

    pub fn quad_jacobian(&self, x: &Point) -> Jacobian {
        self.quad.as_ref().map_or([[Alg::ZERO; 4]; 4], |q| q.jacobian(x))
    }

    pub fn radial_gauge_connection(&self, x: &Point) -> Result<OneForm, FieldError> {
        self.check(x)?;
        Ok(self.linear(x) + self.quad_part(x))
    }

    /// Cylinder form for `t < log δ`: the leading part
    /// `e^{2t} Σ (F₋,ᵢ θ′ᵢ + F₊,ᵢ ψ′ᵢ)` and the remainder `w_l`, both in the
    /// cylinder coframe.
    pub fn cylinder_form(&self, delta: f64, p: &CylPoint) -> Result<(OneForm, OneForm), FieldError> {
        if p.t >= delta.ln() {
            return Err(FieldError::OutOfDomain(format!("t = {} must be below log δ = {}", p.t, delta.ln())));
        }
        let x = p.to_euclidean();
        self.check(&x)?;
        Ok((pullback_one(&self.linear(&x), p), pullback_one(&self.quad_part(&x), p)))
    }

    /// The leading part rebuilt from the split and the θ/ψ catalog.
    pub fn leading_from_split(&self, x: &Point) -> OneForm {
        let s = self.split();
        let mut a = OneForm::ZERO;
        for k in 0..3 {
            a = a + linear_form(Family::Theta, k, s.minus[k]).eval(x).unwrap();
            a = a + linear_form(Family::Psi, k, s.plus[k]).eval(x).unwrap();
        }
        a
    }
}

pub fn two_form_from_entries(e: [[f64; 3]; 6]) -> TwoForm {
    let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    let mut f = TwoForm::ZERO;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        f.0[i][j] = Alg(e[k]);
        f.0[j][i] = -Alg(e[k]);
    }
    f
}

impl OneFormField for BackgroundConnection {
    fn eval(&self, x: &Point) -> Result<OneForm, FieldError> {
        self.radial_gauge_connection(x)
    }

    fn jacobian(&self, x: &Point) -> Option<Result<Jacobian, FieldError>> {
        if let Err(e) = self.check(x) {
            return Some(Err(e));
        }
        let mut j = self.linear_jacobian();
        let q = self.quad_jacobian(x);
        for l in 0..4 {
            for i in 0..4 {
                j[l][i] += q[l][i];
            }
        }
        Some(Ok(j))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::{curvature, sd_asd_split, DerivativeMode, MetricModel};
    use rand::Rng;

    fn generic() -> BackgroundConnection {
        let e = [[0.3, -0.2, 0.5], [0.1, 0.4, -0.3], [-0.6, 0.2, 0.1], [0.2, 0.7, -0.1], [0.5, -0.4, 0.2], [-0.1, 0.3, 0.6]];
        BackgroundConnection::from_entries(e, Some(QuadTerm::random(7, 0.5)), 1.0).unwrap()
    }

    fn rp(rng: &mut ChaCha8Rng, s: f64) -> Point {
        [rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s)]
    }

    #[test]
    fn radial_gauge_and_origin() {
        let bg = generic();
        assert_eq!(bg.eval(&[0.0; 4]).unwrap(), OneForm::ZERO);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = rp(&mut rng, 0.49);
            let a = bg.eval(&x).unwrap();
            assert!(a.contract(&x).norm_sq().sqrt() < 1e-12);
        }
        assert!(matches!(bg.eval(&[2.0, 0.0, 0.0, 0.0]), Err(FieldError::OutOfDomain(_))));
    }

    #[test]
    fn single_entry_background() {
        let mut e = [[0.0; 3]; 6];
        e[0] = [1.0, 0.0, 0.0];
        let bg = BackgroundConnection::from_entries(e, None, 1.0).unwrap();
        let x = [0.3, -0.2, 0.5, 0.1];
        let a = bg.eval(&x).unwrap();
        // ½𝐢(x₁dx₂ - x₂dx₁)
        let expect = OneForm([Alg::I * (-0.5 * x[1]), Alg::I * (0.5 * x[0]), Alg::ZERO, Alg::ZERO]);
        assert_eq!(a, expect);
    }

    #[test]
    fn curvature_at_origin_is_f0() {
        let bg = generic();
        let f = curvature(&bg, &[0.0; 4], DerivativeMode::ClosedForm).unwrap();
        assert!((f - bg.f0).max_abs() < 1e-15);
        let fd = curvature(&bg, &[0.0; 4], DerivativeMode::FiniteDifference(1e-4)).unwrap();
        assert!((fd - bg.f0).max_abs() < 1e-8);
    }

    #[test]
    fn split_examples_and_reconstruction() {
        let mut e = [[0.0; 3]; 6];
        e[0] = [1.0, 0.0, 0.0];
        e[5] = [1.0, 0.0, 0.0];
        let s = split_curvature(&two_form_from_entries(e)).unwrap();
        assert_eq!((s.plus[0], s.minus[0]), (Alg::I * 0.5, Alg::ZERO));
        e[5] = [-1.0, 0.0, 0.0];
        let s = split_curvature(&two_form_from_entries(e)).unwrap();
        assert_eq!((s.plus[0], s.minus[0]), (Alg::ZERO, Alg::I * 0.5));
        let z = split_curvature(&TwoForm::ZERO).unwrap();
        assert!(z.plus.iter().chain(z.minus.iter()).all(|a| *a == Alg::ZERO));

        let bg = generic();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = rp(&mut rng, 0.5);
            let d = bg.linear(&x) - bg.leading_from_split(&x);
            assert!(d.norm_sq().sqrt() < 1e-12);
        }
        let mut bad = TwoForm::ZERO;
        bad.0[0][1] = Alg::I;
        assert!(matches!(split_curvature(&bad), Err(BackgroundError::NotAntisymmetric(_))));
    }

    #[test]
    fn asd_background_has_no_sd_curvature() {
        // F₊ = 0 ⇔ F⁰ is ASD
        let e = [[0.2, 0.1, 0.0], [0.0, -0.3, 0.4], [0.5, 0.0, 0.1], [-0.5, 0.0, -0.1], [0.0, -0.3, 0.4], [-0.2, -0.1, 0.0]];
        let bg = BackgroundConnection::from_entries(e, None, 1.0).unwrap();
        let s = bg.split();
        assert!(s.plus.iter().all(|a| a.norm_sq() < 1e-30));
        let f = curvature(&bg, &[0.0; 4], DerivativeMode::ClosedForm).unwrap();
        let (p, _) = sd_asd_split(&f, &MetricModel::Flat, &[0.0; 4]).unwrap();
        assert!(p.max_abs() < 1e-12);
    }

    #[test]
    fn cylinder_form_remainder_decays_cubically() {
        let bg = generic();
        let delta: f64 = 0.2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dirs: Vec<Point> = (0..20).map(|_| rp(&mut rng, 1.0)).collect();
        let ts: Vec<f64> = (0..10).map(|k| delta.ln() - 0.5 - 0.6 * k as f64).collect();
        let mut logs = Vec::new();
        for &t in &ts {
            let mut m: f64 = 0.0;
            for d in &dirs {
                let p = CylPoint::from_direction(t, *d);
                let (lead, rem) = bg.cylinder_form(delta, &p).unwrap();
                let exact = pullback_one(&bg.eval(&p.to_euclidean()).unwrap(), &p);
                assert!((exact - (lead + rem)).norm_sq().sqrt() < 1e-14);
                m = m.max(rem.norm_sq().sqrt());
            }
            logs.push((t, m.ln()));
        }
        let n = logs.len() as f64;
        let (mt, my) = (logs.iter().map(|p| p.0).sum::<f64>() / n, logs.iter().map(|p| p.1).sum::<f64>() / n);
        let slope = logs.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum::<f64>() / logs.iter().map(|p| (p.0 - mt).powi(2)).sum::<f64>();
        assert!(slope >= 2.9, "slope {slope}");
        let flat = BackgroundConnection::from_entries([[0.1; 3]; 6], None, 1.0).unwrap();
        let (_, rem) = flat.cylinder_form(delta, &CylPoint::from_direction(-3.0, dirs[0])).unwrap();
        assert_eq!(rem, OneForm::ZERO);
        let p = CylPoint::from_direction(delta.ln() - 1e-9, dirs[0]);
        let (lead, _) = bg.cylinder_form(delta, &p).unwrap();
        assert!(lead.norm_sq().sqrt() <= 20.0 * delta * delta);
        assert!(bg.cylinder_form(delta, &CylPoint::from_direction(0.0, dirs[0])).is_err());
    }
}
