//! Deterministic product quadrature on S³, balls, annuli and cylinder segments.
//!
//! Radial directions are integrated in `t = log r` with composite
//! Gauss–Legendre panels, so features at very different scales (a bubble of
//! size λ inside a ball of radius δ) are resolved uniformly. Node evaluation
//! runs on the rayon pool; partial sums are collected in node order and added
//! sequentially, so results do not depend on the thread count.

use std::f64::consts::PI;

use rayon::prelude::*;
use thiserror::Error;

use crate::forms::{
    curvature, sd_asd_split, two_form_norm_sq, DerivativeMode, FieldError, MetricModel, OneFormField, Point,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("integrand is not finite at x = {0:?}")]
    NonFiniteValue(Point),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1], by Newton iteration on `Pₙ`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { z } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * p - pm1) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            dp = 1.0;
            z = 0.0;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Gauss–Legendre on [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(n);
    let h = 0.5 * (b - a);
    let c = 0.5 * (a + b);
    x.iter().zip(&w).map(|(xi, wi)| (c + h * xi, h * wi)).collect()
}

/// Product rule on S³ in Hopf coordinates
/// `x₁ + ix₂ = √(1-s) e^{iξ₁}`, `x₃ + ix₄ = √s e^{iξ₂}`, `dω = ½ ds dξ₁ dξ₂`:
/// Gauss–Legendre with `N` points in `s`, trapezoid with `2N` points in each angle.
#[derive(Debug, Clone)]
pub struct SphereRule {
    pub nodes: Vec<(Point, f64)>,
    pub order: usize,
}

impl SphereRule {
    pub fn new(order: usize) -> Self {
        let m = 2 * order;
        let dxi = 2.0 * PI / m as f64;
        let mut nodes = Vec::with_capacity(order * m * m);
        for (s, ws) in gauss_legendre_on(order, 0.0, 1.0) {
            let (a, b) = ((1.0 - s).sqrt(), s.sqrt());
            for i in 0..m {
                let (s1, c1) = (i as f64 * dxi).sin_cos();
                for j in 0..m {
                    // Half-step offset in ξ₂ avoids duplicate nodes on the circle s = 0.
                    let (s2, c2) = ((j as f64 + 0.5) * dxi).sin_cos();
                    nodes.push(([a * c1, a * s1, b * c2, b * s2], 0.5 * ws * dxi * dxi));
                }
            }
        }
        SphereRule { nodes, order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `∫_{S³} f dω`, summed in node order.
    pub fn integrate<E>(&self, mut f: impl FnMut(&Point) -> Result<f64, E>) -> Result<f64, E> {
        let mut s = Neumaier::default();
        for (w, wt) in &self.nodes {
            s.add(wt * f(w)?);
        }
        Ok(s.total())
    }
}

/// Quadrature resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolution {
    /// Order `N` of the S³ rule.
    pub sphere: usize,
    /// Gauss–Legendre points per radial panel.
    pub radial_order: usize,
    /// Panel width in `t = log r`.
    pub panel_width: f64,
    /// For balls, the `t`-range below `log R` covered by log panels; the
    /// remaining inner disc is one plain panel in `r`.
    pub log_span: f64,
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution { sphere: 8, radial_order: 12, panel_width: 1.0, log_span: 16.0 }
    }
}

impl Resolution {
    /// Resolution with sphere order `n` and default radial parameters.
    pub fn with_sphere(n: usize) -> Self {
        Resolution { sphere: n, ..Default::default() }
    }

    /// Halved resolution, used for the error estimate.
    pub fn coarse(&self) -> Self {
        Resolution {
            sphere: (self.sphere / 2).max(1),
            radial_order: (self.radial_order / 2).max(2),
            panel_width: self.panel_width,
            log_span: self.log_span,
        }
    }

    pub fn finer(&self) -> Self {
        Resolution { sphere: self.sphere * 2, radial_order: self.radial_order * 2, ..*self }
    }
}

/// Integration domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegionSpec {
    Ball { r: f64 },
    Annulus { r_in: f64, r_out: f64 },
    /// `[t_min, t_max] × S³`, identified with an annulus through `Π`.
    CylinderSegment { t_min: f64, t_max: f64 },
    /// The ball of radius `r_max`; the tail beyond it is certified, not integrated.
    FullR4 { r_max: f64 },
}

impl RegionSpec {
    pub fn validate(&self) -> Result<(), QuadError> {
        let ok = match *self {
            RegionSpec::Ball { r } => r > 0.0 && r.is_finite(),
            RegionSpec::Annulus { r_in, r_out } => r_in > 0.0 && r_in < r_out && r_out.is_finite(),
            RegionSpec::CylinderSegment { t_min, t_max } => t_min < t_max && t_min.is_finite() && t_max.is_finite(),
            RegionSpec::FullR4 { r_max } => r_max > 0.0 && r_max.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(QuadError::InvalidRegion(format!("{self:?}")))
        }
    }

    /// The log-radius interval and the radius of the inner disc, if any.
    fn layout(&self, res: &Resolution) -> (f64, f64, Option<f64>) {
        match *self {
            RegionSpec::Ball { r } | RegionSpec::FullR4 { r_max: r } => {
                let t1 = r.ln();
                let t0 = t1 - res.log_span;
                (t0, t1, Some(t0.exp()))
            }
            RegionSpec::Annulus { r_in, r_out } => (r_in.ln(), r_out.ln(), None),
            RegionSpec::CylinderSegment { t_min, t_max } => (t_min, t_max, None),
        }
    }
}

/// An integral value with its error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    /// `|I(res) - I(res.coarse())|` plus any certified tail bound.
    pub error: f64,
    /// Certified bound on the part of the domain that was cut off.
    pub tail: f64,
}

/// Radial nodes `(t, w)` for `∫ g(t) dt` over `[t0, t1]`, panels split at every
/// breakpoint inside the interval.
pub fn t_nodes(t0: f64, t1: f64, breaks: &[f64], res: &Resolution) -> Vec<(f64, f64)> {
    let mut cuts: Vec<f64> = breaks.iter().copied().filter(|b| *b > t0 && *b < t1).collect();
    cuts.push(t0);
    cuts.push(t1);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let mut nodes = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = ((b - a) / res.panel_width).ceil().max(1.0) as usize;
        let h = (b - a) / n as f64;
        for k in 0..n {
            nodes.extend(gauss_legendre_on(res.radial_order, a + k as f64 * h, a + (k + 1) as f64 * h));
        }
    }
    nodes
}

/// Volume weight relative to `e^{4t} dt dω` (Euclidean) for each metric.
fn density(g: &MetricModel, x: &Point, r: f64) -> Result<f64, FieldError> {
    match g {
        MetricModel::Flat => Ok(1.0),
        MetricModel::CylinderProduct => Ok(r.powi(-4)),
        MetricModel::ConformalNormal(_) => Ok(g.frame_at(x)?.sqrt_det),
    }
}

/// `∫_{[t0,t1]×S³} f(eᵗω) e^{4t} dt dω` plus the inner disc, without any
/// metric density. The building block of every region integral.
pub fn integrate_euclidean<F>(
    f: &F,
    t0: f64,
    t1: f64,
    breaks: &[f64],
    inner_disc: Option<f64>,
    res: &Resolution,
) -> Result<f64, QuadError>
where
    F: Fn(&Point) -> Result<f64, QuadError> + Sync,
{
    let g = |x: &Point| -> Result<[f64; 1], QuadError> { Ok([f(x)?]) };
    Ok(integrate_euclidean_n(&g, t0, t1, breaks, inner_disc, res)?[0])
}

/// Vector-valued form of `integrate_euclidean`: all `K` integrands share the
/// nodes.
pub fn integrate_euclidean_n<F, const K: usize>(
    f: &F,
    t0: f64,
    t1: f64,
    breaks: &[f64],
    inner_disc: Option<f64>,
    res: &Resolution,
) -> Result<[f64; K], QuadError>
where
    F: Fn(&Point) -> Result<[f64; K], QuadError> + Sync,
{
    let sphere = SphereRule::new(res.sphere);
    let mut radial: Vec<(f64, f64)> =
        t_nodes(t0, t1, breaks, res).into_iter().map(|(t, w)| (t.exp(), w * (4.0 * t).exp())).collect();
    if let Some(r0) = inner_disc {
        // ∫₀^{r0} r³ g(r) dr
        radial.extend(gauss_legendre_on(res.radial_order, 0.0, r0).into_iter().map(|(r, w)| (r, w * r.powi(3))));
    }
    let parts: Vec<Result<[f64; K], QuadError>> = radial
        .par_iter()
        .map(|&(r, w)| {
            let mut s = [Neumaier::default(); K];
            for (om, ws) in &sphere.nodes {
                let x = [r * om[0], r * om[1], r * om[2], r * om[3]];
                let v = f(&x)?;
                for k in 0..K {
                    if !v[k].is_finite() {
                        return Err(QuadError::NonFiniteValue(x));
                    }
                    s[k].add(ws * v[k]);
                }
            }
            Ok(std::array::from_fn(|k| w * s[k].total()))
        })
        .collect();
    let mut total = [Neumaier::default(); K];
    for p in parts {
        let p = p?;
        for k in 0..K {
            total[k].add(p[k]);
        }
    }
    Ok(std::array::from_fn(|k| total[k].total()))
}

fn integrate_once<F>(f: &F, region: &RegionSpec, g: &MetricModel, res: &Resolution) -> Result<f64, QuadError>
where
    F: Fn(&Point) -> Result<f64, QuadError> + Sync,
{
    let (t0, t1, disc) = region.layout(res);
    let cyl = matches!(region, RegionSpec::CylinderSegment { .. });
    let weighted = |x: &Point| -> Result<f64, QuadError> {
        let r = crate::forms::norm4(x);
        let d = if cyl { r.powi(-4) } else { density(g, x, r)? };
        Ok(f(x)? * d)
    };
    integrate_euclidean(&weighted, t0, t1, &[], disc, res)
}

/// `∫_region f dV_g` with an error estimate. On a cylinder segment the
/// measure is the product measure `dt dω`.
pub fn integrate_scalar<F>(f: F, region: &RegionSpec, g: &MetricModel, res: &Resolution) -> Result<Integral, QuadError>
where
    F: Fn(&Point) -> Result<f64, QuadError> + Sync,
{
    integrate_scalar_with_tail(f, region, g, res, 0.0)
}

/// As `integrate_scalar`, with `|f| ≤ decay / r⁸` for the FullR4 tail.
pub fn integrate_scalar_with_tail<F>(
    f: F,
    region: &RegionSpec,
    g: &MetricModel,
    res: &Resolution,
    decay: f64,
) -> Result<Integral, QuadError>
where
    F: Fn(&Point) -> Result<f64, QuadError> + Sync,
{
    region.validate()?;
    let value = integrate_once(&f, region, g, res)?;
    let coarse = integrate_once(&f, region, g, &res.coarse())?;
    let tail = match region {
        RegionSpec::FullR4 { r_max } => 2.0 * PI * PI * decay / (4.0 * r_max.powi(4)),
        _ => 0.0,
    };
    Ok(Integral { value, error: (value - coarse).abs() + tail, tail })
}

/// `∫ |F_A|²_g dV_g`. With `CylinderProduct` the integrand is read on the
/// cylinder, which by conformal invariance equals the flat energy of the
/// corresponding annulus.
pub fn ym_energy<A: OneFormField + ?Sized>(
    a: &A,
    region: &RegionSpec,
    g: &MetricModel,
    res: &Resolution,
    mode: DerivativeMode,
) -> Result<Integral, QuadError> {
    let g_eff = if matches!(g, MetricModel::CylinderProduct) { MetricModel::Flat } else { g.clone() };
    let region_eff = match *region {
        RegionSpec::CylinderSegment { t_min, t_max } => RegionSpec::Annulus { r_in: t_min.exp(), r_out: t_max.exp() },
        r => r,
    };
    let density = |x: &Point| -> Result<f64, QuadError> {
        let f = curvature(a, x, mode)?;
        Ok(two_form_norm_sq(&f, &g_eff, x)?)
    };
    integrate_scalar_with_tail(density, &region_eff, &g_eff, res, instanton_tail_decay())
}

/// `|F|² ≤ 96 λ⁴ / r⁸` for the bubble; a bound for `λ ≤ 1`.
fn instanton_tail_decay() -> f64 {
    96.0
}

/// `p₁ = (‖F⁺‖² - ‖F⁻‖²) / 4π²`.
pub fn pontryagin_number<A: OneFormField + ?Sized>(
    a: &A,
    region: &RegionSpec,
    g: &MetricModel,
    res: &Resolution,
    mode: DerivativeMode,
) -> Result<Integral, QuadError> {
    let g_eff = if matches!(g, MetricModel::CylinderProduct) { MetricModel::Flat } else { g.clone() };
    let region_eff = match *region {
        RegionSpec::CylinderSegment { t_min, t_max } => RegionSpec::Annulus { r_in: t_min.exp(), r_out: t_max.exp() },
        r => r,
    };
    let density = |x: &Point| -> Result<f64, QuadError> {
        let f = curvature(a, x, mode)?;
        let (p, m) = sd_asd_split(&f, &g_eff, x)?;
        Ok(two_form_norm_sq(&p, &g_eff, x)? - two_form_norm_sq(&m, &g_eff, x)?)
    };
    let i = integrate_scalar_with_tail(density, &region_eff, &g_eff, res, instanton_tail_decay())?;
    let s = 4.0 * PI * PI;
    Ok(Integral { value: i.value / s, error: i.error / s, tail: i.tail / s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::{GaugeRotated, ZeroField};
    use crate::instanton::{GaugeKind, InstantonGauge};
    use proptest::prelude::*;

    #[test]
    fn gauss_legendre_is_exact_to_degree_2n_minus_1() {
        for n in 1..20 {
            let (x, w) = gauss_legendre(n);
            for d in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(d as i32)).sum();
                let exact = if d % 2 == 1 { 0.0 } else { 2.0 / (d as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} d={d}");
            }
        }
    }

    #[test]
    fn sphere_moments() {
        let rule = SphereRule::new(14);
        assert!(rule.len() > 10_000);
        let vol = rule.integrate::<()>(|_| Ok(1.0)).unwrap();
        assert!((vol - 2.0 * PI * PI).abs() < 1e-12);
        assert!(rule.nodes.iter().all(|n| n.1 > 0.0));
        for i in 0..4 {
            let m1 = rule.integrate::<()>(|w| Ok(w[i])).unwrap();
            assert!(m1.abs() < 1e-12);
            for j in 0..4 {
                let m2 = rule.integrate::<()>(|w| Ok(w[i] * w[j])).unwrap();
                let e = if i == j { PI * PI / 2.0 } else { 0.0 };
                assert!((m2 - e).abs() < 1e-12);
                for k in 0..4 {
                    let m3 = rule.integrate::<()>(|w| Ok(w[i] * w[j] * w[k])).unwrap();
                    assert!(m3.abs() < 1e-12);
                }
            }
        }
        // ∫ x₁⁴ = π²/4
        let q = rule.integrate::<()>(|w| Ok(w[0].powi(4))).unwrap();
        assert!((q - PI * PI / 4.0).abs() < 1e-12);
    }

    #[test]
    fn volumes() {
        let res = Resolution::default();
        let one = |_: &Point| Ok(1.0);
        let b = integrate_scalar(one, &RegionSpec::Ball { r: 1.0 }, &MetricModel::Flat, &res).unwrap();
        assert!((b.value - PI * PI / 2.0).abs() < 1e-12);
        let c = integrate_scalar(one, &RegionSpec::CylinderSegment { t_min: 0.0, t_max: 1.0 }, &MetricModel::CylinderProduct, &res)
            .unwrap();
        assert!((c.value - 2.0 * PI * PI).abs() < 1e-12);
        let a = integrate_scalar(one, &RegionSpec::Annulus { r_in: 1.0, r_out: 2.0 }, &MetricModel::Flat, &res).unwrap();
        assert!((a.value - PI * PI / 2.0 * 15.0).abs() < 1e-10);
    }

    #[test]
    fn rational_radial_integral() {
        let f = |x: &Point| {
            let s: f64 = x.iter().map(|v| v * v).sum();
            Ok((1.0 + s).powi(-4))
        };
        let i = integrate_scalar_with_tail(f, &RegionSpec::FullR4 { r_max: 1e3 }, &MetricModel::Flat, &Resolution::default(), 1.0)
            .unwrap();
        let exact = PI * PI / 6.0;
        assert!(((i.value - exact) / exact).abs() < 1e-6);
        assert!(i.tail < 1e-11);
        // 1D oracle: ∫₀^∞ r³(1+r²)⁻⁴ dr = 1/12 by a plain midpoint sum on r = tan θ
        let n = 200_000;
        let mut s = 0.0;
        for k in 0..n {
            let th = (k as f64 + 0.5) * (PI / 2.0) / n as f64;
            let r = th.tan();
            s += r.powi(3) * (1.0 + r * r).powi(-4) / th.cos().powi(2);
        }
        assert!((s * (PI / 2.0) / n as f64 - 1.0 / 12.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_is_reported() {
        let f = |x: &Point| Ok(if x[0] > 0.5 { f64::NAN } else { 1.0 });
        let e = integrate_scalar(f, &RegionSpec::Ball { r: 1.0 }, &MetricModel::Flat, &Resolution::with_sphere(4));
        assert!(matches!(e, Err(QuadError::NonFiniteValue(_))));
        let bad = integrate_scalar(|_: &Point| Ok(1.0), &RegionSpec::Annulus { r_in: 2.0, r_out: 1.0 }, &MetricModel::Flat, &Resolution::default());
        assert!(matches!(bad, Err(QuadError::InvalidRegion(_))));
    }

    #[test]
    fn instanton_half_energy_in_unit_ball() {
        let g = InstantonGauge::new(GaugeKind::Regular, 1.0).unwrap();
        let res = Resolution::with_sphere(4);
        let e = ym_energy(&g, &RegionSpec::Ball { r: 1.0 }, &MetricModel::Flat, &res, DerivativeMode::ClosedForm).unwrap();
        assert!((e.value - 8.0 * PI * PI).abs() < 1e-9 * e.value);
        let z = ym_energy(&ZeroField, &RegionSpec::Ball { r: 1.0 }, &MetricModel::Flat, &res, DerivativeMode::ClosedForm).unwrap();
        assert_eq!(z.value, 0.0);
        let p = pontryagin_number(&ZeroField, &RegionSpec::Ball { r: 1.0 }, &MetricModel::Flat, &res, DerivativeMode::ClosedForm).unwrap();
        assert_eq!(p.value, 0.0);
    }

    #[test]
    fn scale_invariance_and_gauge_invariance() {
        let res = Resolution::with_sphere(4);
        let delta = 0.2;
        let g1 = InstantonGauge::new(GaugeKind::Regular, 1.0).unwrap();
        let gl = InstantonGauge::new(GaugeKind::Regular, 1e-3).unwrap();
        let e1 = ym_energy(&g1, &RegionSpec::Ball { r: 1.0 / delta }, &MetricModel::Flat, &res, DerivativeMode::ClosedForm).unwrap();
        let el = ym_energy(&gl, &RegionSpec::Ball { r: 1e-3 / delta }, &MetricModel::Flat, &res, DerivativeMode::ClosedForm).unwrap();
        assert!((e1.value - el.value).abs() < 1e-9 * e1.value);
        let rot = GaugeRotated { field: g1.clone(), rotation: [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]] };
        let er = ym_energy(&rot, &RegionSpec::Ball { r: 1.0 / delta }, &MetricModel::Flat, &res, DerivativeMode::ClosedForm).unwrap();
        assert!((er.value - e1.value).abs() < 1e-12 * e1.value);
    }

    #[test]
    fn regular_and_inverted_agree_on_mapped_annuli() {
        // τ maps the annulus 1/b < |x| < 1/a onto a < |x| < b.
        let res = Resolution::with_sphere(4);
        let reg = InstantonGauge::new(GaugeKind::Regular, 1.0).unwrap();
        let inv = InstantonGauge::new(GaugeKind::Inverted, 1.0).unwrap();
        let (a, b) = (0.5, 3.0);
        let er = ym_energy(&reg, &RegionSpec::Annulus { r_in: a, r_out: b }, &MetricModel::Flat, &res, DerivativeMode::ClosedForm).unwrap();
        let ei = ym_energy(&inv, &RegionSpec::Annulus { r_in: 1.0 / b, r_out: 1.0 / a }, &MetricModel::Flat, &res, DerivativeMode::ClosedForm)
            .unwrap();
        assert!((er.value - ei.value).abs() < 1e-9 * er.value);
    }

    #[test]
    fn error_estimate_decreases() {
        let f = |x: &Point| Ok((x[0] * 3.0).cos() * (1.0 + x[2] * x[2]).recip());
        let region = RegionSpec::Ball { r: 1.0 };
        let mut last = f64::MAX;
        for n in [2, 4, 8] {
            let res = Resolution { sphere: n, radial_order: 2 * n, ..Default::default() };
            let i = integrate_scalar(f, &region, &MetricModel::Flat, &res).unwrap();
            assert!(i.error < last);
            last = i.error;
        }
    }

    #[test]
    fn summation_is_thread_count_independent() {
        let f = |x: &Point| Ok((x[0] + 2.0 * x[1]).sin().powi(2) + x[3]);
        let region = RegionSpec::Ball { r: 1.3 };
        let res = Resolution::default();
        let a = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| {
            integrate_scalar(f, &region, &MetricModel::Flat, &res).unwrap().value
        });
        let b = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| {
            integrate_scalar(f, &region, &MetricModel::Flat, &res).unwrap().value
        });
        assert_eq!(a.to_bits(), b.to_bits());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn quadratic_forms_on_sphere(c in proptest::collection::vec(-1.0f64..1.0, 10)) {
            // ∫ xᵀAx dω = (π²/2) tr A
            let rule = SphereRule::new(3);
            let a = [[c[0], c[1], c[2], c[3]], [c[1], c[4], c[5], c[6]], [c[2], c[5], c[7], c[8]], [c[3], c[6], c[8], c[9]]];
            let q = rule.integrate::<()>(|w| {
                let mut s = 0.0;
                for i in 0..4 { for j in 0..4 { s += a[i][j] * w[i] * w[j]; } }
                Ok(s)
            }).unwrap();
            let tr = c[0] + c[4] + c[7] + c[9];
            prop_assert!((q - PI * PI / 2.0 * tr).abs() < 1e-12);
        }
    }
}
