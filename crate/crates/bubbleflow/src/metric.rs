//! The one-parameter metric family used by the coupled flow.
//!
//! For a base point `b` and scale `mu >= mu_star` the weighted metric is
//! conformal: it equals the bubble pull-back metric on a chart ball around
//! `b`, a constant multiple `c_mu^2` of the flat metric far away, and a
//! cutoff blend in between. The working family pulls the weighted metric
//! back by a radial zoom diffeomorphism generated by
//! `d/dmu T(x) = -mu^-1 phi_G(x) x`, which freezes an inner core: its radial
//! profile `t_mu` satisfies `mu t_mu(r) = mu1 t_mu1(r)` wherever
//! `t_mu1(r) <= r2`, so the pulled-back metrics agree identically on a ball
//! of growing radius and the family reaches its singular limit at finite
//! parameter distance.
//!
//! In log-polar coordinates `s = f(ln r)`, `f(x) = ln(mu t_mu(e^x))`, the
//! pulled-back metric reads `sech(s)^2 (ds^2 + dtheta^2)`. On the grid this
//! is encoded as an area weight `rho_eff^2` plus a unit-determinant
//! anisotropy `M` supported on the transition annulus; `M = I` wherever the
//! zoom is locally an exact dilation.

use crate::error::BubbleflowError;
use crate::fields::{ConformalWeight, CylField, SphereField, VectorField};
use crate::numerics::{
    integrate_panels, pairwise_sum, smoothstep5, smoothstep5_deriv, Pchip,
};
use crate::sphere::{dot3, stereo_conformal_factor, tangent_project, Vec3};
use crate::torus::{wrap_delta, TorusSpec};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileMode {
    Paper,
    Desk,
}

/// Geometric constants of the metric family.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConstantProfile {
    pub mode: ProfileMode,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub mu_star: f64,
    /// Width of the ramp window in log-radius units.
    pub psi_gap_a: f64,
    /// Extra margin separating the core scale from the window.
    pub psi_gap_b: f64,
}

impl ConstantProfile {
    /// Reference constants: gaps (4, 1).
    pub fn paper(spec: &TorusSpec) -> Self {
        Self::with_gaps(spec, ProfileMode::Paper, 4.0, 1.0).expect("paper profile")
    }

    /// Grid-friendly constants. The gaps are chosen so the family floor
    /// `mu_star = e^(a+b)/r1` sits below the concentration scales the flow
    /// experiments start from, and so both the frozen core and the ramp
    /// window span several grid cells at moderate resolutions. On a side-2
    /// torus at grid 512 this gives `mu_star ~ 29.4`, a core of ~9 cells and
    /// an initial window of ~20 radial cells.
    pub fn desk(spec: &TorusSpec) -> Self {
        Self::with_gaps(spec, ProfileMode::Desk, 1.0, 0.3).expect("desk profile")
    }

    pub fn with_gaps(
        spec: &TorusSpec,
        mode: ProfileMode,
        gap_a: f64,
        gap_b: f64,
    ) -> Result<Self, BubbleflowError> {
        if !(gap_a > 0.1 && gap_a <= 4.0) || !(gap_b > 0.05 && gap_b <= 1.0) {
            return Err(BubbleflowError::ProfileInvalid(format!(
                "gaps ({gap_a}, {gap_b}) outside supported ranges (0.1, 4] x (0.05, 1]"
            )));
        }
        let iota = spec.inj_radius();
        let r0 = 0.5 * iota.min(1.0);
        let r1 = 0.25 * r0;
        let r2 = (-gap_a).exp() * r1;
        let r3 = (-gap_b).exp() * r2;
        let mu_star = 1.0 / r3;
        Ok(ConstantProfile {
            mode,
            r0,
            r1,
            r2,
            r3,
            mu_star,
            psi_gap_a: gap_a,
            psi_gap_b: gap_b,
        })
    }

    pub fn validate(&self) -> Result<(), BubbleflowError> {
        let expect_mu = (self.psi_gap_a + self.psi_gap_b).exp() / self.r1;
        if (self.mu_star - expect_mu).abs() > 1e-9 * expect_mu {
            return Err(BubbleflowError::ProfileInvalid(
                "mu_star inconsistent with the gap constants".into(),
            ));
        }
        Ok(())
    }
}

/// Smooth ramp `psi`: 0 below `-a`, 1 above 0, `psi(-a/2) = 1/2`,
/// `0 <= psi' <= (4/3)/a`, `int psi' = 1`.
///
/// The derivative is a plateau of height `4/(3a)` with quintic ramps of
/// width `a/4` at both ends, so `psi` is C^3.
#[derive(Debug, Clone, Copy)]
pub struct CutoffPsi {
    pub a: f64,
    d: f64,
    m: f64,
}

impl CutoffPsi {
    pub fn eval(&self, s: f64) -> f64 {
        let (a, d, m) = (self.a, self.d, self.m);
        if s <= -a {
            0.0
        } else if s >= 0.0 {
            1.0
        } else if s <= -a + d {
            m * d * ramp_integral((s + a) / d)
        } else if s <= -d {
            m * (0.5 * d + (s + a - d))
        } else {
            1.0 - m * d * ramp_integral(-s / d)
        }
    }

    pub fn deriv(&self, s: f64) -> f64 {
        let (a, d, m) = (self.a, self.d, self.m);
        if s <= -a || s >= 0.0 {
            0.0
        } else if s <= -a + d {
            m * smoothstep5((s + a) / d)
        } else if s <= -d {
            m
        } else {
            m * smoothstep5(-s / d)
        }
    }

    pub fn deriv_deriv(&self, s: f64) -> f64 {
        let (a, d, m) = (self.a, self.d, self.m);
        if s <= -a || s >= 0.0 {
            0.0
        } else if s <= -a + d {
            m * smoothstep5_deriv((s + a) / d) / d
        } else if s <= -d {
            0.0
        } else {
            -m * smoothstep5_deriv(-s / d) / d
        }
    }

    /// Quadrature breakpoints of the piecewise definition, shifted by `off`.
    pub fn breakpoints(&self, off: f64) -> [f64; 4] {
        [
            off - self.a,
            off - self.a + self.d,
            off - self.d,
            off,
        ]
    }

    pub fn slope_bound(&self) -> f64 {
        self.m
    }
}

/// Antiderivative of the quintic smoothstep, `int_0^t S(u) du`.
fn ramp_integral(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        t - 0.5
    } else {
        let t4 = t * t * t * t;
        t4 * (2.5 - 3.0 * t + t * t)
    }
}

pub fn build_psi(profile: &ConstantProfile) -> Result<CutoffPsi, BubbleflowError> {
    profile.validate()?;
    let a = profile.psi_gap_a;
    let d = 0.25 * a;
    let m = 1.0 / (a - d);
    Ok(CutoffPsi { a, d, m })
}

impl CutoffPsi {
    /// Deliberately broken ramp for fault-injection tests: scales the
    /// plateau so the derivative mass is `scale` instead of 1.
    #[doc(hidden)]
    pub fn tampered(profile: &ConstantProfile, scale: f64) -> Self {
        let a = profile.psi_gap_a;
        let d = 0.25 * a;
        CutoffPsi {
            a,
            d,
            m: scale / (a - d),
        }
    }
}

/// Radial bump: 1 on `[0, r0/2]`, quintic descent to 0 on `[r0/2, r0]`.
#[derive(Debug, Clone, Copy)]
pub struct CutoffPhi {
    pub r0: f64,
}

impl CutoffPhi {
    pub fn eval(&self, r: f64) -> f64 {
        1.0 - smoothstep5((r - 0.5 * self.r0) / (0.5 * self.r0))
    }

    pub fn deriv(&self, r: f64) -> f64 {
        -smoothstep5_deriv((r - 0.5 * self.r0) / (0.5 * self.r0)) / (0.5 * self.r0)
    }
}

pub fn build_phi(profile: &ConstantProfile) -> Result<CutoffPhi, BubbleflowError> {
    profile.validate()?;
    Ok(CutoffPhi { r0: profile.r0 })
}

const XI_STEP: f64 = 0.01;
const TABLE_LEN: usize = 4096;

/// Radial zoom profile at a fixed scale `mu`.
///
/// Stores `sigma(r) = mu * t_mu(r)` on a dense log-radius table. `sigma` is
/// integrated on a canonical fixed grid in `xi = ln mu` so that frozen rows
/// (`t <= r2`, where the generator vanishes identically) are bit-identical
/// across scales; this is what makes the frozen-core equality testable at
/// the level of stored doubles.
#[derive(Debug, Clone)]
pub struct RadialDiffeo {
    pub mu: f64,
    pub profile: ConstantProfile,
    log_r: Vec<f64>,
    log_sigma: Vec<f64>,
    interp: Pchip,
    table_r_min: f64,
}

/// Integrator state on the canonical `xi` grid, extendable as `mu` grows.
#[derive(Debug, Clone)]
pub struct DiffeoCursor {
    profile: ConstantProfile,
    psi: CutoffPsi,
    log_r: Vec<f64>,
    /// sigma at the last completed canonical grid node
    sigma_nodes: Vec<f64>,
    steps_done: usize,
}

fn sigma_rhs(psi: &CutoffPsi, r1: f64, sigma: f64, mu: f64) -> f64 {
    // d sigma / d xi = sigma * psi(ln(t / r1)), t = sigma / mu
    let t = sigma / mu;
    if t <= 0.0 {
        return 0.0;
    }
    let arg = (t / r1).ln();
    if arg <= -psi.a {
        0.0
    } else {
        sigma * psi.eval(arg)
    }
}

fn rk4_sigma(psi: &CutoffPsi, r1: f64, sigma: f64, xi: f64, h: f64) -> f64 {
    let k1 = sigma_rhs(psi, r1, sigma, xi.exp());
    let k2 = sigma_rhs(psi, r1, sigma + 0.5 * h * k1, (xi + 0.5 * h).exp());
    let k3 = sigma_rhs(psi, r1, sigma + 0.5 * h * k2, (xi + 0.5 * h).exp());
    let k4 = sigma_rhs(psi, r1, sigma + h * k3, (xi + h).exp());
    sigma + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

impl DiffeoCursor {
    pub fn new(profile: &ConstantProfile) -> Result<Self, BubbleflowError> {
        let psi = build_psi(profile)?;
        // Radii below 0.9 r2 start frozen (t = r <= r2) and follow the exact
        // closed form sigma = mu_star * r; the table covers the rest.
        let r_min = 0.9 * profile.r2;
        let lo = r_min.ln();
        let hi = profile.r0.ln();
        let log_r: Vec<f64> = (0..TABLE_LEN)
            .map(|i| lo + (hi - lo) * i as f64 / (TABLE_LEN - 1) as f64)
            .collect();
        let sigma_nodes: Vec<f64> = log_r
            .iter()
            .map(|lr| profile.mu_star * lr.exp())
            .collect();
        Ok(DiffeoCursor {
            profile: *profile,
            psi,
            log_r,
            sigma_nodes,
            steps_done: 0,
        })
    }

    fn xi_at(&self, k: usize) -> f64 {
        self.profile.mu_star.ln() + XI_STEP * k as f64
    }

    /// Advance the canonical grid so it does not lag behind `mu`.
    pub fn advance_to(&mut self, mu: f64) -> Result<(), BubbleflowError> {
        if !(mu >= self.profile.mu_star * (1.0 - 1e-12)) {
            return Err(BubbleflowError::OdeStepFailure(format!(
                "mu = {mu} below the family floor {}",
                self.profile.mu_star
            )));
        }
        let xi_target = mu.ln();
        while self.xi_at(self.steps_done) + XI_STEP <= xi_target {
            let xi = self.xi_at(self.steps_done);
            for (s, _) in self.sigma_nodes.iter_mut().zip(&self.log_r) {
                *s = rk4_sigma(&self.psi, self.profile.r1, *s, xi, XI_STEP);
            }
            self.steps_done += 1;
        }
        Ok(())
    }

    /// Materialise the profile at `mu` (one partial step off the canonical grid).
    pub fn table_at(&self, mu: f64) -> Result<RadialDiffeo, BubbleflowError> {
        let xi_node = self.xi_at(self.steps_done);
        let xi_target = mu.ln();
        if xi_target < xi_node - 1e-12 || xi_target > xi_node + XI_STEP + 1e-12 {
            return Err(BubbleflowError::OdeStepFailure(format!(
                "cursor at ln mu = {xi_node} cannot reach ln mu = {xi_target}"
            )));
        }
        let h = xi_target - xi_node;
        let mut log_sigma = Vec::with_capacity(TABLE_LEN);
        for s in &self.sigma_nodes {
            let val = if h.abs() < 1e-300 {
                *s
            } else {
                rk4_sigma(&self.psi, self.profile.r1, *s, xi_node, h)
            };
            log_sigma.push(val.ln());
        }
        for w in log_sigma.windows(2) {
            if w[1] <= w[0] {
                let idx = log_sigma
                    .iter()
                    .position(|v| *v == w[1])
                    .unwrap_or(0);
                return Err(BubbleflowError::MonotonicityLost(idx));
            }
        }
        let interp = Pchip::new(self.log_r.clone(), log_sigma.clone());
        Ok(RadialDiffeo {
            mu,
            profile: self.profile,
            log_r: self.log_r.clone(),
            log_sigma,
            interp,
            table_r_min: self.log_r[0].exp(),
        })
    }
}

/// Integrate the radial profile from the family floor up to `mu`.
pub fn solve_radial_diffeo(
    mu: f64,
    profile: &ConstantProfile,
) -> Result<RadialDiffeo, BubbleflowError> {
    if mu < profile.mu_star * (1.0 - 1e-12) {
        return Err(BubbleflowError::OdeStepFailure(format!(
            "mu = {mu} below mu_star = {}",
            profile.mu_star
        )));
    }
    let mut cursor = DiffeoCursor::new(profile)?;
    cursor.advance_to(mu)?;
    cursor.table_at(mu)
}

impl RadialDiffeo {
    pub fn x_mu(&self) -> f64 {
        (self.mu * self.profile.r1).ln()
    }

    /// `f(ln r) = ln(mu t_mu(r))`, the log-polar coordinate map.
    pub fn f_of_log_r(&self, log_r: f64) -> f64 {
        if log_r <= self.table_r_min.ln() {
            // frozen closed form sigma = mu_star r
            self.profile.mu_star.ln() + log_r
        } else if log_r >= self.profile.r1.ln() {
            // identity zone: t = r
            self.mu.ln() + log_r
        } else {
            self.interp.eval(log_r)
        }
    }

    /// `f'(ln r)`, the radial stretch of the log coordinate (>= 1).
    pub fn fprime_of_log_r(&self, log_r: f64) -> f64 {
        if log_r <= self.table_r_min.ln() || log_r >= self.profile.r1.ln() {
            1.0
        } else {
            self.interp.eval_deriv(log_r)
        }
    }

    /// Inverse of `f`: the log radius whose cylinder coordinate is `s`.
    pub fn f_inv(&self, s: f64) -> f64 {
        let lo = self.table_r_min.ln();
        let hi = self.profile.r1.ln();
        if s <= self.f_of_log_r(lo) {
            s - self.profile.mu_star.ln()
        } else if s >= self.f_of_log_r(hi) {
            s - self.mu.ln()
        } else {
            self.interp.invert(s)
        }
    }

    pub fn t_mu(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        if r >= self.profile.r1 {
            return r;
        }
        (self.f_of_log_r(r.ln())).exp() / self.mu
    }

    /// Radius of the frozen set: `t_mu(r_g) = r2`.
    pub fn r_g(&self) -> f64 {
        self.f_inv((self.mu * self.profile.r2).ln()).exp()
    }

    /// Raw table values (for the frozen-core bitwise comparison).
    pub fn table(&self) -> (&[f64], &[f64]) {
        (&self.log_r, &self.log_sigma)
    }
}

/// Pointwise metric data at chart radius `r` from the base point.
#[derive(Debug, Clone, Copy)]
pub struct MetricPoint {
    /// Area weight: volume element is `rho_eff_sq dx`.
    pub rho_eff_sq: f64,
    /// Radial stretch; 1 away from the transition annulus.
    pub fprime: f64,
    /// ramp derivative evaluated in the window variable, 0 off the window
    pub psi_prime: f64,
    /// cylinder coordinate, meaningful inside the chart ball
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Weighted,
    PulledBack,
}

/// Metric family member bound to a base point and grid.
#[derive(Debug, Clone)]
pub struct MetricState {
    pub spec: TorusSpec,
    pub profile: ConstantProfile,
    pub b: [f64; 2],
    pub mu: f64,
    pub repr: Representation,
    pub diffeo: RadialDiffeo,
    psi: CutoffPsi,
    phi: CutoffPhi,
}

impl MetricState {
    pub fn new(
        spec: TorusSpec,
        profile: ConstantProfile,
        b: [f64; 2],
        mu: f64,
        repr: Representation,
    ) -> Result<Self, BubbleflowError> {
        let diffeo = solve_radial_diffeo(mu, &profile)?;
        Ok(MetricState {
            spec,
            profile,
            b,
            mu,
            repr,
            diffeo,
            psi: build_psi(&profile)?,
            phi: build_phi(&profile)?,
        })
    }

    pub fn with_diffeo(
        spec: TorusSpec,
        profile: ConstantProfile,
        b: [f64; 2],
        repr: Representation,
        diffeo: RadialDiffeo,
    ) -> Result<Self, BubbleflowError> {
        Ok(MetricState {
            spec,
            profile,
            b,
            mu: diffeo.mu,
            repr,
            diffeo,
            psi: build_psi(&profile)?,
            phi: build_phi(&profile)?,
        })
    }

    pub fn c_mu(&self) -> f64 {
        stereo_conformal_factor(self.profile.r0, self.mu)
    }

    /// Conformal factor squared of the weighted representation at radius `r`.
    pub fn weighted_rho_sq(&self, r: f64) -> f64 {
        let p = &self.profile;
        if r >= p.r0 {
            let c = self.c_mu();
            c * c
        } else {
            let rp = stereo_conformal_factor(r, self.mu);
            let phi = self.phi.eval(r);
            let c = self.c_mu();
            phi * rp * rp + (1.0 - phi) * c * c
        }
    }

    /// Pointwise pulled-back metric data at chart radius `r`.
    pub fn point(&self, r: f64) -> MetricPoint {
        let p = &self.profile;
        if self.repr == Representation::Weighted || r >= p.r1 {
            let rho_sq = self.weighted_rho_sq(r);
            return MetricPoint {
                rho_eff_sq: rho_sq,
                fprime: 1.0,
                psi_prime: 0.0,
                s: if r > 0.0 {
                    (self.mu * r.max(1e-300)).ln()
                } else {
                    f64::NEG_INFINITY
                },
            };
        }
        if r <= 0.0 {
            let rp = stereo_conformal_factor(0.0, p.mu_star);
            return MetricPoint {
                rho_eff_sq: rp * rp,
                fprime: 1.0,
                psi_prime: 0.0,
                s: f64::NEG_INFINITY,
            };
        }
        let log_r = r.ln();
        if log_r <= self.diffeo.table_r_min.ln() {
            // frozen core: exact dilation by mu_star
            let rp = stereo_conformal_factor(r, p.mu_star);
            return MetricPoint {
                rho_eff_sq: rp * rp,
                fprime: 1.0,
                psi_prime: 0.0,
                s: p.mu_star.ln() + log_r,
            };
        }
        let s = self.diffeo.f_of_log_r(log_r);
        let fp = self.diffeo.fprime_of_log_r(log_r);
        let sech = 1.0 / s.cosh();
        let rho_eff_sq = sech * sech * fp / (r * r);
        MetricPoint {
            rho_eff_sq,
            fprime: fp,
            psi_prime: self.psi.deriv(s - self.diffeo.x_mu()),
            s,
        }
    }

    /// Chart offset and radius of a grid point relative to the base point.
    pub fn offset(&self, x: [f64; 2]) -> ([f64; 2], f64) {
        let d = wrap_delta(&self.spec, self.b, x);
        let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
        (d, r)
    }

    /// Full 2x2 metric tensor in Cartesian coordinates at a point.
    pub fn tensor_at(&self, x: [f64; 2]) -> [[f64; 2]; 2] {
        let (d, r) = self.offset(x);
        let mp = self.point(r);
        if mp.fprime == 1.0 || r == 0.0 {
            return [[mp.rho_eff_sq, 0.0], [0.0, mp.rho_eff_sq]];
        }
        // rho_eff^2 = sech^2 f' / r^2; radial coefficient sech^2 f'^2/r^2,
        // tangential sech^2 / r^2
        let base = mp.rho_eff_sq / mp.fprime;
        let a_rad = base * mp.fprime * mp.fprime;
        let b_tan = base;
        anisotropic_tensor(d, r, a_rad, b_tan)
    }

    /// Quadratic form `g(w, w)` at a point (any representation).
    pub fn quadratic_form(&self, x: [f64; 2], w: [f64; 2]) -> f64 {
        let t = self.tensor_at(x);
        t[0][0] * w[0] * w[0] + 2.0 * t[0][1] * w[0] * w[1] + t[1][1] * w[1] * w[1]
    }

    /// d/dmu of the metric tensor at a point, closed form.
    pub fn dmu_tensor_at(&self, x: [f64; 2]) -> [[f64; 2]; 2] {
        let (d, r) = self.offset(x);
        let p = &self.profile;
        let mu = self.mu;
        if self.repr == Representation::PulledBack && r < p.r1 && r > 0.0 {
            let mp = self.point(r);
            if mp.fprime == 1.0 && mp.psi_prime == 0.0 && mp.s - self.diffeo.x_mu() <= -self.psi.a
            {
                return [[0.0, 0.0], [0.0, 0.0]];
            }
            let w = mp.s - self.diffeo.x_mu();
            let psi_v = self.psi.eval(w);
            let psi_p = self.psi.deriv(w);
            let tanh_s = mp.s.tanh();
            let rate_rad = 2.0 / mu * (psi_p - tanh_s * psi_v);
            let rate_tan = -2.0 / mu * tanh_s * psi_v;
            let base = mp.rho_eff_sq / mp.fprime;
            let a_rad = base * mp.fprime * mp.fprime * rate_rad;
            let b_tan = base * rate_tan;
            return anisotropic_tensor(d, r, a_rad, b_tan);
        }
        // conformal zones: differentiate the blended weight analytically
        let drho_sq = self.dmu_weighted_rho_sq(r);
        [[drho_sq, 0.0], [0.0, drho_sq]]
    }

    fn dmu_weighted_rho_sq(&self, r: f64) -> f64 {
        let p = &self.profile;
        let mu = self.mu;
        let dc_sq = {
            let c = self.c_mu();
            let dc = 2.0 * (1.0 - mu * mu * p.r0 * p.r0)
                / ((1.0 + mu * mu * p.r0 * p.r0) * (1.0 + mu * mu * p.r0 * p.r0));
            2.0 * c * dc
        };
        if r >= p.r0 {
            dc_sq
        } else {
            let q = 1.0 + mu * mu * r * r;
            let drho_pi_sq = 8.0 * mu * (1.0 - mu * mu * r * r) / (q * q * q);
            let phi = self.phi.eval(r);
            phi * drho_pi_sq + (1.0 - phi) * dc_sq
        }
    }

    /// Conformal weight of the weighted representation on the grid.
    pub fn metric_weight(&self) -> ConformalWeight {
        let n = self.spec.grid_n;
        let mut rho = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                let (_, r) = self.offset(self.spec.node(i, j));
                rho[j * n + i] = self.weighted_rho_sq(r).sqrt();
            }
        }
        ConformalWeight {
            spec: self.spec,
            rho,
        }
    }

    /// Area weight of the pulled-back representation on the grid.
    ///
    /// Exact conformal factor wherever the zoom is a local dilation; on the
    /// transition annulus the returned scalar reproduces the area element
    /// while the unit-determinant anisotropy is carried separately by
    /// [`AnisoGrid`].
    pub fn pulled_back_weight(&self) -> ConformalWeight {
        let n = self.spec.grid_n;
        let mut rho = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                let (_, r) = self.offset(self.spec.node(i, j));
                rho[j * n + i] = self.point(r).rho_eff_sq.sqrt();
            }
        }
        ConformalWeight {
            spec: self.spec,
            rho,
        }
    }

    /// Norms of the metric velocity d/dmu g by radial quadrature.
    pub fn dmu_metric(&self) -> DmuMetric<'_> {
        DmuMetric::new(self)
    }

    /// Log-polar resampling chart covering the ramp window.
    pub fn cylinder_chart(&self, ds: f64, n_theta: usize) -> CylinderChart {
        CylinderChart::new(self, ds, n_theta)
    }
}

fn anisotropic_tensor(d: [f64; 2], r: f64, a_rad: f64, b_tan: f64) -> [[f64; 2]; 2] {
    let cx = d[0] / r;
    let cy = d[1] / r;
    [
        [
            a_rad * cx * cx + b_tan * cy * cy,
            (a_rad - b_tan) * cx * cy,
        ],
        [
            (a_rad - b_tan) * cx * cy,
            a_rad * cy * cy + b_tan * cx * cx,
        ],
    ]
}

/// Closed-form metric velocity with quadrature norms.
pub struct DmuMetric<'a> {
    ms: &'a MetricState,
}

impl<'a> DmuMetric<'a> {
    fn new(ms: &'a MetricState) -> Self {
        DmuMetric { ms }
    }

    pub fn tensor_at(&self, x: [f64; 2]) -> [[f64; 2]; 2] {
        self.ms.dmu_tensor_at(x)
    }

    /// `|d/dmu g|_g^2` at cylinder coordinate `s` inside the chart ball.
    fn norm_sq_cyl(&self, s: f64) -> f64 {
        let mu = self.ms.mu;
        let w = s - self.ms.diffeo.x_mu();
        let psi_v = self.ms.psi.eval(w);
        let psi_p = self.ms.psi.deriv(w);
        let t = s.tanh();
        let a = psi_p - t * psi_v;
        let b = t * psi_v;
        4.0 / (mu * mu) * (a * a + b * b)
    }

    /// L2(g) norm squared over the whole surface.
    pub fn l2_norm_sq(&self) -> f64 {
        let ms = self.ms;
        let p = &ms.profile;
        let two_pi = 2.0 * std::f64::consts::PI;
        // transition annulus, in the cylinder coordinate
        let x_mu = ms.diffeo.x_mu();
        let bp = ms.psi.breakpoints(x_mu);
        let cyl = two_pi
            * integrate_panels(
                |s| {
                    let sech = 1.0 / s.cosh();
                    self.norm_sq_cyl(s) * sech * sech
                },
                &bp,
                8,
            );
        // conformal zones: |dg|_g^2 = 2 (drho^2 / rho^2)^2, dv = rho^2 r dr dtheta
        let conf = |r: f64| -> f64 {
            let rho_sq = ms.weighted_rho_sq(r);
            let d = ms.dmu_weighted_rho_sq(r);
            2.0 * d * d / rho_sq * r
        };
        let mid = two_pi
            * integrate_panels(
                conf,
                &crate::numerics::log_breaks(p.r1, p.r0, 64),
                2,
            );
        let bulk_area = ms.spec.area() - std::f64::consts::PI * p.r0 * p.r0;
        let c = ms.c_mu();
        let dc_sq = ms.dmu_weighted_rho_sq(p.r0);
        let bulk = 2.0 * dc_sq * dc_sq / (c * c) * bulk_area;
        cyl + mid + bulk
    }

    /// L-infinity(g) norm over the whole surface.
    pub fn linf_norm(&self) -> f64 {
        let ms = self.ms;
        let p = &ms.profile;
        let x_mu = ms.diffeo.x_mu();
        let mut worst: f64 = 0.0;
        for k in 0..=400 {
            let s = x_mu - p.psi_gap_a + p.psi_gap_a * k as f64 / 400.0;
            worst = worst.max(self.norm_sq_cyl(s).sqrt());
        }
        for k in 0..=400 {
            let r = p.r1 + (p.r0 * 4.0 - p.r1) * k as f64 / 400.0;
            let r = r.min(ms.spec.inj_radius() * 0.999);
            let rho_sq = ms.weighted_rho_sq(r);
            let d = ms.dmu_weighted_rho_sq(r);
            worst = worst.max(std::f64::consts::SQRT_2 * d.abs() / rho_sq);
        }
        worst
    }
}

/// Log-polar resampling chart around the base point.
pub struct CylinderChart {
    pub s_values: Vec<f64>,
    pub ring_radii: Vec<f64>,
    pub n_theta: usize,
    pub ds: f64,
    pub x_mu: f64,
}

impl CylinderChart {
    fn new(ms: &MetricState, ds: f64, n_theta: usize) -> Self {
        let x_mu = ms.diffeo.x_mu();
        let a = ms.profile.psi_gap_a;
        let s_lo = x_mu - (a + 2.0);
        let s_hi = x_mu + 2.0 * ds;
        let n_s = ((s_hi - s_lo) / ds).ceil() as usize + 1;
        let s_values: Vec<f64> = (0..n_s).map(|k| s_lo + k as f64 * ds).collect();
        let ring_radii: Vec<f64> = s_values
            .iter()
            .map(|s| ms.diffeo.f_inv(*s).exp())
            .collect();
        CylinderChart {
            s_values,
            ring_radii,
            n_theta,
            ds,
            x_mu,
        }
    }

    /// Rings overlapping the open ramp window `(x_mu - a, x_mu)`.
    pub fn rings_in_window(&self, a: f64) -> usize {
        self.s_values
            .iter()
            .filter(|s| **s > self.x_mu - a && **s < self.x_mu)
            .count()
    }

    /// Bilinear resample of a grid field onto the chart lattice.
    pub fn resample(&self, u: &SphereField, b: [f64; 2]) -> CylField {
        let n_s = self.s_values.len();
        let mut data = vec![[0.0f64; 3]; n_s * self.n_theta];
        let dth = 2.0 * std::f64::consts::PI / self.n_theta as f64;
        for (k, r) in self.ring_radii.iter().enumerate() {
            for m in 0..self.n_theta {
                let th = m as f64 * dth;
                let p = [b[0] + r * th.cos(), b[1] + r * th.sin()];
                let v = u.sample_bilinear([u.spec.wrap(p[0]), u.spec.wrap(p[1])]);
                data[k * self.n_theta + m] = crate::sphere::normalize3(v);
            }
        }
        CylField {
            n_s,
            n_theta: self.n_theta,
            s0: self.s_values[0],
            ds: self.ds,
            data,
        }
    }

    /// Resample an analytic field given by a closure on torus points.
    pub fn resample_fn<F: Fn([f64; 2]) -> Vec3>(&self, spec: &TorusSpec, b: [f64; 2], f: F) -> CylField {
        let n_s = self.s_values.len();
        let mut data = vec![[0.0f64; 3]; n_s * self.n_theta];
        let dth = 2.0 * std::f64::consts::PI / self.n_theta as f64;
        for (k, r) in self.ring_radii.iter().enumerate() {
            for m in 0..self.n_theta {
                let th = m as f64 * dth;
                let p = [spec.wrap(b[0] + r * th.cos()), spec.wrap(b[1] + r * th.sin())];
                data[k * self.n_theta + m] = crate::sphere::normalize3(f(p));
            }
        }
        CylField {
            n_s,
            n_theta: self.n_theta,
            s0: self.s_values[0],
            ds: self.ds,
            data,
        }
    }
}

/// Grid-resident anisotropy and window data for the pulled-back metric.
///
/// Carries everything the flow kernels need per step: the area weight, the
/// unit-determinant anisotropy at edge midpoints, its mu-derivative, and the
/// bounding box of the chart ball.
pub struct AnisoGrid {
    pub spec: TorusSpec,
    pub b: [f64; 2],
    pub mu: f64,
    /// area weight rho_eff^2 per node
    pub rho_sq: Vec<f64>,
    pub inv_rho_sq: Vec<f64>,
    /// chart radius of each node (fixed for a fixed base point)
    pub r_node: Vec<f64>,
    /// 0 = bulk, 1 = blend zone, 2 = chart ball
    zone: Vec<u8>,
    /// box (i0, j0, side) in node indices containing the chart ball
    pub box_i0: usize,
    pub box_j0: usize,
    pub box_n: usize,
    /// M components minus identity at x-edge midpoints, y-edge midpoints and
    /// nodes; indexed within the box, row-major box_n x box_n
    pub m11_minus: Vec<f64>,
    pub m22_minus: Vec<f64>,
    pub m12: Vec<f64>,
    /// d/dmu of the anisotropy at the same sample points
    pub dm11: Vec<f64>,
    pub dm22: Vec<f64>,
    pub dm12: Vec<f64>,
    pub min_rho_sq: f64,
    pub max_fprime: f64,
    /// min over nodes of rho_eff^2 / mean(f', 1/f'): the local explicit
    /// stability weight (the stretch sits where the weight is large, so it
    /// must not be charged against the bulk)
    pub min_cfl_weight: f64,
}

impl AnisoGrid {
    pub fn build(ms: &MetricState) -> Self {
        let spec = ms.spec;
        let n = spec.grid_n;
        let h = spec.h();
        let p = &ms.profile;
        // bounding box around the chart ball, with margin
        let reach = (p.r1 / h).ceil() as usize + 3;
        let bi = (ms.b[0] / h).round() as i64;
        let bj = (ms.b[1] / h).round() as i64;
        let box_n = (2 * reach + 1).min(n);
        let box_i0 = (bi - reach as i64).rem_euclid(n as i64) as usize;
        let box_j0 = (bj - reach as i64).rem_euclid(n as i64) as usize;

        // radius and zone of every node, fixed once (the base point is fixed)
        let mut r_node = vec![0.0f64; n * n];
        let mut zone = vec![0u8; n * n];
        for j in 0..n {
            for i in 0..n {
                let (_, r) = ms.offset(spec.node(i, j));
                r_node[j * n + i] = r;
                zone[j * n + i] = if r >= p.r0 {
                    0
                } else if r >= p.r1 {
                    1
                } else {
                    2
                };
            }
        }

        let mut grid = AnisoGrid {
            spec,
            b: ms.b,
            mu: ms.mu,
            rho_sq: vec![0.0; n * n],
            inv_rho_sq: vec![0.0; n * n],
            r_node,
            zone,
            box_i0,
            box_j0,
            box_n,
            m11_minus: vec![0.0; box_n * box_n],
            m22_minus: vec![0.0; box_n * box_n],
            m12: vec![0.0; box_n * box_n],
            dm11: vec![0.0; box_n * box_n],
            dm22: vec![0.0; box_n * box_n],
            dm12: vec![0.0; box_n * box_n],
            min_rho_sq: f64::INFINITY,
            max_fprime: 1.0,
            min_cfl_weight: f64::INFINITY,
        };
        grid.refresh(ms);
        grid
    }

    /// Recompute all cached values for the current scale of `ms` without
    /// reallocating. The base point and grid must match the build call.
    pub fn refresh(&mut self, ms: &MetricState) {
        assert_eq!(self.b, ms.b);
        let spec = ms.spec;
        let n = spec.grid_n;
        let h = spec.h();
        self.mu = ms.mu;
        let c = ms.c_mu();
        let bulk = c * c;
        let inv_bulk = 1.0 / bulk;
        let pulled = ms.repr == Representation::PulledBack;
        let zone = &self.zone;
        let r_node = &self.r_node;
        let mins: Vec<f64> = self
            .rho_sq
            .par_chunks_mut(n)
            .zip(self.inv_rho_sq.par_chunks_mut(n))
            .enumerate()
            .map(|(j, (rho_row, inv_row))| {
                let mut row_min = f64::INFINITY;
                for i in 0..n {
                    let idx = j * n + i;
                    let v = match zone[idx] {
                        0 => bulk,
                        1 => ms.weighted_rho_sq(r_node[idx]),
                        _ => {
                            if pulled {
                                ms.point(r_node[idx]).rho_eff_sq
                            } else {
                                ms.weighted_rho_sq(r_node[idx])
                            }
                        }
                    };
                    rho_row[i] = v;
                    inv_row[i] = if zone[idx] == 0 { inv_bulk } else { 1.0 / v };
                    if v < row_min {
                        row_min = v;
                    }
                }
                row_min
            })
            .collect();
        self.min_rho_sq = mins.into_iter().fold(f64::INFINITY, f64::min);

        self.max_fprime = 1.0;
        self.min_cfl_weight = self.min_rho_sq;
        if pulled {
            let box_n = self.box_n;
            for jj in 0..box_n {
                let j = (self.box_j0 + jj) % n;
                for ii in 0..box_n {
                    let i = (self.box_i0 + ii) % n;
                    let bidx = jj * box_n + ii;
                    let node = spec.node(i, j);
                    let px = [node[0] + 0.5 * h, node[1]];
                    let py = [node[0], node[1] + 0.5 * h];
                    let (m11c, _m12x, d11, _d12x, fp1) = ms.aniso_components(px, 0);
                    let (m22c, _m12y, d22, _d12y, fp2) = ms.aniso_components(py, 1);
                    let (_mn, m12n, _dn, d12n, fp3) = ms.aniso_components(node, 2);
                    self.m11_minus[bidx] = m11c - 1.0;
                    self.m22_minus[bidx] = m22c - 1.0;
                    self.m12[bidx] = m12n;
                    self.dm11[bidx] = d11;
                    self.dm22[bidx] = d22;
                    self.dm12[bidx] = d12n;
                    let fp = fp1.max(fp2).max(fp3);
                    self.max_fprime = self.max_fprime.max(fp);
                    let stretch = 0.5 * (fp + 1.0 / fp);
                    let w = self.rho_sq[j * n + i] / stretch;
                    if w < self.min_cfl_weight {
                        self.min_cfl_weight = w;
                    }
                }
            }
        }
    }
}

impl MetricState {
    /// Anisotropy components at a point: `(m_diag, m12, d/dmu m_diag,
    /// d/dmu m12, fprime)`. `which`: 0 = m11, 1 = m22, 2 = node (m12 slot).
    fn aniso_components(&self, x: [f64; 2], which: usize) -> (f64, f64, f64, f64, f64) {
        let (d, r) = self.offset(x);
        if r <= 0.0 || r >= self.profile.r1 {
            return (1.0, 0.0, 0.0, 0.0, 1.0);
        }
        let mp = self.point(r);
        let fp = mp.fprime;
        if (fp - 1.0).abs() < 1e-14 && mp.psi_prime == 0.0 {
            return (1.0, 0.0, 0.0, 0.0, 1.0);
        }
        let cx = d[0] / r;
        let cy = d[1] / r;
        // M = fp^-1 xhat xhat + fp that that
        let (e1, e2) = match which {
            0 => (cx * cx, cy * cy),
            1 => (cy * cy, cx * cx),
            _ => (cx * cx, cy * cy),
        };
        let m_diag = e1 / fp + e2 * fp;
        let m12 = (1.0 / fp - fp) * cx * cy;
        // d/dmu fp = mu^-1 psi'(s - X) fp
        let dfp = mp.psi_prime * fp / self.mu;
        let dm_diag = -e1 / (fp * fp) * dfp + e2 * dfp;
        let dm12 = (-1.0 / (fp * fp) - 1.0) * dfp * cx * cy;
        (m_diag, m12, dm_diag, dm12, fp)
    }

    /// Metric Dirichlet energy of a grid field: flat edge energy plus the
    /// anisotropy correction on the transition annulus.
    pub fn energy(&self, u: &SphereField, aniso: &AnisoGrid) -> f64 {
        let flat = crate::fields::dirichlet_energy(u);
        flat + self.energy_correction(u, aniso, false)
    }

    /// d/dmu of the metric Dirichlet energy at fixed field.
    pub fn denergy_dmu(&self, u: &SphereField, aniso: &AnisoGrid) -> f64 {
        self.energy_correction(u, aniso, true)
    }

    fn energy_correction(&self, u: &SphereField, aniso: &AnisoGrid, dmu: bool) -> f64 {
        if self.repr != Representation::PulledBack {
            return 0.0;
        }
        let n = self.spec.grid_n;
        let h = self.spec.h();
        let inv_h = 1.0 / h;
        let inv_2h = 0.5 * inv_h;
        let bn = aniso.box_n;
        let mut terms = Vec::with_capacity(bn);
        for jj in 0..bn {
            let j = (aniso.box_j0 + jj) % n;
            let jp = (j + 1) % n;
            let jm = (j + n - 1) % n;
            let mut acc = 0.0;
            for ii in 0..bn {
                let bidx = jj * bn + ii;
                let (c11, c22, c12) = if dmu {
                    (aniso.dm11[bidx], aniso.dm22[bidx], aniso.dm12[bidx])
                } else {
                    (aniso.m11_minus[bidx], aniso.m22_minus[bidx], aniso.m12[bidx])
                };
                if c11 == 0.0 && c22 == 0.0 && c12 == 0.0 {
                    continue;
                }
                let i = (aniso.box_i0 + ii) % n;
                let ip = (i + 1) % n;
                let im = (i + n - 1) % n;
                let c = u.get(i, j);
                if c11 != 0.0 {
                    let a = u.get(ip, j);
                    let dx = [
                        (a[0] - c[0]) * inv_h,
                        (a[1] - c[1]) * inv_h,
                        (a[2] - c[2]) * inv_h,
                    ];
                    acc += 0.5 * c11 * dot3(dx, dx);
                }
                if c22 != 0.0 {
                    let d = u.get(i, jp);
                    let dy = [
                        (d[0] - c[0]) * inv_h,
                        (d[1] - c[1]) * inv_h,
                        (d[2] - c[2]) * inv_h,
                    ];
                    acc += 0.5 * c22 * dot3(dy, dy);
                }
                if c12 != 0.0 {
                    let dxc = [
                        (u.get(ip, j)[0] - u.get(im, j)[0]) * inv_2h,
                        (u.get(ip, j)[1] - u.get(im, j)[1]) * inv_2h,
                        (u.get(ip, j)[2] - u.get(im, j)[2]) * inv_2h,
                    ];
                    let dyc = [
                        (u.get(i, jp)[0] - u.get(i, jm)[0]) * inv_2h,
                        (u.get(i, jp)[1] - u.get(i, jm)[1]) * inv_2h,
                        (u.get(i, jp)[2] - u.get(i, jm)[2]) * inv_2h,
                    ];
                    acc += c12 * dot3(dxc, dyc);
                }
            }
            terms.push(acc);
        }
        pairwise_sum(&terms) * self.spec.cell_area()
    }

    /// Tension field of the pulled-back metric: the exact negative gradient
    /// of [`MetricState::energy`] in L2(g), projected tangent.
    pub fn tension_into(&self, u: &SphereField, aniso: &AnisoGrid, out: &mut VectorField) {
        crate::fields::laplacian_into(u, out);
        if self.repr == Representation::PulledBack {
            self.add_aniso_force(u, aniso, out);
        }
        let n = self.spec.grid_n;
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(j, row)| {
                for (i, o) in row.iter_mut().enumerate() {
                    let c = u.get(i, j);
                    let t = tangent_project(c, *o);
                    let w = aniso.inv_rho_sq[j * n + i];
                    for k in 0..3 {
                        o[k] = w * t[k];
                    }
                }
            });
    }

    /// Add the variable-coefficient part of the force:
    /// `Dx-(m11- Dx+ u) + Dy-(m22- Dy+ u) + Dcx(m12 Dcy u) + Dcy(m12 Dcx u)`.
    fn add_aniso_force(&self, u: &SphereField, aniso: &AnisoGrid, out: &mut VectorField) {
        let n = self.spec.grid_n;
        let h = self.spec.h();
        let inv_h2 = 1.0 / (h * h);
        let bn = aniso.box_n;
        let at = |ii: i64, jj: i64| -> usize {
            // box-local index with clamp; callers stay inside the box margin
            let ii = ii.clamp(0, bn as i64 - 1) as usize;
            let jj = jj.clamp(0, bn as i64 - 1) as usize;
            jj * bn + ii
        };
        for jj in 0..bn {
            let j = (aniso.box_j0 + jj) % n;
            let jp = (j + 1) % n;
            let jm = (j + n - 1) % n;
            for ii in 0..bn {
                let i = (aniso.box_i0 + ii) % n;
                let ip = (i + 1) % n;
                let im = (i + n - 1) % n;
                let c = u.get(i, j);
                let idx = j * n + i;
                let mut add = [0.0f64; 3];
                // Dx-(m11- Dx+ u): m11- lives on x-edges (i -> i+1)
                let m_e = aniso.m11_minus[at(ii as i64, jj as i64)];
                let m_w = aniso.m11_minus[at(ii as i64 - 1, jj as i64)];
                if m_e != 0.0 || m_w != 0.0 {
                    let a = u.get(ip, j);
                    let b = u.get(im, j);
                    for k in 0..3 {
                        add[k] += (m_e * (a[k] - c[k]) - m_w * (c[k] - b[k])) * inv_h2;
                    }
                }
                let m_n = aniso.m22_minus[at(ii as i64, jj as i64)];
                let m_s = aniso.m22_minus[at(ii as i64, jj as i64 - 1)];
                if m_n != 0.0 || m_s != 0.0 {
                    let d = u.get(i, jp);
                    let e = u.get(i, jm);
                    for k in 0..3 {
                        add[k] += (m_n * (d[k] - c[k]) - m_s * (c[k] - e[k])) * inv_h2;
                    }
                }
                // cross terms with centred differences
                let cross_needed = aniso.m12[at(ii as i64 - 1, jj as i64)] != 0.0
                    || aniso.m12[at(ii as i64 + 1, jj as i64)] != 0.0
                    || aniso.m12[at(ii as i64, jj as i64 - 1)] != 0.0
                    || aniso.m12[at(ii as i64, jj as i64 + 1)] != 0.0;
                if cross_needed {
                    // Dcx(m12 Dcy u) at (i, j)
                    let gx = |iw: usize, iiw: i64| -> [f64; 3] {
                        let m = aniso.m12[at(iiw, jj as i64)];
                        if m == 0.0 {
                            return [0.0; 3];
                        }
                        let up = u.get(iw, jp);
                        let dn = u.get(iw, jm);
                        [
                            m * (up[0] - dn[0]),
                            m * (up[1] - dn[1]),
                            m * (up[2] - dn[2]),
                        ]
                    };
                    let fx_p = gx(ip, ii as i64 + 1);
                    let fx_m = gx(im, ii as i64 - 1);
                    let gy = |jw: usize, jjw: i64| -> [f64; 3] {
                        let m = aniso.m12[at(ii as i64, jjw)];
                        if m == 0.0 {
                            return [0.0; 3];
                        }
                        let rt = u.get(ip, jw);
                        let lt = u.get(im, jw);
                        [
                            m * (rt[0] - lt[0]),
                            m * (rt[1] - lt[1]),
                            m * (rt[2] - lt[2]),
                        ]
                    };
                    let fy_p = gy(jp, jj as i64 + 1);
                    let fy_m = gy(jm, jj as i64 - 1);
                    for k in 0..3 {
                        add[k] += 0.25 * inv_h2 * (fx_p[k] - fx_m[k] + fy_p[k] - fy_m[k]);
                    }
                }
                if add != [0.0; 3] {
                    for k in 0..3 {
                        out.data[idx][k] += add[k];
                    }
                }
            }
        }
    }
}

/// Report from the pointwise ordering sweep between two scales.
#[derive(Debug, Clone, Serialize)]
pub struct OrderingReport {
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub samples: usize,
    pub max_ratio: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Sample the ratio `g_mu2(w,w) / g_mu1(w,w)` over random points and
/// directions. For the reference constants the ratio is bounded by `e^3`.
pub fn ordering_check<R: Rng>(
    ms_lo: &MetricState,
    ms_hi: &MetricState,
    samples: usize,
    rng: &mut R,
) -> OrderingReport {
    assert!(ms_hi.mu >= ms_lo.mu);
    let mut max_ratio: f64 = 0.0;
    let p = &ms_lo.profile;
    for _ in 0..samples {
        // log-uniform radius biased into the chart, uniform angle
        let log_lo = (p.r3 * 1e-2).ln();
        let log_hi = (ms_lo.spec.inj_radius() * 0.999).ln();
        let r = (log_lo + rng.gen::<f64>() * (log_hi - log_lo)).exp();
        let th = rng.gen::<f64>() * std::f64::consts::TAU;
        let x = [
            ms_lo.spec.wrap(ms_lo.b[0] + r * th.cos()),
            ms_lo.spec.wrap(ms_lo.b[1] + r * th.sin()),
        ];
        let aw = rng.gen::<f64>() * std::f64::consts::TAU;
        let w = [aw.cos(), aw.sin()];
        let lo = ms_lo.quadratic_form(x, w);
        let hi = ms_hi.quadratic_form(x, w);
        if lo > 0.0 {
            max_ratio = max_ratio.max(hi / lo);
        }
    }
    let bound = (3.0f64).exp() * (1.0 + 1e-9);
    OrderingReport {
        mu_lo: ms_lo.mu,
        mu_hi: ms_hi.mu,
        samples,
        max_ratio,
        bound,
        pass: max_ratio <= bound,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::integrate_panels;
    use approx::assert_relative_eq;

    fn spec() -> TorusSpec {
        TorusSpec::new(1.0, 64).unwrap()
    }

    #[test]
    fn paper_profile_constants() {
        let s = spec();
        let p = ConstantProfile::paper(&s);
        assert_relative_eq!(p.r0, 0.25, epsilon = 1e-15);
        assert_relative_eq!(p.r1, 0.0625, epsilon = 1e-15);
        assert_relative_eq!(p.r2, (-4.0f64).exp() * p.r1, epsilon = 1e-15);
        assert_relative_eq!(p.r3, (-1.0f64).exp() * p.r2, epsilon = 1e-15);
        assert_relative_eq!(p.mu_star, 1.0 / p.r3, epsilon = 1e-9);
        assert_relative_eq!(p.mu_star, (5.0f64).exp() / p.r1, max_relative = 1e-12);
    }

    #[test]
    fn psi_ramp_invariants() {
        let s = spec();
        for profile in [ConstantProfile::paper(&s), ConstantProfile::desk(&s)] {
            let psi = build_psi(&profile).unwrap();
            let a = profile.psi_gap_a;
            assert_eq!(psi.eval(-a - 0.1), 0.0);
            assert_eq!(psi.eval(0.0), 1.0);
            assert_eq!(psi.eval(0.5), 1.0);
            assert_relative_eq!(psi.eval(-0.5 * a), 0.5, epsilon = 1e-12);
            // slope bound with equality on the plateau
            let bound = (4.0 / 3.0) / a;
            let mut max_slope: f64 = 0.0;
            for k in 0..=2000 {
                let sarg = -a + a * k as f64 / 2000.0;
                let d = psi.deriv(sarg);
                assert!(d >= 0.0);
                max_slope = max_slope.max(d);
            }
            assert!(max_slope <= bound * (1.0 + 1e-12));
            assert_relative_eq!(max_slope, bound, max_relative = 1e-6);
            // unit mass of the derivative
            let mass = integrate_panels(|x| psi.deriv(x), &psi.breakpoints(0.0), 8);
            assert_relative_eq!(mass, 1.0, epsilon = 1e-10);
            // FD check of deriv against eval
            let h = 1e-6;
            for sarg in [-a * 0.9, -a * 0.6, -a * 0.5, -a * 0.2] {
                let fd = (psi.eval(sarg + h) - psi.eval(sarg - h)) / (2.0 * h);
                assert_relative_eq!(fd, psi.deriv(sarg), max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn phi_bump_shape() {
        let s = spec();
        let p = ConstantProfile::paper(&s);
        let phi = build_phi(&p).unwrap();
        assert_eq!(phi.eval(0.0), 1.0);
        assert_eq!(phi.eval(0.5 * p.r0), 1.0);
        assert_eq!(phi.eval(p.r0), 0.0);
        assert_eq!(phi.eval(2.0 * p.r0), 0.0);
        let mut prev = 1.0;
        for k in 0..=100 {
            let v = phi.eval(p.r0 * k as f64 / 100.0);
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn radial_profile_identity_at_floor_and_dilation_core() {
        let s = spec();
        let p = ConstantProfile::paper(&s);
        let d = solve_radial_diffeo(p.mu_star, &p).unwrap();
        for &r in &[p.r3, p.r2, 0.5 * p.r1, p.r1, 2.0 * p.r1] {
            assert_relative_eq!(d.t_mu(r), r, max_relative = 1e-12);
        }
        // deep interior follows the exact dilation once t <= r2
        let mu = std::f64::consts::E * p.mu_star;
        let d2 = solve_radial_diffeo(mu, &p).unwrap();
        for &r in &[0.3 * p.r2, 0.9 * p.r2] {
            assert_relative_eq!(mu * d2.t_mu(r), p.mu_star * r, max_relative = 1e-10);
        }
        // identity outside r1 for every mu
        assert_relative_eq!(d2.t_mu(p.r1 * 1.5), p.r1 * 1.5, max_relative = 1e-14);
    }

    #[test]
    fn frozen_zone_identity_between_scales() {
        let s = spec();
        let p = ConstantProfile::paper(&s);
        let mu1 = 3.0 * p.mu_star;
        let d1 = solve_radial_diffeo(mu1, &p).unwrap();
        let d2 = solve_radial_diffeo(2.0 * mu1, &p).unwrap();
        let rg = d1.r_g();
        assert!(rg > p.r2 && rg < p.r1);
        // mu t_mu matches on the frozen zone; reference = half-step integration
        for &frac in &[0.2, 0.5, 0.9] {
            let r = rg * frac;
            let s1 = mu1 * d1.t_mu(r);
            let s2 = 2.0 * mu1 * d2.t_mu(r);
            assert_relative_eq!(s1, s2, max_relative = 1e-10);
        }
    }

    #[test]
    fn frozen_rows_are_bitwise_stable() {
        let s = spec();
        let p = ConstantProfile::paper(&s);
        let mu1 = 4.0 * p.mu_star;
        let d1 = solve_radial_diffeo(mu1, &p).unwrap();
        let d2 = solve_radial_diffeo(16.0 * p.mu_star, &p).unwrap();
        let (lr1, ls1) = d1.table();
        let (_, ls2) = d2.table();
        let rg = d1.r_g();
        let mut checked = 0;
        for (k, lr) in lr1.iter().enumerate() {
            if lr.exp() < rg * 0.995 {
                assert!(
                    ls1[k].to_bits() == ls2[k].to_bits(),
                    "row {k} at r = {} differs",
                    lr.exp()
                );
                checked += 1;
            }
        }
        assert!(checked > 100, "checked only {checked} rows");
    }

    #[test]
    fn weight_values_match_closed_forms() {
        let s = spec();
        let p = ConstantProfile::paper(&s);
        let mu = 10.0 * p.mu_star;
        let ms = MetricState::new(s, p, [0.5, 0.5], mu, Representation::Weighted).unwrap();
        // outside the bump: rho = c_mu = 2 mu/(1 + mu^2 r0^2)
        let c = 2.0 * mu / (1.0 + mu * mu * p.r0 * p.r0);
        assert_relative_eq!(ms.weighted_rho_sq(p.r0 * 1.5).sqrt(), c, max_relative = 1e-14);
        assert_relative_eq!(ms.weighted_rho_sq(p.r0).sqrt(), c, max_relative = 1e-14);
        // at the centre: rho^2 = 4 mu^2
        assert_relative_eq!(ms.weighted_rho_sq(0.0), 4.0 * mu * mu, max_relative = 1e-14);
        // bulk scaling: rho * mu within [1/r0^2, 4/r0^2] for large mu
        for &m in &[10.0 * p.mu_star, 100.0 * p.mu_star] {
            let msm = MetricState::new(s, p, [0.5, 0.5], m, Representation::Weighted).unwrap();
            let prod = msm.weighted_rho_sq(0.4).sqrt() * m;
            assert!(prod >= 1.0 / (p.r0 * p.r0) && prod <= 4.0 / (p.r0 * p.r0));
        }
    }

    #[test]
    fn pulled_back_core_is_fixed_dilation() {
        let s = spec();
        let p = ConstantProfile::paper(&s);
        for &mu in &[p.mu_star * 2.0, p.mu_star * 20.0] {
            let ms =
                MetricState::new(s, p, [0.5, 0.5], mu, Representation::PulledBack).unwrap();
            for &r in &[0.0, 0.2 * p.r3, 0.5 * p.r2] {
                let mp = ms.point(r);
                let expect = stereo_conformal_factor(r, p.mu_star);
                assert_relative_eq!(mp.rho_eff_sq, expect * expect, max_relative = 1e-12);
                assert_eq!(mp.fprime, 1.0);
            }
            // matches the weighted representation outside r1
            for &r in &[p.r1, 2.0 * p.r1, p.r0, 0.4] {
                assert_relative_eq!(
                    ms.point(r).rho_eff_sq,
                    ms.weighted_rho_sq(r),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn pulled_back_weight_is_continuous_at_seams() {
        let s = spec();
        let p = ConstantProfile::paper(&s);
        let mu = 7.0 * p.mu_star;
        let ms = MetricState::new(s, p, [0.5, 0.5], mu, Representation::PulledBack).unwrap();
        for &r in &[p.r1, 0.5 * p.r0, p.r0] {
            let lo = ms.point(r * (1.0 - 1e-7)).rho_eff_sq;
            let hi = ms.point(r * (1.0 + 1e-7)).rho_eff_sq;
            assert_relative_eq!(lo, hi, max_relative = 1e-4);
        }
    }

    #[test]
    fn dmu_norms_scale_as_expected() {
        let s = spec();
        let p = ConstantProfile::paper(&s);
        let mus = [p.mu_star, 10.0 * p.mu_star, 100.0 * p.mu_star];
        let mut l2 = Vec::new();
        let mut linf = Vec::new();
        for &mu in &mus {
            let ms =
                MetricState::new(s, p, [0.5, 0.5], mu, Representation::PulledBack).unwrap();
            let dm = ms.dmu_metric();
            l2.push(dm.l2_norm_sq().sqrt());
            linf.push(dm.linf_norm());
        }
        let (slope_l2, _) = crate::numerics::loglog_slope(&mus, &l2);
        let (slope_linf, _) = crate::numerics::loglog_slope(&mus, &linf);
        assert!((slope_l2 + 2.0).abs() < 0.05, "L2 slope {slope_l2}");
        assert!((slope_linf + 1.0).abs() < 0.05, "Linf slope {slope_linf}");
    }

    #[test]
    fn dmu_tensor_matches_finite_differences() {
        let s = spec();
        let p = ConstantProfile::paper(&s);
        let b = [0.5, 0.5];
        for &mu in &[2.0 * p.mu_star, 6.0 * p.mu_star, 20.0 * p.mu_star] {
            let h = 1e-4 * mu;
            let ms = MetricState::new(s, p, b, mu, Representation::PulledBack).unwrap();
            let ms_p = MetricState::new(s, p, b, mu + h, Representation::PulledBack).unwrap();
            let ms_m = MetricState::new(s, p, b, mu - h, Representation::PulledBack).unwrap();
            // probe radii across all zones
            let rg = ms.diffeo.r_g();
            for &r in &[0.5 * rg, 0.5 * (rg + p.r1), 0.96 * p.r1, 2.0 * p.r1, 0.6 * p.r0, 0.4]
            {
                let x = [b[0] + r, b[1]];
                let analytic = ms.dmu_tensor_at(x);
                let tp = ms_p.tensor_at(x);
                let tm = ms_m.tensor_at(x);
                let scale = analytic
                    .iter()
                    .flatten()
                    .fold(0.0f64, |m, v| m.max(v.abs()))
                    .max(1e-30);
                for a in 0..2 {
                    for bb in 0..2 {
                        let fd = (tp[a][bb] - tm[a][bb]) / (2.0 * h);
                        assert!(
                            (fd - analytic[a][bb]).abs() <= 2e-3 * scale + 1e-12,
                            "mu={mu} r={r} [{a}{bb}] fd={fd} an={}",
                            analytic[a][bb]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn dmu_vanishes_on_frozen_core() {
        let s = spec();
        let p = ConstantProfile::paper(&s);
        let mu = 5.0 * p.mu_star;
        let ms = MetricState::new(s, p, [0.5, 0.5], mu, Representation::PulledBack).unwrap();
        let rg = ms.diffeo.r_g();
        for &frac in &[0.1, 0.5, 0.9] {
            let t = ms.dmu_tensor_at([0.5 + rg * frac, 0.5]);
            for row in &t {
                for v in row {
                    assert!(v.abs() < 1e-14, "dmu g = {v} inside the frozen core");
                }
            }
        }
    }

    #[test]
    fn ordering_bound_holds_at_paper_constants() {
        let s = spec();
        let p = ConstantProfile::paper(&s);
        let b = [0.5, 0.5];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        use rand::SeedableRng;
        // identical scales give ratio 1
        let ms1 = MetricState::new(s, p, b, 3.0 * p.mu_star, Representation::PulledBack).unwrap();
        let same = ordering_check(&ms1, &ms1.clone(), 200, &mut rng);
        assert!((same.max_ratio - 1.0).abs() < 1e-12);
        // one e^2 step and a long step
        for factor in [std::f64::consts::E.powi(2), 50.0] {
            let ms2 = MetricState::new(
                s,
                p,
                b,
                factor * 3.0 * p.mu_star,
                Representation::PulledBack,
            )
            .unwrap();
            let rep = ordering_check(&ms1, &ms2, 4000, &mut rng);
            assert!(rep.pass, "ordering ratio {} at factor {factor}", rep.max_ratio);
        }
        // far bulk ratio is below 1 once mu r0 > 1
        let ms2 =
            MetricState::new(s, p, b, 9.0 * p.mu_star, Representation::PulledBack).unwrap();
        let far = ms2.quadratic_form([0.0, 0.0], [1.0, 0.0])
            / ms1.quadratic_form([0.0, 0.0], [1.0, 0.0]);
        assert!(far < 1.0);
    }

    #[test]
    fn limit_metric_is_cauchy_on_frozen_region() {
        let s = spec();
        let p = ConstantProfile::paper(&s);
        let b = [0.5, 0.5];
        let m1 = MetricState::new(s, p, b, 100.0 * p.mu_star, Representation::PulledBack).unwrap();
        let m2 = MetricState::new(s, p, b, 1000.0 * p.mu_star, Representation::PulledBack).unwrap();
        let rg = m1.diffeo.r_g();
        for &frac in &[0.2, 0.6, 0.95] {
            let x = [b[0] + rg * frac, b[1] + 0.3 * rg * frac];
            let t1 = m1.tensor_at(x);
            let t2 = m2.tensor_at(x);
            for a in 0..2 {
                for c in 0..2 {
                    assert!(
                        (t1[a][c] - t2[a][c]).abs() <= 1e-9 * t1[a][c].abs().max(1.0),
                        "limit metric not settled at {x:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn energy_correction_gradient_consistency() {
        // denergy_dmu equals a finite difference of the metric energy
        let s = TorusSpec::new(1.0, 96).unwrap();
        let p = ConstantProfile::desk(&s);
        let b = [0.5, 0.5];
        let mu = 1.5 * p.mu_star;
        let ms = MetricState::new(s, p, b, mu, Representation::PulledBack).unwrap();
        let aniso = AnisoGrid::build(&ms);
        let u = SphereField::from_fn(s, |x, y| {
            crate::sphere::normalize3([
                (2.0 * std::f64::consts::PI * x).cos() + 0.4,
                (2.0 * std::f64::consts::PI * y).sin(),
                1.0 + 0.5 * (4.0 * std::f64::consts::PI * x).sin(),
            ])
        });
        let de = ms.denergy_dmu(&u, &aniso);
        let h = 1e-4 * mu;
        let e = |m: f64| -> f64 {
            let msx = MetricState::new(s, p, b, m, Representation::PulledBack).unwrap();
            let ax = AnisoGrid::build(&msx);
            msx.energy(&u, &ax)
        };
        let fd = (e(mu + h) - e(mu - h)) / (2.0 * h);
        assert_relative_eq!(de, fd, max_relative = 2e-3, epsilon = 1e-12);
    }

    #[test]
    fn tension_is_exact_energy_gradient() {
        // dE/dt along u_dot = tau equals -|tau|^2_{L2(g)} to rounding
        let s = TorusSpec::new(1.0, 96).unwrap();
        let p = ConstantProfile::desk(&s);
        let b = [0.5, 0.5];
        let ms = MetricState::new(s, p, b, 1.3 * p.mu_star, Representation::PulledBack).unwrap();
        let aniso = AnisoGrid::build(&ms);
        let u = SphereField::from_fn(s, |x, y| {
            crate::sphere::normalize3([
                (2.0 * std::f64::consts::PI * x).cos(),
                (2.0 * std::f64::consts::PI * y).sin(),
                1.2,
            ])
        });
        let mut tau = VectorField::zeros(s);
        ms.tension_into(&u, &aniso, &mut tau);
        // directional derivative of the energy along tau (unconstrained,
        // tangent direction so the normalisation does not contribute)
        let eps = 1e-7;
        let perturb = |sign: f64| -> f64 {
            let mut v = u.clone();
            for (val, t) in v.data.iter_mut().zip(&tau.data) {
                for k in 0..3 {
                    val[k] += sign * eps * t[k];
                }
                *val = crate::sphere::normalize3(*val);
            }
            ms.energy(&v, &aniso)
        };
        let de_dt = (perturb(1.0) - perturb(-1.0)) / (2.0 * eps);
        let mut norm_sq = 0.0;
        for (t, w) in tau.data.iter().zip(&aniso.rho_sq) {
            norm_sq += dot3(*t, *t) * w;
        }
        norm_sq *= s.cell_area();
        assert_relative_eq!(de_dt, -norm_sq, max_relative = 1e-5);
    }
}
