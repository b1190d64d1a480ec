//! The coupled map/metric gradient flow: concentration-based initialisation,
//! Heun time stepping of `(u, mu)` with energy-monotone step control, the
//! frozen-metric continuation phase, and the travelled-distance ledger.

use crate::error::BubbleflowError;
use crate::fields::{cell_energy_density, SphereField, VectorField};
use crate::metric::{AnisoGrid, ConstantProfile, DiffeoCursor, MetricState, Representation};
use crate::numerics::pairwise_sum;
use crate::projection::{l2_norm_weighted, GradientNorm};
use crate::sphere::{degree, dot3, normalize3, Vec3};
use crate::torus::{ball_mask, TorusSpec, WeightField};
use serde::Serialize;

/// Search options for the concentration finder.
#[derive(Debug, Clone, Copy)]
pub struct ConcentrationOpts {
    /// reject inputs whose defect exceeds this value
    pub max_defect: f64,
    /// relative tolerance on hitting the half-mass energy level
    pub energy_tol: f64,
    /// refuse scales below the metric-family floor (disabled for plain fits)
    pub mu_floor: Option<f64>,
}

impl Default for ConcentrationOpts {
    fn default() -> Self {
        ConcentrationOpts {
            max_defect: 4.0,
            energy_tol: 1e-3,
            mu_floor: None,
        }
    }
}

const HALF_MASS: f64 = 2.0 * std::f64::consts::PI;

/// Ball-energy evaluator with a cached density field.
///
/// Evaluation walks the bounding window of the ball and accumulates inline
/// (full cells plus subsampled boundary cells); no per-call allocation, so
/// the argmax scans stay cheap.
pub struct BallEnergy {
    spec: TorusSpec,
    density: Vec<f64>,
}

impl BallEnergy {
    pub fn new(u: &SphereField) -> Self {
        BallEnergy {
            spec: u.spec,
            density: cell_energy_density(u),
        }
    }

    pub fn eval(&self, center: [f64; 2], radius: f64) -> f64 {
        let n = self.spec.grid_n;
        let h = self.spec.h();
        let sub = 4usize;
        let ci = (center[0] / h).floor() as i64;
        let cj = (center[1] / h).floor() as i64;
        let reach = (radius / h).ceil() as i64 + 1;
        let r_sq = radius * radius;
        let half_diag = h * std::f64::consts::SQRT_2 * 0.5;
        let cell_area = self.spec.cell_area();
        let span = (2 * reach + 1).min(n as i64);
        let i0 = (ci - reach).rem_euclid(n as i64) as usize;
        let j0 = (cj - reach).rem_euclid(n as i64) as usize;
        let mut acc = 0.0;
        for dj in 0..span as usize {
            let j = (j0 + dj) % n;
            let row = j * n;
            for di in 0..span as usize {
                let i = (i0 + di) % n;
                let cell_center = [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h];
                let d = crate::torus::wrap_delta(&self.spec, center, cell_center);
                let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
                if dist + half_diag <= radius {
                    acc += self.density[row + i] * cell_area;
                } else if dist - half_diag < radius {
                    let mut inside = 0usize;
                    for sj in 0..sub {
                        for si in 0..sub {
                            let p = [
                                (i as f64 + (si as f64 + 0.5) / sub as f64) * h,
                                (j as f64 + (sj as f64 + 0.5) / sub as f64) * h,
                            ];
                            let dd = crate::torus::wrap_delta(&self.spec, center, p);
                            if dd[0] * dd[0] + dd[1] * dd[1] <= r_sq {
                                inside += 1;
                            }
                        }
                    }
                    acc += self.density[row + i] * cell_area * inside as f64
                        / (sub * sub) as f64;
                }
            }
        }
        acc
    }

    pub fn total(&self) -> f64 {
        pairwise_sum(&self.density) * self.spec.cell_area()
    }

    /// Best center near `hint` (or globally when absent) for the given radius.
    pub fn argmax(&self, radius: f64, hint: Option<[f64; 2]>) -> ([f64; 2], f64) {
        let n = self.spec.grid_n;
        let h = self.spec.h();
        let mut best_p = [0.0, 0.0];
        let mut best_e = f64::NEG_INFINITY;
        match hint {
            None => {
                let stride = (n / 128).max(1);
                use rayon::prelude::*;
                let rows: Vec<(f64, [f64; 2])> = (0..n)
                    .step_by(stride)
                    .collect::<Vec<_>>()
                    .into_par_iter()
                    .map(|j| {
                        let mut re = f64::NEG_INFINITY;
                        let mut rp = [0.0, 0.0];
                        for i in (0..n).step_by(stride) {
                            let p = [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h];
                            let e = self.eval(p, radius);
                            if e > re {
                                re = e;
                                rp = p;
                            }
                        }
                        (re, rp)
                    })
                    .collect();
                for (e, p) in rows {
                    if e > best_e {
                        best_e = e;
                        best_p = p;
                    }
                }
            }
            Some(c) => {
                // the hint is trusted to within a few cells
                let reach = ((radius / h).ceil() as i64).clamp(3, 6);
                for dj in -reach..=reach {
                    for di in -reach..=reach {
                        let p = [
                            self.spec.wrap(c[0] + di as f64 * h),
                            self.spec.wrap(c[1] + dj as f64 * h),
                        ];
                        let e = self.eval(p, radius);
                        if e > best_e {
                            best_e = e;
                            best_p = p;
                        }
                    }
                }
            }
        }
        // golden-section refinement on each axis in turn
        let gr = 0.5 * (5.0f64.sqrt() - 1.0);
        for _round in 0..3 {
            for axis in 0..2 {
                let mut lo = -h;
                let mut hi = h;
                let eval_at = |t: f64, base: [f64; 2]| -> f64 {
                    let mut p = base;
                    p[axis] = self.spec.wrap(p[axis] + t);
                    self.eval(p, radius)
                };
                let mut c1 = hi - gr * (hi - lo);
                let mut c2 = lo + gr * (hi - lo);
                let mut f1 = eval_at(c1, best_p);
                let mut f2 = eval_at(c2, best_p);
                for _ in 0..12 {
                    if f1 < f2 {
                        lo = c1;
                        c1 = c2;
                        f1 = f2;
                        c2 = lo + gr * (hi - lo);
                        f2 = eval_at(c2, best_p);
                    } else {
                        hi = c2;
                        c2 = c1;
                        f2 = f1;
                        c1 = hi - gr * (hi - lo);
                        f1 = eval_at(c1, best_p);
                    }
                }
                let t = 0.5 * (lo + hi);
                let f_mid = eval_at(t, best_p);
                if f_mid >= best_e {
                    best_p[axis] = self.spec.wrap(best_p[axis] + t);
                    best_e = f_mid;
                }
            }
        }
        (best_p, best_e)
    }
}

/// Locate the concentration ball: the radius and center at which the
/// sup-over-centers ball energy equals half the bubble mass.
pub fn find_concentration(
    v: &SphereField,
    opts: &ConcentrationOpts,
) -> Result<([f64; 2], f64), BubbleflowError> {
    let deg = degree(v)?;
    if deg.degree != 1 {
        return Err(BubbleflowError::InvalidSpec(format!(
            "concentration finder needs a degree-1 field, got {}",
            deg.degree
        )));
    }
    let be = BallEnergy::new(v);
    let defect = be.total() - 4.0 * std::f64::consts::PI;
    if defect > opts.max_defect {
        return Err(BubbleflowError::InvalidSpec(format!(
            "energy defect {defect} above the configured bound {}",
            opts.max_defect
        )));
    }
    let r_hi = v.spec.inj_radius() * 0.999;
    // first bracket: coarse global argmax at a moderate radius
    let (mut b, _) = be.argmax(8.0 * v.spec.h(), None);
    let (b_hi, e_hi) = be.argmax(r_hi, Some(b));
    if e_hi < HALF_MASS {
        return Err(BubbleflowError::NoConcentration { sup_energy: e_hi });
    }
    b = b_hi;
    let mut lo = 2.0 * v.spec.h();
    let mut hi = r_hi;
    let (_, e_lo) = be.argmax(lo, Some(b));
    if e_lo >= HALF_MASS {
        // concentrated below grid scale; report the smallest trusted radius
        return Ok((b, 1.0 / lo));
    }
    let mut best = (b, hi);
    for _ in 0..60 {
        let mid = (0.5 * (lo.ln() + hi.ln())).exp();
        let (bm, em) = be.argmax(mid, Some(b));
        if em >= HALF_MASS {
            hi = mid;
            b = bm;
            best = (bm, mid);
        } else {
            lo = mid;
        }
        if (em - HALF_MASS).abs() <= opts.energy_tol * HALF_MASS {
            best = (bm, mid);
            break;
        }
    }
    let (b, radius) = best;
    let mu0 = 1.0 / radius;
    if let Some(floor) = opts.mu_floor {
        if mu0 < floor {
            return Err(BubbleflowError::BelowMuStar {
                mu0,
                mu_star: floor,
            });
        }
    }
    Ok((b, mu0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowPhase {
    Coupled,
    Frozen,
    Converged,
}

/// One accepted step worth of monitored quantities.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub energy: f64,
    pub defect: f64,
    pub mu: f64,
    pub tension_norm: f64,
    pub proj_norm: f64,
    pub gradient_norm: f64,
    pub mu_velocity: f64,
    pub step_size: f64,
    pub loj_ratio: f64,
    pub core_energy: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl DiagnosticsRecord {
    pub const CSV_HEADER: &'static str = "t,energy,defect,mu,tension_norm,proj_norm,gradient_norm,mu_velocity,step_size,loj_ratio,core_energy,alpha_min,alpha_max";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.t,
            self.energy,
            self.defect,
            self.mu,
            self.tension_norm,
            self.proj_norm,
            self.gradient_norm,
            self.mu_velocity,
            self.step_size,
            self.loj_ratio,
            self.core_energy,
            self.alpha_min,
            self.alpha_max
        )
    }
}

/// Stopping rules for a run.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FlowStops {
    pub mu_stop: f64,
    pub grad_tol: f64,
    /// the coupled phase hands over to the frozen-metric phase once the
    /// gradient falls below `coupled_exit_factor * grad_tol`
    pub coupled_exit_factor: f64,
    pub t_max: f64,
    pub max_steps: usize,
    /// half-width of the protected core-energy window
    pub eps2: f64,
    pub cfl: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RunOutcome {
    pub converged: bool,
    pub phase: FlowPhase,
    pub reached_mu_stop: bool,
    pub steps: usize,
    pub rejected: usize,
}

/// Full flow state plus reusable work buffers.
pub struct FlowState {
    pub u: SphereField,
    pub ms: MetricState,
    pub t: f64,
    pub energy: f64,
    pub defect: f64,
    pub dist_u: f64,
    pub dist_g: f64,
    pub phase: FlowPhase,
    pub history: Vec<DiagnosticsRecord>,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    /// measured discretisation offset of the initial core energy, added to
    /// the protection window as grid slack
    pub core_grid_offset: f64,
    cursor: DiffeoCursor,
    aniso: AnisoGrid,
    tau1: VectorField,
    tau2: VectorField,
    u_stage: SphereField,
    core_mask: WeightField,
    alpha_cache: (f64, f64),
    alpha_refresh: usize,
}

/// Interpolation source for the initial pull-back.
pub enum InitialData<'a> {
    Grid(&'a SphereField),
    Analytic(&'a dyn Fn([f64; 2]) -> Vec3),
}

fn core_energy_of(u: &SphereField, mask: &WeightField) -> f64 {
    // cell density evaluated inline over the mask window
    let n = u.spec.grid_n;
    let inv_h2 = 1.0 / (u.spec.h() * u.spec.h());
    let terms: Vec<f64> = mask
        .nonzero()
        .map(|(idx, w)| {
            let i = idx % n;
            let j = idx / n;
            let ip = (i + 1) % n;
            let jp = (j + 1) % n;
            let c = u.get(i, j);
            let e = u.get(ip, j);
            let ne = u.get(ip, jp);
            let nn = u.get(i, jp);
            let ex0 = edge_sq(c, e);
            let ex1 = edge_sq(nn, ne);
            let ey0 = edge_sq(c, nn);
            let ey1 = edge_sq(e, ne);
            0.5 * (0.5 * (ex0 + ex1) + 0.5 * (ey0 + ey1)) * inv_h2 * w
        })
        .collect();
    pairwise_sum(&terms)
}

#[inline]
fn edge_sq(a: Vec3, b: Vec3) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    dot3(d, d)
}

fn pull_back_field(
    v: &InitialData<'_>,
    spec: TorusSpec,
    profile: &ConstantProfile,
    b: [f64; 2],
    diffeo: &crate::metric::RadialDiffeo,
) -> SphereField {
    let n = spec.grid_n;
    let mut data = vec![[0.0f64; 3]; n * n];
    for j in 0..n {
        for i in 0..n {
            let x = spec.node(i, j);
            let d = crate::torus::wrap_delta(&spec, b, x);
            let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
            let value = if r >= profile.r1 {
                match v {
                    InitialData::Grid(f) => f.get(i, j),
                    InitialData::Analytic(f) => f(x),
                }
            } else {
                let t = diffeo.t_mu(r);
                let p = if r > 0.0 {
                    [
                        spec.wrap(b[0] + d[0] / r * t),
                        spec.wrap(b[1] + d[1] / r * t),
                    ]
                } else {
                    b
                };
                match v {
                    InitialData::Grid(f) => f.sample_bicubic(p),
                    InitialData::Analytic(f) => f(p),
                }
            };
            data[j * n + i] = normalize3(value);
        }
    }
    SphereField { spec, data }
}

/// Pull the initial map back through the radial zoom and assemble the state.
///
/// When `refine_scale` is set, the concentration scale is polished so that
/// the protected core of the pulled-back field carries exactly half the
/// bubble mass: the grid estimate of the scale is biased when the input
/// concentration is only a few cells wide, while the pulled-back core is
/// always resolved, so the transported condition is the sharper one.
pub fn init_flow(
    v: InitialData<'_>,
    spec: TorusSpec,
    profile: ConstantProfile,
    b: [f64; 2],
    mu0: f64,
    refine_scale: bool,
) -> Result<FlowState, BubbleflowError> {
    if mu0 < profile.mu_star {
        return Err(BubbleflowError::BelowMuStar {
            mu0,
            mu_star: profile.mu_star,
        });
    }
    // snap the base point to the nearest node: metric caches are keyed by the
    // cell index and masks stay symmetric
    let h = spec.h();
    let b = [
        spec.wrap((b[0] / h).round() * h),
        spec.wrap((b[1] / h).round() * h),
    ];
    let core_mask = ball_mask(&spec, b, profile.r3, 4)?;

    // bisection probes move down in mu as well, so each probe integrates a
    // fresh canonical table (cheap next to the resampling it feeds)
    let core_at = |mu: f64| -> Result<f64, BubbleflowError> {
        let mut c = DiffeoCursor::new(&profile)?;
        c.advance_to(mu)?;
        let diffeo = c.table_at(mu)?;
        let u = pull_back_field(&v, spec, &profile, b, &diffeo);
        Ok(core_energy_of(&u, &core_mask))
    };

    let mut mu_final = mu0;
    if refine_scale {
        // the core energy decreases in mu; bisect to the half-mass level
        let mut lo = (mu0 / 1.6).max(profile.mu_star);
        let mut hi = mu0 * 1.6;
        let e_lo = core_at(lo)?;
        let e_hi = core_at(hi)?;
        if e_lo >= HALF_MASS && e_hi <= HALF_MASS {
            for _ in 0..24 {
                let mid = (0.5 * (lo.ln() + hi.ln())).exp();
                let e_mid = core_at(mid)?;
                if e_mid >= HALF_MASS {
                    lo = mid;
                } else {
                    hi = mid;
                }
                mu_final = mid;
                if (e_mid - HALF_MASS).abs() < 1e-4 * HALF_MASS {
                    break;
                }
            }
        }
        if mu_final < profile.mu_star {
            return Err(BubbleflowError::BelowMuStar {
                mu0: mu_final,
                mu_star: profile.mu_star,
            });
        }
    }

    let mut cursor = DiffeoCursor::new(&profile)?;
    cursor.advance_to(mu_final)?;
    let diffeo = cursor.table_at(mu_final)?;
    let u = pull_back_field(&v, spec, &profile, b, &diffeo);
    let ms = MetricState::with_diffeo(spec, profile, b, Representation::PulledBack, diffeo)?;
    let aniso = AnisoGrid::build(&ms);
    let energy = ms.energy(&u, &aniso);
    let defect = energy - 4.0 * std::f64::consts::PI;
    let core0 = core_energy_of(&u, &core_mask);
    let mut state = FlowState {
        u,
        ms,
        t: 0.0,
        energy,
        defect,
        dist_u: 0.0,
        dist_g: 0.0,
        phase: FlowPhase::Coupled,
        history: Vec::new(),
        steps_accepted: 0,
        steps_rejected: 0,
        core_grid_offset: (core0 - HALF_MASS).abs(),
        cursor,
        aniso,
        tau1: VectorField::zeros(spec),
        tau2: VectorField::zeros(spec),
        u_stage: SphereField::constant(spec, [0.0, 0.0, 1.0]),
        core_mask,
        alpha_cache: (0.0, 0.0),
        alpha_refresh: 0,
    };
    state.refresh_alpha();
    Ok(state)
}

/// Dynamic state needed to restore a flow mid-run.
pub struct RestoreArgs {
    pub u: SphereField,
    pub profile: ConstantProfile,
    pub b: [f64; 2],
    pub mu: f64,
    pub t: f64,
    pub dist_u: f64,
    pub dist_g: f64,
    pub phase: FlowPhase,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub core_grid_offset: f64,
}

impl FlowState {
    /// Rebuild a state from checkpointed data. The radial tables are
    /// re-integrated on the canonical grid, so a restored run continues
    /// bit-identically to the uninterrupted one.
    pub fn restore(args: RestoreArgs) -> Result<Self, BubbleflowError> {
        let spec = args.u.spec;
        let mut cursor = DiffeoCursor::new(&args.profile)?;
        cursor.advance_to(args.mu)?;
        let diffeo = cursor.table_at(args.mu)?;
        let ms = MetricState::with_diffeo(
            spec,
            args.profile,
            args.b,
            Representation::PulledBack,
            diffeo,
        )?;
        let aniso = AnisoGrid::build(&ms);
        let energy = ms.energy(&args.u, &aniso);
        let core_mask = ball_mask(&spec, args.b, args.profile.r3, 4)?;
        let mut state = FlowState {
            u: args.u,
            ms,
            t: args.t,
            energy,
            defect: energy - 4.0 * std::f64::consts::PI,
            dist_u: args.dist_u,
            dist_g: args.dist_g,
            phase: args.phase,
            history: Vec::new(),
            steps_accepted: args.steps_accepted,
            steps_rejected: args.steps_rejected,
            core_grid_offset: args.core_grid_offset,
            cursor,
            aniso,
            tau1: VectorField::zeros(spec),
            tau2: VectorField::zeros(spec),
            u_stage: SphereField::constant(spec, [0.0, 0.0, 1.0]),
            core_mask,
            alpha_cache: (0.0, 0.0),
            alpha_refresh: 0,
        };
        state.refresh_alpha();
        Ok(state)
    }

    /// Energy carried by the protected core ball, computed over the mask
    /// window only.
    pub fn core_energy(&self) -> f64 {
        core_energy_of(&self.u, &self.core_mask)
    }

    fn refresh_alpha(&mut self) {
        if let Ok(res) = crate::projection::project_stress(&self.u, &self.ms) {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (_, a) in &res.alpha_profile {
                lo = lo.min(*a);
                hi = hi.max(*a);
            }
            self.alpha_cache = (lo, hi);
        }
    }

    /// Gradient data at the current state (stage-1 values):
    /// (tension norm, projected norm, mu velocity).
    fn gradient(&mut self, coupled: bool) -> (f64, f64, f64) {
        self.aniso.refresh(&self.ms);
        self.ms.tension_into(&self.u, &self.aniso, &mut self.tau1);
        let tension_l2 =
            l2_norm_weighted(&self.tau1, &self.aniso.rho_sq, self.u.spec.cell_area());
        if coupled {
            let inner = crate::projection::inner_grid(&self.u, &self.ms, &self.aniso);
            let norm_dmu_sq = self.ms.dmu_metric().l2_norm_sq();
            let proj = inner.abs() / norm_dmu_sq.sqrt();
            let mu_vel = 0.5 * inner / norm_dmu_sq;
            (tension_l2, proj, mu_vel)
        } else {
            (tension_l2, 0.0, 0.0)
        }
    }

    /// One Heun step with energy-monotone rejection. Returns the accepted dt.
    pub fn step(&mut self, dt_max: f64, stops: &FlowStops) -> Result<f64, BubbleflowError> {
        let coupled = self.phase == FlowPhase::Coupled;
        let spec = self.u.spec;
        let h = spec.h();
        let n = spec.grid_n;

        // stage 1 at the current state
        let (tension_l2, proj_norm, mu_vel1) = self.gradient(coupled);
        let grad = GradientNorm::from_parts(tension_l2, proj_norm);
        let cfl = stops.cfl * h * h * self.aniso.min_cfl_weight;
        let mut dt = dt_max.min(cfl);
        if coupled && mu_vel1.abs() > 0.0 {
            dt = dt.min(0.02 * self.ms.mu / mu_vel1.abs());
        }

        let mut accepted = false;
        let mut new_energy = self.energy;
        let mut new_mu = self.ms.mu;
        let mut mu_vel_mid = mu_vel1;
        for _attempt in 0..60 {
            if dt < 1e-12 {
                return Err(BubbleflowError::StepCollapse { dt });
            }
            // predictor
            let mu_pred = if coupled {
                self.ms.mu + dt * mu_vel1
            } else {
                self.ms.mu
            };
            if mu_pred < self.ms.profile.mu_star {
                dt *= 0.5;
                self.steps_rejected += 1;
                continue;
            }
            stage_update(&mut self.u_stage, &self.u, &self.tau1, dt);
            // stage 2 gradient at the predicted state
            let mu_moves = coupled && (mu_pred - self.ms.mu).abs() > 1e-13 * self.ms.mu;
            let mu_vel2 = if mu_moves {
                self.cursor.advance_to(mu_pred)?;
                let d2 = self.cursor.table_at(mu_pred)?;
                let ms2 = MetricState::with_diffeo(
                    spec,
                    self.ms.profile,
                    self.ms.b,
                    Representation::PulledBack,
                    d2,
                )?;
                self.aniso.refresh(&ms2);
                ms2.tension_into(&self.u_stage, &self.aniso, &mut self.tau2);
                let inner2 = crate::projection::inner_grid(&self.u_stage, &ms2, &self.aniso);
                let nd2 = ms2.dmu_metric().l2_norm_sq();
                0.5 * inner2 / nd2
            } else {
                self.ms
                    .tension_into(&self.u_stage, &self.aniso, &mut self.tau2);
                if coupled {
                    let inner2 =
                        crate::projection::inner_grid(&self.u_stage, &self.ms, &self.aniso);
                    let nd2 = self.ms.dmu_metric().l2_norm_sq();
                    0.5 * inner2 / nd2
                } else {
                    0.0
                }
            };
            // corrector
            new_mu = if coupled {
                self.ms.mu + 0.5 * dt * (mu_vel1 + mu_vel2)
            } else {
                self.ms.mu
            };
            mu_vel_mid = 0.5 * (mu_vel1 + mu_vel2);
            if new_mu < self.ms.profile.mu_star {
                dt *= 0.5;
                self.steps_rejected += 1;
                continue;
            }
            heun_combine(&mut self.u_stage, &self.u, &self.tau1, &self.tau2, dt);
            // energy at the corrected state
            let trial_ms = if coupled && (new_mu - self.ms.mu).abs() > 1e-13 * self.ms.mu {
                self.cursor.advance_to(new_mu)?;
                let d = self.cursor.table_at(new_mu)?;
                MetricState::with_diffeo(
                    spec,
                    self.ms.profile,
                    self.ms.b,
                    Representation::PulledBack,
                    d,
                )?
            } else {
                self.ms.clone()
            };
            self.aniso.refresh(&trial_ms);
            new_energy = trial_ms.energy(&self.u_stage, &self.aniso);
            if new_energy <= self.energy * (1.0 + 1e-9) + 1e-12 {
                self.ms = trial_ms;
                accepted = true;
                break;
            }
            dt *= 0.5;
            self.steps_rejected += 1;
        }
        if !accepted {
            return Err(BubbleflowError::StepCollapse { dt });
        }

        // ledgers with the accepted displacement, measured in the new metric
        let mut disp_terms = Vec::with_capacity(n);
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                let idx = j * n + i;
                let a = self.u_stage.data[idx];
                let b = self.u.data[idx];
                let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                acc += dot3(d, d) * self.aniso.rho_sq[idx];
            }
            disp_terms.push(acc);
        }
        let disp = (pairwise_sum(&disp_terms) * spec.cell_area()).sqrt();
        self.dist_u += disp;
        if coupled {
            let dmu = (new_mu - self.ms.mu).abs().max((mu_vel_mid * dt).abs());
            self.dist_g += dmu * self.ms.dmu_metric().l2_norm_sq().sqrt();
        }

        std::mem::swap(&mut self.u.data, &mut self.u_stage.data);
        self.t += dt;
        self.energy = new_energy;
        self.defect = new_energy - 4.0 * std::f64::consts::PI;
        self.steps_accepted += 1;

        // diagnostics
        self.alpha_refresh += 1;
        if self.alpha_refresh >= 16 {
            self.alpha_refresh = 0;
            if coupled {
                self.refresh_alpha();
            }
        }
        let core_energy = self.core_energy();
        let slack = 1.5 * self.core_grid_offset;
        let lo = HALF_MASS - 2.0 * stops.eps2 - slack;
        let hi = HALF_MASS + 2.0 * stops.eps2 + slack;
        if core_energy < lo || core_energy > hi {
            return Err(BubbleflowError::CoreWindowViolated {
                core_energy,
                t: self.t,
            });
        }
        let loj_ratio = if grad.total > 0.0 {
            self.defect / (grad.total * grad.total)
        } else {
            f64::INFINITY
        };
        self.history.push(DiagnosticsRecord {
            t: self.t,
            energy: self.energy,
            defect: self.defect,
            mu: self.ms.mu,
            tension_norm: grad.tension_l2,
            proj_norm: grad.proj_norm,
            gradient_norm: grad.total,
            mu_velocity: mu_vel_mid,
            step_size: dt,
            loj_ratio,
            core_energy,
            alpha_min: self.alpha_cache.0,
            alpha_max: self.alpha_cache.1,
        });
        Ok(dt)
    }

    /// Drive the flow to its stopping condition.
    pub fn run(&mut self, stops: &FlowStops) -> Result<RunOutcome, BubbleflowError> {
        let mut reached_mu_stop = false;
        let mut last_progress_energy = self.energy;
        let mut steps_since_progress = 0usize;
        while self.steps_accepted < stops.max_steps && self.t < stops.t_max {
            match self.phase {
                FlowPhase::Coupled => {
                    if self.ms.mu >= stops.mu_stop {
                        reached_mu_stop = true;
                        self.phase = FlowPhase::Frozen;
                        continue;
                    }
                    let grad_now = self
                        .history
                        .last()
                        .map(|r| r.gradient_norm)
                        .unwrap_or(f64::INFINITY);
                    if grad_now <= stops.grad_tol * stops.coupled_exit_factor.max(1.0) {
                        self.phase = FlowPhase::Frozen;
                        continue;
                    }
                }
                FlowPhase::Frozen => {
                    let grad_now = self
                        .history
                        .last()
                        .map(|r| r.tension_norm)
                        .unwrap_or(f64::INFINITY);
                    if grad_now <= stops.grad_tol {
                        self.phase = FlowPhase::Converged;
                        break;
                    }
                }
                FlowPhase::Converged => break,
            }
            self.step(stops.t_max - self.t, stops)?;
            // stall detection: energy plateau with the gradient still large
            if (last_progress_energy - self.energy).abs() > 1e-12 * self.energy.max(1.0) {
                last_progress_energy = self.energy;
                steps_since_progress = 0;
            } else {
                steps_since_progress += 1;
                if steps_since_progress >= 10_000 {
                    return Err(BubbleflowError::Stalled {
                        steps: steps_since_progress,
                    });
                }
            }
        }
        // convergence may be declared right at loop exit
        if self.phase == FlowPhase::Frozen {
            let grad_now = self
                .history
                .last()
                .map(|r| r.tension_norm)
                .unwrap_or(f64::INFINITY);
            if grad_now <= stops.grad_tol {
                self.phase = FlowPhase::Converged;
            }
        }
        Ok(RunOutcome {
            converged: self.phase == FlowPhase::Converged,
            phase: self.phase,
            reached_mu_stop,
            steps: self.steps_accepted,
            rejected: self.steps_rejected,
        })
    }
}

fn stage_update(out: &mut SphereField, u: &SphereField, tau: &VectorField, dt: f64) {
    use rayon::prelude::*;
    out.data
        .par_iter_mut()
        .zip(u.data.par_iter().zip(tau.data.par_iter()))
        .for_each(|(o, (uu, t))| {
            *o = normalize3([uu[0] + dt * t[0], uu[1] + dt * t[1], uu[2] + dt * t[2]]);
        });
}

fn heun_combine(
    out: &mut SphereField,
    u: &SphereField,
    tau1: &VectorField,
    tau2: &VectorField,
    dt: f64,
) {
    use rayon::prelude::*;
    let half = 0.5 * dt;
    out.data
        .par_iter_mut()
        .zip(
            u.data
                .par_iter()
                .zip(tau1.data.par_iter().zip(tau2.data.par_iter())),
        )
        .for_each(|(o, (uu, (t1, t2)))| {
            *o = normalize3([
                uu[0] + half * (t1[0] + t2[0]),
                uu[1] + half * (t1[1] + t2[1]),
                uu[2] + half * (t1[2] + t2[2]),
            ]);
        });
}
