//! Concentrated test-data generators: the doubly periodic Green's function
//! with its smooth regular part, the harmonic-tail bubble models built from
//! it, and radially equivariant cutoff bubbles with exactly computable
//! energies.

use crate::error::BubbleflowError;
use crate::fields::SphereField;
use crate::numerics::{exp_integral_e1, gauss20, integrate_panels, smoothstep5};
use crate::sphere::{normalize3, stereo, Vec3, SOUTH_POLE};
use crate::torus::{wrap_delta, TorusSpec};
use rayon::prelude::*;
use std::f64::consts::{PI, TAU};

/// Doubly periodic Green's function data on the square torus.
///
/// `g0` solves `-lap g0 = 2 pi (delta_0 - 1/area)` with zero mean; the
/// regular part `j0 = g0 + ln|x|` is smooth at the origin. Evaluation uses a
/// screened split: a short mode sum with Gaussian mollifier plus a compact
/// image sum of exponential integrals, so that values, gradients and Hessians
/// are available in closed form anywhere.
pub struct TorusGreens {
    pub side: f64,
    /// user-facing mode cutoff (validated, kept for reporting)
    pub kmax: usize,
    beta: f64,
    /// 2 pi / L^2 e^{-k^2/(4 beta^2)} / k^2 for each mode pair (m1, m2)
    coeffs: Vec<(f64, f64, f64)>, // (k1, k2, weight)
    mean_shift: f64,
}

/// Build the Green's-function evaluators. `kmax >= 32` is required; the
/// screened split converges far below that cutoff, and the unscreened series
/// at `kmax` is kept as a cross-check reference.
pub fn greens_build(spec: &TorusSpec, kmax: usize) -> Result<TorusGreens, BubbleflowError> {
    if kmax < 32 {
        return Err(BubbleflowError::InvalidSpec(
            "greens mode cutoff must be at least 32".into(),
        ));
    }
    let side = spec.side;
    let beta = 5.0 / side;
    let modes = 9i64;
    let mut coeffs = Vec::new();
    let base = TAU / side;
    for m1 in -modes..=modes {
        for m2 in -modes..=modes {
            if m1 == 0 && m2 == 0 {
                continue;
            }
            let k1 = base * m1 as f64;
            let k2 = base * m2 as f64;
            let k_sq = k1 * k1 + k2 * k2;
            let w = TAU / (side * side) * (-k_sq / (4.0 * beta * beta)).exp() / k_sq;
            coeffs.push((k1, k2, w));
        }
    }
    let mean_shift = -PI / (2.0 * beta * beta * side * side);
    Ok(TorusGreens {
        side,
        kmax,
        beta,
        coeffs,
        mean_shift,
    })
}

impl TorusGreens {
    fn centre(&self, x: [f64; 2]) -> [f64; 2] {
        let mut c = [0.0; 2];
        for k in 0..2 {
            let mut v = x[k].rem_euclid(self.side);
            if v >= 0.5 * self.side {
                v -= self.side;
            }
            c[k] = v;
        }
        c
    }

    /// Smooth combination `0.5 E1(b^2 r^2) + ln r` (finite at the origin).
    fn screened_log(&self, r_sq: f64) -> f64 {
        const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
        let z = self.beta * self.beta * r_sq;
        if z < 1e-12 {
            // 0.5 (-gamma - ln z + z) + 0.5 ln(r^2)
            0.5 * (-EULER_GAMMA - (self.beta * self.beta).ln() + z)
        } else {
            0.5 * exp_integral_e1(z) + 0.5 * r_sq.ln()
        }
    }

    /// Regular part `j0(x) = g0(x) + ln |x|`, smooth everywhere.
    pub fn j0(&self, x: [f64; 2]) -> f64 {
        let c = self.centre(x);
        let r_sq = c[0] * c[0] + c[1] * c[1];
        let mut acc = self.screened_log(r_sq) + self.mean_shift;
        // mode sum
        for (k1, k2, w) in &self.coeffs {
            acc += w * (k1 * c[0] + k2 * c[1]).cos();
        }
        // images around the centred cell
        for n1 in -1i64..=1 {
            for n2 in -1i64..=1 {
                if n1 == 0 && n2 == 0 {
                    continue;
                }
                let dx = c[0] - n1 as f64 * self.side;
                let dy = c[1] - n2 as f64 * self.side;
                let z = self.beta * self.beta * (dx * dx + dy * dy);
                if z < 700.0 {
                    acc += 0.5 * exp_integral_e1(z);
                }
            }
        }
        acc
    }

    /// Gradient of the regular part.
    pub fn grad_j0(&self, x: [f64; 2]) -> [f64; 2] {
        let c = self.centre(x);
        let r_sq = c[0] * c[0] + c[1] * c[1];
        let b_sq = self.beta * self.beta;
        let z = b_sq * r_sq;
        // d/dx of (0.5 E1(b^2 r^2) + ln r) = x (1 - e^-z)/r^2
        let q = if z < 1e-6 {
            b_sq * (1.0 - 0.5 * z + z * z / 6.0)
        } else {
            (1.0 - (-z).exp()) / r_sq
        };
        let mut g = [c[0] * q, c[1] * q];
        for (k1, k2, w) in &self.coeffs {
            let s = (k1 * c[0] + k2 * c[1]).sin();
            g[0] -= w * k1 * s;
            g[1] -= w * k2 * s;
        }
        for n1 in -1i64..=1 {
            for n2 in -1i64..=1 {
                if n1 == 0 && n2 == 0 {
                    continue;
                }
                let dx = c[0] - n1 as f64 * self.side;
                let dy = c[1] - n2 as f64 * self.side;
                let rho_sq = dx * dx + dy * dy;
                let zz = b_sq * rho_sq;
                if zz < 700.0 {
                    let e = (-zz).exp() / rho_sq;
                    g[0] -= dx * e;
                    g[1] -= dy * e;
                }
            }
        }
        g
    }

    /// Hessian of the regular part (xx, xy, yy).
    pub fn hess_j0(&self, x: [f64; 2]) -> [f64; 3] {
        let c = self.centre(x);
        let r_sq = c[0] * c[0] + c[1] * c[1];
        let b_sq = self.beta * self.beta;
        let z = b_sq * r_sq;
        let (q, w_r) = if z < 1e-6 {
            (
                b_sq * (1.0 - 0.5 * z + z * z / 6.0),
                -b_sq * b_sq * (1.0 - 2.0 * z / 3.0),
            )
        } else {
            let q = (1.0 - (-z).exp()) / r_sq;
            ((q), (2.0 / r_sq) * (b_sq * (-z).exp() - q))
        };
        let mut hxx = q + c[0] * c[0] * w_r;
        let mut hyy = q + c[1] * c[1] * w_r;
        let mut hxy = c[0] * c[1] * w_r;
        for (k1, k2, w) in &self.coeffs {
            let cv = (k1 * c[0] + k2 * c[1]).cos();
            hxx -= w * k1 * k1 * cv;
            hxy -= w * k1 * k2 * cv;
            hyy -= w * k2 * k2 * cv;
        }
        for n1 in -1i64..=1 {
            for n2 in -1i64..=1 {
                if n1 == 0 && n2 == 0 {
                    continue;
                }
                let dx = c[0] - n1 as f64 * self.side;
                let dy = c[1] - n2 as f64 * self.side;
                let rho_sq = dx * dx + dy * dy;
                let zz = b_sq * rho_sq;
                if zz < 700.0 {
                    let e = (-zz).exp();
                    let a = -e / rho_sq;
                    let b = (2.0 * b_sq * rho_sq + 2.0) * e / (rho_sq * rho_sq);
                    hxx += a + dx * dx * b;
                    hyy += a + dy * dy * b;
                    hxy += dx * dy * b;
                }
            }
        }
        [hxx, hxy, hyy]
    }

    /// Unscreened reference: the plain mollified mode sum at cutoff `kmax`,
    /// for cross-validation of the screened split.
    pub fn j0_fourier_reference(&self, x: [f64; 2], sigma: f64) -> f64 {
        let c = self.centre(x);
        let base = TAU / self.side;
        let mut acc = (c[0] * c[0] + c[1] * c[1]).sqrt().max(1e-300).ln();
        let m = self.kmax as i64;
        for m1 in -m..=m {
            for m2 in -m..=m {
                if m1 == 0 && m2 == 0 {
                    continue;
                }
                let k1 = base * m1 as f64;
                let k2 = base * m2 as f64;
                let k_sq = k1 * k1 + k2 * k2;
                let w = TAU / (self.side * self.side) * (-sigma * k_sq).exp() / k_sq;
                acc += w * (k1 * c[0] + k2 * c[1]).cos();
            }
        }
        acc
    }
}

/// `jhat(x)`: the harmonic tail direction derived from the regular part,
/// normalised to vanish at the origin. Third component is zero.
pub fn jhat(greens: &TorusGreens, x: [f64; 2]) -> Vec3 {
    let g = greens.grad_j0(x);
    let g0 = greens.grad_j0([0.0, 0.0]);
    [-(g[0] - g0[0]), -(g[1] - g0[1]), 0.0]
}

/// Harmonic-tail bubble model at scale `lambda` anchored at `a`.
pub struct BubbleModel {
    pub lambda: f64,
    pub a: [f64; 2],
    pub spec: TorusSpec,
    pub greens: std::sync::Arc<TorusGreens>,
    r0: f64,
}

impl BubbleModel {
    pub fn new(
        spec: TorusSpec,
        greens: std::sync::Arc<TorusGreens>,
        lambda: f64,
        a: [f64; 2],
        lambda_floor: f64,
    ) -> Result<Self, BubbleflowError> {
        if lambda < 2.0 * lambda_floor {
            return Err(BubbleflowError::InvalidSpec(format!(
                "bubble scale {lambda} below twice the configured floor {lambda_floor}"
            )));
        }
        let r0 = 0.5 * spec.inj_radius().min(1.0);
        Ok(BubbleModel {
            lambda,
            a,
            spec,
            greens,
            r0,
        })
    }

    fn cutoff(&self, r: f64) -> (f64, f64) {
        // 1 on [0, r0/2], quintic descent to 0 at r0; returns (phi, phi')
        let half = 0.5 * self.r0;
        if r <= half {
            (1.0, 0.0)
        } else if r >= self.r0 {
            (0.0, 0.0)
        } else {
            let t = (r - half) / half;
            (
                1.0 - smoothstep5(t),
                -crate::numerics::smoothstep5_deriv(t) / half,
            )
        }
    }

    /// Ambient (unnormalised) value of the model at a torus point.
    pub fn raw(&self, p: [f64; 2]) -> Vec3 {
        let w = wrap_delta(&self.spec, self.a, p);
        let r = (w[0] * w[0] + w[1] * w[1]).sqrt();
        let (phi, _) = self.cutoff(r);
        let two_over = 2.0 / self.lambda;
        // harmonic tail: south pole + (2/lambda)(w/|w|^2 - grad j0(w), 0)
        let h = if r > 1e-14 {
            let gj = self.greens.grad_j0(w);
            [
                two_over * (w[0] / (r * r) - gj[0]),
                two_over * (w[1] / (r * r) - gj[1]),
                -1.0,
            ]
        } else {
            [0.0, 0.0, -1.0]
        };
        if phi == 0.0 {
            return h;
        }
        // chart model: bubble plus regular-part correction
        let bub = stereo(w, self.lambda);
        let j = jhat(&self.greens, w);
        let vhat = [
            bub[0] + two_over * j[0],
            bub[1] + two_over * j[1],
            bub[2] + two_over * j[2],
        ];
        [
            phi * vhat[0] + (1.0 - phi) * h[0],
            phi * vhat[1] + (1.0 - phi) * h[1],
            phi * vhat[2] + (1.0 - phi) * h[2],
        ]
    }

    /// Normalised value.
    pub fn value(&self, p: [f64; 2]) -> Vec3 {
        normalize3(self.raw(p))
    }

    /// Exact gradient columns of the normalised value.
    pub fn grad(&self, p: [f64; 2]) -> [Vec3; 2] {
        let w = wrap_delta(&self.spec, self.a, p);
        let r = (w[0] * w[0] + w[1] * w[1]).sqrt();
        let (phi, dphi) = self.cutoff(r);
        let two_over = 2.0 / self.lambda;
        let raw = self.raw(p);
        let mut cols = [[0.0f64; 3]; 2];
        // dH columns
        let mut dh = [[0.0f64; 3]; 2];
        if r > 1e-14 {
            let hess = self.greens.hess_j0(w);
            let r2 = r * r;
            let d_inv = [
                [1.0 / r2 - 2.0 * w[0] * w[0] / (r2 * r2), -2.0 * w[0] * w[1] / (r2 * r2)],
                [-2.0 * w[0] * w[1] / (r2 * r2), 1.0 / r2 - 2.0 * w[1] * w[1] / (r2 * r2)],
            ];
            for axis in 0..2 {
                dh[axis][0] = two_over * (d_inv[axis][0] - [hess[0], hess[1]][axis]);
                dh[axis][1] = two_over * (d_inv[axis][1] - [hess[1], hess[2]][axis]);
                dh[axis][2] = 0.0;
            }
        }
        if phi == 0.0 {
            cols = dh;
        } else {
            // d vhat columns
            let sg = crate::sphere::stereo_grad(w, self.lambda);
            let hj = self.greens.hess_j0(w);
            let mut dv = [[0.0f64; 3]; 2];
            for axis in 0..2 {
                dv[axis][0] = sg[axis][0] - two_over * [hj[0], hj[1]][axis];
                dv[axis][1] = sg[axis][1] - two_over * [hj[1], hj[2]][axis];
                dv[axis][2] = sg[axis][2];
            }
            let bub = stereo(w, self.lambda);
            let j = jhat(&self.greens, w);
            let vhat = [
                bub[0] + two_over * j[0],
                bub[1] + two_over * j[1],
                bub[2] + two_over * j[2],
            ];
            let h = if r > 1e-14 {
                let gj = self.greens.grad_j0(w);
                [
                    two_over * (w[0] / (r * r) - gj[0]),
                    two_over * (w[1] / (r * r) - gj[1]),
                    -1.0,
                ]
            } else {
                [0.0, 0.0, -1.0]
            };
            let er = if r > 1e-14 {
                [w[0] / r, w[1] / r]
            } else {
                [0.0, 0.0]
            };
            for axis in 0..2 {
                for k in 0..3 {
                    cols[axis][k] = phi * dv[axis][k]
                        + (1.0 - phi) * dh[axis][k]
                        + dphi * er[axis] * (vhat[k] - h[k]);
                }
            }
        }
        // project through the normalisation
        let norm = crate::sphere::norm3(raw);
        let unit = [raw[0] / norm, raw[1] / norm, raw[2] / norm];
        let mut out = [[0.0f64; 3]; 2];
        for axis in 0..2 {
            let radial = crate::sphere::dot3(unit, cols[axis]);
            for k in 0..3 {
                out[axis][k] = (cols[axis][k] - radial * unit[k]) / norm;
            }
        }
        out
    }

    /// Sample the model on the grid.
    pub fn field(&self) -> SphereField {
        let spec = self.spec;
        let n = spec.grid_n;
        let h = spec.h();
        let mut data = vec![[0.0f64; 3]; n * n];
        data.par_chunks_mut(n).enumerate().for_each(|(jj, row)| {
            let y = jj as f64 * h;
            for (ii, v) in row.iter_mut().enumerate() {
                *v = self.value([ii as f64 * h, y]);
            }
        });
        SphereField { spec, data }
    }

    /// Dirichlet energy by hybrid quadrature: a log-graded polar patch around
    /// the anchor under a smooth partition of unity, plus a periodic
    /// trapezoid sum of the complementary smooth part.
    pub fn energy_quadrature(&self) -> f64 {
        let density = |p: [f64; 2]| -> f64 {
            let g = self.grad(p);
            0.5 * (crate::sphere::dot3(g[0], g[0]) + crate::sphere::dot3(g[1], g[1]))
        };
        let l = self.spec.side;
        let w_in = 0.30 * l;
        let w_out = 0.40 * l;
        let omega = |r: f64| -> f64 { 1.0 - smoothstep5((r - w_in) / (w_out - w_in)) };
        // polar patch
        let n_theta = 256;
        let dth = TAU / n_theta as f64;
        let ring = |r: f64| -> f64 {
            let mut acc = 0.0;
            for m in 0..n_theta {
                let th = m as f64 * dth;
                let p = [
                    self.spec.wrap(self.a[0] + r * th.cos()),
                    self.spec.wrap(self.a[1] + r * th.sin()),
                ];
                acc += density(p);
            }
            acc * dth * r * omega(r)
        };
        let li = 1.0 / self.lambda;
        let mut breaks = vec![0.0, 0.02 * li, 0.1 * li, 0.5 * li, li, 3.0 * li, 10.0 * li];
        let mut r = 30.0 * li;
        while r < w_out {
            breaks.push(r);
            r *= 2.0;
        }
        breaks.push(self.r0 * 0.5);
        breaks.push(self.r0);
        breaks.push(w_in);
        breaks.push(w_out);
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        breaks.retain(|v| *v <= w_out + 1e-15);
        let mut polar = 0.0;
        for w in breaks.windows(2) {
            polar += gauss20(&ring, w[0], w[1]);
        }
        // complementary periodic sum (integrand vanishes near the anchor)
        let n = 256usize;
        let hh = l / n as f64;
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|jj| {
                let mut acc = 0.0;
                for ii in 0..n {
                    let p = [ii as f64 * hh, jj as f64 * hh];
                    let d = wrap_delta(&self.spec, self.a, p);
                    let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
                    let wgt = 1.0 - omega(r);
                    if wgt > 0.0 {
                        acc += wgt * density(p);
                    }
                }
                acc
            })
            .collect();
        let outer = crate::numerics::pairwise_sum(&rows) * hh * hh;
        polar + outer
    }

    /// Energy defect against the unattained floor.
    pub fn energy_defect(&self) -> f64 {
        self.energy_quadrature() - 4.0 * PI
    }

    /// Sup distance to the far-field constant outside a ball of radius `rad`.
    pub fn sup_distance_outside(&self, rad: f64) -> f64 {
        let n = 192usize;
        let hh = self.spec.side / n as f64;
        let mut worst: f64 = 0.0;
        for jj in 0..n {
            for ii in 0..n {
                let p = [ii as f64 * hh, jj as f64 * hh];
                let d = wrap_delta(&self.spec, self.a, p);
                if d[0] * d[0] + d[1] * d[1] >= rad * rad {
                    let v = self.value(p);
                    let diff = [
                        v[0] - SOUTH_POLE[0],
                        v[1] - SOUTH_POLE[1],
                        v[2] - SOUTH_POLE[2],
                    ];
                    worst = worst.max(crate::sphere::norm3(diff));
                }
            }
        }
        worst
    }
}

/// Radially equivariant cutoff bubble: the exact bubble profile inside, a
/// smooth closing ramp across `[cut/2, cut]`, the south pole beyond.
///
/// The closing ramp acts on the reciprocal slope `w = 1/tan(angle/2) scale`:
/// `angle(r) = 2 atan2(r, w(r))` with `w = 1/lambda` inside and `w -> 0`
/// across the ramp. This matches the bubble to first order at `cut/2` and
/// keeps the closing cost at the `lambda^-2` scaling of the optimal profile.
#[derive(Debug, Clone)]
pub struct CutoffBubble {
    pub lambda: f64,
    pub b: [f64; 2],
    pub cut_radius: f64,
    pub spec: TorusSpec,
}

impl CutoffBubble {
    pub fn new(
        spec: TorusSpec,
        lambda: f64,
        b: [f64; 2],
        cut_radius: f64,
    ) -> Result<Self, BubbleflowError> {
        if !(cut_radius > 0.0) || cut_radius > spec.inj_radius() {
            return Err(BubbleflowError::RadiusOutOfRange {
                radius: cut_radius,
                max: spec.inj_radius(),
            });
        }
        if lambda * cut_radius < 8.0 {
            return Err(BubbleflowError::InvalidSpec(format!(
                "lambda * cut_radius = {} below 8; the closing cost would dominate",
                lambda * cut_radius
            )));
        }
        Ok(CutoffBubble {
            lambda,
            b,
            cut_radius,
            spec,
        })
    }

    /// Reciprocal-slope profile and its derivative.
    fn w_profile(&self, r: f64) -> (f64, f64) {
        let half = 0.5 * self.cut_radius;
        let w0 = 1.0 / self.lambda;
        if r <= half {
            (w0, 0.0)
        } else if r >= self.cut_radius {
            (0.0, 0.0)
        } else {
            let t = (r - half) / half;
            (
                w0 * (1.0 - smoothstep5(t)),
                -w0 * crate::numerics::smoothstep5_deriv(t) / half,
            )
        }
    }

    /// Polar angle of the image point at chart radius `r`.
    pub fn angle(&self, r: f64) -> f64 {
        let (w, _) = self.w_profile(r);
        2.0 * r.atan2(w)
    }

    fn angle_deriv(&self, r: f64) -> f64 {
        let (w, dw) = self.w_profile(r);
        let denom = r * r + w * w;
        if denom == 0.0 {
            2.0 * self.lambda
        } else {
            2.0 * (w - r * dw) / denom
        }
    }

    pub fn value(&self, p: [f64; 2]) -> Vec3 {
        let d = wrap_delta(&self.spec, self.b, p);
        let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if r >= self.cut_radius {
            return SOUTH_POLE;
        }
        let ang = self.angle(r);
        let (sa, ca) = ang.sin_cos();
        if r < 1e-14 {
            return [0.0, 0.0, 1.0];
        }
        [sa * d[0] / r, sa * d[1] / r, ca]
    }

    pub fn field(&self) -> SphereField {
        let spec = self.spec;
        let n = spec.grid_n;
        let h = spec.h();
        let mut data = vec![[0.0f64; 3]; n * n];
        data.par_chunks_mut(n).enumerate().for_each(|(jj, row)| {
            let y = jj as f64 * h;
            for (ii, v) in row.iter_mut().enumerate() {
                *v = self.value([ii as f64 * h, y]);
            }
        });
        SphereField { spec, data }
    }

    fn radial_breaks(&self, up_to: f64) -> Vec<f64> {
        let li = 1.0 / self.lambda;
        let half = 0.5 * self.cut_radius;
        let mut breaks = vec![0.0, 0.05 * li, 0.3 * li, li, 5.0 * li];
        let mut r = 20.0 * li;
        while r < half {
            breaks.push(r);
            r *= 2.0;
        }
        breaks.push(half);
        for k in 1..=8 {
            breaks.push(half + (self.cut_radius - half) * k as f64 / 8.0);
        }
        breaks.retain(|v| *v <= up_to + 1e-15);
        breaks.push(up_to);
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        breaks
    }

    /// Exact (quadrature to machine precision) energy over the ball of
    /// radius `rad`; pass `cut_radius` or more for the total.
    pub fn ball_energy_exact(&self, rad: f64) -> f64 {
        let rad = rad.min(self.cut_radius);
        let integrand = |r: f64| -> f64 {
            if r <= 0.0 {
                return 0.0;
            }
            let da = self.angle_deriv(r);
            let sa = self.angle(r).sin();
            (da * da + sa * sa / (r * r)) * r
        };
        PI * integrate_panels(integrand, &self.radial_breaks(rad), 3)
    }

    /// Total energy; constant outside the cut radius contributes nothing.
    pub fn energy_exact(&self) -> f64 {
        self.ball_energy_exact(self.cut_radius)
    }

    pub fn defect_exact(&self) -> f64 {
        self.energy_exact() - 4.0 * PI
    }

    /// Exact L2 distance to the mean value over the torus.
    pub fn l2_distance_to_mean(&self) -> f64 {
        let area = self.spec.area();
        // mean of the third component
        let int_cos = TAU
            * integrate_panels(
                |r| self.angle(r).cos() * r,
                &self.radial_breaks(self.cut_radius),
                3,
            )
            + (-1.0) * (area - PI * self.cut_radius * self.cut_radius);
        let m3 = int_cos / area;
        // |v - m|^2 = 1 - 2 m3 cos(angle) + m3^2
        let val = area * (1.0 + m3 * m3) - 2.0 * m3 * int_cos;
        val.max(0.0).sqrt()
    }
}
