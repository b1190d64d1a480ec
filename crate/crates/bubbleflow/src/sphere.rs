//! Target-sphere primitives: the rescaled inverse stereographic family,
//! rotations, tangent projection, topological degree, rotation fitting.

use crate::error::BubbleflowError;
use crate::fields::SphereField;
use crate::numerics::pairwise_sum;
use crate::torus::WeightField;
use nalgebra::{Matrix3, SVD};

pub type Vec3 = [f64; 3];

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn normalize3(a: Vec3) -> Vec3 {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// South pole, the value of the stereographic family at infinity.
pub const SOUTH_POLE: Vec3 = [0.0, 0.0, -1.0];

/// Rescaled inverse stereographic projection at scale `mu`.
///
/// Maps the origin to the north pole and infinity to the south pole.
pub fn stereo(x: [f64; 2], mu: f64) -> Vec3 {
    let y = [mu * x[0], mu * x[1]];
    let r2 = y[0] * y[0] + y[1] * y[1];
    let denom = 1.0 + r2;
    [2.0 * y[0] / denom, 2.0 * y[1] / denom, (1.0 - r2) / denom]
}

/// Jacobian of [`stereo`] with respect to `x` (3x2, columns are d/dx1, d/dx2).
pub fn stereo_grad(x: [f64; 2], mu: f64) -> [[f64; 3]; 2] {
    let y = [mu * x[0], mu * x[1]];
    let r2 = y[0] * y[0] + y[1] * y[1];
    let d = 1.0 + r2;
    let d2 = d * d;
    // d/dy of (2y/(1+|y|^2), (1-|y|^2)/(1+|y|^2)), then scale by mu
    let col = |k: usize| -> [f64; 3] {
        let yk = y[k];
        let mut c = [0.0; 3];
        for i in 0..2 {
            let delta = if i == k { 1.0 } else { 0.0 };
            c[i] = (2.0 * delta * d - 2.0 * y[i] * 2.0 * yk) / d2 * mu;
        }
        c[2] = (-2.0 * yk * d - (1.0 - r2) * 2.0 * yk) / d2 * mu;
        c
    };
    [col(0), col(1)]
}

/// Frobenius norm of the differential of the unit-scale stereographic map:
/// `|∇π(x)| = 2√2 / (1 + |x|^2)`.
pub fn stereo_grad_norm(x: [f64; 2]) -> f64 {
    2.0 * std::f64::consts::SQRT_2 / (1.0 + x[0] * x[0] + x[1] * x[1])
}

/// Conformal factor of the pulled-back round metric: `rho_pi = 2mu/(1+|mu x|^2)`,
/// so that `rho_pi^2 = 0.5 |∇π_mu|^2`.
pub fn stereo_conformal_factor(r: f64, mu: f64) -> f64 {
    2.0 * mu / (1.0 + mu * mu * r * r)
}

/// Energy of the unit bubble over a centred disc of radius `r`.
pub fn bubble_disc_energy(r: f64) -> f64 {
    4.0 * std::f64::consts::PI * r * r / (1.0 + r * r)
}

/// Component of `f` orthogonal to the unit vector `u`.
pub fn tangent_project(u: Vec3, f: Vec3) -> Vec3 {
    let c = dot3(u, f);
    [f[0] - c * u[0], f[1] - c * u[1], f[2] - c * u[2]]
}

/// Proper rotation of R^3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3 {
    pub m: [[f64; 3]; 3],
}

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3 {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation about a unit axis by `angle` (Rodrigues).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = normalize3(axis);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let (x, y, z) = (a[0], a[1], a[2]);
        Rotation3 {
            m: [
                [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
                [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
                [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
            ],
        }
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.m;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn transpose(&self) -> Self {
        let m = &self.m;
        Rotation3 {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    pub fn compose(&self, other: &Rotation3) -> Self {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += self.m[i][k] * other.m[k][j];
                }
            }
        }
        Rotation3 { m: out }
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Deviation from orthogonality, max |R^T R - I| entrywise.
    pub fn orthogonality_defect(&self) -> f64 {
        let t = self.transpose().compose(self);
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((t.m[i][j] - target).abs());
            }
        }
        worst
    }

    /// Rotation angle separating `self` from `other`.
    pub fn angle_to(&self, other: &Rotation3) -> f64 {
        let rel = self.transpose().compose(other);
        let tr = rel.m[0][0] + rel.m[1][1] + rel.m[2][2];
        ((tr - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }
}

/// Outcome of the degree integral.
#[derive(Debug, Clone, Copy)]
pub struct DegreeReport {
    pub degree: i64,
    pub raw: f64,
    /// Fraction of cells with an adjacent-value jump above pi/2.
    pub jump_fraction: f64,
}

/// Topological degree via the normalised Jacobian integral
/// `(1/4pi) ∫ u . (d1 u x d2 u) dx` with centred periodic differences.
pub fn degree(field: &SphereField) -> Result<DegreeReport, BubbleflowError> {
    let n = field.spec.grid_n;
    let h = field.spec.h();
    let scale = 1.0 / (2.0 * h);
    let mut rows = vec![0.0; n];
    let mut jumps = 0usize;
    for j in 0..n {
        let jp = (j + 1) % n;
        let jm = (j + n - 1) % n;
        let mut acc = 0.0;
        for i in 0..n {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            let u = field.get(i, j);
            let ux = sub_scale(field.get(ip, j), field.get(im, j), scale);
            let uy = sub_scale(field.get(i, jp), field.get(i, jm), scale);
            acc += dot3(u, cross3(ux, uy));
            if dot3(u, field.get(ip, j)) < std::f64::consts::FRAC_PI_2.cos() {
                jumps += 1;
            }
        }
        rows[j] = acc;
    }
    let raw = pairwise_sum(&rows) * h * h / (4.0 * std::f64::consts::PI);
    let nearest = raw.round();
    let deviation = (raw - nearest).abs();
    if deviation > 0.2 {
        return Err(BubbleflowError::UnresolvedField { raw, deviation });
    }
    Ok(DegreeReport {
        degree: nearest as i64,
        raw,
        jump_fraction: jumps as f64 / (n * n) as f64,
    })
}

fn sub_scale(a: Vec3, b: Vec3, s: f64) -> Vec3 {
    [(a[0] - b[0]) * s, (a[1] - b[1]) * s, (a[2] - b[2]) * s]
}

/// Result of a weighted orthogonal rotation fit.
#[derive(Debug, Clone, Copy)]
pub struct RotationFit {
    pub rotation: Rotation3,
    /// True when the two smallest singular values of the correlation matrix
    /// fall below 1e-12 and the minimiser is not unique.
    pub degenerate: bool,
}

/// Weighted orthogonal fit: the proper rotation minimising
/// `sum_i w_i |u_i - R t_i|^2`, via polar decomposition of the weighted
/// cross-correlation with a sign correction on the smallest singular value.
pub fn best_rotation(
    field: &SphereField,
    template: &SphereField,
    weights: &WeightField,
) -> Result<RotationFit, BubbleflowError> {
    assert_eq!(field.spec.grid_n, template.spec.grid_n);
    let mut c = [[0.0f64; 3]; 3];
    let mut total_w = 0.0;
    for (idx, w) in weights.nonzero() {
        let u = field.data[idx];
        let t = template.data[idx];
        total_w += w;
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] += w * u[i] * t[j];
            }
        }
    }
    if total_w <= 0.0 {
        return Err(BubbleflowError::InvalidSpec(
            "rotation fit weights sum to zero".into(),
        ));
    }
    let m = Matrix3::new(
        c[0][0], c[0][1], c[0][2], c[1][0], c[1][1], c[1][2], c[2][0], c[2][1], c[2][2],
    );
    let svd = SVD::new(m, true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd vt");
    let s = svd.singular_values;
    let det_uv = (u * vt).determinant();
    let d = Matrix3::from_diagonal(&nalgebra::Vector3::new(
        1.0,
        1.0,
        if det_uv < 0.0 { -1.0 } else { 1.0 },
    ));
    let r = u * d * vt;
    let mut rm = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rm[i][j] = r[(i, j)];
        }
    }
    let mut sv = [s[0], s[1], s[2]];
    sv.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let degenerate = sv[0] < 1e-12 && sv[1] < 1e-12;
    Ok(RotationFit {
        rotation: Rotation3 { m: rm },
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::TorusSpec;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stereo_poles_and_equator() {
        assert_eq!(stereo([0.0, 0.0], 7.0), [0.0, 0.0, 1.0]);
        // |mu x| = 1 lands on the equator
        let v = stereo([0.5, 0.0], 2.0);
        assert_relative_eq!(v[2], 0.0, epsilon = 1e-15);
        assert_relative_eq!(norm3(v), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn stereo_gradient_norm_closed_form() {
        // |∇π(x)| at x = (1, 0) equals 2√2/2 = √2
        assert_relative_eq!(
            stereo_grad_norm([1.0, 0.0]),
            std::f64::consts::SQRT_2,
            epsilon = 1e-15
        );
        // finite-difference cross-check of the analytic Jacobian
        let x = [0.37, -0.21];
        let g = stereo_grad(x, 1.0);
        let mut frob = 0.0;
        for col in &g {
            frob += dot3(*col, *col);
        }
        assert_relative_eq!(frob.sqrt(), stereo_grad_norm(x), epsilon = 1e-12);
    }

    #[test]
    fn stereo_is_conformal() {
        // |dπ_mu(e1)| = |dπ_mu(e2)| and the images are orthogonal
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let mu = rng.gen_range(0.5..8.0);
            let g = stereo_grad(x, mu);
            let n1 = norm3(g[0]);
            let n2 = norm3(g[1]);
            assert!((n1 - n2).abs() < 1e-10 * n1.max(1.0));
            assert!(dot3(g[0], g[1]).abs() < 1e-10 * n1 * n2);
        }
    }

    #[test]
    fn disc_energy_closed_form_vs_quadrature() {
        // quadrature of 0.5 |∇π|^2 over D_r matches 4π r^2/(1+r^2)
        for &r in &[0.5f64, 1.0, 2.0] {
            let f = |rad: f64| 0.5 * stereo_grad_norm([rad, 0.0]).powi(2) * rad;
            let breaks: Vec<f64> = (0..=1000).map(|i| r * i as f64 / 1000.0).collect();
            let quad = crate::numerics::integrate_panels(f, &breaks, 1)
                * 2.0
                * std::f64::consts::PI;
            assert!((quad - bubble_disc_energy(r)).abs() / bubble_disc_energy(r) < 5e-3);
        }
        assert_relative_eq!(
            bubble_disc_energy(1.0),
            2.0 * std::f64::consts::PI,
            epsilon = 1e-15
        );
    }

    #[test]
    fn tangent_projection_cases() {
        let u = normalize3([1.0, 2.0, -1.0]);
        let par = [3.0 * u[0], 3.0 * u[1], 3.0 * u[2]];
        assert!(norm3(tangent_project(u, par)) < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let u = normalize3([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            let f = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            let p = tangent_project(u, f);
            assert!(dot3(p, u).abs() < 1e-14);
            let perp = tangent_project(u, p);
            for k in 0..3 {
                assert_relative_eq!(perp[k], p[k], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn degree_of_constant_and_winding_fields() {
        let spec = TorusSpec::new(1.0, 32).unwrap();
        let constant = SphereField::from_fn(spec, |_, _| [0.0, 0.0, 1.0]);
        assert_eq!(degree(&constant).unwrap().degree, 0);

        // an equator winding has degree 0 (no area is swept)
        let winding = SphereField::from_fn(spec, |x, _| {
            let t = 2.0 * std::f64::consts::PI * x;
            [t.cos(), t.sin(), 0.0]
        });
        assert_eq!(degree(&winding).unwrap().degree, 0);
    }

    #[test]
    fn rotation_recovery_from_planted_rotation() {
        let spec = TorusSpec::new(1.0, 48).unwrap();
        let template = SphereField::from_fn(spec, |x, y| {
            normalize3([
                (2.0 * std::f64::consts::PI * x).cos(),
                (2.0 * std::f64::consts::PI * y).sin(),
                1.2,
            ])
        });
        let r0 = Rotation3::from_axis_angle([0.3, -0.5, 0.8], 0.77);
        let rotated = template.map(|v| r0.apply(v));
        let w = WeightField::uniform(spec);
        let fit = best_rotation(&rotated, &template, &w).unwrap();
        assert!(!fit.degenerate);
        assert!(fit.rotation.angle_to(&r0) < 1e-8);
        assert!(fit.rotation.orthogonality_defect() < 1e-10);
        assert!((fit.rotation.det() - 1.0).abs() < 1e-10);

        // identity case
        let fit_id = best_rotation(&template, &template, &w).unwrap();
        assert!(fit_id.rotation.angle_to(&Rotation3::identity()) < 1e-10);
    }

    #[test]
    fn rotation_fit_flags_degenerate_correlation() {
        // constant template: the correlation matrix has rank one and the
        // minimiser is not unique; the fit still returns with the flag set
        let spec = TorusSpec::new(1.0, 24).unwrap();
        let template = SphereField::constant(spec, [0.0, 0.0, 1.0]);
        let field = SphereField::constant(spec, [0.6, 0.0, 0.8]);
        let w = WeightField::uniform(spec);
        let fit = best_rotation(&field, &template, &w).unwrap();
        assert!(fit.degenerate);
        assert!(fit.rotation.orthogonality_defect() < 1e-10);
    }

    #[test]
    fn rotation_fit_beats_coarse_so3_search_under_noise() {
        let spec = TorusSpec::new(1.0, 24).unwrap();
        let template = SphereField::from_fn(spec, |x, y| {
            normalize3([
                (2.0 * std::f64::consts::PI * x).cos() + 0.3,
                (2.0 * std::f64::consts::PI * y).sin() - 0.1,
                0.9,
            ])
        });
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise_size = 0.02;
        let noisy = {
            let mut f = template.clone();
            for v in &mut f.data {
                let n = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let t = tangent_project(*v, n);
                for k in 0..3 {
                    v[k] += noise_size * t[k];
                }
                *v = normalize3(*v);
            }
            f
        };
        let w = WeightField::uniform(spec);
        let fit = best_rotation(&noisy, &template, &w).unwrap();
        let angle = fit.rotation.angle_to(&Rotation3::identity());
        // perturbation bound: rotation angle controlled by the noise size
        assert!(angle <= 4.0 * noise_size, "angle = {angle}");

        // brute-force check on a coarse axis/angle grid: no sampled rotation
        // does meaningfully better than the fitted one
        let cost = |r: &Rotation3| -> f64 {
            let mut acc = 0.0;
            for (u, t) in noisy.data.iter().zip(&template.data) {
                let rt = r.apply(*t);
                let d = [u[0] - rt[0], u[1] - rt[1], u[2] - rt[2]];
                acc += dot3(d, d);
            }
            acc
        };
        let fitted_cost = cost(&fit.rotation);
        let mut best_grid = f64::INFINITY;
        for ax in 0..6 {
            for az in 0..6 {
                let axis = normalize3([
                    (ax as f64).cos(),
                    (ax as f64).sin(),
                    (az as f64 * 0.7).cos(),
                ]);
                for k in 0..16 {
                    let r = Rotation3::from_axis_angle(axis, k as f64 * 0.05 - 0.4);
                    best_grid = best_grid.min(cost(&r));
                }
            }
        }
        assert!(fitted_cost <= best_grid + 1e-9);
    }
}
