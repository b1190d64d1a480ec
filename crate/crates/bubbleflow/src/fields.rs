//! Discrete differential operators and energy functionals for sphere-valued
//! fields on the periodic grid.
//!
//! Stencil conventions, fixed once so the discrete integration-by-parts
//! identity is exact:
//! * the Dirichlet energy sums squared forward differences over grid edges;
//! * its exact dual is the compact 5-point Laplacian, used by the tension;
//! * pointwise diagnostic densities (stress, Hopf function, degree integrand)
//!   use centred differences.
//!
//! With these choices `sum(grad u . grad f) = -sum(lap u . f)` holds to
//! rounding on periodic grids, so energy decay computed along the flow agrees
//! with the squared gradient norm without a consistency gap.

use crate::error::BubbleflowError;
use crate::numerics::pairwise_sum;
use crate::sphere::{dot3, normalize3, tangent_project, Vec3};
use crate::torus::{TorusSpec, WeightField};
use rayon::prelude::*;

/// Sphere-valued field sampled at grid nodes.
#[derive(Debug, Clone)]
pub struct SphereField {
    pub spec: TorusSpec,
    pub data: Vec<Vec3>,
}

impl SphereField {
    /// Build from physical coordinates in `[0, side)^2`; values are normalised.
    pub fn from_fn<F: Fn(f64, f64) -> Vec3 + Sync>(spec: TorusSpec, f: F) -> Self {
        let n = spec.grid_n;
        let h = spec.h();
        let mut data = vec![[0.0; 3]; n * n];
        data.par_chunks_mut(n).enumerate().for_each(|(j, row)| {
            let y = j as f64 * h;
            for (i, v) in row.iter_mut().enumerate() {
                *v = normalize3(f(i as f64 * h, y));
            }
        });
        SphereField { spec, data }
    }

    pub fn constant(spec: TorusSpec, v: Vec3) -> Self {
        let v = normalize3(v);
        SphereField {
            spec,
            data: vec![v; spec.grid_n * spec.grid_n],
        }
    }

    pub fn map<F: Fn(Vec3) -> Vec3>(&self, f: F) -> Self {
        SphereField {
            spec: self.spec,
            data: self.data.iter().map(|v| normalize3(f(*v))).collect(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Vec3 {
        self.data[j * self.spec.grid_n + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Vec3) {
        self.data[j * self.spec.grid_n + i] = v;
    }

    pub fn normalize_all(&mut self) {
        for v in &mut self.data {
            *v = normalize3(*v);
        }
    }

    /// Worst deviation of |u| from 1.
    pub fn unit_defect(&self) -> f64 {
        self.data
            .iter()
            .map(|v| (dot3(*v, *v).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Reflect one domain axis (orientation flip of the domain).
    pub fn reflect_x(&self) -> Self {
        let n = self.spec.grid_n;
        let mut out = self.clone();
        for j in 0..n {
            for i in 0..n {
                out.data[j * n + i] = self.data[j * n + ((n - i) % n)];
            }
        }
        out
    }

    /// Periodic bicubic (Catmull-Rom) sample at a physical point; not normalised.
    pub fn sample_bicubic(&self, p: [f64; 2]) -> Vec3 {
        let n = self.spec.grid_n as i64;
        let h = self.spec.h();
        let gx = p[0] / h;
        let gy = p[1] / h;
        let ix = gx.floor();
        let iy = gy.floor();
        let tx = gx - ix;
        let ty = gy - iy;
        let wx = catmull_rom_weights(tx);
        let wy = catmull_rom_weights(ty);
        let mut acc = [0.0; 3];
        for (b, wyb) in wy.iter().enumerate() {
            let j = (iy as i64 + b as i64 - 1).rem_euclid(n) as usize;
            let row = &self.data[j * n as usize..(j + 1) * n as usize];
            let mut racc = [0.0; 3];
            for (a, wxa) in wx.iter().enumerate() {
                let i = (ix as i64 + a as i64 - 1).rem_euclid(n) as usize;
                let v = row[i];
                racc[0] += wxa * v[0];
                racc[1] += wxa * v[1];
                racc[2] += wxa * v[2];
            }
            acc[0] += wyb * racc[0];
            acc[1] += wyb * racc[1];
            acc[2] += wyb * racc[2];
        }
        acc
    }

    /// Periodic bilinear sample at a physical point; not normalised.
    pub fn sample_bilinear(&self, p: [f64; 2]) -> Vec3 {
        let n = self.spec.grid_n as i64;
        let h = self.spec.h();
        let gx = p[0] / h;
        let gy = p[1] / h;
        let ix = gx.floor();
        let iy = gy.floor();
        let tx = gx - ix;
        let ty = gy - iy;
        let i0 = (ix as i64).rem_euclid(n) as usize;
        let j0 = (iy as i64).rem_euclid(n) as usize;
        let i1 = (i0 + 1) % n as usize;
        let j1 = (j0 + 1) % n as usize;
        let mut acc = [0.0; 3];
        let corners = [
            (self.get(i0, j0), (1.0 - tx) * (1.0 - ty)),
            (self.get(i1, j0), tx * (1.0 - ty)),
            (self.get(i0, j1), (1.0 - tx) * ty),
            (self.get(i1, j1), tx * ty),
        ];
        for (v, w) in corners {
            acc[0] += w * v[0];
            acc[1] += w * v[1];
            acc[2] += w * v[2];
        }
        acc
    }

    /// Mean value over the torus (not normalised).
    pub fn mean(&self) -> Vec3 {
        let n = self.data.len() as f64;
        let mut acc = [0.0; 3];
        for k in 0..3 {
            let comp: Vec<f64> = self.data.iter().map(|v| v[k]).collect();
            acc[k] = pairwise_sum(&comp) / n;
        }
        acc
    }
}

fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Generic R^3-valued node field (tension output, variation fields).
#[derive(Debug, Clone)]
pub struct VectorField {
    pub spec: TorusSpec,
    pub data: Vec<Vec3>,
}

impl VectorField {
    pub fn zeros(spec: TorusSpec) -> Self {
        VectorField {
            spec,
            data: vec![[0.0; 3]; spec.grid_n * spec.grid_n],
        }
    }

    pub fn l2_norm_weighted(&self, node_weights: &[f64], cell_area: f64) -> f64 {
        let terms: Vec<f64> = self
            .data
            .iter()
            .zip(node_weights)
            .map(|(v, w)| dot3(*v, *v) * w)
            .collect();
        (pairwise_sum(&terms) * cell_area).sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| dot3(*v, *v).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Positive conformal factor, metric = rho^2 dx^2.
#[derive(Debug, Clone)]
pub struct ConformalWeight {
    pub spec: TorusSpec,
    pub rho: Vec<f64>,
}

impl ConformalWeight {
    pub fn flat(spec: TorusSpec) -> Self {
        ConformalWeight {
            spec,
            rho: vec![1.0; spec.grid_n * spec.grid_n],
        }
    }

    pub fn validate(&self) -> Result<(), BubbleflowError> {
        let n = self.spec.grid_n;
        for (k, r) in self.rho.iter().enumerate() {
            if !(*r > 0.0) {
                return Err(BubbleflowError::InvalidSpec(format!(
                    "conformal factor not positive at index {k}"
                )));
            }
        }
        for j in 0..n {
            for i in 0..n {
                let r = self.rho[j * n + i];
                let rx = self.rho[j * n + (i + 1) % n];
                let ratio = (r / rx).max(rx / r);
                if ratio >= 4.0 {
                    return Err(BubbleflowError::InvalidSpec(format!(
                        "conformal factor jumps by {ratio:.2} between adjacent cells at ({i},{j})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Dirichlet energy: half the sum of squared forward differences over edges.
/// Conformally invariant by construction (reads no weight).
pub fn dirichlet_energy(u: &SphereField) -> f64 {
    let n = u.spec.grid_n;
    let inv_h2 = 1.0 / (u.spec.h() * u.spec.h());
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| {
            let jp = (j + 1) % n;
            let mut acc = 0.0;
            for i in 0..n {
                let ip = (i + 1) % n;
                let v = u.get(i, j);
                let vx = u.get(ip, j);
                let vy = u.get(i, jp);
                let dx = [vx[0] - v[0], vx[1] - v[1], vx[2] - v[2]];
                let dy = [vy[0] - v[0], vy[1] - v[1], vy[2] - v[2]];
                acc += dot3(dx, dx) + dot3(dy, dy);
            }
            acc
        })
        .collect();
    0.5 * pairwise_sum(&rows) * inv_h2 * u.spec.cell_area()
}

/// Per-cell energy density (averaged over the four edges bounding each cell).
/// Summing `density * cell_area` over all cells reproduces [`dirichlet_energy`]
/// exactly.
pub fn cell_energy_density(u: &SphereField) -> Vec<f64> {
    let n = u.spec.grid_n;
    let inv_h2 = 1.0 / (u.spec.h() * u.spec.h());
    let mut edge_x = vec![0.0; n * n];
    let mut edge_y = vec![0.0; n * n];
    for j in 0..n {
        let jp = (j + 1) % n;
        for i in 0..n {
            let ip = (i + 1) % n;
            let v = u.get(i, j);
            let vx = u.get(ip, j);
            let vy = u.get(i, jp);
            let dx = [vx[0] - v[0], vx[1] - v[1], vx[2] - v[2]];
            let dy = [vy[0] - v[0], vy[1] - v[1], vy[2] - v[2]];
            edge_x[j * n + i] = dot3(dx, dx) * inv_h2;
            edge_y[j * n + i] = dot3(dy, dy) * inv_h2;
        }
    }
    let mut density = vec![0.0; n * n];
    for j in 0..n {
        let jp = (j + 1) % n;
        for i in 0..n {
            let ip = (i + 1) % n;
            density[j * n + i] = 0.5
                * (0.5 * (edge_x[j * n + i] + edge_x[jp * n + i])
                    + 0.5 * (edge_y[j * n + i] + edge_y[j * n + ip]));
        }
    }
    density
}

/// Weighted Dirichlet energy over the given quadrature weights (area units).
pub fn local_energy(u: &SphereField, weights: &WeightField) -> f64 {
    let density = cell_energy_density(u);
    let terms: Vec<f64> = weights
        .nonzero()
        .map(|(idx, w)| density[idx] * w)
        .collect();
    pairwise_sum(&terms)
}

/// Compact 5-point Laplacian, the exact dual of [`dirichlet_energy`].
pub fn laplacian_into(u: &SphereField, out: &mut VectorField) {
    let n = u.spec.grid_n;
    let inv_h2 = 1.0 / (u.spec.h() * u.spec.h());
    out.data.par_chunks_mut(n).enumerate().for_each(|(j, row)| {
        let jp = (j + 1) % n;
        let jm = (j + n - 1) % n;
        for (i, o) in row.iter_mut().enumerate() {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            let c = u.get(i, j);
            let a = u.get(ip, j);
            let b = u.get(im, j);
            let d = u.get(i, jp);
            let e = u.get(i, jm);
            for k in 0..3 {
                o[k] = (a[k] + b[k] + d[k] + e[k] - 4.0 * c[k]) * inv_h2;
            }
        }
    });
}

/// Tension field for a conformal metric: `rho^-2 (lap u + |grad u|^2 u)`
/// projected onto the tangent plane at `u`.
pub fn tension(u: &SphereField, weight: &ConformalWeight) -> VectorField {
    let mut out = VectorField::zeros(u.spec);
    laplacian_into(u, &mut out);
    let n = u.spec.grid_n;
    let inv_h2 = 1.0 / (u.spec.h() * u.spec.h());
    out.data.par_chunks_mut(n).enumerate().for_each(|(j, row)| {
        let jp = (j + 1) % n;
        let jm = (j + n - 1) % n;
        for (i, o) in row.iter_mut().enumerate() {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            let c = u.get(i, j);
            // centred |grad u|^2; the normal part is removed by the projection
            // either way, keeping the flow exactly on the sphere
            let dx = sub(u.get(ip, j), u.get(im, j));
            let dy = sub(u.get(i, jp), u.get(i, jm));
            let grad_sq = 0.25 * (dot3(dx, dx) + dot3(dy, dy)) * inv_h2;
            let mut f = *o;
            for k in 0..3 {
                f[k] += grad_sq * c[k];
            }
            let inv_rho_sq = 1.0 / (weight.rho[j * n + i] * weight.rho[j * n + i]);
            let t = tangent_project(c, f);
            for k in 0..3 {
                o[k] = inv_rho_sq * t[k];
            }
        }
    });
    out
}

#[inline]
fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Symmetric 2-tensor field sampled at nodes (xx, xy, yy components).
#[derive(Debug, Clone)]
pub struct TensorField {
    pub spec: TorusSpec,
    pub xx: Vec<f64>,
    pub xy: Vec<f64>,
    pub yy: Vec<f64>,
}

/// Energy stress tensor `k(u, g) = u* g_sphere - 1/2 |du|^2_g g`.
///
/// In coordinates the components are independent of a conformal factor; the
/// weight enters only through trace and norm conventions downstream.
pub fn stress_tensor(u: &SphereField, _weight: &ConformalWeight) -> TensorField {
    let n = u.spec.grid_n;
    let inv_2h = 1.0 / (2.0 * u.spec.h());
    let mut t = TensorField {
        spec: u.spec,
        xx: vec![0.0; n * n],
        xy: vec![0.0; n * n],
        yy: vec![0.0; n * n],
    };
    for j in 0..n {
        let jp = (j + 1) % n;
        let jm = (j + n - 1) % n;
        for i in 0..n {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            let ux = scale(sub(u.get(ip, j), u.get(im, j)), inv_2h);
            let uy = scale(sub(u.get(i, jp), u.get(i, jm)), inv_2h);
            let idx = j * n + i;
            let half_diff = 0.5 * (dot3(ux, ux) - dot3(uy, uy));
            t.xx[idx] = half_diff;
            t.yy[idx] = -half_diff;
            t.xy[idx] = dot3(ux, uy);
        }
    }
    t
}

#[inline]
fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Complex Hopf function `phi = |u_x|^2 - |u_y|^2 - 2 i u_x . u_y`
/// (real/imaginary parts returned separately).
pub fn hopf(u: &SphereField) -> (Vec<f64>, Vec<f64>) {
    let t = stress_tensor(u, &ConformalWeight::flat(u.spec));
    let re: Vec<f64> = t.xx.iter().map(|v| 2.0 * v).collect();
    let im: Vec<f64> = t.xy.iter().map(|v| -2.0 * v).collect();
    (re, im)
}

/// Field sampled on a (s, theta) cylinder lattice, periodic in theta only.
#[derive(Debug, Clone)]
pub struct CylField {
    pub n_s: usize,
    pub n_theta: usize,
    pub s0: f64,
    pub ds: f64,
    pub data: Vec<Vec3>,
}

impl CylField {
    pub fn from_fn<F: Fn(f64, f64) -> Vec3>(
        n_s: usize,
        n_theta: usize,
        s0: f64,
        ds: f64,
        f: F,
    ) -> Self {
        let dth = 2.0 * std::f64::consts::PI / n_theta as f64;
        let mut data = vec![[0.0; 3]; n_s * n_theta];
        for k in 0..n_s {
            let s = s0 + k as f64 * ds;
            for m in 0..n_theta {
                data[k * n_theta + m] = normalize3(f(s, m as f64 * dth));
            }
        }
        CylField {
            n_s,
            n_theta,
            s0,
            ds,
            data,
        }
    }

    #[inline]
    pub fn get(&self, k: usize, m: usize) -> Vec3 {
        self.data[k * self.n_theta + m]
    }

    pub fn s_at(&self, k: usize) -> f64 {
        self.s0 + k as f64 * self.ds
    }

    pub fn dtheta(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.n_theta as f64
    }
}

/// Ring profile `alpha(s) = ∮ |u_s|^2 - |u_theta|^2 dtheta`.
///
/// Centred differences; the first and last ring use one-sided s-differences.
pub fn cylinder_alpha(u: &CylField) -> Vec<f64> {
    ring_integral(u, |us, uth| dot3(us, us) - dot3(uth, uth))
}

/// Angular ring energy `Theta(s) = ∮ |u_theta|^2 dtheta`.
pub fn cylinder_theta(u: &CylField) -> Vec<f64> {
    ring_integral(u, |_, uth| dot3(uth, uth))
}

fn ring_integral<F: Fn(Vec3, Vec3) -> f64>(u: &CylField, f: F) -> Vec<f64> {
    let (ns, nt) = (u.n_s, u.n_theta);
    let dth = u.dtheta();
    let inv_2ds = 1.0 / (2.0 * u.ds);
    let inv_2dth = 1.0 / (2.0 * dth);
    let mut out = vec![0.0; ns];
    for k in 0..ns {
        let mut acc = 0.0;
        for m in 0..nt {
            let mp = (m + 1) % nt;
            let mm = (m + nt - 1) % nt;
            let us = if k == 0 {
                scale(sub(u.get(1, m), u.get(0, m)), 1.0 / u.ds)
            } else if k == ns - 1 {
                scale(sub(u.get(ns - 1, m), u.get(ns - 2, m)), 1.0 / u.ds)
            } else {
                scale(sub(u.get(k + 1, m), u.get(k - 1, m)), inv_2ds)
            };
            let uth = scale(sub(u.get(k, mp), u.get(k, mm)), inv_2dth);
            acc += f(us, uth);
        }
        out[k] = acc * dth;
    }
    out
}

/// Second variation of the Dirichlet energy at `u` in tangent directions
/// `(v, w)`: the exact mixed derivative of the discrete energy composed with
/// the pointwise normalisation.
pub fn second_variation(
    u: &SphereField,
    v: &VectorField,
    w: &VectorField,
) -> Result<f64, BubbleflowError> {
    for (field, name) in [(v, "v"), (w, "w")] {
        let worst = field
            .data
            .iter()
            .zip(&u.data)
            .map(|(f, uu)| dot3(*f, *uu).abs())
            .fold(0.0, f64::max);
        if worst > 1e-8 {
            let _ = name;
            return Err(BubbleflowError::NotTangent(worst));
        }
    }
    let n = u.spec.grid_n;
    let inv_h2 = 1.0 / (u.spec.h() * u.spec.h());
    let mut terms = Vec::with_capacity(n);
    for j in 0..n {
        let jp = (j + 1) % n;
        let jm = (j + n - 1) % n;
        let mut acc = 0.0;
        for i in 0..n {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            // grad v . grad w over the two forward edges at this node
            let dvx = sub(v.data[j * n + ip], v.data[j * n + i]);
            let dwx = sub(w.data[j * n + ip], w.data[j * n + i]);
            let dvy = sub(v.data[jp * n + i], v.data[j * n + i]);
            let dwy = sub(w.data[jp * n + i], w.data[j * n + i]);
            acc += (dot3(dvx, dwx) + dot3(dvy, dwy)) * inv_h2;
            // -|grad u|^2 v.w with the edge-consistent gradient magnitude
            let c = u.get(i, j);
            let mut g2 = 0.0;
            for nb in [u.get(ip, j), u.get(im, j), u.get(i, jp), u.get(i, jm)] {
                let d = sub(nb, c);
                g2 += dot3(d, d);
            }
            g2 *= 0.5 * inv_h2;
            acc -= g2 * dot3(v.data[j * n + i], w.data[j * n + i]);
        }
        terms.push(acc);
    }
    Ok(pairwise_sum(&terms) * u.spec.cell_area())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::normalize3;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn winding_field(spec: TorusSpec) -> SphereField {
        SphereField::from_fn(spec, |x, _| {
            let t = 2.0 * PI * x;
            [t.cos(), t.sin(), 0.0]
        })
    }

    #[test]
    fn constant_field_has_zero_energy_and_tension() {
        let spec = TorusSpec::new(1.0, 32).unwrap();
        let u = SphereField::constant(spec, [0.3, -0.2, 0.9]);
        assert_eq!(dirichlet_energy(&u), 0.0);
        let tau = tension(&u, &ConformalWeight::flat(spec));
        assert_eq!(tau.sup_norm(), 0.0);
    }

    #[test]
    fn winding_energy_matches_closed_form() {
        // E = 2 pi^2 for (cos 2 pi x, sin 2 pi x, 0) on the unit torus
        let spec = TorusSpec::new(1.0, 256).unwrap();
        let u = winding_field(spec);
        assert_relative_eq!(
            dirichlet_energy(&u),
            2.0 * PI * PI,
            max_relative = 2e-4
        );
    }

    #[test]
    fn local_energy_with_uniform_weights_is_total_energy() {
        let spec = TorusSpec::new(1.0, 64).unwrap();
        let u = SphereField::from_fn(spec, |x, y| {
            normalize3([
                (2.0 * PI * x).cos(),
                (2.0 * PI * y).sin(),
                1.0 + 0.2 * (4.0 * PI * x).sin(),
            ])
        });
        let total = dirichlet_energy(&u);
        let uniform = WeightField::uniform(spec);
        assert_relative_eq!(local_energy(&u, &uniform), total, max_relative = 1e-12);
    }

    #[test]
    fn integration_by_parts_is_exact() {
        let spec = TorusSpec::new(1.0, 48).unwrap();
        let u = SphereField::from_fn(spec, |x, y| {
            normalize3([
                (2.0 * PI * x).cos() + 0.1,
                (2.0 * PI * y).sin(),
                1.0 + 0.3 * (2.0 * PI * (x + y)).cos(),
            ])
        });
        let f = SphereField::from_fn(spec, |x, y| {
            normalize3([
                (4.0 * PI * y).cos(),
                0.5,
                1.0 + 0.2 * (2.0 * PI * x).sin(),
            ])
        });
        // sum of forward-difference gradients against dual Laplacian
        let n = spec.grid_n;
        let inv_h2 = 1.0 / (spec.h() * spec.h());
        let mut lhs = 0.0;
        for j in 0..n {
            let jp = (j + 1) % n;
            for i in 0..n {
                let ip = (i + 1) % n;
                let du_x = [
                    u.get(ip, j)[0] - u.get(i, j)[0],
                    u.get(ip, j)[1] - u.get(i, j)[1],
                    u.get(ip, j)[2] - u.get(i, j)[2],
                ];
                let df_x = [
                    f.get(ip, j)[0] - f.get(i, j)[0],
                    f.get(ip, j)[1] - f.get(i, j)[1],
                    f.get(ip, j)[2] - f.get(i, j)[2],
                ];
                let du_y = [
                    u.get(i, jp)[0] - u.get(i, j)[0],
                    u.get(i, jp)[1] - u.get(i, j)[1],
                    u.get(i, jp)[2] - u.get(i, j)[2],
                ];
                let df_y = [
                    f.get(i, jp)[0] - f.get(i, j)[0],
                    f.get(i, jp)[1] - f.get(i, j)[1],
                    f.get(i, jp)[2] - f.get(i, j)[2],
                ];
                lhs += (dot3(du_x, df_x) + dot3(du_y, df_y)) * inv_h2;
            }
        }
        lhs *= spec.cell_area();
        let mut lap = VectorField::zeros(spec);
        laplacian_into(&u, &mut lap);
        let mut rhs = 0.0;
        for (l, fv) in lap.data.iter().zip(&f.data) {
            rhs -= dot3(*l, *fv);
        }
        rhs *= spec.cell_area();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn tension_scales_with_inverse_squared_conformal_factor() {
        let spec = TorusSpec::new(1.0, 32).unwrap();
        let u = SphereField::from_fn(spec, |x, y| {
            normalize3([(2.0 * PI * x).cos(), (2.0 * PI * y).sin(), 1.0])
        });
        let flat = tension(&u, &ConformalWeight::flat(spec));
        let scaled_weight = ConformalWeight {
            spec,
            rho: vec![3.0; spec.grid_n * spec.grid_n],
        };
        let scaled = tension(&u, &scaled_weight);
        for (a, b) in flat.data.iter().zip(&scaled.data) {
            for k in 0..3 {
                assert_relative_eq!(b[k], a[k] / 9.0, epsilon = 1e-13);
            }
        }
        // tangency
        let worst = flat
            .data
            .iter()
            .zip(&u.data)
            .map(|(t, v)| dot3(*t, *v).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12);
    }

    #[test]
    fn tension_vanishes_on_harmonic_template_under_refinement() {
        // sampled bubble is harmonic for the flat metric; sup norm of the
        // tension decays at second order
        let mut sups = Vec::new();
        for &n in &[64usize, 128, 256] {
            let spec = TorusSpec::new(1.0, n).unwrap();
            let lam = 4.0;
            let u = SphereField::from_fn(spec, |x, y| {
                // keep the bubble centred and restrict attention to the chart
                let dx = x - 0.5;
                let dy = y - 0.5;
                crate::sphere::stereo([dx, dy], lam)
            });
            let tau = tension(&u, &ConformalWeight::flat(spec));
            // measure away from the chart seam where the template wraps
            let mut worst: f64 = 0.0;
            let nn = spec.grid_n;
            for j in 0..nn {
                for i in 0..nn {
                    let x = i as f64 * spec.h();
                    let y = j as f64 * spec.h();
                    let r2 = (x - 0.5) * (x - 0.5) + (y - 0.5) * (y - 0.5);
                    if r2 < 0.3 * 0.3 {
                        let t = tau.data[j * nn + i];
                        worst = worst.max(dot3(t, t).sqrt());
                    }
                }
            }
            sups.push(worst);
        }
        assert!(sups[1] < sups[0] * 0.35, "sups = {sups:?}");
        assert!(sups[2] < sups[1] * 0.35, "sups = {sups:?}");
    }

    #[test]
    fn stress_of_winding_field() {
        let spec = TorusSpec::new(1.0, 128).unwrap();
        let u = winding_field(spec);
        let k = stress_tensor(&u, &ConformalWeight::flat(spec));
        let idx = 40 * spec.grid_n + 17;
        assert_relative_eq!(k.xx[idx], 2.0 * PI * PI, max_relative = 1e-3);
        assert_relative_eq!(k.yy[idx], -2.0 * PI * PI, max_relative = 1e-3);
        assert!(k.xy[idx].abs() < 1e-10);
        // algebraic trace identity
        for i in 0..k.xx.len() {
            assert!((k.xx[i] + k.yy[i]).abs() <= 1e-12 * k.xx[i].abs().max(1.0));
        }
    }

    #[test]
    fn stress_vanishes_for_conformal_sample_under_refinement() {
        let mut worsts = Vec::new();
        for &n in &[64usize, 128] {
            let spec = TorusSpec::new(1.0, n).unwrap();
            let u = SphereField::from_fn(spec, |x, y| {
                crate::sphere::stereo([x - 0.5, y - 0.5], 3.0)
            });
            let k = stress_tensor(&u, &ConformalWeight::flat(spec));
            let mut worst: f64 = 0.0;
            for j in 0..n {
                for i in 0..n {
                    let x = i as f64 / n as f64 - 0.5;
                    let y = j as f64 / n as f64 - 0.5;
                    if x * x + y * y < 0.09 {
                        let idx = j * n + i;
                        worst = worst
                            .max(k.xx[idx].abs())
                            .max(k.xy[idx].abs());
                    }
                }
            }
            worsts.push(worst);
        }
        assert!(worsts[1] < worsts[0] * 0.35, "worsts = {worsts:?}");
    }

    #[test]
    fn hopf_of_winding_field_is_real_constant() {
        let spec = TorusSpec::new(1.0, 128).unwrap();
        let (re, im) = hopf(&winding_field(spec));
        let idx = 30 * spec.grid_n + 77;
        assert_relative_eq!(re[idx], 4.0 * PI * PI, max_relative = 1e-3);
        assert!(im[idx].abs() < 1e-10);
    }

    #[test]
    fn cylinder_profiles_on_model_fields() {
        // theta-winding ring: alpha = -2 pi, Theta = 2 pi
        let u = CylField::from_fn(64, 128, -2.0, 0.05, |_, th| [th.cos(), th.sin(), 0.0]);
        let alpha = cylinder_alpha(&u);
        let theta = cylinder_theta(&u);
        for k in 2..62 {
            assert_relative_eq!(alpha[k], -2.0 * PI, max_relative = 1e-3);
            assert_relative_eq!(theta[k], 2.0 * PI, max_relative = 1e-3);
        }
        // s-only motion at unit speed: alpha = 2 pi c^2, Theta = 0
        let c = 0.37;
        let v = CylField::from_fn(64, 128, 0.0, 0.05, |s, _| {
            [(c * s).cos(), (c * s).sin(), 0.0]
        });
        let alpha_v = cylinder_alpha(&v);
        let theta_v = cylinder_theta(&v);
        for k in 2..62 {
            assert_relative_eq!(alpha_v[k], 2.0 * PI * c * c, max_relative = 1e-3);
            assert!(theta_v[k].abs() < 1e-12);
        }
    }

    #[test]
    fn second_variation_matches_finite_differences() {
        let spec = TorusSpec::new(1.0, 32).unwrap();
        let u = SphereField::from_fn(spec, |x, y| {
            normalize3([
                (2.0 * PI * x).cos(),
                (2.0 * PI * y).sin(),
                1.4 + 0.3 * (2.0 * PI * (x - y)).cos(),
            ])
        });
        let mk_tangent = |phase: f64| -> VectorField {
            let mut f = VectorField::zeros(spec);
            for (idx, uu) in u.data.iter().enumerate() {
                let i = idx % spec.grid_n;
                let j = idx / spec.grid_n;
                let x = i as f64 * spec.h();
                let y = j as f64 * spec.h();
                let raw = [
                    (2.0 * PI * x + phase).sin(),
                    (2.0 * PI * y - phase).cos(),
                    0.3,
                ];
                f.data[idx] = tangent_project(*uu, raw);
            }
            f
        };
        let v = mk_tangent(0.0);
        let w = mk_tangent(1.1);
        let d2 = second_variation(&u, &v, &w).unwrap();
        // symmetry is exact
        let d2_sym = second_variation(&u, &w, &v).unwrap();
        assert_relative_eq!(d2, d2_sym, max_relative = 1e-12);
        // zero direction gives zero
        let z = VectorField::zeros(spec);
        assert_eq!(second_variation(&u, &v, &z).unwrap(), 0.0);
        // central finite differences of the normalised discrete energy
        let eps = 1e-4;
        let perturbed = |a: f64, b: f64| -> f64 {
            let mut f = u.clone();
            for (idx, val) in f.data.iter_mut().enumerate() {
                for k in 0..3 {
                    val[k] += a * v.data[idx][k] + b * w.data[idx][k];
                }
                *val = normalize3(*val);
            }
            dirichlet_energy(&f)
        };
        let fd = (perturbed(eps, eps) - perturbed(eps, -eps) - perturbed(-eps, eps)
            + perturbed(-eps, -eps))
            / (4.0 * eps * eps);
        assert_relative_eq!(d2, fd, max_relative = 1e-4);
        // non-tangent input is rejected
        let mut bad = v.clone();
        bad.data[5] = u.data[5];
        assert!(second_variation(&u, &bad, &w).is_err());
    }
}
