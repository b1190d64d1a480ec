//! Flat-torus geometry: the periodic grid, shortest-representative distance,
//! translation charts, geodesic-ball quadrature weights.

use crate::error::BubbleflowError;
use serde::{Deserialize, Serialize};

/// Square flat torus `[0, side)^2` carrying an `grid_n x grid_n` node grid.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TorusSpec {
    pub side: f64,
    pub grid_n: usize,
}

impl TorusSpec {
    pub fn new(side: f64, grid_n: usize) -> Result<Self, BubbleflowError> {
        let spec = TorusSpec { side, grid_n };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), BubbleflowError> {
        if !(self.side > 0.0) {
            return Err(BubbleflowError::InvalidSpec("side must be positive".into()));
        }
        if self.grid_n < 16 || self.grid_n % 2 != 0 {
            return Err(BubbleflowError::InvalidSpec(
                "grid_n must be even and at least 16".into(),
            ));
        }
        Ok(())
    }

    /// Grid spacing.
    pub fn h(&self) -> f64 {
        self.side / self.grid_n as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.h() * self.h()
    }

    pub fn area(&self) -> f64 {
        self.side * self.side
    }

    /// Injectivity radius of the flat square torus.
    pub fn inj_radius(&self) -> f64 {
        0.5 * self.side
    }

    /// Node coordinate of grid index `(i, j)`.
    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        [i as f64 * self.h(), j as f64 * self.h()]
    }

    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.grid_n + i
    }

    /// Wrap a coordinate into `[0, side)`.
    pub fn wrap(&self, x: f64) -> f64 {
        let r = x.rem_euclid(self.side);
        if r == self.side {
            0.0
        } else {
            r
        }
    }
}

/// Signed offset of minimal length from `a` to `p`, one component.
///
/// Ties at exactly half a period resolve to the nonnegative representative.
fn wrap_component(d: f64, side: f64) -> f64 {
    let mut r = d.rem_euclid(side);
    if r > 0.5 * side {
        r -= side;
    } else if r == 0.5 * side {
        // keep the nonnegative representative
    }
    r
}

/// Minimal periodic representative of `p - a`.
pub fn wrap_delta(spec: &TorusSpec, a: [f64; 2], p: [f64; 2]) -> [f64; 2] {
    [
        wrap_component(p[0] - a[0], spec.side),
        wrap_component(p[1] - a[1], spec.side),
    ]
}

/// Geodesic distance on the flat torus.
pub fn torus_distance(spec: &TorusSpec, p: [f64; 2], q: [f64; 2]) -> f64 {
    let d = wrap_delta(spec, p, q);
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// A point expressed in the translation chart centred at `base`.
#[derive(Debug, Clone, Copy)]
pub struct ChartPoint {
    pub base: [f64; 2],
    pub offset: [f64; 2],
}

/// Chart map `F_a(p) = p - a`, wraparound chosen to minimise the offset.
/// Fails when `p` lies outside the injectivity ball of `a`.
pub fn chart_to(spec: &TorusSpec, a: [f64; 2], p: [f64; 2]) -> Result<[f64; 2], BubbleflowError> {
    let off = wrap_delta(spec, a, p);
    let r = (off[0] * off[0] + off[1] * off[1]).sqrt();
    if r >= spec.inj_radius() {
        return Err(BubbleflowError::OutOfChart {
            distance: r,
            radius: spec.inj_radius(),
        });
    }
    Ok(off)
}

/// Inverse chart map: torus point at chart offset `x` from `a`.
pub fn chart_from(spec: &TorusSpec, a: [f64; 2], x: [f64; 2]) -> [f64; 2] {
    [spec.wrap(a[0] + x[0]), spec.wrap(a[1] + x[1])]
}

/// Per-cell quadrature weights for integration over a geodesic ball.
///
/// Cells fully inside the ball carry their full area; boundary cells a
/// subsampled fraction. Stored dense with an index bounding box so ball sums
/// stay proportional to the ball size.
#[derive(Debug, Clone)]
pub struct WeightField {
    pub spec: TorusSpec,
    pub values: Vec<f64>,
    /// Inclusive index window (i0, j0, i1, j1) outside which all weights vanish;
    /// indices may exceed grid_n to encode wraparound and are taken mod grid_n.
    pub window: Option<(usize, usize, usize, usize)>,
}

impl WeightField {
    pub fn uniform(spec: TorusSpec) -> Self {
        let a = spec.cell_area();
        WeightField {
            spec,
            values: vec![a; spec.grid_n * spec.grid_n],
            window: None,
        }
    }

    pub fn sum(&self) -> f64 {
        crate::numerics::pairwise_sum(&self.values)
    }

    /// Iterate over (linear index, weight) pairs with nonzero weight.
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let n = self.spec.grid_n;
        let win = self.window;
        let values = &self.values;
        let items: Vec<(usize, f64)> = match win {
            None => values
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i, *w))
                .collect(),
            Some((i0, j0, i1, j1)) => {
                let mut out = Vec::with_capacity((i1 - i0 + 1) * (j1 - j0 + 1));
                for jj in j0..=j1 {
                    let j = jj % n;
                    for ii in i0..=i1 {
                        let i = ii % n;
                        let idx = j * n + i;
                        let w = values[idx];
                        if w != 0.0 {
                            out.push((idx, w));
                        }
                    }
                }
                out
            }
        };
        items.into_iter()
    }
}

/// Quadrature weights for the geodesic ball `B_radius(center)`.
///
/// `subsamples` controls the per-axis boundary-cell sampling (default 4).
pub fn ball_mask(
    spec: &TorusSpec,
    center: [f64; 2],
    radius: f64,
    subsamples: usize,
) -> Result<WeightField, BubbleflowError> {
    if !(radius > 0.0) || radius > spec.inj_radius() {
        return Err(BubbleflowError::RadiusOutOfRange {
            radius,
            max: spec.inj_radius(),
        });
    }
    let n = spec.grid_n;
    let h = spec.h();
    let sub = subsamples.max(1);
    let mut values = vec![0.0; n * n];

    // Cells are squares [i h, (i+1) h) x [j h, (j+1) h); the field value at
    // node (i, j) represents that cell for quadrature purposes.
    let ci = (center[0] / h).floor() as i64;
    let cj = (center[1] / h).floor() as i64;
    let reach = (radius / h).ceil() as i64 + 1;
    let r2 = radius * radius;
    let half_diag = h * std::f64::consts::SQRT_2 * 0.5;
    let cell_area = spec.cell_area();

    let i0 = (ci - reach).rem_euclid(n as i64) as usize;
    let j0 = (cj - reach).rem_euclid(n as i64) as usize;
    let span = (2 * reach + 1).min(n as i64) as usize;

    for dj in 0..span {
        let j = (j0 + dj) % n;
        for di in 0..span {
            let i = (i0 + di) % n;
            let cell_center = [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h];
            let d = torus_distance(spec, center, cell_center);
            let w = if d + half_diag <= radius {
                cell_area
            } else if d - half_diag >= radius {
                0.0
            } else {
                // boundary cell: subcell midpoint sampling
                let mut inside = 0usize;
                for sj in 0..sub {
                    for si in 0..sub {
                        let p = [
                            (i as f64 + (si as f64 + 0.5) / sub as f64) * h,
                            (j as f64 + (sj as f64 + 0.5) / sub as f64) * h,
                        ];
                        let dd = wrap_delta(spec, center, p);
                        if dd[0] * dd[0] + dd[1] * dd[1] <= r2 {
                            inside += 1;
                        }
                    }
                }
                cell_area * inside as f64 / (sub * sub) as f64
            };
            values[j * n + i] = w;
        }
    }
    let window = if span == n {
        None
    } else {
        Some((i0, j0, i0 + span - 1, j0 + span - 1))
    };
    Ok(WeightField {
        spec: *spec,
        values,
        window,
    })
}
