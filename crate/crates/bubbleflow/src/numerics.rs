//! Small numerical kernels shared across the crate: deterministic reductions,
//! panel Gauss-Legendre quadrature, monotone cubic interpolation, the E1
//! exponential integral and log-log slope fits.

/// Deterministic pairwise summation. The reduction tree depends only on the
/// slice length, so results are bit-identical regardless of thread count of
/// the producer.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

/// 20-point Gauss-Legendre nodes on (-1, 1).
const GL20_X: [f64; 10] = [
    0.076_526_521_133_497_33,
    0.227_785_851_141_645_08,
    0.373_706_088_715_419_56,
    0.510_867_001_950_827_1,
    0.636_053_680_726_515_1,
    0.746_331_906_460_150_8,
    0.839_116_971_822_218_8,
    0.912_234_428_251_325_9,
    0.963_971_927_277_913_8,
    0.993_128_599_185_094_9,
];
const GL20_W: [f64; 10] = [
    0.152_753_387_130_725_85,
    0.149_172_986_472_603_75,
    0.142_096_109_318_382_05,
    0.131_688_638_449_176_63,
    0.118_194_531_961_518_42,
    0.101_930_119_817_240_44,
    0.083_276_741_576_704_75,
    0.062_672_048_334_109_06,
    0.040_601_429_800_386_94,
    0.017_614_007_139_152_118,
];

/// Integrate `f` over `[a, b]` with a single 20-point Gauss-Legendre panel.
pub fn gauss20<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    let mut acc = 0.0;
    for i in 0..10 {
        let dx = hw * GL20_X[i];
        acc += GL20_W[i] * (f(c + dx) + f(c - dx));
    }
    acc * hw
}

/// Composite Gauss-Legendre quadrature with panels given by `breaks`.
/// Each panel is subdivided `sub` times.
pub fn integrate_panels<F: Fn(f64) -> f64>(f: F, breaks: &[f64], sub: usize) -> f64 {
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let step = (b - a) / sub as f64;
        for k in 0..sub {
            let lo = a + step * k as f64;
            total += gauss20(&f, lo, lo + step);
        }
    }
    total
}

/// Log-spaced panel breakpoints from `a` to `b` (both positive).
pub fn log_breaks(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(a > 0.0 && b > a);
    let (la, lb) = (a.ln(), b.ln());
    (0..=n)
        .map(|i| (la + (lb - la) * i as f64 / n as f64).exp())
        .collect()
}

/// Quintic smoothstep: 0 for t <= 0, 1 for t >= 1, C^2 across the joins.
pub fn smoothstep5(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
    }
}

/// Derivative of [`smoothstep5`] with respect to `t`.
pub fn smoothstep5_deriv(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        30.0 * t * t * (1.0 - t) * (1.0 - t)
    }
}

/// Exponential integral E1(x) for x > 0.
///
/// Series for small arguments, continued fraction otherwise; relative error
/// below 1e-13 over the range used here.
pub fn exp_integral_e1(x: f64) -> f64 {
    assert!(x > 0.0, "E1 requires a positive argument");
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    if x <= 1.0 {
        // E1(x) = -gamma - ln x + sum_{k>=1} (-1)^{k+1} x^k / (k * k!)
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..=40 {
            term *= -x / k as f64;
            let add = -term / k as f64;
            sum += add;
            if add.abs() < 1e-18 * (1.0 + sum.abs()) {
                break;
            }
        }
        -EULER_GAMMA - x.ln() + sum
    } else if x > 700.0 {
        0.0
    } else {
        // Modified Lentz continued fraction: E1(x) = e^-x / (x + 1/(1 + 1/(x + 2/(1 + ...))))
        let mut b = x + 1.0;
        let mut c = 1e308;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..200 {
            let a = -(i as f64) * (i as f64);
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        h * (-x).exp()
    }
}

/// Shape-preserving cubic (PCHIP) interpolant over strictly increasing nodes.
#[derive(Debug, Clone)]
pub struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        assert!(xs.len() >= 2 && xs.len() == ys.len());
        let n = xs.len();
        let mut d = vec![0.0; n - 1];
        for i in 0..n - 1 {
            assert!(xs[i + 1] > xs[i], "nodes must be strictly increasing");
            d[i] = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
        }
        // Fritsch-Carlson slopes: monotone data yields a monotone interpolant.
        let mut m = vec![0.0; n];
        m[0] = d[0];
        m[n - 1] = d[n - 2];
        for i in 1..n - 1 {
            if d[i - 1] * d[i] <= 0.0 {
                m[i] = 0.0;
            } else {
                let w1 = 2.0 * (xs[i + 1] - xs[i]) + (xs[i] - xs[i - 1]);
                let w2 = (xs[i + 1] - xs[i]) + 2.0 * (xs[i] - xs[i - 1]);
                m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
            }
        }
        Pchip { xs, ys, slopes: m }
    }

    fn segment(&self, x: f64) -> usize {
        match self
            .xs
            .binary_search_by(|v| v.partial_cmp(&x).expect("NaN node"))
        {
            Ok(i) => i.min(self.xs.len() - 2),
            Err(0) => 0,
            Err(i) if i >= self.xs.len() => self.xs.len() - 2,
            Err(i) => i - 1,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (y0, y1, m0, m1) = (self.ys[i], self.ys[i + 1], self.slopes[i], self.slopes[i + 1]);
        let t2 = t * t;
        let t3 = t2 * t;
        y0 * (2.0 * t3 - 3.0 * t2 + 1.0)
            + m0 * h * (t3 - 2.0 * t2 + t)
            + y1 * (-2.0 * t3 + 3.0 * t2)
            + m1 * h * (t3 - t2)
    }

    pub fn eval_deriv(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (y0, y1, m0, m1) = (self.ys[i], self.ys[i + 1], self.slopes[i], self.slopes[i + 1]);
        let t2 = t * t;
        (y0 * (6.0 * t2 - 6.0 * t) / h)
            + m0 * (3.0 * t2 - 4.0 * t + 1.0)
            + (y1 * (-6.0 * t2 + 6.0 * t) / h)
            + m1 * (3.0 * t2 - 2.0 * t)
    }

    /// Invert a strictly increasing interpolant by bisection + Newton polish.
    pub fn invert(&self, y: f64) -> f64 {
        let (mut lo, mut hi) = (self.xs[0], *self.xs.last().unwrap());
        let y = y.clamp(self.ys[0], *self.ys.last().unwrap());
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..3 {
            let d = self.eval_deriv(x);
            if d.abs() > 1e-300 {
                x -= (self.eval(x) - y) / d;
                x = x.clamp(lo - (hi - lo), hi + (hi - lo));
            }
        }
        x.clamp(self.xs[0], *self.xs.last().unwrap())
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }
}

/// Least-squares slope of log(y) against log(x), with the standard error of
/// the slope estimate.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert!(xs.len() == ys.len() && xs.len() >= 2);
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    if lx.len() == 2 {
        return (slope, 0.0);
    }
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    let stderr = (ss_res / (n - 2.0) / sxx).sqrt();
    (slope, stderr)
}

/// Median of a slice (not in place).
pub fn median(v: &[f64]) -> f64 {
    assert!(!v.is_empty());
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
