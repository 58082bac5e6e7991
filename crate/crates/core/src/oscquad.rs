//! Oscillatory quadrature: composite Gauss-Legendre sized by phase variation, cubic
//! Filon rules for a known linear phase, the stationary-phase leading term, a tensor
//! brute-force oracle in three dimensions and the singular profile integral.

use std::f64::consts::{FRAC_PI_4, PI, TAU};
use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neumaier-compensated complex accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanC64 {
    sum: C64,
    comp: C64,
}

impl KahanC64 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: C64) {
        let (re, cre) = two_sum(self.sum.re, x.re);
        let (im, cim) = two_sum(self.sum.im, x.im);
        self.sum = C64::new(re, im);
        self.comp += C64::new(cre, cim);
    }

    pub fn value(&self) -> C64 {
        self.sum + self.comp
    }
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let c = if a.abs() >= b.abs() {
        (a - s) + b
    } else {
        (b - s) + a
    };
    (s, c)
}

/// Compensated sum of a sequence in iteration order.
pub fn ksum<I: IntoIterator<Item = C64>>(it: I) -> C64 {
    let mut acc = KahanC64::new();
    for x in it {
        acc.add(x);
    }
    acc.value()
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on `P_n` from the Chebyshev-like initial guesses.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..(n + 1) / 2 {
            let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    /// Rule with `n_pp` nodes, cached for the common sizes.
    pub fn cached(n: usize) -> &'static GaussLegendre {
        static CACHE: OnceLock<Vec<GaussLegendre>> = OnceLock::new();
        let table = CACHE.get_or_init(|| (1..=64).map(GaussLegendre::new).collect());
        assert!((1..=64).contains(&n), "Gauss-Legendre order {n} not cached");
        &table[n - 1]
    }

    /// `sum w_i f(x_i)` mapped to `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> C64>(&self, a: f64, b: f64, mut f: F) -> C64 {
        let hw = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = KahanC64::new();
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc.add(f(mid + hw * x) * (w * hw));
        }
        acc.value()
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrand `amplitude(s) exp(i phase(s) / h)` on `[lo, hi]`.
pub struct Oscillatory1D<'a> {
    pub amplitude: &'a (dyn Fn(f64) -> C64 + Sync),
    pub phase: &'a (dyn Fn(f64) -> f64 + Sync),
    pub h: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Quadrature controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadOptions {
    /// Agreement threshold between two refinement levels, relative to the L1 mass.
    pub tol: f64,
    /// Gauss-Legendre nodes per panel; each panel spans at most one phase period.
    pub n_pp: usize,
    /// Lower bound on the number of panels at the coarsest level.
    pub min_panels: usize,
    /// Number of phase samples used to place panels.
    pub samples: usize,
    /// Maximum number of panel doublings.
    pub max_levels: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            n_pp: 12,
            min_panels: 1,
            samples: 64,
            max_levels: 8,
        }
    }
}

impl QuadOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

/// Quadrature outcome with a two-level error estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadResult {
    pub value: C64,
    pub err_est: f64,
    pub converged: bool,
    pub panels: usize,
}

impl QuadResult {
    /// Converts a budget exhaustion into an error carrying the best estimate.
    pub fn require(self, context: &str) -> Result<C64> {
        if self.converged {
            Ok(self.value)
        } else {
            Err(Error::Quadrature {
                context: context.to_string(),
                value_re: self.value.re,
                value_im: self.value.im,
                err: self.err_est,
            })
        }
    }
}

/// Panel edges with at most one phase period per panel (by sampled phase increments).
fn phase_panels(f: &Oscillatory1D, opts: &QuadOptions) -> Vec<f64> {
    let ns = opts.samples.max(1);
    let width = (f.hi - f.lo) / ns as f64;
    let mut counts = Vec::with_capacity(ns);
    let mut prev = (f.phase)(f.lo);
    for i in 1..=ns {
        let x = if i == ns { f.hi } else { f.lo + width * i as f64 };
        let cur = (f.phase)(x);
        let turns = ((cur - prev).abs() / f.h / TAU).ceil() as usize;
        counts.push(turns.max(1));
        prev = cur;
    }
    let total: usize = counts.iter().sum();
    let boost = if total < opts.min_panels {
        opts.min_panels.div_ceil(total)
    } else {
        1
    };
    let mut edges = Vec::with_capacity(total * boost + 1);
    edges.push(f.lo);
    for (i, c) in counts.iter().enumerate() {
        let a = f.lo + width * i as f64;
        let b = if i + 1 == ns { f.hi } else { a + width };
        let m = c * boost;
        for j in 1..=m {
            edges.push(if j == m { b } else { a + (b - a) * j as f64 / m as f64 });
        }
    }
    edges
}

fn panel_sum(f: &Oscillatory1D, gl: &GaussLegendre, edges: &[f64], split: usize) -> (C64, f64) {
    let mut acc = KahanC64::new();
    let mut mass = 0.0;
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let step = (b - a) / split as f64;
        for j in 0..split {
            let pa = a + step * j as f64;
            let pb = if j + 1 == split { b } else { pa + step };
            let hw = 0.5 * (pb - pa);
            let mid = 0.5 * (pa + pb);
            for (x, wt) in gl.nodes.iter().zip(&gl.weights) {
                let s = mid + hw * x;
                let amp = (f.amplitude)(s);
                let ph = (f.phase)(s) / f.h;
                let wv = wt * hw;
                mass += amp.norm() * wv.abs();
                acc.add(amp * C64::new(ph.cos(), ph.sin()) * wv);
            }
        }
    }
    (acc.value(), mass)
}

/// Composite Gauss-Legendre for `int amplitude(s) exp(i phase(s)/h) ds`, doubling the
/// panel count until two consecutive levels agree within `tol` times the L1 mass.
pub fn integrate_osc_1d(f: &Oscillatory1D, opts: &QuadOptions) -> QuadResult {
    if f.hi == f.lo {
        return QuadResult {
            value: C64::new(0.0, 0.0),
            err_est: 0.0,
            converged: true,
            panels: 0,
        };
    }
    let gl = GaussLegendre::cached(opts.n_pp);
    let edges = phase_panels(f, opts);
    let (mut prev, _) = panel_sum(f, gl, &edges, 1);
    let mut split = 1;
    let mut err = f64::INFINITY;
    for _ in 0..opts.max_levels {
        split *= 2;
        let (cur, mass) = panel_sum(f, gl, &edges, split);
        err = (cur - prev).norm();
        prev = cur;
        if err <= opts.tol * mass.max(f64::MIN_POSITIVE) {
            return QuadResult {
                value: cur,
                err_est: err,
                converged: true,
                panels: (edges.len() - 1) * split,
            };
        }
    }
    QuadResult {
        value: prev,
        err_est: err,
        converged: false,
        panels: (edges.len() - 1) * split,
    }
}

/// Moments `mu_m(theta) = int_0^1 tau^m exp(i theta tau) d tau` for `m = 0..=3`.
pub fn filon_moments(theta: f64) -> [C64; 4] {
    let mut mu = [C64::new(0.0, 0.0); 4];
    if theta.abs() < 1.0 {
        for (m, slot) in mu.iter_mut().enumerate() {
            let mut term = C64::new(1.0, 0.0);
            let mut acc = C64::new(0.0, 0.0);
            for n in 0..40 {
                acc += term / (m + n + 1) as f64;
                term *= C64::new(0.0, theta) / (n + 1) as f64;
                if term.norm() < 1e-18 {
                    break;
                }
            }
            *slot = acc;
        }
    } else {
        let e = C64::new(theta.cos(), theta.sin());
        let it = C64::new(0.0, theta);
        mu[0] = (e - 1.0) / it;
        for m in 1..4 {
            mu[m] = (e - mu[m - 1] * m as f64) / it;
        }
    }
    mu
}

/// Weights of the cubic Filon rule on one interval of a uniform grid.
///
/// For `f` interpolated through the values at offsets `-1, 0, 1, 2` (interior), `0..=3`
/// (first interval) or `-2..=1` (last interval), the interval integral of
/// `f(s) exp(i omega s)` over `[s_j, s_j + ds]` equals
/// `ds exp(i omega s_j) sum_k w_k f_{j+off_k}`.
#[derive(Clone, Copy, Debug)]
pub struct FilonWeights {
    pub interior: [C64; 4],
    pub first: [C64; 4],
    pub last: [C64; 4],
}

impl FilonWeights {
    pub fn new(theta: f64) -> Self {
        let mu = filon_moments(theta);
        // Lagrange basis through nodes `xs` expanded in powers of tau, paired with moments.
        let weights = |xs: [f64; 4]| -> [C64; 4] {
            let mut out = [C64::new(0.0, 0.0); 4];
            for (k, slot) in out.iter_mut().enumerate() {
                let mut poly = [1.0, 0.0, 0.0, 0.0];
                let mut den = 1.0;
                for (j, &xj) in xs.iter().enumerate() {
                    if j == k {
                        continue;
                    }
                    den *= xs[k] - xj;
                    let mut next = [0.0; 4];
                    for d in 0..3 {
                        next[d + 1] += poly[d];
                        next[d] -= xj * poly[d];
                    }
                    poly = next;
                }
                *slot = (0..4).map(|d| mu[d] * (poly[d] / den)).sum();
            }
            out
        };
        Self {
            interior: weights([-1.0, 0.0, 1.0, 2.0]),
            first: weights([0.0, 1.0, 2.0, 3.0]),
            last: weights([-2.0, -1.0, 0.0, 1.0]),
        }
    }
}

/// Cumulative `F_j = int_{s_0}^{s_j} f(s) exp(i omega s) ds` on a uniform grid
/// `s_j = s0 + j ds` with `f` given at the grid nodes (at least 4 nodes).
pub fn filon_cumulative(f: &[C64], s0: f64, ds: f64, omega: f64) -> Vec<C64> {
    let n = f.len();
    assert!(n >= 4, "cubic Filon needs at least four nodes");
    let w = FilonWeights::new(omega * ds);
    let mut out = Vec::with_capacity(n);
    let mut acc = KahanC64::new();
    out.push(acc.value());
    for j in 0..n - 1 {
        let (wt, base) = if j == 0 {
            (&w.first, 0)
        } else if j == n - 2 {
            (&w.last, j - 2)
        } else {
            (&w.interior, j - 1)
        };
        let local: C64 = (0..4).map(|k| wt[k] * f[base + k]).sum();
        let ph = omega * (s0 + ds * j as f64);
        acc.add(local * C64::new(ph.cos(), ph.sin()) * ds);
        out.push(acc.value());
    }
    out
}

/// Total `int f(s) exp(i omega s) ds` over the grid by the cubic Filon rule.
pub fn filon_integral(f: &[C64], s0: f64, ds: f64, omega: f64) -> C64 {
    *filon_cumulative(f, s0, ds, omega).last().unwrap()
}

/// Data at a nondegenerate critical point of `phi` for `int a exp(-i phi / h)`.
#[derive(Clone, Debug)]
pub struct StationaryData {
    pub x0: Vec<f64>,
    pub phi0: f64,
    pub grad: Vec<f64>,
    /// Row-major symmetric Hessian.
    pub hessian: Vec<f64>,
    pub amp: C64,
    pub h: f64,
    pub grad_tol: f64,
}

/// Determinant and signature (positive minus negative eigenvalues) of a symmetric matrix.
pub fn det_signature(n: usize, hessian: &[f64]) -> (f64, i32, Vec<f64>) {
    let m = DMatrix::from_row_slice(n, n, hessian);
    let eig = SymmetricEigen::new(m.clone());
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let sig = ev.iter().map(|e| if *e > 0.0 { 1 } else { -1 }).sum();
    (m.determinant(), sig, ev)
}

/// `h^(n/2) (2 pi)^(n/2) |det|^(-1/2) exp(-i pi/4 sign) a exp(-i phi0/h)`.
pub fn stationary_phase_leading(d: &StationaryData) -> Result<C64> {
    let n = d.x0.len();
    if d.hessian.len() != n * n || d.grad.len() != n {
        return Err(Error::Input("stationary data dimension mismatch".into()));
    }
    let gnorm = d.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if gnorm > d.grad_tol {
        return Err(Error::Input(format!("gradient norm {gnorm:.3e} is not stationary")));
    }
    let (det, sig, _) = det_signature(n, &d.hessian);
    let scale = d.hessian.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let floor = 1e-12 * scale.powi(n as i32);
    if det.abs() <= floor {
        return Err(Error::SingularHessian { det, floor });
    }
    let nh = n as f64 / 2.0;
    let mag = (d.h * TAU).powf(nh) / det.abs().sqrt();
    let ph = -FRAC_PI_4 * sig as f64 - d.phi0 / d.h;
    Ok(d.amp * mag * C64::new(ph.cos(), ph.sin()))
}

/// Outcome of the tensor brute-force oracle.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BruteForceResult {
    pub value: C64,
    pub coarse: C64,
    pub err_est: f64,
    pub resolved: bool,
}

fn tensor_gl(
    amp: &(dyn Fn([f64; 3]) -> C64 + Sync),
    phase: &(dyn Fn([f64; 3]) -> f64 + Sync),
    bx: &[[f64; 2]; 3],
    h: f64,
    nodes: [usize; 3],
) -> C64 {
    let axis = |d: usize| -> Vec<(f64, f64)> {
        let per = 12usize;
        let panels = nodes[d].div_ceil(per).max(1);
        let gl = GaussLegendre::cached(per);
        let (a, b) = (bx[d][0], bx[d][1]);
        let w = (b - a) / panels as f64;
        let mut out = Vec::with_capacity(panels * per);
        for p in 0..panels {
            let pa = a + w * p as f64;
            for (x, wt) in gl.nodes.iter().zip(&gl.weights) {
                out.push((pa + 0.5 * w * (x + 1.0), 0.5 * w * wt));
            }
        }
        out
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let partial: Vec<C64> = ax
        .par_iter()
        .map(|&(x, wx)| {
            let mut acc = KahanC64::new();
            for &(y, wy) in &ay {
                for &(z, wz) in &az {
                    let p = [x, y, z];
                    let a = amp(p);
                    if a == C64::new(0.0, 0.0) {
                        continue;
                    }
                    let ph = -phase(p) / h;
                    acc.add(a * C64::new(ph.cos(), ph.sin()) * (wx * wy * wz));
                }
            }
            acc.value()
        })
        .collect();
    ksum(partial)
}

/// Tensor-product Gauss-Legendre for `int_box amp exp(-i phase / h)` at `nodes_per_dim`
/// and twice that; the difference is the error estimate.
pub fn integrate_osc_3d_bruteforce(
    amp: &(dyn Fn([f64; 3]) -> C64 + Sync),
    phase: &(dyn Fn([f64; 3]) -> f64 + Sync),
    bx: [[f64; 2]; 3],
    h: f64,
    nodes_per_dim: [usize; 3],
    tol: f64,
) -> BruteForceResult {
    let coarse = tensor_gl(amp, phase, &bx, h, nodes_per_dim);
    let fine = tensor_gl(amp, phase, &bx, h, nodes_per_dim.map(|n| 2 * n));
    let err = (fine - coarse).norm();
    BruteForceResult {
        value: fine,
        coarse,
        err_est: err,
        resolved: err <= tol * fine.norm().max(f64::MIN_POSITIVE),
    }
}

/// `int_0^inf exp(-i (ell/6) (1/s - T/s^2)) g(s) ds` for `g` supported in `(0, s_max]`.
///
/// The range `[delta, s_max]` uses [`integrate_osc_1d`]; on `(0, delta]` the substitution
/// `v = 1/s` gives a polynomial phase integrated up to `v_max`, and the remaining tail is
/// closed by two integrations by parts.
pub fn integrate_singular_profile(
    g: &(dyn Fn(f64) -> f64 + Sync),
    t: f64,
    ell: f64,
    s_max: f64,
    tol: f64,
) -> C64 {
    let opts = QuadOptions {
        tol,
        samples: 256,
        ..QuadOptions::default()
    };
    let amp = |s: f64| C64::new(g(s), 0.0);
    if ell == 0.0 {
        let ph = |_: f64| 0.0;
        let f = Oscillatory1D {
            amplitude: &amp,
            phase: &ph,
            h: 1.0,
            lo: 0.0,
            hi: s_max,
        };
        return integrate_osc_1d(&f, &QuadOptions { min_panels: 32, ..opts }).value;
    }
    let c = -ell / 6.0;
    let delta = (0.05_f64).min(0.5 * s_max);
    let ph_s = move |s: f64| c * (1.0 / s - t / (s * s));
    let outer = Oscillatory1D {
        amplitude: &amp,
        phase: &ph_s,
        h: 1.0,
        lo: delta,
        hi: s_max,
    };
    let main = integrate_osc_1d(&outer, &QuadOptions { min_panels: 32, ..opts }).value;

    // v = 1/s on [1/delta, v_max].
    let v_max = 400.0;
    let amp_v = |v: f64| C64::new(g(1.0 / v) / (v * v), 0.0);
    let ph_v = move |v: f64| c * (v - t * v * v);
    let inner = Oscillatory1D {
        amplitude: &amp_v,
        phase: &ph_v,
        h: 1.0,
        lo: 1.0 / delta,
        hi: v_max,
    };
    let mid = integrate_osc_1d(&inner, &QuadOptions { samples: 4096, ..opts }).value;

    // Tail: I = -B e^{i Theta} + (B'/(i Theta')) e^{i Theta} at v_max, B = A/(i Theta').
    let a_of = |v: f64| g(1.0 / v) / (v * v);
    let dth = |v: f64| c * (1.0 - 2.0 * t * v);
    let b_of = |v: f64| C64::new(a_of(v), 0.0) / C64::new(0.0, dth(v));
    let hv = 1e-3 * v_max;
    let db = (b_of(v_max + hv) - b_of(v_max - hv)) / (2.0 * hv);
    let th = ph_v(v_max);
    let e = C64::new(th.cos(), th.sin());
    let tail = -b_of(v_max) * e + db / C64::new(0.0, dth(v_max)) * e;
    main + mid + tail
}
