//! Dispersion symbols: the whistler branch, a closed-form model symbol, and a numeric
//! audit of the structural hypotheses (evenness, flatness near zero, monotonicity,
//! algebraic approach to the asymptote).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symbol family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    Whistler,
    Model,
    Custom,
}

/// Declared asymptotic constants of a symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolParams {
    /// Decay exponent: `1 - p ~ c |xi|^-q`.
    pub q: f64,
    /// Limit of `xi^(q+2) p''(xi)`.
    pub ell: f64,
    /// `p` vanishes on `[-xi_c, xi_c]`.
    pub xi_c: f64,
    /// Highest derivative order audited.
    pub d_max: usize,
    pub kind: SymbolKind,
}

impl SymbolParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: &str| {
            Err(Error::Config {
                path: format!("symbol.{path}"),
                msg: msg.to_string(),
            })
        };
        if !(self.ell < 0.0) {
            return bad("ell", "must be negative");
        }
        // The whistler cutoff sits at 5/8; packets only need xi_c < 3/4.
        if !(self.xi_c >= 0.0 && self.xi_c < 0.75) {
            return bad("xi_c", "must lie in [0, 3/4)");
        }
        if !(self.q >= 2.0) {
            return bad("q", "must be at least 2");
        }
        if self.d_max < 4 {
            return bad("d_max", "must be at least 4");
        }
        Ok(())
    }
}

/// Smooth transition `S` with `S = 0` for `v <= 0`, `S = 1` for `v >= 1`.
/// Returns `(S, S', S'')`.
pub fn smooth_step(v: f64) -> (f64, f64, f64) {
    if v <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if v >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let bump = |u: f64| -> (f64, f64, f64) {
        if u <= 0.0 {
            (0.0, 0.0, 0.0)
        } else {
            let f = (-1.0 / u).exp();
            let u2 = u * u;
            (f, f / u2, f * (1.0 / (u2 * u2) - 2.0 / (u2 * u)))
        }
    };
    let (f, f1, f2) = bump(v);
    let (g, mg1, g2) = bump(1.0 - v);
    let g1 = -mg1;
    let den = f + g;
    let num1 = f1 * g - f * g1;
    let s = f / den;
    let s1 = num1 / (den * den);
    let s2 = ((f2 * g - f * g2) * den - 2.0 * num1 * (f1 + g1)) / (den * den * den);
    (s, s1, s2)
}

/// Even cutoff equal to 1 on `|s| <= inner` and 0 on `|s| >= outer`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub inner: f64,
    pub outer: f64,
}

impl Default for CutoffSpec {
    fn default() -> Self {
        Self {
            inner: 5.0 / 8.0,
            outer: 1.0,
        }
    }
}

impl CutoffSpec {
    pub fn new(inner: f64, outer: f64) -> Result<Self> {
        if !(inner >= 0.0 && outer > inner) {
            return Err(Error::Config {
                path: "symbol.cutoff".into(),
                msg: format!("need 0 <= inner < outer, got ({inner}, {outer})"),
            });
        }
        Ok(Self { inner, outer })
    }

    /// `(chi, chi', chi'')` at `s`.
    pub fn eval(&self, s: f64) -> (f64, f64, f64) {
        let a = s.abs();
        let w = self.outer - self.inner;
        let (v, v1, v2) = smooth_step((self.outer - a) / w);
        let sg = if s < 0.0 { -1.0 } else { 1.0 };
        (v, -sg * v1 / w, v2 / (w * w))
    }

    pub fn value(&self, s: f64) -> f64 {
        self.eval(s).0
    }
}

/// `G_-(tau) = (tau - 1) / (tau^3 - tau^2 - tau)`, a decreasing bijection `(0,1] -> [0, inf)`.
pub fn g_minus(tau: f64) -> f64 {
    (1.0 - tau) / (tau * (1.0 + tau - tau * tau))
}

pub fn g_minus_d1(tau: f64) -> f64 {
    let d = tau * tau - tau - 1.0;
    (tau - 1.0) * (tau - 3.0) / (d * d) - 1.0 / (tau * tau)
}

pub fn g_minus_d2(tau: f64) -> f64 {
    let d = tau * tau - tau - 1.0;
    let d2 = d * d;
    (2.0 * tau - 4.0) / d2 - 2.0 * (tau * tau - 4.0 * tau + 3.0) * (2.0 * tau - 1.0) / (d2 * d)
        + 2.0 / (tau * tau * tau)
}

/// Solves `G_-(tau) = w` on `(0, 1]` by Newton with a bisection safeguard.
pub fn invert_gminus(w: f64) -> Result<f64> {
    if !(w >= 0.0) || !w.is_finite() {
        return Err(Error::Inversion {
            w,
            detail: "w must be finite and non-negative".into(),
        });
    }
    if w == 0.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut tau = 1.0 / (1.0 + w);
    for _ in 0..200 {
        let r = g_minus(tau) - w;
        if r > 0.0 {
            lo = tau;
        } else {
            hi = tau;
        }
        if r == 0.0 {
            return Ok(tau);
        }
        let step = r / g_minus_d1(tau);
        let mut next = tau - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - tau).abs() <= 1e-12 * tau * 1e-3 || hi - lo <= 4.0 * f64::EPSILON * hi {
            let best = [next, tau]
                .into_iter()
                .filter(|t| *t > 0.0 && *t <= 1.0)
                .min_by(|a, b| {
                    (g_minus(*a) - w)
                        .abs()
                        .total_cmp(&(g_minus(*b) - w).abs())
                })
                .unwrap_or(tau);
            return Ok(best);
        }
        tau = next;
    }
    let r = g_minus(tau) - w;
    if r.abs() <= 1e-12 * (1.0 + w) {
        Ok(tau)
    } else {
        Err(Error::Inversion {
            w,
            detail: format!("residual {r:.3e} after 200 iterations"),
        })
    }
}

type Evaluator = Arc<dyn Fn(f64) -> [f64; 3] + Send + Sync>;

#[derive(Clone)]
enum Body {
    Whistler(CutoffSpec),
    Model,
    Custom(Evaluator),
}

/// An even dispersion symbol with analytic first and second derivatives.
#[derive(Clone)]
pub struct DispersionSymbol {
    pub params: SymbolParams,
    pub omega_inf: f64,
    body: Body,
}

impl fmt::Debug for DispersionSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DispersionSymbol")
            .field("params", &self.params)
            .field("omega_inf", &self.omega_inf)
            .finish()
    }
}

impl DispersionSymbol {
    /// Whistler branch `(1 - chi(xi)) G_-^{-1}(xi^-2)`.
    pub fn whistler(cutoff: CutoffSpec) -> Self {
        Self {
            params: SymbolParams {
                q: 2.0,
                ell: -6.0,
                xi_c: cutoff.inner,
                d_max: 4,
                kind: SymbolKind::Whistler,
            },
            omega_inf: 1.0,
            body: Body::Whistler(cutoff),
        }
    }

    /// `xi^2 / (1 + xi^2)`.
    pub fn model() -> Self {
        Self {
            params: SymbolParams {
                q: 2.0,
                ell: -6.0,
                xi_c: 0.0,
                d_max: 4,
                kind: SymbolKind::Model,
            },
            omega_inf: 1.0,
            body: Body::Model,
        }
    }

    /// User-supplied evaluator for `xi >= 0` returning `(p, p', p'')`; evenness is imposed.
    pub fn custom<F>(params: SymbolParams, f: F) -> Self
    where
        F: Fn(f64) -> [f64; 3] + Send + Sync + 'static,
    {
        Self {
            params: SymbolParams {
                kind: SymbolKind::Custom,
                ..params
            },
            omega_inf: 1.0,
            body: Body::Custom(Arc::new(f)),
        }
    }

    /// `(p, p', p'')` at `xi`.
    pub fn eval(&self, xi: f64) -> [f64; 3] {
        let a = xi.abs();
        let sg = if xi < 0.0 { -1.0 } else { 1.0 };
        let [p, d1, d2] = match &self.body {
            Body::Model => {
                let a2 = a * a;
                let den = 1.0 + a2;
                [
                    a2 / den,
                    2.0 * a / (den * den),
                    2.0 * (1.0 - 3.0 * a2) / (den * den * den),
                ]
            }
            Body::Whistler(cut) => whistler_eval(cut, a),
            Body::Custom(f) => f(a),
        };
        [p, sg * d1, d2]
    }

    pub fn p(&self, xi: f64) -> f64 {
        self.eval(xi)[0]
    }

    pub fn dp(&self, xi: f64) -> f64 {
        self.eval(xi)[1]
    }

    pub fn d2p(&self, xi: f64) -> f64 {
        self.eval(xi)[2]
    }

    /// `min_{3/4 <= eta <= 1e3} eta^(q+1) p'(eta)` on a dense log grid.
    pub fn delta0(&self) -> f64 {
        let q = self.params.q;
        let n = 4000;
        let (a, b) = (0.75_f64.ln(), 1e3_f64.ln());
        (0..=n)
            .map(|i| {
                let eta = (a + (b - a) * i as f64 / n as f64).exp();
                eta.powf(q + 1.0) * self.dp(eta)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn whistler_eval(cut: &CutoffSpec, a: f64) -> [f64; 3] {
    if a <= cut.inner {
        return [0.0, 0.0, 0.0];
    }
    let w = 1.0 / (a * a);
    // Inversion cannot fail for finite w > 0.
    let tau = invert_gminus(w).unwrap_or(f64::NAN);
    let g1 = g_minus_d1(tau);
    let g2 = g_minus_d2(tau);
    let a3 = a * a * a;
    let t1 = -2.0 / (a3 * g1);
    let t2 = 6.0 / (a3 * a * g1) - 4.0 * g2 / (a3 * a3 * g1 * g1 * g1);
    let (c, c1, c2) = cut.eval(a);
    [
        (1.0 - c) * tau,
        -c1 * tau + (1.0 - c) * t1,
        -c2 * tau - 2.0 * c1 * t1 + (1.0 - c) * t2,
    ]
}

/// Whistler symbol with the default cutoff.
pub fn whistler_p(xi: f64) -> f64 {
    DispersionSymbol::whistler(CutoffSpec::default()).p(xi)
}

pub fn model_p(xi: f64) -> f64 {
    DispersionSymbol::model().p(xi)
}

/// Log-log fit of `|p''|` over `[lo, hi]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AsymptoticFit {
    pub q_hat: f64,
    pub ell_hat: f64,
    pub rms_residual: f64,
    pub degenerate: bool,
}

/// Fits `p''(xi) ~ ell xi^-(q+2)` by least squares in log-log coordinates.
pub fn fit_asymptotics(sym: &DispersionSymbol, lo: f64, hi: f64) -> AsymptoticFit {
    let n = 200;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut signs = Vec::with_capacity(n);
    for i in 0..n {
        let xi = (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp();
        let d2 = sym.d2p(xi);
        signs.push(d2.signum());
        xs.push(xi.ln());
        ys.push(d2.abs().ln());
    }
    let mixed = signs.iter().any(|s| *s != signs[0]) || signs[0] == 0.0;
    if mixed || ys.iter().any(|y| !y.is_finite()) {
        return AsymptoticFit {
            q_hat: f64::NAN,
            ell_hat: f64::NAN,
            rms_residual: f64::INFINITY,
            degenerate: true,
        };
    }
    let (slope, intercept, rms) = linear_fit(&xs, &ys);
    let q_hat = -slope - 2.0;
    let ell_hat = signs[0]
        * xs.iter()
            .zip(&ys)
            .map(|(x, y)| (y + (q_hat + 2.0) * x).exp())
            .sum::<f64>()
        / n as f64;
    let _ = intercept;
    AsymptoticFit {
        q_hat,
        ell_hat,
        rms_residual: rms,
        degenerate: rms > 1e-2,
    }
}

/// Ordinary least squares `y = slope x + intercept`; returns `(slope, intercept, rms)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    (slope, intercept, rms)
}

/// Outcome of [`verify_assumptions`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub kind: SymbolKind,
    pub xi_max: f64,
    pub tol: f64,
    pub q_declared: f64,
    pub ell_declared: f64,
    pub q_hat: f64,
    pub ell_hat: f64,
    pub fit_rms_residual: f64,
    pub fit_degenerate: bool,
    /// `xi_max^(q+1) p'(xi_max)`, expected `-ell/(q+1)`.
    pub first_derivative_limit: f64,
    pub omega_inf_hat: f64,
    pub evenness_residual: f64,
    pub flat_residual: f64,
    pub monotonicity_violations: usize,
    /// `max |p^(n)| / p'` on `[xi_max/10, xi_max]` for `n = 2..=d_max`.
    pub derivative_ratios: Vec<f64>,
    pub pass_q: bool,
    pub pass_ell: bool,
    pub pass_first_derivative: bool,
    pub pass_normalization: bool,
    pub pass_evenness: bool,
    pub pass_flat: bool,
    pub pass_monotonicity: bool,
    pub pass_positivity: bool,
    pub pass_derivative_control: bool,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.pass_q
            && self.pass_ell
            && self.pass_first_derivative
            && self.pass_normalization
            && self.pass_evenness
            && self.pass_flat
            && self.pass_monotonicity
            && self.pass_positivity
            && self.pass_derivative_control
    }
}

/// Numeric audit of the symbol hypotheses up to `xi_max`.
pub fn verify_assumptions(sym: &DispersionSymbol, xi_max: f64, tol: f64) -> Result<AssumptionReport> {
    if !(xi_max >= 1e2) {
        return Err(Error::Input(format!("xi_max must be at least 1e2, got {xi_max}")));
    }
    let prm = &sym.params;
    let fit = fit_asymptotics(sym, xi_max / 10.0, xi_max);
    let q = prm.q;
    let first = xi_max.powf(q + 1.0) * sym.dp(xi_max);
    let first_target = -prm.ell / (q + 1.0);

    let xi_c = prm.xi_c;
    let start = if xi_c > 0.0 { xi_c + 1e-2 } else { 1e-3 };
    let n = 2000;
    let grid: Vec<f64> = (0..=n)
        .map(|i| (start.ln() + (xi_max.ln() - start.ln()) * i as f64 / n as f64).exp())
        .collect();
    let mut even_res = 0.0_f64;
    let mut viol = 0;
    for &xi in &grid {
        let p = sym.p(xi);
        even_res = even_res.max((p - sym.p(-xi)).abs());
        if !(sym.dp(xi) > 0.0) || !(0.0..1.0).contains(&p) {
            viol += 1;
        }
    }
    let flat_res = (0..=100)
        .map(|i| sym.p(xi_c * i as f64 / 100.0).abs())
        .fold(0.0, f64::max);

    let mut ratios = vec![0.0_f64; prm.d_max.saturating_sub(1)];
    let mut ratio_growth = false;
    for (j, ord) in (2..=prm.d_max).enumerate() {
        let mut low = 0.0_f64;
        let mut high = 0.0_f64;
        for i in 0..=100 {
            let xi = (xi_max / 10.0) * 10f64.powf(i as f64 / 100.0);
            let r = derivative(sym, xi, ord).abs() / sym.dp(xi);
            if i <= 50 {
                low = low.max(r);
            } else {
                high = high.max(r);
            }
        }
        ratios[j] = low.max(high);
        if !ratios[j].is_finite() || high > low * (1.0 + tol) {
            ratio_growth = true;
        }
    }

    Ok(AssumptionReport {
        kind: prm.kind,
        xi_max,
        tol,
        q_declared: q,
        ell_declared: prm.ell,
        q_hat: fit.q_hat,
        ell_hat: fit.ell_hat,
        fit_rms_residual: fit.rms_residual,
        fit_degenerate: fit.degenerate,
        first_derivative_limit: first,
        omega_inf_hat: sym.p(xi_max),
        evenness_residual: even_res,
        flat_residual: flat_res,
        monotonicity_violations: viol,
        derivative_ratios: ratios,
        pass_q: !fit.degenerate && ((fit.q_hat - q) / q).abs() <= tol,
        pass_ell: !fit.degenerate && ((fit.ell_hat - prm.ell) / prm.ell).abs() <= tol,
        pass_first_derivative: ((first - first_target) / first_target).abs() <= tol,
        pass_normalization: (sym.omega_inf - sym.p(xi_max)).abs() <= tol,
        pass_evenness: even_res == 0.0,
        pass_flat: flat_res == 0.0,
        pass_monotonicity: viol == 0,
        pass_positivity: -prm.ell / (q * (q + 1.0)) > 0.0,
        pass_derivative_control: !ratio_growth,
    })
}

/// Derivative of order `n >= 1` of `p`: analytic up to 2, central differences of `p''` above.
pub fn derivative(sym: &DispersionSymbol, xi: f64, n: usize) -> f64 {
    match n {
        0 => sym.p(xi),
        1 => sym.dp(xi),
        2 => sym.d2p(xi),
        _ => {
            let h = 1e-2 * xi.abs().max(1.0) / (n as f64);
            let f = |x: f64| derivative(sym, x, n - 1);
            (-f(xi + 2.0 * h) + 8.0 * f(xi + h) - 8.0 * f(xi - h) + f(xi - 2.0 * h)) / (12.0 * h)
        }
    }
}
