//! Closed-form small-`eps` limits: the lattice value of the linear field and the
//! resonant quadratic profile with its correlation factor.
//!
//! With `b(sigma, s) = exp(-i (ell/6) (1/sigma - s/sigma^2)) abar(sigma)` the linear law is
//! `U(T, 2j) ~ A_eps^2 int b(sigma, T) dsigma` and the quadratic law is
//! `W(T, 2j) ~ A_eps^4 int chi(3 - 2s/T_win) iint corr(sigma_1 + sigma_2) b(sigma_1, s) b(sigma_2, s)`.

use std::f64::consts::{FRAC_PI_4, PI};

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear_solver::rescale_from_U;
use crate::oscquad::{integrate_singular_profile, GaussLegendre, KahanC64};
use crate::sources::{A_eps_sq, ProfileSpec};
use crate::symbols::CutoffSpec;

/// Parity branch of the emitted packets: even `k` sample `abar(., 0, 0)`, odd `k` sample `abar(., pi, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Even,
    Odd,
}

/// Sign of the correlation exponent `-+ i (ell/6) (T - s) / (sigma_1 + sigma_2)^2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationSign {
    /// `exp(-i (ell/6) (T - s) / (sigma_1 + sigma_2)^2)`.
    Minus,
    /// `exp(+i (ell/6) (T - s) / (sigma_1 + sigma_2)^2)`, the phase of free evolution
    /// `exp(i (T - s)(p - 1)/eps^2)` at frequency `(sigma_1 + sigma_2)/eps`.
    Plus,
}

impl CorrelationSign {
    fn factor(self) -> f64 {
        match self {
            Self::Minus => -1.0,
            Self::Plus => 1.0,
        }
    }
}

/// Discretization of the limit-profile integrals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitQuad {
    /// Tolerance of the one-dimensional profile integrals.
    pub tol: f64,
    /// Largest phase increment (radians) across one `sigma` panel.
    pub panel_phase: f64,
    /// Gauss-Legendre nodes per panel.
    pub n_pp: usize,
    /// Panels for the outer time integral.
    pub s_panels: usize,
    /// Largest number of `sigma` nodes per axis before giving up.
    pub max_nodes: usize,
}

impl Default for LimitQuad {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            panel_phase: 2.0,
            n_pp: 12,
            s_panels: 16,
            max_nodes: 20_000,
        }
    }
}

impl LimitQuad {
    /// Halves every panel.
    pub fn refined(&self) -> Self {
        Self {
            tol: self.tol * 0.5,
            panel_phase: self.panel_phase * 0.5,
            s_panels: self.s_panels * 2,
            ..*self
        }
    }
}

/// Data entering the limit profiles.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LimitProfileParams {
    pub ell: f64,
    pub q: f64,
    pub gamma: f64,
    pub eps: f64,
    /// Time window `T_win` of the nonlinear cutoff `chi(3 - 2 s / T_win)`.
    #[serde(rename = "T_win")]
    pub t_win: f64,
    pub profile: ProfileSpec,
    pub quad: LimitQuad,
}

impl LimitProfileParams {
    pub fn new(ell: f64, q: f64, gamma: f64, eps: f64, t_win: f64, profile: ProfileSpec) -> Result<Self> {
        if ell > 0.0 {
            return Err(Error::Config {
                path: "symbol.ell".into(),
                msg: format!("must be <= 0, got {ell}"),
            });
        }
        if !(gamma > 0.0 && gamma < 0.25) {
            return Err(Error::Config {
                path: "source.gamma".into(),
                msg: format!("must lie in (0, 1/4), got {gamma}"),
            });
        }
        if !(eps > 0.0 && t_win > 0.0 && q >= 2.0) {
            return Err(Error::Input(format!("need eps > 0, T_win > 0, q >= 2; got {eps}, {t_win}, {q}")));
        }
        Ok(Self {
            ell,
            q,
            gamma,
            eps,
            t_win,
            profile,
            quad: LimitQuad::default(),
        })
    }

    /// `abar(sigma, 0, 0)` or `abar(sigma, pi, 0)`.
    pub fn abar(&self, branch: Branch, sigma: f64) -> f64 {
        let t = match branch {
            Branch::Even => 0.0,
            Branch::Odd => PI,
        };
        self.profile.abar_eval(sigma, t, 0.0)
    }

    /// `ell` as seen by the profile phases: only the `q = 2` law keeps it.
    pub fn ell_eff(&self) -> f64 {
        if self.q == 2.0 {
            self.ell
        } else {
            0.0
        }
    }

    /// Support `[lo, hi]` of `abar(., ., 0)` in the slow variable.
    pub fn support(&self) -> (f64, f64) {
        (self.profile.t_lo, self.profile.t_cap)
    }

    /// Branch weights `(alpha_even, alpha_odd)` with `U(T, 2j) ~ sum alpha L_branch(T)`.
    pub fn branch_weights(&self) -> (C64, C64) {
        let g = self.gamma / self.eps;
        let c = 1.0 / (2.0 * PI * self.gamma).sqrt();
        (C64::from_polar(c, -FRAC_PI_4), C64::from_polar(c, -(2.0 * g - FRAC_PI_4)))
    }
}

/// `L(T) = int_0^inf exp(-i (ell/6)(1/s - T/s^2)) abar(s) ds` on one branch.
pub fn linear_profile(params: &LimitProfileParams, tt: f64, branch: Branch) -> C64 {
    let g = |s: f64| params.abar(branch, s);
    let (_, hi) = params.support();
    integrate_singular_profile(&g, tt, params.ell_eff(), hi, params.quad.tol)
}

/// Leading term of `u(T/eps, 2 j eps)` at a lattice point (independent of `j`).
pub fn u_lattice_asym(params: &LimitProfileParams, tt: f64, _j: i64) -> C64 {
    rescale_from_U(params.eps, tt, big_u_lattice_asym(params, tt))
}

/// Leading term of `U(T, 2j)`.
pub fn big_u_lattice_asym(params: &LimitProfileParams, tt: f64) -> C64 {
    let (we, wo) = params.branch_weights();
    let le = linear_profile(params, tt, Branch::Even);
    let lo = if params.profile.period == crate::sources::Period::Pi {
        le
    } else {
        linear_profile(params, tt, Branch::Odd)
    };
    we * le + wo * lo
}

/// Composite Gauss-Legendre nodes on `[lo, hi]` with panels no wider than
/// `panel_phase / |d phase / d sigma|`, where the phase combines `b(sigma, s)` for
/// `s <= t_max` and the correlation factor.
fn sigma_nodes(lo: f64, hi: f64, c: f64, t_max: f64, q: &LimitQuad) -> Result<Vec<(f64, f64)>> {
    let gl = GaussLegendre::cached(q.n_pp);
    let h_max = (hi - lo) / 32.0;
    let rate = |s: f64| c.abs() * (1.0 / (s * s) + 2.0 * t_max / (s * s * s));
    let mut nodes = Vec::new();
    let mut a = lo;
    while a < hi {
        let r = rate(a);
        let h = if r > 0.0 { (q.panel_phase / r).min(h_max) } else { h_max };
        let b = (a + h).min(hi);
        for (x, w) in gl.nodes.iter().zip(&gl.weights) {
            nodes.push((a + 0.5 * (b - a) * (x + 1.0), 0.5 * (b - a) * w));
        }
        if nodes.len() > q.max_nodes {
            return Err(Error::Quadrature {
                context: format!("sigma grid on [{lo}, {hi}] exceeds {} nodes", q.max_nodes),
                value_re: 0.0,
                value_im: 0.0,
                err: f64::INFINITY,
            });
        }
        a = b;
    }
    Ok(nodes)
}

/// Lower end of the `sigma` grid: the support start, or where the dropped piece
/// `int_0^delta` is below `tol` by one integration by parts.
fn sigma_start(params: &LimitProfileParams, s_min: f64) -> f64 {
    let (lo, _) = params.support();
    let c = params.ell_eff().abs() / 6.0;
    if c == 0.0 {
        return lo;
    }
    let cut = (params.quad.tol * 2.0 * c * s_min.max(1e-3)).cbrt();
    lo.max(cut)
}

/// Outer time nodes on the cutoff support `[T_win, min(T, 2 T_win)]`.
fn time_nodes(params: &LimitProfileParams, tt: f64) -> Vec<(f64, f64)> {
    let a = params.t_win;
    let b = tt.min(2.0 * params.t_win);
    if b <= a {
        return Vec::new();
    }
    let gl = GaussLegendre::cached(params.quad.n_pp);
    let n = params.quad.s_panels;
    let h = (b - a) / n as f64;
    let chi = CutoffSpec::default();
    let mut out = Vec::with_capacity(n * gl.nodes.len());
    for p in 0..n {
        let a0 = a + h * p as f64;
        for (x, w) in gl.nodes.iter().zip(&gl.weights) {
            let s = a0 + 0.5 * h * (x + 1.0);
            let wt = 0.5 * h * w * chi.value(3.0 - 2.0 * s / params.t_win);
            if wt != 0.0 {
                out.push((s, wt));
            }
        }
    }
    out
}

fn b_values(params: &LimitProfileParams, nodes: &[(f64, f64)], s: f64, branch: Branch, conj: bool) -> Vec<C64> {
    let c = params.ell_eff() / 6.0;
    let sg = if conj { 1.0 } else { -1.0 };
    nodes
        .iter()
        .map(|&(sig, w)| {
            let a = params.abar(branch, sig);
            if a == 0.0 {
                C64::new(0.0, 0.0)
            } else {
                C64::from_polar(a * w, sg * c * (1.0 / sig - s / (sig * sig)))
            }
        })
        .collect()
}

/// `iint corr b(sigma_1, s) b(sigma_2, s) dsigma_1 dsigma_2` for the given branches.
fn correlated_pair(
    params: &LimitProfileParams,
    nodes: &[(f64, f64)],
    tt: f64,
    s: f64,
    branches: (Branch, Branch),
    sign: CorrelationSign,
) -> C64 {
    let b1 = b_values(params, nodes, s, branches.0, false);
    let b2 = if branches.1 == branches.0 {
        b1.clone()
    } else {
        b_values(params, nodes, s, branches.1, false)
    };
    let k = sign.factor() * params.ell_eff() / 6.0 * (tt - s);
    let mut acc = KahanC64::new();
    for (i, &(s1, _)) in nodes.iter().enumerate() {
        if b1[i] == C64::new(0.0, 0.0) {
            continue;
        }
        let mut row = C64::new(0.0, 0.0);
        for (j, &(s2, _)) in nodes.iter().enumerate() {
            let sum = s1 + s2;
            row += C64::from_polar(1.0, k / (sum * sum)) * b2[j];
        }
        acc.add(b1[i] * row);
    }
    acc.value()
}

/// Resonant quadratic profile at a lattice point, with the four parity branches
/// combined symmetrically through [`LimitProfileParams::branch_weights`].
pub fn nonlinear_limit_profile(params: &LimitProfileParams, tt: f64, sign: CorrelationSign) -> Result<C64> {
    let ts = time_nodes(params, tt);
    if ts.is_empty() {
        return Ok(C64::new(0.0, 0.0));
    }
    let (_, hi) = params.support();
    let lo = sigma_start(params, params.t_win);
    let nodes = sigma_nodes(lo, hi, params.ell_eff() / 6.0, tt, &params.quad)?;
    let (we, wo) = params.branch_weights();
    let pi_periodic = params.profile.period == crate::sources::Period::Pi;
    let vals: Vec<C64> = ts
        .par_iter()
        .map(|&(s, w)| {
            let d = if pi_periodic {
                (we + wo) * (we + wo) * correlated_pair(params, &nodes, tt, s, (Branch::Even, Branch::Even), sign)
            } else {
                let mut acc = KahanC64::new();
                for (a, wa) in [(Branch::Even, we), (Branch::Odd, wo)] {
                    for (b, wb) in [(Branch::Even, we), (Branch::Odd, wo)] {
                        acc.add(wa * wb * correlated_pair(params, &nodes, tt, s, (a, b), sign));
                    }
                }
                acc.value()
            };
            d * w
        })
        .collect();
    let mut acc = KahanC64::new();
    for v in vals {
        acc.add(v);
    }
    Ok(acc.value())
}

/// Local part of the first iterate at a lattice point for `nu + j1 + j2 = 2`, resonant gauge:
/// `[sqrt(2/(pi gamma)) cos(gamma/eps - pi/4)]^{j1+j2} exp(i (j2 - j1) gamma/eps) int chi L(s)^{j1} conj(L(s))^{j2} ds`.
pub fn w_l_limit(params: &LimitProfileParams, tt: f64, j1: u32, j2: u32) -> C64 {
    if j1 + j2 < 2 {
        return C64::new(0.0, 0.0);
    }
    let g = params.gamma / params.eps;
    let amp = ((2.0 / (PI * params.gamma)).sqrt() * (g - FRAC_PI_4).cos()).powi((j1 + j2) as i32);
    let pref = C64::from_polar(amp, (j2 as f64 - j1 as f64) * g);
    let ts = time_nodes(params, tt);
    let vals: Vec<C64> = ts
        .par_iter()
        .map(|&(s, w)| {
            let l = linear_profile(params, s, Branch::Even);
            l.powu(j1) * l.conj().powu(j2) * w
        })
        .collect();
    let mut acc = KahanC64::new();
    for v in vals {
        acc.add(v);
    }
    pref * acc.value()
}

/// Magnitude of the `w_l_limit` prefactor, `|A_eps^2|^{j1 + j2}`.
pub fn w_l_prefactor_abs(gamma: f64, eps: f64, j1: u32, j2: u32) -> f64 {
    A_eps_sq(gamma, eps).norm().powi((j1 + j2) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sources::Period;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(eps: f64) -> LimitProfileParams {
        LimitProfileParams::new(-6.0, 2.0, 0.2, eps, 1.0, ProfileSpec::default()).unwrap()
    }

    /// Plain composite Gauss-Legendre over the support with a fixed, fine mesh.
    fn direct_profile(p: &LimitProfileParams, tt: f64, panels: usize) -> C64 {
        let (lo, hi) = p.support();
        let gl = GaussLegendre::cached(16);
        let h = (hi - lo) / panels as f64;
        let c = p.ell_eff() / 6.0;
        let mut acc = KahanC64::new();
        for k in 0..panels {
            let a = lo + h * k as f64;
            for (x, w) in gl.nodes.iter().zip(&gl.weights) {
                let s = a + 0.5 * h * (x + 1.0);
                acc.add(C64::from_polar(p.abar(Branch::Even, s) * 0.5 * h * w, -c * (1.0 / s - tt / (s * s))));
            }
        }
        acc.value()
    }

    #[test]
    fn zero_profile_gives_zero() {
        let mut p = params(0.01);
        p.profile.harmonics = vec![(1, 0.0)];
        assert_eq!(linear_profile(&p, 1.5, Branch::Even), C64::new(0.0, 0.0));
        assert_eq!(nonlinear_limit_profile(&p, 1.5, CorrelationSign::Minus).unwrap(), C64::new(0.0, 0.0));
    }

    #[test]
    fn higher_order_symbol_gives_plain_mass() {
        let mut p = params(0.01);
        p.q = 3.0;
        let v = linear_profile(&p, 1.5, Branch::Even);
        let mut q0 = p.clone();
        q0.ell = 0.0;
        let m = direct_profile(&q0, 1.5, 200);
        assert!(v.im.abs() < 1e-12);
        assert_relative_eq!(v.re, m.re, epsilon = 1e-8);
    }

    #[test]
    fn linear_profile_matches_fine_mesh() {
        let p = params(0.01);
        for tt in [1.0, 1.25, 1.5, 2.0] {
            let v = linear_profile(&p, tt, Branch::Even);
            let r = direct_profile(&p, tt, 62_500);
            assert!((v - r).norm() < 1e-6, "T = {tt}: {v} vs {r}");
        }
    }

    #[test]
    fn lattice_value_is_j_independent_and_reduces() {
        let p = params(1.0 / 137.0);
        let a = u_lattice_asym(&p, 1.3, 0);
        let b = u_lattice_asym(&p, 1.3, 7);
        assert_eq!(a, b);
        let uu = big_u_lattice_asym(&p, 1.3);
        let reduced = A_eps_sq(p.gamma, p.eps) * linear_profile(&p, 1.3, Branch::Even);
        assert_relative_eq!(uu.re, reduced.re, epsilon = 1e-12);
        assert_relative_eq!(uu.im, reduced.im, epsilon = 1e-12);
    }

    #[test]
    fn lattice_value_at_cosine_maximum() {
        let gamma = 0.2;
        // gamma / eps - pi/4 = 40 pi.
        let eps = gamma / (40.0 * PI + FRAC_PI_4);
        let p = LimitProfileParams::new(-6.0, 2.0, gamma, eps, 1.0, ProfileSpec::default()).unwrap();
        let l = linear_profile(&p, 1.4, Branch::Even);
        let expect = 2.0 * l.norm() / (2.0 * PI * gamma).sqrt();
        let got = u_lattice_asym(&p, 1.4, 3).norm() / eps;
        assert_relative_eq!(got, expect, max_relative = 1e-10);
    }

    #[test]
    fn general_period_uses_both_branches() {
        let mut p = params(1.0 / 61.0);
        p.profile.period = Period::TwoPi;
        p.profile.kappa = 0.5;
        let (we, wo) = p.branch_weights();
        let le = linear_profile(&p, 1.2, Branch::Even);
        let lo = linear_profile(&p, 1.2, Branch::Odd);
        assert_relative_eq!(le.norm() / lo.norm(), 3.0, max_relative = 1e-8);
        let uu = big_u_lattice_asym(&p, 1.2);
        assert!((uu - (we * le + wo * lo)).norm() < 1e-14);
    }

    #[test]
    fn empty_window_is_zero() {
        let p = params(0.01);
        assert_eq!(nonlinear_limit_profile(&p, 0.9, CorrelationSign::Minus).unwrap(), C64::new(0.0, 0.0));
        assert_eq!(w_l_limit(&p, 1.0, 2, 0), C64::new(0.0, 0.0));
    }

    #[test]
    fn no_correlation_factorizes() {
        // ell = 0 removes the correlation and the profile phases.
        let mut p = params(1.0 / 97.0);
        p.ell = 0.0;
        for sign in [CorrelationSign::Minus, CorrelationSign::Plus] {
            let nl = nonlinear_limit_profile(&p, 1.6, sign).unwrap();
            let wl = w_l_limit(&p, 1.6, 2, 0);
            assert!((nl - wl).norm() <= 1e-9 * wl.norm(), "{nl} vs {wl}");
        }
    }

    #[test]
    fn correlation_changes_the_profile() {
        let p = params(1.0 / 97.0);
        let nl = nonlinear_limit_profile(&p, 1.6, CorrelationSign::Minus).unwrap();
        let nlp = nonlinear_limit_profile(&p, 1.6, CorrelationSign::Plus).unwrap();
        let wl = w_l_limit(&p, 1.6, 2, 0);
        assert!((nl - wl).norm() > 1e-3 * wl.norm());
        assert!((nl - nlp).norm() > 1e-3 * wl.norm());
    }

    #[test]
    fn nonlinear_profile_refines() {
        let p = params(1.0 / 97.0);
        let mut fine = p.clone();
        fine.quad = p.quad.refined();
        for sign in [CorrelationSign::Minus, CorrelationSign::Plus] {
            let a = nonlinear_limit_profile(&p, 1.7, sign).unwrap();
            let b = nonlinear_limit_profile(&fine, 1.7, sign).unwrap();
            assert!((a - b).norm() <= 1e-4 * b.norm(), "{a} vs {b}");
        }
    }

    #[test]
    fn prefactor_magnitude() {
        let p = params(1.0 / 97.0);
        let mut unit = p.clone();
        unit.ell = 0.0;
        // With L(s) real the phase of w_l_limit is the prefactor phase.
        let w = w_l_limit(&unit, 2.0, 2, 0);
        let m: f64 = time_nodes(&unit, 2.0)
            .iter()
            .map(|&(s, wt)| linear_profile(&unit, s, Branch::Even).re.powi(2) * wt)
            .sum();
        assert_relative_eq!(w.norm() / m, w_l_prefactor_abs(p.gamma, p.eps, 2, 0), max_relative = 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn negating_ell_conjugates(tt in 1.0f64..2.0, ell in -8.0f64..-0.5) {
            let mut p = params(0.01);
            p.ell = ell;
            let a = linear_profile(&p, tt, Branch::Even);
            let mut m = p.clone();
            m.ell = -ell;
            let b = {
                let g = |s: f64| m.abar(Branch::Even, s);
                integrate_singular_profile(&g, tt, m.ell, m.support().1, m.quad.tol)
            };
            prop_assert!((a - b.conj()).norm() < 1e-7);
        }

        #[test]
        fn correlation_is_unimodular(s1 in 0.25f64..1.0, s2 in 0.25f64..1.0, tt in 1.0f64..2.0, s in 1.0f64..2.0) {
            let p = params(0.01);
            let nodes = [(s1, 1.0), (s2, 1.0)];
            let b = b_values(&p, &nodes, s, Branch::Even, false);
            let k = p.ell_eff() / 6.0 * (tt - s);
            let d = C64::from_polar(1.0, -k / ((s1 + s2) * (s1 + s2))) * b[0] * b[1];
            prop_assert!((d.norm() - b[0].norm() * b[1].norm()).abs() < 1e-14);
        }
    }
}
