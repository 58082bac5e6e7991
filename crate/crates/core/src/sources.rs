//! Source data: the phase `phi`, separable profiles `a_m`, their spatial transform,
//! the multipliers `zeta_m` and the resonance amplitude `A_eps^2`.

use std::f64::consts::{FRAC_PI_4, PI, TAU};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oscquad::GaussLegendre;
use crate::symbols::{smooth_step, CutoffSpec};

/// Phase amplitude `gamma` of `phi(t, x) = t - x t + gamma (cos t - 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseParams {
    pub gamma: f64,
}

impl PhaseParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 0.25) {
            return Err(Error::Config {
                path: "phase.gamma".into(),
                msg: format!("must lie in (0, 1/4), got {gamma}"),
            });
        }
        Ok(Self { gamma })
    }
}

pub fn phase_eval(gamma: f64, t: f64, x: f64) -> f64 {
    t - x * t + gamma * (t.cos() - 1.0)
}

/// `(d_t phi, d_x phi)`.
pub fn phase_grad(gamma: f64, t: f64, x: f64) -> (f64, f64) {
    (1.0 - x - gamma * t.sin(), -t)
}

/// `A_eps^2 = sqrt(2/(pi gamma)) exp(-i gamma/eps) cos(gamma/eps - pi/4)`.
#[allow(non_snake_case)]
pub fn A_eps_sq(gamma: f64, eps: f64) -> C64 {
    let g = gamma / eps;
    C64::from_polar((2.0 / (PI * gamma)).sqrt() * (g - FRAC_PI_4).cos(), -g)
}

/// A square root of `A_eps^2` (principal branch).
#[allow(non_snake_case)]
pub fn A_eps(gamma: f64, eps: f64) -> C64 {
    A_eps_sq(gamma, eps).sqrt()
}

/// Record of the resonance amplitude used by a run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ResonanceAmplitude {
    pub re: f64,
    pub im: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl ResonanceAmplitude {
    pub fn new(gamma: f64, eps: f64) -> Self {
        let a = A_eps_sq(gamma, eps);
        Self {
            re: a.re,
            im: a.im,
            gamma,
            epsilon: eps,
        }
    }
}

/// Period of the fast-time factor for `t >= t_s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    Pi,
    TwoPi,
}

impl Period {
    pub fn value(self) -> f64 {
        match self {
            Period::Pi => PI,
            Period::TwoPi => TAU,
        }
    }
}

/// Separable profile family `a_m(T, t, x) = c_m theta(T) pi_m(t) rho(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSpec {
    /// Spatial support radius.
    pub r: f64,
    /// Upper end of the slow-time support.
    #[serde(rename = "T_cap")]
    pub t_cap: f64,
    /// Lower end of the slow-time support.
    #[serde(rename = "T_lo")]
    pub t_lo: f64,
    /// Width of each slow-time transition.
    #[serde(rename = "T_width")]
    pub t_width: f64,
    /// Periodization onset in fast time.
    pub t_s: f64,
    pub period: Period,
    /// Relative size of the periodic modulation `1 + kappa cos(2 pi t / period)`.
    pub kappa: f64,
    /// Enabled harmonics `m` with coefficient `c_m`.
    pub harmonics: Vec<(i32, f64)>,
}

impl Default for ProfileSpec {
    fn default() -> Self {
        Self {
            r: 0.09,
            t_cap: 1.0,
            t_lo: 0.25,
            t_width: 0.3,
            t_s: 4.0 * PI,
            period: Period::Pi,
            kappa: 0.0,
            harmonics: (-2..=2).map(|m| (m, 1.0)).collect(),
        }
    }
}

impl ProfileSpec {
    pub fn validate(&self, gamma: f64) -> Result<()> {
        let bad = |path: &str, msg: String| {
            Err(Error::Config {
                path: format!("profile.{path}"),
                msg,
            })
        };
        if !(self.r > 0.0 && self.r < gamma / 2.0) {
            return bad("r", format!("must lie in (0, gamma/2) = (0, {}), got {}", gamma / 2.0, self.r));
        }
        if !(self.t_cap > 0.0) {
            return bad("T_cap", format!("must be positive, got {}", self.t_cap));
        }
        if !(self.t_width > 0.0 && self.t_lo + 2.0 * self.t_width <= self.t_cap) {
            return bad("T_width", "need T_lo + 2 T_width <= T_cap".into());
        }
        if !(self.t_s > 1.0) {
            return bad("t_s", format!("must exceed 1, got {}", self.t_s));
        }
        if self.kappa.abs() >= 1.0 {
            return bad("kappa", "must satisfy |kappa| < 1".into());
        }
        if !self.harmonics.iter().any(|(m, _)| *m == 1) {
            return bad("harmonics", "harmonic 1 must be enabled".into());
        }
        Ok(())
    }

    /// Slow-time factor supported in `[T_lo, T_cap]`.
    pub fn theta(&self, t_slow: f64) -> f64 {
        let w = self.t_width;
        smooth_step((t_slow - self.t_lo) / w).0 * smooth_step((self.t_cap - t_slow) / w).0
    }

    /// Periodic shape shared by every harmonic for `t >= t_s`.
    pub fn periodic(&self, t: f64) -> f64 {
        if self.kappa == 0.0 {
            1.0
        } else {
            1.0 + self.kappa * (TAU * t / self.period.value()).cos()
        }
    }

    /// Fast-time factor: zero for `t <= 1`, periodic for `t >= t_s`.
    pub fn pi_m(&self, t: f64) -> f64 {
        let onset = smooth_step((t - 1.0) / (self.t_s - 1.0)).0;
        if onset == 0.0 {
            0.0
        } else {
            onset * self.periodic(t)
        }
    }

    /// Spatial bump supported in `[-r, r]`, equal to 1 at 0.
    pub fn rho(&self, x: f64) -> f64 {
        let u = x / self.r;
        if u.abs() >= 1.0 {
            0.0
        } else {
            (1.0 - 1.0 / (1.0 - u * u)).exp()
        }
    }

    pub fn coefficient(&self, m: i32) -> f64 {
        self.harmonics
            .iter()
            .find(|(k, _)| *k == m)
            .map(|(_, c)| *c)
            .unwrap_or(0.0)
    }

    pub fn profile_eval(&self, m: i32, t_slow: f64, t: f64, x: f64) -> f64 {
        let c = self.coefficient(m);
        if c == 0.0 {
            return 0.0;
        }
        let th = self.theta(t_slow);
        if th == 0.0 {
            return 0.0;
        }
        c * th * self.pi_m(t) * self.rho(x)
    }

    /// Periodic limit profile of `a_1`.
    pub fn abar_eval(&self, t_slow: f64, t: f64, x: f64) -> f64 {
        self.coefficient(1) * self.theta(t_slow) * self.periodic(t) * self.rho(x)
    }

    /// Direct `rho_hat(eta) = int exp(-i x eta) rho(x) dx` (real and even).
    pub fn rho_hat_direct(&self, eta: f64) -> f64 {
        let r = self.r;
        let panels = 8 + (eta.abs() * r / PI).ceil() as usize;
        let gl = GaussLegendre::cached(16);
        let w = r / panels as f64;
        let mut acc = 0.0;
        let mut comp = 0.0;
        for p in 0..panels {
            let a = w * p as f64;
            for (x, wt) in gl.nodes.iter().zip(&gl.weights) {
                let s = a + 0.5 * w * (x + 1.0);
                let term = 2.0 * (eta * s).cos() * self.rho(s) * 0.5 * w * wt;
                let y = term - comp;
                let t = acc + y;
                comp = (t - acc) - y;
                acc = t;
            }
        }
        acc
    }
}

/// Tabulated `rho_hat` with 6-point Lagrange interpolation; zero beyond `eta_max`.
#[derive(Clone, Debug)]
pub struct RhoHatTable {
    pub step: f64,
    pub eta_max: f64,
    values: Vec<f64>,
}

impl RhoHatTable {
    pub fn build(profile: &ProfileSpec, rel_tol: f64) -> Self {
        let step = 0.25;
        let peak = profile.rho_hat_direct(0.0);
        // Locate the last sample above tolerance (decay is sub-exponential, so scan).
        let mut values = Vec::new();
        let mut last_big = 0usize;
        let mut i = 0usize;
        loop {
            let v = profile.rho_hat_direct(step * i as f64);
            values.push(v);
            if v.abs() > rel_tol * peak {
                last_big = i;
            }
            // Stop once a long stretch stays below tolerance.
            if i > last_big + 4000 && i > 200 {
                break;
            }
            i += 1;
        }
        values.truncate(last_big + 8);
        let eta_max = step * (last_big + 1) as f64;
        Self {
            step,
            eta_max,
            values,
        }
    }

    pub fn eval(&self, eta: f64) -> f64 {
        let a = eta.abs();
        if a >= self.eta_max {
            return 0.0;
        }
        let u = a / self.step;
        let i0 = (u.floor() as isize - 2).max(0) as usize;
        let i0 = i0.min(self.values.len() - 6);
        let d = u - i0 as f64;
        // Lagrange weights on nodes 0..6 via prefix and suffix products.
        const DEN: [f64; 6] = [-120.0, 24.0, -12.0, 12.0, -24.0, 120.0];
        let mut pre = [1.0; 6];
        let mut suf = [1.0; 6];
        for j in 1..6 {
            pre[j] = pre[j - 1] * (d - (j - 1) as f64);
            suf[5 - j] = suf[6 - j] * (d - (6 - j) as f64);
        }
        let v = &self.values[i0..i0 + 6];
        let mut acc = 0.0;
        for j in 0..6 {
            acc += pre[j] * suf[j] / DEN[j] * v[j];
        }
        acc
    }

    /// Smallest `eta` beyond which `|rho_hat|` stays below `rel_tol` times its peak.
    pub fn cutoff(&self, rel_tol: f64) -> f64 {
        let peak = self.values[0].abs();
        let last = self
            .values
            .iter()
            .rposition(|v| v.abs() > rel_tol * peak)
            .unwrap_or(0);
        (self.step * (last + 1) as f64).min(self.eta_max)
    }
}

/// Tables depend only on `r`; reuse them across sources.
fn cached_table(r: f64) -> Arc<RhoHatTable> {
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<RhoHatTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("table cache poisoned");
    guard
        .entry(r.to_bits())
        .or_insert_with(|| {
            let p = ProfileSpec {
                r,
                ..ProfileSpec::default()
            };
            Arc::new(RhoHatTable::build(&p, 1e-13))
        })
        .clone()
}

/// Multipliers `zeta_m`: identically one except `zeta_0`, which vanishes on `[-xi0, xi0]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZetaSpec {
    pub xi0: f64,
}

impl Default for ZetaSpec {
    fn default() -> Self {
        Self { xi0: 1.0 }
    }
}

impl ZetaSpec {
    pub fn eval(&self, m: i32, xi: f64) -> f64 {
        if m != 0 {
            return 1.0;
        }
        1.0 - CutoffSpec::default().value(5.0 * xi / (8.0 * self.xi0))
    }
}

/// Complete source description with the cached spatial transform.
#[derive(Clone, Debug)]
pub struct Source {
    pub phase: PhaseParams,
    pub profile: ProfileSpec,
    pub zeta: ZetaSpec,
    pub rho_hat: Arc<RhoHatTable>,
}

impl Source {
    pub fn new(phase: PhaseParams, profile: ProfileSpec, zeta: ZetaSpec) -> Result<Self> {
        profile.validate(phase.gamma)?;
        if !(zeta.xi0 > 0.0) {
            return Err(Error::Config {
                path: "zeta.xi0".into(),
                msg: "must be positive".into(),
            });
        }
        let rho_hat = cached_table(profile.r);
        Ok(Self {
            phase,
            profile,
            zeta,
            rho_hat,
        })
    }

    pub fn default_run() -> Self {
        Self::new(PhaseParams { gamma: 0.2 }, ProfileSpec::default(), ZetaSpec::default())
            .expect("default source is valid")
    }

    pub fn gamma(&self) -> f64 {
        self.phase.gamma
    }

    /// Harmonics with nonzero coefficient, ascending.
    pub fn harmonics(&self) -> Vec<i32> {
        let mut h: Vec<i32> = self
            .profile
            .harmonics
            .iter()
            .filter(|(_, c)| *c != 0.0)
            .map(|(m, _)| *m)
            .collect();
        h.sort();
        h.dedup();
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn phase_examples() {
        assert_eq!(phase_eval(0.2, 0.0, 0.37), 0.0);
        assert_eq!(phase_grad(0.2, 7.0, 0.1).1, -7.0);
        assert_relative_eq!(phase_eval(0.2, TAU, 0.0), TAU, epsilon = 1e-15);
    }

    #[test]
    fn amplitude_examples() {
        let g = 0.2;
        let a = A_eps_sq(g, g / FRAC_PI_4);
        let expect = C64::from_polar((10.0 / PI).sqrt(), -FRAC_PI_4);
        assert_relative_eq!((a - expect).norm(), 0.0, epsilon = 1e-14);
        assert_relative_eq!(a.norm(), 1.784124, epsilon = 1e-6);
        let z = A_eps_sq(g, g / (3.0 * FRAC_PI_4));
        assert!(z.norm() < 1e-15);
        // Dense sweep of small eps: the limsup is attained.
        let sup = (0..200_000)
            .map(|i| A_eps_sq(g, 1.0 / (1000.0 + 0.01 * i as f64)).norm())
            .fold(0.0, f64::max);
        assert!(((2.0 / (PI * g)).sqrt() - sup).abs() < 1e-3);
    }

    #[test]
    fn profile_supports() {
        let p = ProfileSpec::default();
        assert_eq!(p.profile_eval(1, 0.5, 20.0, p.r + 0.01), 0.0);
        assert_eq!(p.profile_eval(1, p.t_cap + 0.01, 20.0, 0.0), 0.0);
        assert_eq!(p.profile_eval(1, 0.5, 0.99, 0.0), 0.0);
        let t = p.t_s + 1.0;
        assert_eq!(p.profile_eval(1, 0.6, t + p.period.value(), 0.01), p.abar_eval(0.6, t, 0.01));
    }

    #[test]
    fn modulated_periodicity() {
        let p = ProfileSpec {
            kappa: 0.4,
            period: Period::TwoPi,
            ..ProfileSpec::default()
        };
        for i in 0..50 {
            let t = p.t_s + 0.37 * i as f64;
            for n in 1..4 {
                let a = p.profile_eval(1, 0.6, t + n as f64 * TAU, 0.02);
                let b = p.abar_eval(0.6, t, 0.02);
                assert!((a - b).abs() <= 1e-13);
            }
        }
    }

    #[test]
    fn rho_hat_table() {
        let p = ProfileSpec::default();
        let tab = RhoHatTable::build(&p, 1e-13);
        assert!(tab.eta_max > 500.0);
        for &eta in &[0.0, 0.1, 3.3, 17.77, 123.4, -250.6, 999.9] {
            assert!((tab.eval(eta) - p.rho_hat_direct(eta)).abs() < 1e-12);
        }
        // Plain quadrature of rho at 0.
        let gl = GaussLegendre::new(64);
        let mut mass = 0.0;
        for k in 0..16 {
            let a = -p.r + 2.0 * p.r * k as f64 / 16.0;
            let w = 2.0 * p.r / 16.0;
            for (x, wt) in gl.nodes.iter().zip(&gl.weights) {
                mass += p.rho(a + 0.5 * w * (x + 1.0)) * 0.5 * w * wt;
            }
        }
        assert_relative_eq!(tab.eval(0.0), mass, epsilon = 1e-13);
    }

    #[test]
    fn zeta_examples() {
        let z = ZetaSpec::default();
        assert_eq!(z.eval(0, 0.9), 0.0);
        assert_eq!(z.eval(0, -1.0), 0.0);
        assert_eq!(z.eval(0, 1.7), 1.0);
        assert_eq!(z.eval(2, 0.1), 1.0);
    }

    #[test]
    fn validation() {
        let mut p = ProfileSpec::default();
        assert!(p.validate(0.2).is_ok());
        p.r = 0.11;
        assert!(p.validate(0.2).is_err());
        assert!(PhaseParams::new(0.3).is_err());
    }

    proptest! {
        #[test]
        fn periodization(t in 12.6f64..200.0, ts in 0.0f64..1.5, x in -0.1f64..0.1, n in 1u32..20) {
            let p = ProfileSpec::default();
            let a = p.profile_eval(1, ts, t + n as f64 * p.period.value(), x);
            prop_assert_eq!(a, p.abar_eval(ts, t, x));
        }

        #[test]
        fn bounded_differences(ts in -0.5f64..1.5, t in 0.0f64..30.0, x in -0.12f64..0.12) {
            // Fourth differences stay bounded on the default grid (no jumps).
            let p = ProfileSpec::default();
            let h = 1e-2;
            let f = |d: f64| p.profile_eval(1, ts + d, t + d, x + 0.1 * d);
            let d4 = f(2.0 * h) - 4.0 * f(h) + 6.0 * f(0.0) - 4.0 * f(-h) + f(-2.0 * h);
            prop_assert!((d4 / h.powi(4)).abs() < 1e6);
        }
    }
}
