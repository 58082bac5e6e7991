//! Exact Fourier-side solution of the linear problem.
//!
//! Because the phase is linear in `x` at fixed time, the `(s, y)` integral of the
//! Duhamel formula collapses to one time integral per frequency:
//!
//! `u_hat^m(t, eta) = eps^{3/2} int_0^t exp(i (t - s) p(eps eta) / eps) zeta_m(-eps eta)
//!     exp(i m (s + gamma (cos s - 1)) / eps) theta(eps s) pi_m(s) rho_hat(eta + m s / eps) ds`.
//!
//! Transform convention: forward `exp(-i x eta)`, inverse `(2 pi)^{-1} int exp(i x eta)`.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oscquad::{integrate_osc_1d, GaussLegendre, KahanC64, Oscillatory1D, QuadOptions};
use crate::sources::Source;
use crate::symbols::DispersionSymbol;

/// Options for the spectral oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearOptions {
    /// Half-length `L` of the periodic spatial box; fixes `d_eta = pi / L`.
    /// Zero selects [`auto_half_length`].
    pub half_length: f64,
    /// Relative level below which `rho_hat` is treated as zero when sizing bands.
    pub band_tol: f64,
    /// Gauss-Legendre nodes per panel of the shared time grid.
    pub n_pp: usize,
    /// Panel width as a fraction of one local phase period.
    pub panel_fraction: f64,
    /// Relative spectral mass allowed in the outer band margins.
    pub alias_tol: f64,
}

impl Default for LinearOptions {
    fn default() -> Self {
        Self {
            half_length: 0.0,
            band_tol: 1e-10,
            n_pp: 12,
            panel_fraction: 1.0,
            alias_tol: 1e-6,
        }
    }
}

/// Uniform frequency grid `eta_n = eta0 + n pi / L`, `n < n`, paired with the
/// periodic spatial box `[-L, L)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierGrid {
    pub half_length: f64,
    pub eta0: f64,
    pub n: usize,
}

impl FourierGrid {
    /// Power-of-two grid covering `[lo, hi]`.
    pub fn covering(half_length: f64, lo: f64, hi: f64) -> Self {
        let d = PI / half_length;
        let need = ((hi - lo) / d).ceil() as usize + 1;
        let n = need.next_power_of_two().max(16);
        let center = 0.5 * (lo + hi);
        let eta0 = ((center / d).round() - (n / 2) as f64) * d;
        Self {
            half_length,
            eta0,
            n,
        }
    }

    pub fn d_eta(&self) -> f64 {
        PI / self.half_length
    }

    pub fn eta(&self, i: usize) -> f64 {
        self.eta0 + self.d_eta() * i as f64
    }

    pub fn hi(&self) -> f64 {
        self.eta(self.n - 1)
    }
}

/// Which method produced a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Oracle,
    Packets,
    Asymptotic,
}

/// Rescaled samples `U^(j)(T, z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub eps: f64,
    pub j: u8,
    pub solver: SolverKind,
    pub points: Vec<(f64, f64)>,
    pub values: Vec<C64>,
    pub config_hash: String,
}

impl FieldSample {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.values.len() {
            return Err(Error::Input("sample points and values differ in length".into()));
        }
        if self.values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Input("non-finite sample value".into()));
        }
        Ok(())
    }
}

/// `U(T, z) = eps^{-1} exp(-i T / eps^2) u(T / eps, eps z)`.
#[allow(non_snake_case)]
pub fn rescale_to_U(eps: f64, tt: f64, u: C64) -> C64 {
    let ph = -tt / (eps * eps);
    u * C64::new(ph.cos(), ph.sin()) / eps
}

/// Inverse of [`rescale_to_U`].
#[allow(non_snake_case)]
pub fn rescale_from_U(eps: f64, tt: f64, uu: C64) -> C64 {
    let ph = tt / (eps * eps);
    uu * C64::new(ph.cos(), ph.sin()) * eps
}

/// Time window `[s_lo, s_hi]` on which `theta(eps s) pi_m(s)` can be nonzero, cut at `t`.
fn source_window(eps: f64, src: &Source, t: f64) -> (f64, f64) {
    let pr = &src.profile;
    let lo = (pr.t_lo / eps).max(1.0);
    let hi = (pr.t_cap / eps).min(t);
    (lo, hi)
}

/// Box half-length holding the emitted field up to `t = 2 T_cap / eps`: the slowest
/// emitted frequency `|eps eta| = T_lo / eps` bounds the group velocity.
pub fn auto_half_length(eps: f64, sym: &DispersionSymbol, src: &Source) -> f64 {
    let pr = &src.profile;
    // Half the lowest carrier frequency leaves room for the spatial bandwidth of rho.
    let v = sym.dp((0.5 * pr.t_lo / eps).max(1.0)).abs();
    let reach = pr.r + v * 2.0 * pr.t_cap / eps;
    (1.5 * reach).max(0.5)
}

/// Frequency band carrying mode `m` up to the `rho_hat` cutoff `eta_b`.
fn mode_band(eps: f64, m: i32, s_lo: f64, s_hi: f64, eta_b: f64) -> (f64, f64) {
    if m == 0 {
        return (-eta_b, eta_b);
    }
    let a = -(m as f64) * s_lo / eps;
    let b = -(m as f64) * s_hi / eps;
    (a.min(b) - eta_b, a.max(b) + eta_b)
}

/// Source factor `exp(i m (s + gamma (cos s - 1)) / eps) theta(eps s) pi_m(s)` without `c_m`.
fn source_factor(eps: f64, src: &Source, m: i32, s: f64) -> C64 {
    let pr = &src.profile;
    let th = pr.theta(eps * s);
    if th == 0.0 {
        return C64::new(0.0, 0.0);
    }
    let amp = th * pr.pi_m(s);
    let ph = m as f64 * (s + src.gamma() * (s.cos() - 1.0)) / eps;
    C64::new(ph.cos(), ph.sin()) * amp
}

/// `u_hat^m(t, eta)` for every grid frequency, one adaptive oscillatory quadrature
/// per frequency. This is the reference path; [`LinearField`] is the production path.
pub fn solve_linear_mode(
    eps: f64,
    sym: &DispersionSymbol,
    src: &Source,
    m: i32,
    t: f64,
    grid: &FourierGrid,
    opts: &QuadOptions,
) -> Result<Vec<C64>> {
    let tmax = 2.0 * src.profile.t_cap / eps;
    if t > tmax * (1.0 + 1e-12) {
        return Err(Error::Input(format!("t = {t} exceeds 2 T_cap / eps = {tmax}")));
    }
    let c = src.profile.coefficient(m);
    let (s_lo, s_hi) = source_window(eps, src, t);
    if c == 0.0 || s_hi <= s_lo {
        return Ok(vec![C64::new(0.0, 0.0); grid.n]);
    }
    let eta_max = src.rho_hat.eta_max;
    let pref = eps.powf(1.5) * c;
    (0..grid.n)
        .into_par_iter()
        .map(|i| {
            let eta = grid.eta(i);
            let z = src.zeta.eval(m, -eps * eta);
            if z == 0.0 {
                return Ok(C64::new(0.0, 0.0));
            }
            // Restrict to the times where rho_hat(eta + m s / eps) is nonzero.
            let (mut lo, mut hi) = (s_lo, s_hi);
            if m != 0 {
                let a = (-eta - eta_max) * eps / m as f64;
                let b = (-eta + eta_max) * eps / m as f64;
                lo = lo.max(a.min(b));
                hi = hi.min(a.max(b));
            }
            if hi <= lo {
                return Ok(C64::new(0.0, 0.0));
            }
            let pe = sym.p(eps * eta);
            let gamma = src.gamma();
            let amp = |s: f64| {
                let th = src.profile.theta(eps * s);
                if th == 0.0 {
                    return C64::new(0.0, 0.0);
                }
                C64::new(th * src.profile.pi_m(s) * src.rho_hat.eval(eta + m as f64 * s / eps), 0.0)
            };
            let phase = |s: f64| (t - s) * pe + m as f64 * (s + gamma * (s.cos() - 1.0));
            let f = Oscillatory1D {
                amplitude: &amp,
                phase: &phase,
                h: eps,
                lo,
                hi,
            };
            let o = QuadOptions {
                min_panels: opts.min_panels.max(((hi - lo) * src.profile.r * m.abs() as f64 / eps / TAU) as usize + 1),
                ..*opts
            };
            let res = integrate_osc_1d(&f, &o);
            // Far-tail frequencies carry almost no mass; judge them on the global scale.
            let v = if !res.converged && res.err_est <= opts.tol * src.rho_hat.eval(0.0) * (hi - lo) {
                res.value
            } else {
                res.require(&format!("linear mode {m} at eta = {eta}"))?
            };
            Ok(v * pref * z)
        })
        .collect()
}

/// Emitted spectrum of one harmonic: `u_hat^m(t, eta_n) = exp(i t p(eps eta_n)/eps) g_n`.
#[derive(Clone, Debug)]
pub struct ModeSpectrum {
    pub m: i32,
    pub grid: FourierGrid,
    pub g: Vec<C64>,
    /// `p(eps eta_n) / eps`.
    pub rate: Vec<f64>,
}

impl ModeSpectrum {
    pub fn at_time(&self, t: f64) -> Vec<C64> {
        self.g
            .iter()
            .zip(&self.rate)
            .map(|(g, r)| {
                let ph = t * r;
                g * C64::new(ph.cos(), ph.sin())
            })
            .collect()
    }

    /// `(sum |g|` over the outer sixteenth of the band on each side, `sum |g|)`.
    pub fn edge_mass(&self) -> (f64, f64) {
        let total: f64 = self.g.iter().map(|v| v.norm()).sum();
        let e = self.grid.n / 16;
        let edge: f64 = self.g[..e].iter().chain(&self.g[self.grid.n - e..]).map(|v| v.norm()).sum();
        (edge, total)
    }
}

/// Linear solution assembled from all enabled harmonics.
///
/// Built with a time cut `t_cut`; the stored spectra are exact at `t_cut` and, when
/// the source has switched off by then, at every later time.
#[derive(Clone, Debug)]
pub struct LinearField {
    pub eps: f64,
    pub half_length: f64,
    pub t_cut: f64,
    pub source_end: f64,
    pub modes: Vec<ModeSpectrum>,
    pub opts: LinearOptions,
}

impl LinearField {
    /// Spectra after the source has switched off (`t >= T_cap / eps`).
    pub fn emitted(eps: f64, sym: &DispersionSymbol, src: &Source, opts: &LinearOptions) -> Result<Self> {
        Self::build(eps, sym, src, src.profile.t_cap / eps, opts)
    }

    /// Spectra at time `t`, using one shared composite Gauss-Legendre time grid per
    /// harmonic whose panels span at most `panel_fraction` of the fastest local period.
    pub fn build(eps: f64, sym: &DispersionSymbol, src: &Source, t: f64, opts: &LinearOptions) -> Result<Self> {
        let tmax = 2.0 * src.profile.t_cap / eps;
        if t > tmax * (1.0 + 1e-12) {
            return Err(Error::Input(format!("t = {t} exceeds 2 T_cap / eps = {tmax}")));
        }
        let eta_b = src.rho_hat.cutoff(opts.band_tol);
        let (s_lo, s_hi) = source_window(eps, src, t);
        let gl = GaussLegendre::cached(opts.n_pp);
        let gamma = src.gamma();
        let r = src.profile.r;
        let half_length = if opts.half_length > 0.0 {
            opts.half_length
        } else {
            auto_half_length(eps, sym, src)
        };
        let mut modes = Vec::new();
        for m in src.harmonics() {
            let c = src.profile.coefficient(m);
            let (blo, bhi) = mode_band(eps, m, s_lo, s_hi.max(s_lo), eta_b);
            let grid = FourierGrid::covering(half_length, blo, bhi);
            if s_hi <= s_lo {
                modes.push(ModeSpectrum {
                    m,
                    grid,
                    g: vec![C64::new(0.0, 0.0); grid.n],
                    rate: (0..grid.n).map(|i| sym.p(eps * grid.eta(i)) / eps).collect(),
                });
                continue;
            }
            let ma = m.abs() as f64;
            let max_rate = (1.0 + ma * (1.0 + gamma + r)) / eps;
            let width = opts.panel_fraction * TAU / max_rate;
            let panels = ((s_hi - s_lo) / width).ceil() as usize;
            let width = (s_hi - s_lo) / panels as f64;
            let k = gl.nodes.len();
            // Source factor on every node, weights folded in.
            let nodes: Vec<(f64, C64)> = (0..panels)
                .into_par_iter()
                .flat_map_iter(|p| {
                    let a = s_lo + width * p as f64;
                    (0..k).map(move |j| {
                        let s = a + 0.5 * width * (gl.nodes[j] + 1.0);
                        (s, source_factor(eps, src, m, s) * (0.5 * width * gl.weights[j]))
                    })
                })
                .collect();
            let pref = eps.powf(1.5) * c;
            let rho_hat = Arc::clone(&src.rho_hat);
            let out: Vec<(C64, f64)> = (0..grid.n)
                .into_par_iter()
                .map(|i| {
                    let eta = grid.eta(i);
                    let pe = sym.p(eps * eta);
                    let rate = pe / eps;
                    let z = src.zeta.eval(m, -eps * eta);
                    if z == 0.0 || c == 0.0 {
                        return (C64::new(0.0, 0.0), rate);
                    }
                    let (p0, p1) = if m == 0 {
                        if rho_hat.eval(eta) == 0.0 {
                            return (C64::new(0.0, 0.0), rate);
                        }
                        (0, panels)
                    } else {
                        let a = (-eta - eta_b) * eps / m as f64;
                        let b = (-eta + eta_b) * eps / m as f64;
                        let lo = a.min(b).max(s_lo);
                        let hi = a.max(b).min(s_hi);
                        if hi <= lo {
                            return (C64::new(0.0, 0.0), rate);
                        }
                        let p0 = ((lo - s_lo) / width).floor().max(0.0) as usize;
                        let p1 = (((hi - s_lo) / width).ceil() as usize).min(panels);
                        (p0, p1)
                    };
                    // exp(-i s p / eps) factored per panel.
                    let offs: Vec<C64> = gl
                        .nodes
                        .iter()
                        .map(|x| {
                            let ph = -0.5 * width * (x + 1.0) * rate;
                            C64::new(ph.cos(), ph.sin())
                        })
                        .collect();
                    let rh0 = if m == 0 { rho_hat.eval(eta) } else { 0.0 };
                    let mut acc = KahanC64::new();
                    for p in p0..p1 {
                        let a = s_lo + width * p as f64;
                        let ph = -a * rate;
                        let base = C64::new(ph.cos(), ph.sin());
                        let mut part = C64::new(0.0, 0.0);
                        for j in 0..k {
                            let (s, w) = nodes[p * k + j];
                            let rh = if m == 0 { rh0 } else { rho_hat.eval(eta + m as f64 * s / eps) };
                            if rh != 0.0 {
                                part += w * offs[j] * rh;
                            }
                        }
                        acc.add(base * part);
                    }
                    (acc.value() * pref * z, rate)
                })
                .collect();
            let (g, rate): (Vec<C64>, Vec<f64>) = out.into_iter().unzip();
            modes.push(ModeSpectrum { m, grid, g, rate });
        }
        Ok(Self {
            eps,
            half_length,
            t_cut: t,
            source_end: src.profile.t_cap / eps,
            modes,
            opts: *opts,
        })
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let ok = (t - self.t_cut).abs() <= 1e-12 * t.abs().max(1.0)
            || (self.t_cut >= self.source_end * (1.0 - 1e-12) && t >= self.t_cut * (1.0 - 1e-12));
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "field built at t = {} cannot be evaluated at t = {t}",
                self.t_cut
            )))
        }
    }

    /// Spectrum of harmonic `m` at time `t`.
    pub fn spectrum(&self, m: i32, t: f64) -> Result<Vec<C64>> {
        self.check_time(t)?;
        let mode = self
            .modes
            .iter()
            .find(|s| s.m == m)
            .ok_or_else(|| Error::Input(format!("harmonic {m} not enabled")))?;
        Ok(mode.at_time(t))
    }

    /// Spectral mass in the band margins relative to the total; the aliasing sentinel.
    pub fn edge_mass(&self) -> f64 {
        let (mut edge, mut total) = (0.0, 0.0);
        for m in &self.modes {
            let (e, t) = m.edge_mass();
            edge += e;
            total += t;
        }
        if total == 0.0 {
            0.0
        } else {
            edge / total
        }
    }

    pub fn check_aliasing(&self) -> Result<()> {
        let mass = self.edge_mass();
        if mass > self.opts.alias_tol {
            return Err(Error::Aliasing {
                mass,
                tol: self.opts.alias_tol,
            });
        }
        Ok(())
    }

    /// `u(t, x)` by direct summation, restricted to harmonics in `only` when given.
    pub fn u_at_modes(&self, t: f64, x: f64, only: Option<&[i32]>) -> Result<C64> {
        self.check_time(t)?;
        let mut acc = KahanC64::new();
        for mode in &self.modes {
            if let Some(sel) = only {
                if !sel.contains(&mode.m) {
                    continue;
                }
            }
            let d = mode.grid.d_eta();
            for (i, (g, r)) in mode.g.iter().zip(&mode.rate).enumerate() {
                if g.re == 0.0 && g.im == 0.0 {
                    continue;
                }
                let ph = t * r + x * mode.grid.eta(i);
                acc.add(g * C64::new(ph.cos(), ph.sin()) * d);
            }
        }
        Ok(acc.value() / TAU)
    }

    pub fn u_at(&self, t: f64, x: f64) -> Result<C64> {
        self.u_at_modes(t, x, None)
    }

    /// `U(T, z)` from [`Self::u_at_modes`].
    pub fn big_u_at(&self, tt: f64, z: f64, only: Option<&[i32]>) -> Result<C64> {
        let u = self.u_at_modes(tt / self.eps, self.eps * z, only)?;
        Ok(rescale_to_U(self.eps, tt, u))
    }

    /// `u(t, x_j)` on `x_j = -L + 2 L j / points` by FFT; `points` must be a power of two
    /// at least as large as every band.
    pub fn u_grid(&self, t: f64, points: usize, only: Option<&[i32]>) -> Result<Vec<C64>> {
        self.check_time(t)?;
        if !points.is_power_of_two() {
            return Err(Error::Input(format!("grid size {points} is not a power of two")));
        }
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_inverse(points);
        let mut total = vec![C64::new(0.0, 0.0); points];
        for mode in &self.modes {
            if let Some(sel) = only {
                if !sel.contains(&mode.m) {
                    continue;
                }
            }
            let v = spectrum_to_grid(&mode.grid, &mode.at_time(t), points, fft.as_ref())?;
            for (a, b) in total.iter_mut().zip(v) {
                *a += b;
            }
        }
        Ok(total)
    }

    /// Spatial grid matching [`Self::u_grid`].
    pub fn x_grid(&self, points: usize) -> Vec<f64> {
        let l = self.half_length;
        (0..points).map(|j| -l + 2.0 * l * j as f64 / points as f64).collect()
    }
}

/// Inverse transform of a band spectrum onto `points` samples of `[-L, L)`.
pub fn spectrum_to_grid(
    grid: &FourierGrid,
    spec: &[C64],
    points: usize,
    fft: &dyn rustfft::Fft<f64>,
) -> Result<Vec<C64>> {
    if points < grid.n {
        return Err(Error::Input(format!("grid of {points} points cannot hold a band of {}", grid.n)));
    }
    let l = grid.half_length;
    let d = grid.d_eta();
    let x0 = -l;
    let mut buf = vec![C64::new(0.0, 0.0); points];
    for (i, v) in spec.iter().enumerate() {
        let ph = x0 * d * i as f64;
        buf[i] = v * C64::new(ph.cos(), ph.sin());
    }
    fft.process(&mut buf);
    let dx = 2.0 * l / points as f64;
    let scale = d / TAU;
    for (j, v) in buf.iter_mut().enumerate() {
        let ph = (x0 + dx * j as f64) * grid.eta0;
        *v *= C64::new(ph.cos(), ph.sin()) * scale;
    }
    Ok(buf)
}

/// Forward transform of grid samples on `[-L, L)` onto a frequency grid with the
/// same spacing: `f_hat(eta_n) = sum_j f(x_j) exp(-i x_j eta_n) dx`.
pub fn grid_to_spectrum(
    samples: &[C64],
    half_length: f64,
    eta0: f64,
    fft: &dyn rustfft::Fft<f64>,
) -> Vec<C64> {
    let points = samples.len();
    let l = half_length;
    let d = PI / l;
    let dx = 2.0 * l / points as f64;
    let x0 = -l;
    let mut buf: Vec<C64> = samples
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let ph = -(x0 + dx * j as f64) * eta0;
            v * C64::new(ph.cos(), ph.sin())
        })
        .collect();
    fft.process(&mut buf);
    for (i, v) in buf.iter_mut().enumerate() {
        let ph = -x0 * d * i as f64;
        *v *= C64::new(ph.cos(), ph.sin()) * dx;
    }
    buf
}

/// `u(t, x)` at arbitrary points, summing all enabled harmonics.
pub fn field_u(
    eps: f64,
    sym: &DispersionSymbol,
    src: &Source,
    t: f64,
    xs: &[f64],
    opts: &LinearOptions,
) -> Result<Vec<C64>> {
    let field = if t >= src.profile.t_cap / eps {
        LinearField::emitted(eps, sym, src, opts)?
    } else {
        LinearField::build(eps, sym, src, t, opts)?
    };
    field.check_aliasing()?;
    xs.iter().map(|&x| field.u_at(t, x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sources::{PhaseParams, ProfileSpec, ZetaSpec};
    use approx::assert_relative_eq;

    fn setup() -> (DispersionSymbol, Source) {
        (DispersionSymbol::model(), Source::default_run())
    }

    #[test]
    fn zero_time_gives_zero() {
        let (sym, src) = setup();
        let eps = 1.0 / 20.0;
        let grid = FourierGrid::covering(0.5, -500.0, 500.0);
        let v = solve_linear_mode(eps, &sym, &src, 1, 0.0, &grid, &QuadOptions::default()).unwrap();
        assert!(v.iter().all(|c| c.norm() == 0.0));
        let f = LinearField::build(eps, &sym, &src, 0.0, &LinearOptions::default()).unwrap();
        assert!(f.modes.iter().all(|m| m.g.iter().all(|c| c.norm() == 0.0)));
    }

    #[test]
    fn rescale_round_trip() {
        let eps = 1.0 / 37.0;
        let u = C64::new(0.3, -1.7);
        let uu = rescale_to_U(eps, 1.3, u);
        assert_relative_eq!(uu.norm(), u.norm() / eps, max_relative = 1e-14);
        let back = rescale_from_U(eps, 1.3, uu);
        assert!((back - u).norm() < 1e-14);
        assert_eq!(rescale_to_U(eps, 1.3, C64::new(0.0, 0.0)), C64::new(0.0, 0.0));
    }

    #[test]
    fn shared_grid_matches_adaptive_reference() {
        let (sym, src) = setup();
        let eps = 1.0 / 20.0;
        let t = src.profile.t_cap / eps;
        let f = LinearField::emitted(eps, &sym, &src, &LinearOptions::default()).unwrap();
        let mut scale: f64 = 0.0;
        let mut pairs = Vec::new();
        for mode in &f.modes {
            // Every sixteenth frequency of the band.
            let sub = FourierGrid {
                half_length: mode.grid.half_length / 16.0,
                eta0: mode.grid.eta0,
                n: mode.grid.n / 16,
            };
            let reference =
                solve_linear_mode(eps, &sym, &src, mode.m, t, &sub, &QuadOptions::with_tol(1e-11)).unwrap();
            scale = scale.max(reference.iter().map(|v| v.norm()).fold(0.0, f64::max));
            let fast: Vec<C64> = mode.at_time(t).into_iter().step_by(16).collect();
            pairs.push((mode.m, sub, reference, fast));
        }
        for (m, grid, reference, fast) in pairs {
            for i in 0..grid.n {
                assert!(
                    (reference[i] - fast[i]).norm() <= 1e-8 * scale,
                    "m = {m} eta = {}: {} vs {}",
                    grid.eta(i),
                    reference[i],
                    fast[i]
                );
            }
        }
    }

    #[test]
    fn panel_refinement_is_stable() {
        let (sym, src) = setup();
        let eps = 1.0 / 30.0;
        let o1 = LinearOptions::default();
        let o2 = LinearOptions {
            panel_fraction: 0.5,
            ..o1
        };
        let a = LinearField::emitted(eps, &sym, &src, &o1).unwrap();
        let b = LinearField::emitted(eps, &sym, &src, &o2).unwrap();
        let tt = 1.5;
        for z in [0.0, 1.0, 2.0] {
            let ua = a.big_u_at(tt, z, None).unwrap();
            let ub = b.big_u_at(tt, z, None).unwrap();
            assert!((ua - ub).norm() <= 1e-9 * ua.norm().max(1.0), "z = {z}");
        }
    }

    #[test]
    fn fft_matches_direct_sum() {
        let (sym, src) = setup();
        let eps = 1.0 / 25.0;
        let f = LinearField::emitted(eps, &sym, &src, &LinearOptions::default()).unwrap();
        let t = 1.5 / eps;
        let n = f.modes.iter().map(|m| m.grid.n).max().unwrap();
        let xs = f.x_grid(n);
        let g = f.u_grid(t, n, None).unwrap();
        let peak = g.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for j in (0..n).step_by(n / 16) {
            let d = f.u_at(t, xs[j]).unwrap();
            assert!((d - g[j]).norm() <= 1e-11 * peak, "x = {}", xs[j]);
        }
    }

    #[test]
    fn transforms_invert() {
        let grid = FourierGrid {
            half_length: 0.5,
            eta0: -300.0 * PI,
            n: 64,
        };
        let spec: Vec<C64> = (0..64).map(|i| C64::new((i as f64 * 0.3).sin(), (i as f64 * 0.7).cos())).collect();
        let mut planner = FftPlanner::<f64>::new();
        let inv = planner.plan_fft_inverse(64);
        let fwd = planner.plan_fft_forward(64);
        let samples = spectrum_to_grid(&grid, &spec, 64, inv.as_ref()).unwrap();
        let back = grid_to_spectrum(&samples, 0.5, grid.eta0, fwd.as_ref());
        for (a, b) in spec.iter().zip(&back) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn field_is_contained_in_the_box() {
        let (sym, src) = setup();
        let eps = 1.0 / 100.0;
        let f = LinearField::emitted(eps, &sym, &src, &LinearOptions::default()).unwrap();
        assert!(f.check_aliasing().is_ok());
        let t = 2.0 / eps;
        let l = f.half_length;
        let inner = [0.0, 0.03, -0.03]
            .iter()
            .map(|&x| f.u_at(t, x).unwrap().norm())
            .fold(0.0, f64::max);
        for x in [-0.98 * l, -0.9 * l, 0.9 * l, 0.98 * l] {
            let v = f.u_at(t, x).unwrap().norm();
            assert!(v <= 1e-6 * inner, "x = {x}: {v} vs {inner}");
        }
    }

    #[test]
    fn nonresonant_modes_decay_fast() {
        let (sym, src) = setup();
        let mut ratios = Vec::new();
        for eps in [1.0 / 20.0, 1.0 / 40.0, 1.0 / 80.0] {
            let f = LinearField::emitted(eps, &sym, &src, &LinearOptions::default()).unwrap();
            let t = 1.5 / eps;
            let main = f.u_at_modes(t, 0.0, Some(&[1])).unwrap().norm();
            let mut other: f64 = 0.0;
            for x in [0.0, 0.02, -0.05] {
                other = other.max(f.u_at_modes(t, x, Some(&[-2, -1, 0, 2])).unwrap().norm());
            }
            ratios.push((eps, other, main));
        }
        // Faster than eps^3 relative to the emitted field.
        for w in ratios.windows(2) {
            let (e0, o0, _) = w[0];
            let (e1, o1, _) = w[1];
            assert!(o1 <= o0 * (e1 / e0).powi(3) + 1e-300, "{:?}", ratios);
        }
        for (_, o, m) in &ratios {
            assert!(o < m);
        }
    }

    #[test]
    fn window_cut_at_intermediate_time() {
        let sym = DispersionSymbol::model();
        let src = Source::new(PhaseParams { gamma: 0.2 }, ProfileSpec::default(), ZetaSpec::default()).unwrap();
        let eps = 1.0 / 20.0;
        let t = 0.6 / eps;
        let f = LinearField::build(eps, &sym, &src, t, &LinearOptions::default()).unwrap();
        assert!(f.u_at(t + 1.0, 0.0).is_err());
        let mode = &f.modes.iter().find(|m| m.m == 1).unwrap();
        let sub = FourierGrid {
            half_length: mode.grid.half_length / 8.0,
            eta0: mode.grid.eta0,
            n: mode.grid.n / 8,
        };
        let reference = solve_linear_mode(eps, &sym, &src, 1, t, &sub, &QuadOptions::with_tol(1e-11)).unwrap();
        let fast: Vec<C64> = mode.at_time(t).into_iter().step_by(8).collect();
        let peak = reference.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for i in 0..sub.n {
            assert!((reference[i] - fast[i]).norm() <= 1e-8 * peak);
        }
    }
}
