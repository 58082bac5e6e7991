//! First Picard iterate of the nonlinear problem.
//!
//! For the monomial `lambda eps^nu exp(i omega t/eps) chi(3 - 2 eps t/T_win) chi(x/(r eps^iota)) u^j1 conj(u)^j2`
//! the difference `W = U^(1) - U^(0)` solves
//! `d_T W - i (p(-i d_z) - 1) W / eps^2 = eps^{nu+j1+j2-2} exp(i (g - 1) T/eps^2) G`,
//! with gauge `g = omega + j1 - j2` and `G = chi chi U^j1 conj(U)^j2`.

use std::f64::consts::{PI, TAU};
use std::sync::OnceLock;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear_solver::{grid_to_spectrum, spectrum_to_grid, FieldSample, FourierGrid, LinearField, SolverKind};
use crate::oscquad::{integrate_osc_1d, filon_cumulative, FilonWeights, GaussLegendre, KahanC64, Oscillatory1D, QuadOptions};
use crate::sources::Source;
use crate::symbols::{CutoffSpec, DispersionSymbol};
use crate::wavepackets::{dh_k, find_critical_point, packet_u_k, source_active, CriticalPoint, PacketIndexSets};

/// Nonlinear monomial.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NonlinearitySpec {
    pub lambda_re: f64,
    pub lambda_im: f64,
    pub j1: u32,
    pub j2: u32,
    pub nu: i32,
    pub omega: f64,
    pub iota: f64,
    /// Window `T_win` of the time cutoff `chi(3 - 2 eps t / T_win)`.
    pub t_win: f64,
    /// Radius of the spatial cutoff `chi(x / (r eps^iota))`.
    pub r: f64,
}

impl Default for NonlinearitySpec {
    /// `exp(-i t/eps) u^2` with `iota = 0.6`.
    fn default() -> Self {
        Self {
            lambda_re: 1.0,
            lambda_im: 0.0,
            j1: 2,
            j2: 0,
            nu: 0,
            omega: -1.0,
            iota: 0.6,
            t_win: 1.0,
            r: 0.09,
        }
    }
}

impl NonlinearitySpec {
    pub fn lambda(&self) -> C64 {
        C64::new(self.lambda_re, self.lambda_im)
    }

    pub fn gauge(&self) -> f64 {
        self.omega + self.j1 as f64 - self.j2 as f64
    }

    /// Power of `eps` in front of the rescaled source.
    pub fn eps_power(&self) -> i32 {
        self.nu + self.j1 as i32 + self.j2 as i32 - 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: String| {
            Err(Error::Config {
                path: format!("nonlinearity.{path}"),
                msg,
            })
        };
        if self.j1 + self.j2 < 2 {
            return bad("j1", format!("need j1 + j2 >= 2, got {} + {}", self.j1, self.j2));
        }
        if self.eps_power() < 0 {
            return bad("nu", format!("need nu + j1 + j2 >= 2, got nu = {}", self.nu));
        }
        if !(0.0..=1.0).contains(&self.iota) {
            return bad("iota", format!("must lie in [0, 1], got {}", self.iota));
        }
        if !(self.t_win > 0.0) {
            return bad("t_win", format!("must be positive, got {}", self.t_win));
        }
        if !(self.r > 0.0) {
            return bad("r", format!("must be positive, got {}", self.r));
        }
        if !self.omega.is_finite() || !self.lambda_re.is_finite() || !self.lambda_im.is_finite() {
            return bad("omega", "coefficients must be finite".into());
        }
        Ok(())
    }
}

/// Resonance class of a gauge parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResonanceClass {
    NonResonant,
    Transitional,
    Pointwise,
    Complete,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaugeClass {
    pub g: f64,
    pub class: ResonanceClass,
    /// `inf_xi |p(xi) - g|`.
    pub c_g: f64,
    /// Frequency with `p(xi_g) = g` for pointwise resonance.
    pub xi_g: Option<f64>,
}

pub fn classify_gauge(spec: &NonlinearitySpec, sym: &DispersionSymbol) -> GaugeClass {
    let g = spec.gauge();
    let n = 4000;
    let mut c = (sym.p(0.0) - g).abs();
    for i in 0..=n {
        let xi = 10f64.powf(-4.0 + 8.0 * i as f64 / n as f64);
        c = c.min((sym.p(xi) - g).abs());
    }
    c = c.min((g - 1.0).abs());
    let class = if g == 1.0 {
        ResonanceClass::Complete
    } else if g == 0.0 {
        ResonanceClass::Transitional
    } else if g > 0.0 && g < 1.0 {
        ResonanceClass::Pointwise
    } else {
        ResonanceClass::NonResonant
    };
    let xi_g = (class == ResonanceClass::Pointwise).then(|| {
        let mut hi = 1.0;
        while sym.p(hi) < g && hi < 1e12 {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if sym.p(mid) < g {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    });
    let c_g = if class == ResonanceClass::Pointwise { 0.0 } else { c };
    GaugeClass { g, class, c_g, xi_g }
}

/// Weight `Lambda(xi) = (1 + xi^2)^{-rho/2}` of the kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelWeight {
    pub rho: f64,
}

impl Default for KernelWeight {
    fn default() -> Self {
        Self { rho: 0.0 }
    }
}

impl KernelWeight {
    pub fn eval(&self, xi: f64) -> f64 {
        (1.0 + xi * xi).powf(-0.5 * self.rho)
    }
}

fn cis(ph: f64) -> C64 {
    C64::new(ph.cos(), ph.sin())
}

/// `1 - p(xi)`, switching to `(-ell/6) |xi|^{-q}` where the difference loses precision.
fn one_minus_p(sym: &DispersionSymbol, xi: f64) -> f64 {
    let a = xi.abs();
    if a < 1e4 {
        1.0 - sym.p(a)
    } else {
        -sym.params.ell / 6.0 * a.powf(-sym.params.q)
    }
}

/// `K_tau(y) = int exp(-i y xi) (exp(i tau (p(xi) - 1)) - 1) Lambda(xi) d xi`.
///
/// On `[0, xi_1]` with `xi_1 = 4 sqrt(tau)` the integrand is taken whole. Beyond, the
/// `y = 0` tail is mapped to `v = 1/xi` on `(0, 1/xi_1]`; otherwise it runs to a cut
/// `A` and is closed by two integrations by parts.
#[allow(non_snake_case)]
pub fn kernel_K(sym: &DispersionSymbol, tau: f64, y: f64, weight: &KernelWeight, tol: f64) -> Result<C64> {
    if !(weight.rho >= 0.0) {
        return Err(Error::Input(format!(
            "kernel weight exponent rho = {} is incompatible with the tail truncation",
            weight.rho
        )));
    }
    if tau == 0.0 {
        return Ok(C64::new(0.0, 0.0));
    }
    let opts = QuadOptions {
        tol,
        max_levels: 10,
        ..QuadOptions::default()
    };
    let xi1 = 4.0 * tau.abs().sqrt().max(1.0);
    let theta = |xi: f64| -tau * one_minus_p(sym, xi);
    let lam = |xi: f64| weight.eval(xi);
    let head_amp = |xi: f64| (C64::new(1.0, 0.0) - cis(-theta(xi))) * (2.0 * (y * xi).cos() * lam(xi));
    let head = integrate_osc_1d(
        &Oscillatory1D {
            amplitude: &head_amp,
            phase: &theta,
            h: 1.0,
            lo: 0.0,
            hi: xi1,
        },
        &QuadOptions {
            min_panels: ((y.abs() * xi1 / PI).ceil() as usize).max(1),
            ..opts
        },
    )
    .require("kernel head")?;
    let h = |xi: f64| (cis(theta(xi)) - 1.0) * lam(xi);
    if y == 0.0 {
        let tail_amp = |v: f64| {
            if v == 0.0 {
                return C64::new(0.0, 0.0);
            }
            let xi = 1.0 / v;
            h(xi) * (2.0 / (v * v))
        };
        let zero = |_: f64| 0.0;
        let tail = integrate_osc_1d(
            &Oscillatory1D {
                amplitude: &tail_amp,
                phase: &zero,
                h: 1.0,
                lo: 0.0,
                hi: 1.0 / xi1,
            },
            &QuadOptions { min_panels: 8, ..opts },
        )
        .require("kernel tail")?;
        return Ok(head + tail);
    }
    let ya = y.abs();
    let cut = (6.0 * tau.abs() / (tol * ya.powi(3))).powf(0.25).max(2.0 * xi1);
    let mut total = head;
    for sg in [1.0, -1.0] {
        let kappa = -sg * ya;
        let phase = move |xi: f64| kappa * xi;
        let body = integrate_osc_1d(
            &Oscillatory1D {
                amplitude: &h,
                phase: &phase,
                h: 1.0,
                lo: xi1,
                hi: cut,
            },
            &opts,
        )
        .require("kernel body")?;
        let d = 1e-4 * cut;
        let h0 = h(cut);
        let h1 = (h(cut + d) - h(cut - d)) / (2.0 * d);
        let ik = C64::new(0.0, kappa);
        let tail = cis(kappa * cut) * (-h0 / ik + h1 / (ik * ik));
        total += body + tail;
    }
    Ok(total)
}

/// Controls for [`picard_W`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    /// Uniform slices of `[T_win, 2 T_win]` for the cubic Filon rule.
    pub s_intervals: usize,
    /// Relative spectral mass allowed in the outer sixteenths of the product band.
    pub alias_tol: f64,
    /// Also evaluate the local part pointwise from the linear field.
    pub compute_local: bool,
    /// Largest admissible product grid.
    pub max_points: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            s_intervals: 128,
            alias_tol: 1e-6,
            compute_local: false,
            max_points: 1 << 21,
        }
    }
}

/// First Picard iterate on a `(T, z)` tensor grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PicardResult {
    /// `W(T, z)` in `T`-major order.
    pub w: FieldSample,
    /// Local part `W_l` from the spectral accumulation.
    pub local_spectral: Vec<C64>,
    /// `W_nl = W - W_l`.
    pub nonlocal: Vec<C64>,
    /// `W_l` evaluated pointwise, when requested.
    pub local_direct: Option<Vec<C64>>,
    /// `(T, sup_x |W(T, x)|)` over the periodic box.
    pub sup_abs: Vec<(f64, f64)>,
    pub grid_points: usize,
    pub edge_mass: f64,
}

/// Frequency beyond which the transform of `chi` stays below `1e-9` of its mass.
fn cutoff_transform_reach() -> f64 {
    static REACH: OnceLock<f64> = OnceLock::new();
    *REACH.get_or_init(|| {
        let chi = CutoffSpec::default();
        let gl = GaussLegendre::cached(24);
        let hat = |eta: f64| -> f64 {
            let n = 64;
            (0..n)
                .map(|p| {
                    let a = p as f64 / n as f64;
                    gl.integrate(a, a + 1.0 / n as f64, |x| C64::new(2.0 * chi.value(x) * (x * eta).cos(), 0.0))
                        .re
                })
                .sum()
        };
        let mass = hat(0.0);
        let mut last = 0.0;
        let mut eta = 0.0;
        while eta < 2000.0 {
            if hat(eta).abs() > 1e-9 * mass {
                last = eta;
            }
            eta += 0.5;
        }
        last + 1.0
    })
}

fn check_time_grid(tt: f64, s0: f64, ds: f64, n: usize) -> Result<usize> {
    if tt <= s0 {
        return Ok(0);
    }
    if tt >= s0 + ds * n as f64 {
        return Ok(n);
    }
    let i = ((tt - s0) / ds).round();
    if ((tt - s0) / ds - i).abs() > 1e-9 {
        return Err(Error::Input(format!(
            "T = {tt} is not a node of the {n}-slice grid on [{s0}, {}]",
            s0 + ds * n as f64
        )));
    }
    Ok(i as usize)
}

/// `W = U^(1) - U^(0)` at the tensor grid `tts x zs`.
///
/// Works with the transform in `x = eps z`: `G_hat(s, eta)` is formed per slice
/// `s_i = T_win + i ds` by FFT products, and
/// `W_hat(T, eta) = eps^{nu+j1+j2-2} exp(i T (p(eps eta) - 1)/eps^2)
///     int_{T_win}^{min(T, 2 T_win)} exp(i s (g - p(eps eta))/eps^2) G_hat(s, eta) ds`
/// by the cubic Filon rule with the exponential factored out exactly.
#[allow(non_snake_case)]
pub fn picard_W(
    field: &LinearField,
    sym: &DispersionSymbol,
    spec: &NonlinearitySpec,
    tts: &[f64],
    zs: &[f64],
    opts: &PicardOptions,
) -> Result<PicardResult> {
    spec.validate()?;
    let eps = field.eps;
    let n = opts.s_intervals;
    if n < 4 {
        return Err(Error::Input("need at least four time slices".into()));
    }
    let s0 = spec.t_win;
    let ds = spec.t_win / n as f64;
    if s0 / eps < field.source_end * (1.0 - 1e-12) {
        return Err(Error::Input(format!(
            "nonlinear window starts at t = {} before the source switches off at t = {}",
            s0 / eps,
            field.source_end
        )));
    }
    let stops: Vec<usize> = tts.iter().map(|&t| check_time_grid(t, s0, ds, n)).collect::<Result<_>>()?;

    // Product band and grid.
    let l = field.half_length;
    let d = PI / l;
    let bmin = field.modes.iter().map(|m| m.grid.eta0).fold(f64::INFINITY, f64::min);
    let bmax = field.modes.iter().map(|m| m.grid.hi()).fold(f64::NEG_INFINITY, f64::max);
    let (j1, j2) = (spec.j1 as f64, spec.j2 as f64);
    let rad = spec.r * eps.powf(spec.iota);
    let margin = cutoff_transform_reach() / rad;
    let lo = j1 * bmin - j2 * bmax - margin;
    let hi = j1 * bmax - j2 * bmin + margin;
    let m = (((hi - lo) / d).ceil() as usize).next_power_of_two();
    if m > opts.max_points {
        return Err(Error::Input(format!("product grid of {m} points exceeds the cap {}", opts.max_points)));
    }
    let grid = FourierGrid {
        half_length: l,
        eta0: lo,
        n: m,
    };
    let xs = field.x_grid(m);
    let chi = CutoffSpec::default();
    let cut: Vec<f64> = xs.iter().map(|x| chi.value(x / rad)).collect();
    let active: Vec<usize> = (0..m).filter(|&j| cut[j] != 0.0).collect();

    let mut planner = FftPlanner::<f64>::new();
    let inv = planner.plan_fft_inverse(m);
    let fwd = planner.plan_fft_forward(m);

    let g = spec.gauge();
    let e2 = eps * eps;
    let ps: Vec<f64> = (0..m).map(|i| sym.p(eps * grid.eta(i))).collect();
    let omegas: Vec<f64> = ps.iter().map(|p| (g - p) / e2).collect();
    let interior: Vec<[C64; 4]> = omegas.par_iter().map(|w| FilonWeights::new(w * ds).interior).collect();
    let omega_l = (g - 1.0) / e2;
    let wl = FilonWeights::new(omega_l * ds);

    // Rescaled source slice `G_hat(s_i, .)`; `U = eps^{-1} exp(-i s/eps^2) u(s/eps)`.
    let slice = |i: usize| -> Result<(Vec<C64>, f64)> {
        let s = s0 + ds * i as f64;
        let t = s / eps;
        let mut u = vec![C64::new(0.0, 0.0); m];
        for mode in &field.modes {
            let v = spectrum_to_grid(&mode.grid, &field.spectrum(mode.m, t)?, m, inv.as_ref())?;
            for (a, b) in u.iter_mut().zip(v) {
                *a += b;
            }
        }
        let tc = chi.value(3.0 - 2.0 * s / s0);
        let rot = cis(-s / e2) / eps;
        let mut prod = vec![C64::new(0.0, 0.0); m];
        if tc != 0.0 {
            for &j in &active {
                let uu = u[j] * rot;
                prod[j] = uu.powu(spec.j1) * uu.conj().powu(spec.j2) * (tc * cut[j]);
            }
        }
        let spec_hat = grid_to_spectrum(&prod, l, lo, fwd.as_ref());
        let total: f64 = spec_hat.iter().map(|v| v.norm()).sum();
        let e = m / 16;
        let edge: f64 = spec_hat[..e].iter().chain(&spec_hat[m - e..]).map(|v| v.norm()).sum();
        let mass = if total > 0.0 { edge / total } else { 0.0 };
        Ok((spec_hat, mass))
    };

    let nt = tts.len();
    let mut acc = vec![vec![C64::new(0.0, 0.0); m]; nt];
    let mut acc_l = vec![vec![C64::new(0.0, 0.0); m]; nt];
    let mut ring: Vec<Vec<C64>> = Vec::with_capacity(4);
    let mut edge_mass: f64 = 0.0;
    for k in 0..=n {
        let (sl, mass) = slice(k)?;
        edge_mass = edge_mass.max(mass);
        if ring.len() == 4 {
            ring.remove(0);
        }
        ring.push(sl);
        // Panels completed by slice `k`, with their first node index and weight kind.
        let mut panels: Vec<(usize, usize, u8)> = Vec::new();
        if k == 3 {
            panels.push((0, 0, 0));
        }
        if k >= 3 && k - 2 >= 1 && k - 2 <= n - 2 {
            panels.push((k - 2, k - 3, 1));
        }
        if k == n {
            panels.push((n - 1, n - 3, 2));
        }
        let first_in_ring = k + 1 - ring.len();
        for (j, base, kind) in panels {
            let sj = s0 + ds * j as f64;
            let rows: Vec<&Vec<C64>> = (0..4).map(|q| &ring[base + q - first_in_ring]).collect();
            let targets: Vec<usize> = (0..nt).filter(|&ti| stops[ti] > j).collect();
            if targets.is_empty() {
                continue;
            }
            let wlk = match kind {
                0 => wl.first,
                1 => wl.interior,
                _ => wl.last,
            };
            let loc_base = cis(omega_l * sj) * ds;
            let contrib: Vec<(C64, C64)> = (0..m)
                .into_par_iter()
                .map(|i| {
                    let w = match kind {
                        1 => interior[i],
                        0 => FilonWeights::new(omegas[i] * ds).first,
                        _ => FilonWeights::new(omegas[i] * ds).last,
                    };
                    let mut a = C64::new(0.0, 0.0);
                    let mut b = C64::new(0.0, 0.0);
                    for q in 0..4 {
                        a += w[q] * rows[q][i];
                        b += wlk[q] * rows[q][i];
                    }
                    (a * cis(omegas[i] * sj) * ds, b * loc_base)
                })
                .collect();
            for ti in targets {
                for (i, (a, b)) in contrib.iter().enumerate() {
                    acc[ti][i] += a;
                    acc_l[ti][i] += b;
                }
            }
        }
    }
    if edge_mass > opts.alias_tol {
        return Err(Error::Aliasing {
            mass: edge_mass,
            tol: opts.alias_tol,
        });
    }

    let scale = spec.lambda() * eps.powi(spec.eps_power());
    let mut values = Vec::with_capacity(nt * zs.len());
    let mut local = Vec::with_capacity(nt * zs.len());
    let mut sup_abs = Vec::with_capacity(nt);
    let mut points = Vec::with_capacity(nt * zs.len());
    for (ti, &tt) in tts.iter().enumerate() {
        let what: Vec<C64> = acc[ti]
            .par_iter()
            .zip(&ps)
            .map(|(a, p)| a * cis(tt * (p - 1.0) / e2) * scale)
            .collect();
        let whl: Vec<C64> = acc_l[ti].iter().map(|a| a * scale).collect();
        let on_grid = spectrum_to_grid(&grid, &what, m, inv.as_ref())?;
        sup_abs.push((tt, on_grid.iter().map(|v| v.norm()).fold(0.0, f64::max)));
        for &z in zs {
            let x = eps * z;
            let eval = |h: &[C64]| -> C64 {
                let mut k = KahanC64::new();
                let step = cis(x * d);
                let mut e = cis(x * lo);
                for (i, v) in h.iter().enumerate() {
                    if i % 1024 == 0 {
                        e = cis(x * grid.eta(i));
                    }
                    k.add(v * e);
                    e *= step;
                }
                k.value() * (d / TAU)
            };
            points.push((tt, z));
            values.push(eval(&what));
            local.push(eval(&whl));
        }
    }
    let nonlocal: Vec<C64> = values.iter().zip(&local).map(|(a, b)| a - b).collect();

    let local_direct = if opts.compute_local {
        let mut out = Vec::with_capacity(points.len());
        for &stop in &stops {
            for &z in zs {
                let x = eps * z;
                let c = chi.value(x / rad);
                if stop == 0 || c == 0.0 {
                    out.push(C64::new(0.0, 0.0));
                    continue;
                }
                // Same stencils as the streamed rule: cumulative over the full window.
                let f: Vec<C64> = (0..=n)
                    .into_par_iter()
                    .map(|i| {
                        let s = s0 + ds * i as f64;
                        let uu = field.u_at(s / eps, x)? * cis(-s / e2) / eps;
                        Ok(uu.powu(spec.j1) * uu.conj().powu(spec.j2) * (chi.value(3.0 - 2.0 * s / s0) * c))
                    })
                    .collect::<Result<_>>()?;
                out.push(filon_cumulative(&f, s0, ds, omega_l)[stop] * scale);
            }
        }
        Some(out)
    } else {
        None
    };

    let w = FieldSample {
        eps,
        j: 1,
        solver: SolverKind::Oracle,
        points,
        values,
        config_hash: String::new(),
    };
    w.validate()?;
    Ok(PicardResult {
        w,
        local_spectral: local,
        nonlocal,
        local_direct,
        sup_abs,
        grid_points: m,
        edge_mass,
    })
}

/// `psi_k(t, x) = (-1)^k gamma cos s_k + (1 - p(k pi + s_k))(k pi + s_k - t) - (k pi + s_k) x`
/// and `d_x psi_k = (h_k - x) d_x s_k - (k pi + s_k)` with `d_x s_k = 1 / d_s h_k`.
fn psi_and_slope(sym: &DispersionSymbol, gamma: f64, cp: &CriticalPoint) -> (f64, f64) {
    let (k, t, s) = (cp.k, cp.t, cp.s);
    let xi = k as f64 * PI + s;
    let sg = if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    let psi = sg * gamma * s.cos() + (1.0 - sym.p(xi)) * (xi - t);
    let hk = crate::wavepackets::h_k(sym, gamma, k, t, s);
    let slope = hk / dh_k(sym, gamma, k, t, s) - xi;
    (psi, slope)
}

fn critical_point_at_origin(sym: &DispersionSymbol, gamma: f64, k: i64, t: f64) -> Result<CriticalPoint> {
    let cp = find_critical_point(sym, gamma, k, t, 0.0)?;
    if !cp.exists {
        return Err(Error::MissingCriticalPoint { k, t, x: 0.0 });
    }
    Ok(cp)
}

/// Phases `(p0, p1)` of the bilinear term `(k1, k2)` at time `t` and `x = 0`.
pub fn taylor_phases_p01(sym: &DispersionSymbol, gamma: f64, k1: i64, k2: i64, t: f64) -> Result<(f64, f64)> {
    let (a0, a1) = psi_and_slope(sym, gamma, &critical_point_at_origin(sym, gamma, k1, t)?);
    let (b0, b1) = psi_and_slope(sym, gamma, &critical_point_at_origin(sym, gamma, k2, t)?);
    Ok((a0 + b0, a1 + b1))
}

/// Admissible window for `beta` given `(q, iota)`.
pub fn beta_window(q: f64, iota: f64) -> Result<(f64, f64)> {
    let iota_minus = (13.0 - 89f64.sqrt()) / 8.0;
    if !(iota > iota_minus && iota <= 1.0) {
        return Err(Error::Config {
            path: "nonlinearity.iota".into(),
            msg: format!("the bilinear representation needs iota in ({iota_minus:.6}, 1], got {iota}"),
        });
    }
    let lo = if iota <= 0.5 {
        (3.0 * iota + (3.0 / iota) * (1.0 - 2.0 * iota)) / (q + 1.0)
    } else {
        (1.0 + iota) / (q + 1.0)
    };
    let hi = (3.0 + iota) / 5.0;
    if lo >= hi {
        return Err(Error::Config {
            path: "nonlinearity.beta".into(),
            msg: format!("empty window ({lo}, {hi}) for q = {q}, iota = {iota}"),
        });
    }
    Ok((lo, hi))
}

/// Midpoint of [`beta_window`].
pub fn default_beta(q: f64, iota: f64) -> Result<f64> {
    let (lo, hi) = beta_window(q, iota)?;
    Ok(0.5 * (lo + hi))
}

/// Retained bilinear term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilinearPacketTerm {
    pub k1: i64,
    pub k2: i64,
    pub value: C64,
}

/// Packet data at one time node.
struct NodePackets {
    s: f64,
    weight: f64,
    /// `(psi_k, d_x psi_k, b_k)` per retained `k`, absent without a critical point at `x = 0`.
    rows: Vec<Option<(f64, f64, C64)>>,
}

/// Bilinear packet representation of `W(T, z)` for the completely resonant quadratic
/// term: the sum over `k1 + k2 > c eps^{-beta}` of
/// `eps^2 exp(-2 i gamma/eps) int chi(3 - 2s/T_win) exp(i p0/eps) exp(i z p1)
///     exp(i (T - s)(p(p1) - 1)/eps^2) b_k1 b_k2 ds` at `t = s/eps`.
/// Returns the total and the per-pair terms in lexicographic order.
#[allow(non_snake_case)]
pub fn bilinear_W(
    eps: f64,
    sym: &DispersionSymbol,
    src: &Source,
    spec: &NonlinearitySpec,
    beta: f64,
    tt: f64,
    z: f64,
    s_panels: usize,
) -> Result<(C64, Vec<BilinearPacketTerm>)> {
    let (blo, bhi) = beta_window(sym.params.q, spec.iota)?;
    if !(beta > blo && beta < bhi) {
        return Err(Error::Config {
            path: "nonlinearity.beta".into(),
            msg: format!("beta = {beta} outside ({blo}, {bhi})"),
        });
    }
    let gamma = src.gamma();
    let sets = PacketIndexSets::new(eps, sym, src);
    let ks: Vec<i64> = sets.all().filter(|&k| sets.in_ks(k) && source_active(eps, src, k)).collect();
    let a = spec.t_win;
    let b = tt.min(2.0 * spec.t_win);
    if b <= a {
        return Ok((C64::new(0.0, 0.0), Vec::new()));
    }
    let gl = GaussLegendre::cached(16);
    let chi = CutoffSpec::default();
    let h = (b - a) / s_panels as f64;
    let mut nodes = Vec::new();
    for p in 0..s_panels {
        for (x, w) in gl.nodes.iter().zip(&gl.weights) {
            let s = a + h * p as f64 + 0.5 * h * (x + 1.0);
            let wt = 0.5 * h * w * chi.value(3.0 - 2.0 * s / spec.t_win);
            if wt != 0.0 {
                nodes.push((s, wt));
            }
        }
    }
    let data: Vec<NodePackets> = nodes
        .par_iter()
        .map(|&(s, weight)| {
            let t = s / eps;
            let mut rows = Vec::with_capacity(ks.len());
            for &k in &ks {
                let cp = find_critical_point(sym, gamma, k, t, 0.0)?;
                if !cp.exists {
                    rows.push(None);
                    continue;
                }
                let (psi, slope) = psi_and_slope(sym, gamma, &cp);
                let wp = packet_u_k(eps, sym, src, &cp)?;
                rows.push(Some((psi, slope, wp.b)));
            }
            Ok(NodePackets { s, weight, rows })
        })
        .collect::<Result<_>>()?;
    let thresh = sets.c * eps.powf(-beta);
    let e2 = eps * eps;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i1, &k1) in ks.iter().enumerate() {
        for (i2, &k2) in ks.iter().enumerate() {
            if (k1 + k2) as f64 > thresh {
                pairs.push((i1, i2));
            }
        }
    }
    let pref = cis(-2.0 * gamma / eps) * e2 * spec.lambda() * eps.powi(spec.eps_power());
    let terms: Vec<BilinearPacketTerm> = pairs
        .par_iter()
        .map(|&(i1, i2)| {
            let mut acc = KahanC64::new();
            for nd in &data {
                if let (Some(r1), Some(r2)) = (nd.rows[i1], nd.rows[i2]) {
                    let p0 = r1.0 + r2.0;
                    let p1 = r1.1 + r2.1;
                    let ph = p0 / eps + z * p1 + (tt - nd.s) * (sym.p(p1) - 1.0) / e2;
                    acc.add(cis(ph) * r1.2 * r2.2 * nd.weight);
                }
            }
            BilinearPacketTerm {
                k1: ks[i1],
                k2: ks[i2],
                value: acc.value() * pref,
            }
        })
        .collect();
    let mut total = KahanC64::new();
    for t in &terms {
        total.add(t.value);
    }
    Ok((total.value(), terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbols::linear_fit;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn field_50() -> &'static (DispersionSymbol, LinearField) {
        static F: OnceLock<(DispersionSymbol, LinearField)> = OnceLock::new();
        F.get_or_init(|| {
            let sym = DispersionSymbol::model();
            let src = Source::default_run();
            let field = LinearField::emitted(1.0 / 50.0, &sym, &src, &Default::default()).unwrap();
            (sym, field)
        })
    }

    fn spec(j1: u32, j2: u32, omega: f64) -> NonlinearitySpec {
        NonlinearitySpec {
            j1,
            j2,
            omega,
            ..NonlinearitySpec::default()
        }
    }

    #[test]
    fn gauge_examples() {
        let sym = DispersionSymbol::model();
        let g2 = classify_gauge(&spec(2, 0, 0.0), &sym);
        assert_eq!(g2.class, ResonanceClass::NonResonant);
        assert_relative_eq!(g2.c_g, 1.0, epsilon = 1e-12);
        assert_eq!(classify_gauge(&spec(1, 1, 0.0), &sym).class, ResonanceClass::Transitional);
        let g1 = classify_gauge(&spec(2, 0, -1.0), &sym);
        assert_eq!(g1.class, ResonanceClass::Complete);
        assert_eq!(g1.c_g, 0.0);
        let gp = classify_gauge(&spec(2, 0, -1.5), &sym);
        assert_eq!(gp.class, ResonanceClass::Pointwise);
        assert_relative_eq!(sym.p(gp.xi_g.unwrap()), 0.5, epsilon = 1e-12);
        let gn = classify_gauge(&spec(1, 1, -0.5), &sym);
        assert_relative_eq!(gn.c_g, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn spec_validation_names_fields() {
        let bad = NonlinearitySpec { iota: 1.5, ..NonlinearitySpec::default() };
        match bad.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "nonlinearity.iota"),
            other => panic!("{other:?}"),
        }
        let low = NonlinearitySpec { nu: -1, ..NonlinearitySpec::default() };
        assert!(low.validate().is_err());
    }

    #[test]
    fn beta_window_examples() {
        let (lo, hi) = beta_window(2.0, 1.0).unwrap();
        assert_relative_eq!(lo, 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(hi, 0.8, epsilon = 1e-15);
        let (lo, hi) = beta_window(2.0, 0.6).unwrap();
        assert_relative_eq!(lo, 1.6 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(hi, 0.72, epsilon = 1e-15);
        assert_relative_eq!(default_beta(2.0, 1.0).unwrap(), 11.0 / 15.0, epsilon = 1e-15);
        assert!(beta_window(2.0, 0.3).is_err());
    }

    /// `K_tau(0)` for the model symbol after `xi = tan(theta)`:
    /// `2 int_0^{pi/2} (exp(-i tau cos^2) - 1) / cos^2 d theta`.
    fn kernel_oracle(tau: f64) -> C64 {
        let gl = GaussLegendre::cached(20);
        let n = 4000;
        let h = 0.5 * PI / n as f64;
        let mut acc = KahanC64::new();
        for k in 0..n {
            acc.add(gl.integrate(h * k as f64, h * (k + 1) as f64, |th| {
                let c2 = th.cos().powi(2);
                (cis(-tau * c2) - 1.0) * (2.0 / c2)
            }));
        }
        acc.value()
    }

    #[test]
    fn kernel_zero_time_vanishes() {
        let sym = DispersionSymbol::model();
        for y in [0.0, 0.3, 5.0] {
            assert_eq!(kernel_K(&sym, 0.0, y, &KernelWeight::default(), 1e-10).unwrap(), C64::new(0.0, 0.0));
        }
    }

    #[test]
    fn kernel_matches_substitution_oracle() {
        let sym = DispersionSymbol::model();
        for tau in [0.5, 30.0, 1000.0] {
            let k = kernel_K(&sym, tau, 0.0, &KernelWeight::default(), 1e-11).unwrap();
            let o = kernel_oracle(tau);
            assert!((k - o).norm() <= 1e-7 * o.norm(), "tau {tau}: {k} vs {o}");
        }
    }

    #[test]
    fn kernel_small_time_is_linear() {
        let sym = DispersionSymbol::model();
        let taus = [1e-3, 1e-2, 1e-1];
        let xs: Vec<f64> = taus.iter().map(|t: &f64| t.ln()).collect();
        let ys: Vec<f64> = taus
            .iter()
            .map(|&t| kernel_K(&sym, t, 0.5, &KernelWeight::default(), 1e-10).unwrap().norm().ln())
            .collect();
        let (slope, _, _) = linear_fit(&xs, &ys);
        assert!((slope - 1.0).abs() < 0.02, "slope {slope}");
    }

    #[test]
    fn kernel_square_root_law() {
        let sym = DispersionSymbol::model();
        let r: Vec<f64> = [1e2, 1e3, 1e4]
            .iter()
            .map(|&t| kernel_K(&sym, t, 0.0, &KernelWeight::default(), 1e-9).unwrap().norm() / t.sqrt())
            .collect();
        let spread = r.iter().cloned().fold(0.0, f64::max) / r.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
        assert!(spread < 0.01, "{r:?}");
    }

    #[test]
    fn kernel_rejects_growing_weight() {
        let sym = DispersionSymbol::model();
        assert!(kernel_K(&sym, 1.0, 0.0, &KernelWeight { rho: -1.0 }, 1e-8).is_err());
    }

    #[test]
    fn kernel_weight_decays_the_kernel() {
        let sym = DispersionSymbol::model();
        let a = kernel_K(&sym, 100.0, 0.0, &KernelWeight::default(), 1e-9).unwrap().norm();
        let b = kernel_K(&sym, 100.0, 0.0, &KernelWeight { rho: 2.0 }, 1e-9).unwrap().norm();
        assert!(b < a);
    }

    #[test]
    fn picard_is_linear_in_lambda_and_zero_before_window() {
        let (sym, field) = field_50();
        let opts = PicardOptions {
            s_intervals: 32,
            ..PicardOptions::default()
        };
        let base = spec(2, 0, -1.0);
        let scaled = NonlinearitySpec {
            lambda_re: 2.0,
            lambda_im: -0.5,
            ..base
        };
        let a = picard_W(field, sym, &base, &[1.0, 1.5], &[0.0, 0.5], &opts).unwrap();
        let b = picard_W(field, sym, &scaled, &[1.0, 1.5], &[0.0, 0.5], &opts).unwrap();
        for (x, y) in a.w.values.iter().zip(&b.w.values) {
            assert!((x * C64::new(2.0, -0.5) - y).norm() <= 1e-12 * y.norm().max(1e-300));
        }
        assert_eq!(a.w.values[0], C64::new(0.0, 0.0));
        assert_eq!(a.w.values[1], C64::new(0.0, 0.0));
        assert!(a.w.values[2].norm() > 1e-3);
    }

    #[test]
    fn local_and_nonlocal_parts_recombine() {
        let (sym, field) = field_50();
        let opts = PicardOptions {
            s_intervals: 32,
            compute_local: true,
            ..PicardOptions::default()
        };
        let r = picard_W(field, sym, &spec(2, 0, -1.0), &[1.5], &[0.0, 0.5, 2.0], &opts).unwrap();
        let direct = r.local_direct.unwrap();
        for i in 0..3 {
            let sum = direct[i] + r.nonlocal[i];
            assert!((sum - r.w.values[i]).norm() <= 1e-8 * r.w.values[0].norm(), "{i}");
        }
    }

    #[test]
    fn picard_refines_under_slice_doubling() {
        let (sym, field) = field_50();
        let run = |n| {
            let opts = PicardOptions {
                s_intervals: n,
                ..PicardOptions::default()
            };
            picard_W(field, sym, &spec(2, 0, -1.0), &[1.5], &[0.0], &opts).unwrap().w.values[0]
        };
        let (a, b) = (run(64), run(128));
        assert!((a - b).norm() <= 1e-4 * b.norm(), "{a} vs {b}");
    }

    #[test]
    fn picard_rejects_off_grid_times() {
        let (sym, field) = field_50();
        let opts = PicardOptions {
            s_intervals: 32,
            ..PicardOptions::default()
        };
        assert!(picard_W(field, sym, &spec(2, 0, -1.0), &[1.01], &[0.0], &opts).is_err());
    }

    #[test]
    fn slope_phase_approaches_lattice_frequency() {
        let sym = DispersionSymbol::model();
        let beta = 0.75;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for eps in [1e-3, 1e-4, 1e-5] {
            let k = 2 * ((eps as f64).powf(-beta) / 2.0).round() as i64;
            let (_, p1) = taylor_phases_p01(&sym, 0.2, k, k, 1.5 / eps).unwrap();
            xs.push(f64::ln(eps));
            ys.push((p1 + 2.0 * k as f64 * PI).abs().ln());
        }
        let (slope, _, _) = linear_fit(&xs, &ys);
        assert!((slope - (3.0 * beta - 1.0)).abs() < 0.05, "slope {slope}");
    }

    #[test]
    fn even_pairs_carry_twice_gamma() {
        let sym = DispersionSymbol::model();
        let eps = 1e-4;
        let (p0, _) = taylor_phases_p01(&sym, 0.2, 1000, 1002, 1.5 / eps).unwrap();
        assert!((p0 - 0.4).abs() < 0.01, "{p0}");
        let (q0, _) = taylor_phases_p01(&sym, 0.2, 1001, 1002, 1.5 / eps).unwrap();
        assert!(q0.abs() < 0.01, "{q0}");
    }

    #[test]
    fn bilinear_terms_are_order_eps_squared() {
        let sym = DispersionSymbol::model();
        let src = Source::default_run();
        let sp = spec(2, 0, -1.0);
        let beta = default_beta(2.0, sp.iota).unwrap();
        let worst = |eps: f64| {
            let (_, terms) = bilinear_W(eps, &sym, &src, &sp, beta, 1.5, 0.0, 8).unwrap();
            assert!(!terms.is_empty());
            terms.iter().map(|t| t.value.norm()).fold(0.0, f64::max) / (eps * eps)
        };
        let (a, b) = (worst(1.0 / 50.0), worst(1.0 / 100.0));
        assert!(a < 20.0 && b < 20.0 && (a / b - 1.0).abs() < 0.2, "{a} {b}");
        assert!(bilinear_W(1.0 / 50.0, &sym, &src, &sp, 0.9, 1.5, 0.0, 8).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn phases_are_symmetric(a in 0i64..200, b in 0i64..200) {
            let sym = DispersionSymbol::model();
            let eps = 1e-3;
            let (k1, k2) = (200 + a, 200 + b);
            let x = taylor_phases_p01(&sym, 0.2, k1, k2, 1.5 / eps).unwrap();
            let y = taylor_phases_p01(&sym, 0.2, k2, k1, 1.5 / eps).unwrap();
            prop_assert!((x.0 - y.0).abs() <= 1e-12 && (x.1 - y.1).abs() <= 1e-9);
        }

        #[test]
        fn kernel_conjugates_under_time_reversal(tau in 0.01f64..20.0, y in 0.0f64..3.0) {
            let sym = DispersionSymbol::model();
            let w = KernelWeight::default();
            let a = kernel_K(&sym, tau, y, &w, 1e-10).unwrap();
            let b = kernel_K(&sym, -tau, y, &w, 1e-10).unwrap();
            prop_assert!((a - b.conj()).norm() <= 1e-7 * a.norm().max(1e-12));
        }

        #[test]
        fn gauge_class_follows_interval(g in -3.0f64..3.0) {
            let sym = DispersionSymbol::model();
            let c = classify_gauge(&NonlinearitySpec { omega: g - 2.0, ..NonlinearitySpec::default() }, &sym);
            let inside = c.g > 0.0 && c.g < 1.0;
            prop_assert_eq!(inside, c.class == ResonanceClass::Pointwise);
            if !(0.0..=1.0).contains(&c.g) {
                let d = if c.g < 0.0 { -c.g } else { c.g - 1.0 };
                prop_assert!((c.c_g - d).abs() <= 1e-9);
            }
        }
    }
}
