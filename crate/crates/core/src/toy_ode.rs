//! Toy resonance model: the linear solution, the Picard solution of the filtered
//! nonlinear equation in the slow variable `T = eps t`, and the tan law.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oscquad::{filon_cumulative, integrate_osc_1d, GaussLegendre, KahanC64, Oscillatory1D, QuadOptions};
use crate::sources::{phase_eval, A_eps, A_eps_sq};

/// Parameters of one toy run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub eps: f64,
    pub gamma: f64,
    /// Source harmonic.
    pub n: i32,
    pub lambda_re: f64,
    pub lambda_im: f64,
    pub j1: u32,
    pub j2: u32,
    pub nu: f64,
    pub omega: f64,
    #[serde(rename = "T_end")]
    pub t_end: f64,
    /// Largest phase increment per grid step.
    pub step_phase: f64,
    /// Picard stopping threshold on the sup-difference of successive iterates.
    pub tol: f64,
    pub max_iter: usize,
    /// Guard `|A_eps| T_end` for the completely resonant case.
    pub blowup_guard: f64,
    /// Abort when `|U|` exceeds this bound.
    pub blowup_bound: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            eps: 1.0 / 100.0,
            gamma: 0.2,
            n: 1,
            lambda_re: 1.0,
            lambda_im: 0.0,
            j1: 2,
            j2: 0,
            nu: 0.0,
            omega: -1.0,
            t_end: 1.0,
            step_phase: 0.25,
            tol: 1e-10,
            max_iter: 400,
            blowup_guard: 1.3,
            blowup_bound: 1e3,
        }
    }
}

impl ToyConfig {
    pub fn lambda(&self) -> C64 {
        C64::new(self.lambda_re, self.lambda_im)
    }

    pub fn gauge(&self) -> f64 {
        gauge_of(self.j1, self.j2, self.omega)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: String| {
            Err(Error::Config {
                path: format!("toy.{path}"),
                msg,
            })
        };
        if !(self.gamma > 0.0 && self.gamma < 0.25) {
            return bad("gamma", format!("must lie in (0, 1/4), got {}", self.gamma));
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return bad("eps", format!("must lie in (0, 1], got {}", self.eps));
        }
        if self.lambda() != C64::new(0.0, 0.0) && self.j1 + self.j2 < 2 {
            return bad("j1", "need j1 + j2 >= 2".into());
        }
        if !(self.t_end > 0.0) {
            return bad("T_end", "must be positive".into());
        }
        Ok(())
    }
}

/// `g = omega + j1 - j2`.
pub fn gauge_of(j1: u32, j2: u32, omega: f64) -> f64 {
    omega + j1 as f64 - j2 as f64
}

/// `u_lin(t) = eps^{3/2} e^{it/eps} int_0^t e^{i[n phi(s) - s]/eps} ds` by oscillatory quadrature.
pub fn u_lin_toy(cfg: &ToyConfig, t: f64) -> Result<C64> {
    if t == 0.0 {
        return Ok(C64::new(0.0, 0.0));
    }
    let (g, n) = (cfg.gamma, cfg.n as f64);
    let one = |_: f64| C64::new(1.0, 0.0);
    let ph = move |s: f64| n * phase_eval(g, s, 0.0) - s;
    let f = Oscillatory1D {
        amplitude: &one,
        phase: &ph,
        h: cfg.eps,
        lo: 0.0,
        hi: t,
    };
    let opts = QuadOptions {
        samples: 64 + (t / 2.0) as usize,
        ..QuadOptions::with_tol(1e-12)
    };
    let v = integrate_osc_1d(&f, &opts).require("toy linear solution")?;
    Ok(v * C64::from_polar(cfg.eps.powf(1.5), t / cfg.eps))
}

/// Slow-variable phase of the linear forcing: `(n-1)T/eps^2 + n gamma (cos(T/eps) - 1)/eps`.
fn forcing_phase(cfg: &ToyConfig, tt: f64) -> f64 {
    let e = cfg.eps;
    (cfg.n as f64 - 1.0) * tt / (e * e) + cfg.n as f64 * cfg.gamma * ((tt / e).cos() - 1.0) / e
}

/// Solution samples on the uniform slow-time grid.
#[derive(Clone, Debug)]
pub struct ToyTrajectory {
    pub dt: f64,
    pub u: Vec<C64>,
    pub u_lin: Vec<C64>,
    pub iterations: usize,
    pub final_diff: f64,
}

impl ToyTrajectory {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.u.len()).map(move |j| self.dt * j as f64)
    }

    /// Value at the last grid node (`T_end`).
    pub fn end(&self) -> C64 {
        *self.u.last().unwrap()
    }

    /// Indices of `count + 1` evenly spaced output rows.
    pub fn sample_indices(&self, count: usize) -> Vec<usize> {
        let n = self.u.len() - 1;
        (0..=count).map(|i| (i * n) / count).collect()
    }
}

/// Grid size that keeps every phase increment below `step_phase`.
fn grid_steps(cfg: &ToyConfig) -> usize {
    let e2 = cfg.eps * cfg.eps;
    let rate = ((cfg.n as f64 - 1.0).abs() + (cfg.n as f64).abs() * cfg.gamma) / e2;
    let rate = rate.max(1.0 / cfg.eps);
    let steps = (cfg.t_end * rate / cfg.step_phase).ceil() as usize;
    steps.max(64)
}

/// `U_lin` on the grid by cumulative Gauss-Legendre over each step.
pub fn u_lin_trajectory(cfg: &ToyConfig, steps: usize) -> (f64, Vec<C64>) {
    let dt = cfg.t_end / steps as f64;
    let gl = GaussLegendre::cached(6);
    let scale = cfg.eps.powf(-0.5);
    let mut acc = KahanC64::new();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(C64::new(0.0, 0.0));
    for j in 0..steps {
        let a = dt * j as f64;
        let v = gl.integrate(a, a + dt, |s| {
            let ph = forcing_phase(cfg, s);
            C64::new(ph.cos(), ph.sin())
        });
        acc.add(v * scale);
        out.push(acc.value());
    }
    (dt, out)
}

/// Picard iteration for `U = U_lin + lambda eps^{nu+j1+j2-2} int_0^T e^{i(g-1)s/eps^2} U^{j1} conj(U)^{j2} ds`.
pub fn solve_toy_nonlinear(cfg: &ToyConfig) -> Result<ToyTrajectory> {
    cfg.validate()?;
    let g = cfg.gauge();
    if g == 1.0 && cfg.lambda() != C64::new(0.0, 0.0) {
        let a = A_eps(cfg.gamma, cfg.eps).norm();
        if a * cfg.t_end > cfg.blowup_guard {
            return Err(Error::BlowUp {
                detail: format!(
                    "|A_eps| T_end = {:.4} exceeds the guard {}",
                    a * cfg.t_end,
                    cfg.blowup_guard
                ),
            });
        }
    }
    let steps = grid_steps(cfg);
    let (dt, u_lin) = u_lin_trajectory(cfg, steps);
    let lam = cfg.lambda()
        * cfg
            .eps
            .powf(cfg.nu + cfg.j1 as f64 + cfg.j2 as f64 - 2.0);
    if lam == C64::new(0.0, 0.0) {
        return Ok(ToyTrajectory {
            dt,
            u: u_lin.clone(),
            u_lin,
            iterations: 0,
            final_diff: 0.0,
        });
    }
    let w = (g - 1.0) / (cfg.eps * cfg.eps);
    let mut u = u_lin.clone();
    let mut diff = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let f: Vec<C64> = u
            .iter()
            .map(|z| z.powu(cfg.j1) * z.conj().powu(cfg.j2))
            .collect();
        let integral = filon_cumulative(&f, 0.0, dt, w);
        let next: Vec<C64> = u_lin
            .iter()
            .zip(&integral)
            .map(|(l, i)| l + lam * i)
            .collect();
        diff = next
            .iter()
            .zip(&u)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        let peak = next.iter().map(|z| z.norm()).fold(0.0, f64::max);
        u = next;
        if !peak.is_finite() || peak > cfg.blowup_bound {
            return Err(Error::BlowUp {
                detail: format!("|U| reached {peak:.3e} at Picard iteration {it}"),
            });
        }
        if diff <= cfg.tol {
            return Ok(ToyTrajectory {
                dt,
                u,
                u_lin,
                iterations: it,
                final_diff: diff,
            });
        }
    }
    Err(Error::NonContraction {
        diff,
        iters: cfg.max_iter,
    })
}

/// `A_eps tan(A_eps T)`; even in the choice of square root.
pub fn tan_law(gamma: f64, eps: f64, tt: f64) -> C64 {
    let a = A_eps(gamma, eps);
    a * (a * tt).tan()
}

/// `A_eps^2 T`, the leading resonant linear growth.
pub fn linear_growth(gamma: f64, eps: f64, tt: f64) -> C64 {
    A_eps_sq(gamma, eps) * tt
}
