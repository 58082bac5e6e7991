//! Acceptance suite: one report per criterion, each with a schema-tagged CSV.
//!
//! Criterion 10 reruns criteria 1-9 on fresh contexts under 8-thread and 1-thread
//! pools and compares the CSV bytes after a manifest round trip.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_4, PI};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::asymptotics::{big_u_lattice_asym, nonlinear_limit_profile, CorrelationSign, LimitProfileParams};
use crate::cli::{emit, fit_order, num, read_manifested, CsvTable};
use crate::error::{Error, Result};
use crate::linear_solver::{LinearField, LinearOptions};
use crate::nonlinear::{kernel_K, picard_W, KernelWeight, NonlinearitySpec, PicardOptions};
use crate::sources::{A_eps, A_eps_sq, PhaseParams, ProfileSpec, Source, ZetaSpec};
use crate::symbols::{fit_asymptotics, linear_fit, CutoffSpec, DispersionSymbol};
use crate::toy_ode::{solve_toy_nonlinear, tan_law, ToyConfig};
use crate::wavepackets::{find_critical_point, packet_bruteforce, packet_u_k, sum_packets};

/// Spec ladder before filtering.
pub const LADDER: [f64; 4] = [1.0 / 50.0, 1.0 / 100.0, 1.0 / 200.0, 1.0 / 400.0];
pub const COS_FILTER: f64 = 0.3;
/// Bound on `|A_eps| T` for the resonant toy.
pub const TAN_GUARD: f64 = 1.3;

/// Ladder members with `|cos(gamma/eps - pi/4)| >= COS_FILTER`.
pub fn filtered_ladder(gamma: f64) -> Vec<f64> {
    LADDER.iter().copied().filter(|&e| cos_ok(gamma, e)).collect()
}

fn cos_ok(gamma: f64, eps: f64) -> bool {
    (gamma / eps - FRAC_PI_4).cos().abs() >= COS_FILTER
}

/// Filtered ladder restricted to `|A_eps| T <= TAN_GUARD`, extended by halving
/// below the smallest member until it has three points.
pub fn tan_law_ladder(gamma: f64, tt: f64) -> Vec<f64> {
    let ok = |e: f64| cos_ok(gamma, e) && A_eps(gamma, e).norm() * tt <= TAN_GUARD;
    let mut out: Vec<f64> = LADDER.iter().copied().filter(|&e| ok(e)).collect();
    let mut e = LADDER[LADDER.len() - 1];
    while out.len() < 3 && e > 1e-4 {
        e /= 2.0;
        if ok(e) {
            out.push(e);
        }
    }
    out
}

/// `max_n |U_n(T)| / |U_1(T)|` of the linear toy over the listed harmonics.
pub fn toy_harmonic_ratio(gamma: f64, eps: f64, tt: f64, harmonics: &[i32]) -> Result<f64> {
    let run = |n: i32| -> Result<f64> {
        let cfg = ToyConfig {
            eps,
            gamma,
            n,
            lambda_re: 0.0,
            t_end: tt,
            ..ToyConfig::default()
        };
        Ok(solve_toy_nonlinear(&cfg)?.end().norm())
    };
    let on = run(1)?;
    let mut off = 0.0f64;
    for &n in harmonics.iter().filter(|&&n| n != 1) {
        off = off.max(run(n)?);
    }
    Ok(off / on)
}

#[derive(Clone, Debug)]
pub struct CriterionReport {
    pub id: u32,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    /// Rendered CSV, including the schema line.
    pub csv: Option<String>,
    pub seconds: f64,
}

impl CriterionReport {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {} {}: {} [{:.1} s]",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Shared state of one suite pass: default symbol, source and cached linear fields.
pub struct Context {
    pub sym: DispersionSymbol,
    pub src: Source,
    fields: Mutex<BTreeMap<u64, Arc<LinearField>>>,
}

impl Default for Context {
    fn default() -> Self {
        Self::new()
    }
}

impl Context {
    pub fn new() -> Self {
        Self {
            sym: DispersionSymbol::model(),
            src: Source::default_run(),
            fields: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn field(&self, eps: f64) -> Result<Arc<LinearField>> {
        if let Some(f) = self.fields.lock().expect("field cache poisoned").get(&eps.to_bits()) {
            return Ok(Arc::clone(f));
        }
        let f = Arc::new(LinearField::emitted(eps, &self.sym, &self.src, &LinearOptions::default())?);
        f.check_aliasing()?;
        self.fields
            .lock()
            .expect("field cache poisoned")
            .insert(eps.to_bits(), Arc::clone(&f));
        Ok(f)
    }

    fn gamma(&self) -> f64 {
        self.src.gamma()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
    csv: CsvTable,
}

fn finish(id: u32, name: &'static str, budget_s: f64, started: Instant, out: Result<Outcome>) -> CriterionReport {
    let seconds = started.elapsed().as_secs_f64();
    match out {
        Ok(o) => {
            let slow = seconds > budget_s;
            let csv = o.csv.render().ok();
            let mut detail = o.detail;
            if slow {
                detail.push_str(&format!("; runtime over budget {budget_s} s"));
            }
            CriterionReport {
                id,
                name,
                pass: o.pass && !slow && csv.is_some(),
                detail,
                csv,
                seconds,
            }
        }
        Err(e) => CriterionReport {
            id,
            name,
            pass: false,
            detail: format!("error: {e}"),
            csv: None,
            seconds,
        },
    }
}

fn decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn fmt_series(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn c1_symbol() -> Result<Outcome> {
    let sym = DispersionSymbol::whistler(CutoffSpec::default());
    let fit = fit_asymptotics(&sym, 1e2, 1e4);
    let q_rel = (fit.q_hat - 2.0).abs() / 2.0;
    let l_rel = (fit.ell_hat + 6.0).abs() / 6.0;
    let mut csv = CsvTable::new("accept.symbol", &["q_hat", "ell_hat", "q_rel_err", "ell_rel_err", "rms_residual"]);
    csv.push([fit.q_hat, fit.ell_hat, q_rel, l_rel, fit.rms_residual].map(num));
    Ok(Outcome {
        pass: q_rel <= 0.01 && l_rel <= 0.01 && !fit.degenerate,
        detail: format!("q_hat {:.5}, ell_hat {:.5}", fit.q_hat, fit.ell_hat),
        csv,
    })
}

fn c2_tan_law(ctx: &Context) -> Result<Outcome> {
    let gamma = ctx.gamma();
    let tt = 1.0;
    let ladder = tan_law_ladder(gamma, tt);
    let mut csv = CsvTable::new("accept.tan_law", &["eps", "U_re", "U_im", "tan_re", "tan_im", "abs_error"]);
    let mut series = Vec::new();
    for &eps in &ladder {
        let cfg = ToyConfig {
            eps,
            gamma,
            t_end: tt,
            ..ToyConfig::default()
        };
        let u = solve_toy_nonlinear(&cfg)?.end();
        let tl = tan_law(gamma, eps, tt);
        let err = (u - tl).norm();
        series.push((eps, err));
        csv.push([eps, u.re, u.im, tl.re, tl.im, err].map(num));
    }
    let fit = fit_order(&series)?;
    Ok(Outcome {
        pass: fit.slope >= 0.8,
        detail: format!(
            "eps {} errors {} order {:.3} +- {:.3}",
            fmt_series(&ladder),
            fmt_series(&series.iter().map(|s| s.1).collect::<Vec<_>>()),
            fit.slope,
            fit.half_width
        ),
        csv,
    })
}

fn c3_harmonics(ctx: &Context) -> Result<Outcome> {
    let gamma = ctx.gamma();
    let ladder = filtered_ladder(gamma);
    let harmonics = [-2, -1, 0, 2, 3];
    let mut csv = CsvTable::new("accept.harmonics", &["eps", "ratio"]);
    let mut series = Vec::new();
    for &eps in &ladder {
        let r = toy_harmonic_ratio(gamma, eps, 1.0, &harmonics)?;
        series.push((eps, r));
        csv.push([eps, r].map(num));
    }
    let ratios: Vec<f64> = series.iter().map(|s| s.1).collect();
    let fit = fit_order(&series)?;
    Ok(Outcome {
        pass: decreasing(&ratios) && fit.slope >= 0.4,
        detail: format!("ratios {} order {:.3} +- {:.3}", fmt_series(&ratios), fit.slope, fit.half_width),
        csv,
    })
}

fn c4_packet() -> Result<Outcome> {
    let sym = DispersionSymbol::model();
    // Wide slow-time support so that packet k = 40 is emitted at both eps.
    let profile = ProfileSpec {
        t_cap: 8.0,
        t_lo: 1.0,
        t_width: 1.0,
        ..ProfileSpec::default()
    };
    let src = Source::new(PhaseParams::new(0.2)?, profile, ZetaSpec::default())?;
    let k = 40;
    let t = 1.5 * k as f64 * PI;
    let x = 0.03;
    let cp = find_critical_point(&sym, src.gamma(), k, t, x)?;
    let mut csv = CsvTable::new(
        "accept.packet",
        &["eps", "packet_re", "packet_im", "brute_re", "brute_im", "rel_error", "brute_err_est"],
    );
    let mut rels = Vec::new();
    for eps in [1.0 / 20.0, 1.0 / 40.0] {
        let p = packet_u_k(eps, &sym, &src, &cp)?.value;
        let (bf, res) = packet_bruteforce(eps, &sym, &src, k, t, x, 96, 1e-6);
        if !res.resolved {
            return Err(Error::Quadrature {
                context: format!("brute-force packet at eps = {eps}"),
                value_re: bf.re,
                value_im: bf.im,
                err: res.err_est,
            });
        }
        let rel = (p - bf).norm() / bf.norm();
        rels.push(rel);
        csv.push([eps, p.re, p.im, bf.re, bf.im, rel, res.err_est].map(num));
    }
    Ok(Outcome {
        pass: rels[0] <= 5e-2 && rels[1] < rels[0],
        detail: format!("relative errors {} (limit 5e-2 at 1/20)", fmt_series(&rels)),
        csv,
    })
}

const TS: [f64; 2] = [1.25, 1.5];
const ZS: [f64; 6] = [0.0, 1.0, -1.0, 2.0, -2.0, 0.5];

fn c5_packet_sum(ctx: &Context) -> Result<Outcome> {
    let eps = 1.0 / 100.0;
    let field = ctx.field(eps)?;
    let mut csv = CsvTable::new(
        "accept.packet_sum",
        &["eps", "T", "z", "packets_re", "packets_im", "oracle_re", "oracle_im", "abs_diff"],
    );
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for &tt in &TS {
        for &z in &ZS {
            let p = sum_packets(eps, &ctx.sym, &ctx.src, tt, z)?;
            let o = field.big_u_at(tt, z, None)?;
            let d = (p - o).norm();
            worst = worst.max(d);
            scale = scale.max(o.norm());
            csv.push([eps, tt, z, p.re, p.im, o.re, o.im, d].map(num));
        }
    }
    let rel = worst / scale;
    Ok(Outcome {
        pass: rel <= 2e-2,
        detail: format!("sup |diff| / sup |U| = {rel:.3e} (limit 2e-2)"),
        csv,
    })
}

fn c6_dichotomy(ctx: &Context) -> Result<Outcome> {
    let gamma = ctx.gamma();
    let ladder = filtered_ladder(gamma);
    let tt = 1.25;
    let mut csv = CsvTable::new(
        "accept.dichotomy",
        &["eps", "T", "abs_U_z2_over_A2", "abs_U_z1", "abs_U_z0.5", "lattice_asym_rel_diff"],
    );
    let (mut norm2, mut u1, mut u05) = (Vec::new(), Vec::new(), Vec::new());
    let mut track = f64::NAN;
    for &eps in &ladder {
        let f = ctx.field(eps)?;
        let v2 = f.big_u_at(tt, 2.0, None)?;
        let n2 = v2.norm() / A_eps_sq(gamma, eps).norm();
        let a1 = f.big_u_at(tt, 1.0, None)?.norm();
        let a05 = f.big_u_at(tt, 0.5, None)?.norm();
        let params = LimitProfileParams::new(
            ctx.sym.params.ell,
            ctx.sym.params.q,
            gamma,
            eps,
            1.0,
            ctx.src.profile.clone(),
        )?;
        let asym = big_u_lattice_asym(&params, tt);
        let rel = (v2 - asym).norm() / asym.norm();
        if eps == ladder[ladder.len() - 1] {
            track = rel;
        }
        norm2.push(n2);
        u1.push(a1);
        u05.push(a05);
        csv.push([eps, tt, n2, a1, a05, rel].map(num));
    }
    let lo = norm2.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = norm2.iter().copied().fold(0.0, f64::max);
    let spread = hi / lo - 1.0;
    let checks = [
        ("z=2 spread < 0.5", spread < 0.5),
        ("z=2 tracks lattice asymptotics within 10%", track <= 0.1),
        ("|U(T,1)| decreasing", decreasing(&u1)),
        ("|U(T,0.5)| decreasing", decreasing(&u05)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Ok(Outcome {
        pass: failed.is_empty(),
        detail: format!(
            "z=2 normalized {} spread {:.3}, asym diff {:.3e}; |U(T,1)| {}; |U(T,0.5)| {}; failed: {:?}",
            fmt_series(&norm2),
            spread,
            track,
            fmt_series(&u1),
            fmt_series(&u05),
            failed
        ),
        csv,
    })
}

fn c7_kernel(ctx: &Context) -> Result<Outcome> {
    let taus = [1e2, 1e3, 1e4];
    let w = KernelWeight::default();
    let mut csv = CsvTable::new("accept.kernel", &["tau", "K0_over_sqrt_re", "K0_over_sqrt_im", "abs_K1"]);
    let (mut k0, mut k1) = (Vec::new(), Vec::new());
    for &tau in &taus {
        let a = kernel_K(&ctx.sym, tau, 0.0, &w, 1e-9)? / tau.sqrt();
        let b = kernel_K(&ctx.sym, tau, 1.0, &w, 1e-9)?.norm();
        k0.push(a);
        k1.push(b);
        csv.push([tau, a.re, a.im, b].map(num));
    }
    let lo = k0.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min);
    let spread = k0
        .iter()
        .flat_map(|a| k0.iter().map(move |b| (a - b).norm()))
        .fold(0.0, f64::max)
        / lo;
    let xs: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = k1.iter().map(|v| v.ln()).collect();
    let (slope, _, _) = linear_fit(&xs, &ys);
    Ok(Outcome {
        pass: spread < 0.1 && slope <= 0.25,
        detail: format!("K(0)/sqrt(tau) spread {spread:.3e}; |K(1)| growth exponent {slope:.3}"),
        csv,
    })
}

fn c8_linearizable(ctx: &Context) -> Result<Outcome> {
    let gamma = ctx.gamma();
    let ladder = filtered_ladder(gamma);
    let spec = NonlinearitySpec {
        omega: 0.0,
        iota: 1.0,
        ..NonlinearitySpec::default()
    };
    let mut csv = CsvTable::new("accept.linearizable", &["eps", "T", "sup_abs_W"]);
    let mut series = Vec::new();
    for &eps in &ladder {
        let f = ctx.field(eps)?;
        let res = picard_W(&f, &ctx.sym, &spec, &TS, &[0.0], &PicardOptions::default())?;
        let mut sup = 0.0f64;
        for &(tt, s) in &res.sup_abs {
            csv.push([eps, tt, s].map(num));
            sup = sup.max(s);
        }
        series.push((eps, sup));
    }
    let fit = fit_order(&series)?;
    Ok(Outcome {
        pass: fit.slope >= 0.5,
        detail: format!(
            "sup |W| {} order {:.3} +- {:.3}",
            fmt_series(&series.iter().map(|s| s.1).collect::<Vec<_>>()),
            fit.slope,
            fit.half_width
        ),
        csv,
    })
}

fn c9_resonant(ctx: &Context) -> Result<Outcome> {
    let gamma = ctx.gamma();
    let ladder = filtered_ladder(gamma);
    let ladder = &ladder[ladder.len() - 2..];
    let spec = NonlinearitySpec::default();
    let tt = 1.5;
    let mut csv = CsvTable::new(
        "accept.resonant",
        &[
            "eps", "T", "W0_re", "W0_im", "W1_re", "W1_im", "limit_re", "limit_im", "diff", "diff_minus_sign", "ratio",
        ],
    );
    let (mut diffs, mut minus, mut ratios) = (Vec::new(), Vec::new(), Vec::new());
    for &eps in ladder {
        let f = ctx.field(eps)?;
        let res = picard_W(&f, &ctx.sym, &spec, &[tt], &[0.0, 1.0], &PicardOptions::default())?;
        let (w0, w1) = (res.w.values[0], res.w.values[1]);
        let params = LimitProfileParams::new(
            ctx.sym.params.ell,
            ctx.sym.params.q,
            gamma,
            eps,
            spec.t_win,
            ctx.src.profile.clone(),
        )?;
        let lim = nonlinear_limit_profile(&params, tt, CorrelationSign::Plus)? * spec.lambda();
        let lim_m = nonlinear_limit_profile(&params, tt, CorrelationSign::Minus)? * spec.lambda();
        let d = (w0 - lim).norm();
        let dm = (w0 - lim_m).norm();
        let r = w1.norm() / w0.norm();
        diffs.push(d);
        minus.push(dm);
        ratios.push(r);
        csv.push([eps, tt, w0.re, w0.im, w1.re, w1.im, lim.re, lim.im, d, dm, r].map(num));
    }
    Ok(Outcome {
        pass: decreasing(&diffs) && decreasing(&ratios),
        detail: format!(
            "|W - limit| {} (other correlation sign {}); |W(T,1)|/|W(T,0)| {}",
            fmt_series(&diffs),
            fmt_series(&minus),
            fmt_series(&ratios)
        ),
        csv,
    })
}

/// Criteria 1-9 on a fresh context.
pub fn run_criteria() -> Vec<CriterionReport> {
    let ctx = Context::new();
    let mut out = Vec::new();
    let mut go = |id: u32, name: &'static str, budget: f64, f: &dyn Fn() -> Result<Outcome>| {
        let t = Instant::now();
        out.push(finish(id, name, budget, t, f()));
    };
    go(1, "symbol audit", 5.0, &c1_symbol);
    go(2, "toy tan law", 60.0, &|| c2_tan_law(&ctx));
    go(3, "toy harmonic dichotomy", 120.0, &|| c3_harmonics(&ctx));
    go(4, "packet vs brute force", 300.0, &c4_packet);
    go(5, "packet sum vs spectral oracle", 1200.0, &|| c5_packet_sum(&ctx));
    go(6, "constructive/destructive dichotomy", 1800.0, &|| c6_dichotomy(&ctx));
    go(7, "kernel law", 120.0, &|| c7_kernel(&ctx));
    go(8, "linearizability", 1200.0, &|| c8_linearizable(&ctx));
    go(9, "resonant nonlinear profile", 2700.0, &|| c9_resonant(&ctx));
    out
}

fn in_pool(threads: usize) -> Result<Vec<CriterionReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Input(e.to_string()))?;
    Ok(pool.install(run_criteria))
}

/// Writes every CSV through the manifest path and reads it back.
fn round_trip(dir: &PathBuf, reports: &[CriterionReport]) -> Result<BTreeMap<u32, String>> {
    let mut out = BTreeMap::new();
    for r in reports {
        let Some(csv) = &r.csv else { continue };
        let schema = csv
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# schema="))
            .unwrap_or_default()
            .to_string();
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_reader(csv.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
        let mut table = CsvTable {
            schema,
            header,
            rows: Vec::new(),
        };
        for rec in rd.records() {
            table.push(rec?.iter().map(String::from));
        }
        let stem = format!("criterion_{:02}", r.id);
        let path = emit(dir, &stem, "accept", &table, "acceptance", BTreeMap::new(), Instant::now())?;
        out.insert(r.id, read_manifested(&path)?.1);
    }
    Ok(out)
}

/// Determinism: two fresh passes, 8 threads then 1 thread, byte-compared.
fn c10_determinism(first: &[CriterionReport]) -> Result<Outcome> {
    let second = in_pool(1)?;
    let base = std::env::temp_dir().join(format!("quasirect-accept-{}", std::process::id()));
    let a = round_trip(&base.join("threads8"), first)?;
    let b = round_trip(&base.join("threads1"), &second)?;
    let _ = std::fs::remove_dir_all(&base);
    let mut csv = CsvTable::new("accept.determinism", &["criterion", "identical"]);
    let mut differing = Vec::new();
    for r in first {
        let same = match (a.get(&r.id), b.get(&r.id)) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        };
        if !same {
            differing.push(r.id);
        }
        csv.push([r.id.to_string(), same.to_string()]);
    }
    Ok(Outcome {
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            "all criterion CSVs byte-identical across 8 and 1 threads".into()
        } else {
            format!("differing or missing CSVs: {differing:?}")
        },
        csv,
    })
}

/// Full suite; with `determinism` criteria 1-9 run under an 8-thread pool and criterion 10 reruns them.
pub fn run_suite(determinism: bool) -> Result<Vec<CriterionReport>> {
    if !determinism {
        return Ok(run_criteria());
    }
    let mut reports = in_pool(8)?;
    let t = Instant::now();
    let c10 = c10_determinism(&reports);
    reports.push(finish(10, "determinism", f64::INFINITY, t, c10));
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladders() {
        assert_eq!(filtered_ladder(0.2), vec![1.0 / 50.0, 1.0 / 100.0, 1.0 / 400.0]);
        assert_eq!(tan_law_ladder(0.2, 1.0), vec![1.0 / 100.0, 1.0 / 400.0, 1.0 / 800.0]);
    }

    #[test]
    fn report_line_format() {
        let r = CriterionReport {
            id: 3,
            name: "x",
            pass: true,
            detail: "d".into(),
            csv: None,
            seconds: 1.0,
        };
        assert_eq!(r.line(), "criterion  3 PASS x: d [1.0 s]");
    }
}
