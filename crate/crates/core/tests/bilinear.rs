//! Bilinear packet representation against the Picard oracle.

use quasirect::linear_solver::{LinearField, LinearOptions};
use quasirect::nonlinear::{bilinear_W, default_beta, picard_W, NonlinearitySpec, PicardOptions};
use quasirect::sources::Source;
use quasirect::symbols::DispersionSymbol;

#[test]
fn bilinear_tracks_picard_along_the_ladder() {
    let sym = DispersionSymbol::model();
    let src = Source::default_run();
    let sp = NonlinearitySpec::default();
    let beta = default_beta(2.0, sp.iota).unwrap();
    let mut rel = Vec::new();
    for eps in [1.0 / 50.0, 1.0 / 100.0] {
        let field = LinearField::emitted(eps, &sym, &src, &LinearOptions::default()).unwrap();
        let w = picard_W(&field, &sym, &sp, &[1.5], &[0.0], &PicardOptions::default()).unwrap();
        let (b, _) = bilinear_W(eps, &sym, &src, &sp, beta, 1.5, 0.0, 8).unwrap();
        rel.push((b - w.w.values[0]).norm() / w.w.values[0].norm());
    }
    assert!(rel[1] < rel[0], "{rel:?}");
    assert!(rel[1] < 0.02, "{rel:?}");
}
