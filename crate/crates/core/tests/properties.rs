use std::f64::consts::TAU;
use std::sync::OnceLock;

use morseflow::complex::{betti_twisted, build_complex, build_cover_complex, verify_d2_twisted, GeometricComplex, Representation};
use morseflow::connections::{find_all_connections, ConnectionDb};
use morseflow::flow::flow_y;
use morseflow::morse::Landscape;
use morseflow::scenario::Scenario;
use proptest::prelude::*;

struct Torus {
    sc: Scenario,
    land: Landscape,
    db: ConnectionDb,
    cx: GeometricComplex,
}

fn torus() -> &'static Torus {
    static CELL: OnceLock<Torus> = OnceLock::new();
    CELL.get_or_init(|| {
        let sc = Scenario::builtin("torus").unwrap();
        let land = sc.landscape().unwrap();
        let db = find_all_connections(&land, &sc.connections).unwrap();
        let cx = build_complex(&land, &db).unwrap();
        Torus { sc, land, db, cx }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rescaled_flow_lowers_h_by_s(x in 0.0..TAU, y in 0.0..TAU, frac in 0.0..0.9f64) {
        let t = torus();
        let p = [x, y];
        let h = t.land.sys.h(&p);
        let s = frac * (h + 2.0);
        prop_assume!(h + 2.0 > 1e-3);
        if let Ok(q) = flow_y(&t.land.sys, &p, s, &t.sc.flow) {
            prop_assert!((t.land.sys.h(&q) - h + s).abs() < 1e-8);
        }
    }

    #[test]
    fn twisted_differential_squares_to_zero(m in 2u32..8, k in 0u32..8, coordinate in 0usize..2) {
        let t = torus();
        let rep = Representation { m, kappa: k % m, coordinate };
        let tc = build_cover_complex(&t.db, &t.cx, rep).unwrap();
        prop_assert_eq!(verify_d2_twisted(&tc), 0);
        let b = betti_twisted(&tc);
        let chi = b[0] as i64 - b[1] as i64 + b[2] as i64;
        prop_assert_eq!(chi, 0);
    }
}
