use perflaw_core::laws::{eval_loss_law, eval_perf_law, grad_perf_law, LossLawParams, PerfLawParams};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = PerfLawParams> {
    (
        prop::array::uniform6(-2.0f64..2.0),
        prop::array::uniform3(-50.0f64..50.0),
        -5.0f64..5.0,
    )
        .prop_map(|(w, p, c)| PerfLawParams {
            w1: w[0],
            w2: w[1],
            w3: w[2] * 0.5,
            w4: w[3] * 0.5,
            w5: w[4] * 0.15,
            w6: w[5],
            p1: p[0],
            p2: p[1],
            p3: p[2] * 0.1,
            c,
        })
}

fn point() -> impl Strategy<Value = (f64, f64, f64)> {
    (1.0f64..64.0, 4.0f64..1024.0, 1e4f64..1e7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gradient_matches_central_differences(p in params(), (n, d, dp) in point()) {
        let g = grad_perf_law(&p, n, d, dp).unwrap();
        let base = p.to_array();
        for j in 0..10 {
            let h = 1e-3 * base[j].abs().max(1.0);
            let f = |t: f64| {
                let mut v = base;
                v[j] += t;
                eval_perf_law(&PerfLawParams::from_slice(&v), n, d, dp).unwrap()
            };
            // fourth-order central difference
            let fd = (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h);
            let scale = g[j].abs().max(1.0);
            prop_assert!((g[j] - fd).abs() <= 1e-5 * scale, "param {j}: {} vs {}", g[j], fd);
        }
    }

    #[test]
    fn group_exchange_symmetry(p in params(), (n, d, dp) in point()) {
        let mut q = p;
        q.w1 = p.w2;
        q.w2 = p.w1;
        q.p1 = p.p2;
        q.p2 = p.p1;
        q.w3 = p.w4;
        q.w4 = p.w3;
        prop_assert_eq!(eval_perf_law(&p, n, d, dp).unwrap(), eval_perf_law(&q, d, n, dp).unwrap());
    }

    #[test]
    fn canonical_form_is_the_single_amplitude_law(
        w in prop::array::uniform5(-1.0f64..1.0),
        p in -20.0f64..20.0,
        p_data in -20.0f64..20.0,
        (n, d, dp) in point(),
    ) {
        let ours = eval_perf_law(&PerfLawParams::canonical(w[0], w[1], w[2], w[3], w[4], p, p_data), n, d, dp).unwrap();
        let written = w[0] * (n.ln() + p / n.powf(w[2]))
            + w[1] * (d.ln() + p / d.powf(w[3]))
            + dp.ln()
            + p_data / dp.powf(w[4]);
        prop_assert!((ours - written).abs() <= 1e-12 * written.abs().max(1.0), "{ours} vs {written}");
    }

    #[test]
    fn simplified_loss_decreases(
        e in 0.0f64..5.0, a in 0.1f64..500.0, b in 0.1f64..500.0,
        alpha in 0.05f64..1.0, beta in 0.05f64..1.0,
        n in 1e3f64..1e9, d in 1e3f64..1e9,
    ) {
        let p = LossLawParams::Simplified { e, a, b, alpha, beta };
        let l = eval_loss_law(&p, n, d).unwrap();
        prop_assert!(eval_loss_law(&p, n * 1.5, d).unwrap() < l);
        prop_assert!(eval_loss_law(&p, n, d * 1.5).unwrap() < l);
    }
}
