use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use roulette_core::param::RngStream;
use roulette_core::stats::{mean_ci95, paired_t_test, student_t_quantile};
use statrs::distribution::{ContinuousCDF, StudentsT};

struct Instance {
    a: Vec<f64>,
    b: Vec<f64>,
}

fn instances() -> Vec<Instance> {
    let mut rng = RngStream::new(2024, "stats.oracle");
    (0..100)
        .map(|_| {
            let n = rng.random_range(2..=30);
            let shift: f64 = rng.random_range(-0.5..0.5);
            let spread: f64 = rng.random_range(0.01..2.0);
            let a: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b: Vec<f64> = a
                .iter()
                .map(|x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x - shift + spread * z
                })
                .collect();
            Instance { a, b }
        })
        .collect()
}

/// Straightforward two-pass statistics, independent of the library.
fn oracle(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let t = m / se;
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).unwrap();
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    let hw = dist.inverse_cdf(0.975) * se;
    (m, t, p, hw)
}

#[test]
fn paired_test_matches_oracle() {
    for (i, inst) in instances().iter().enumerate() {
        let r = paired_t_test("m", &inst.a, &inst.b).unwrap();
        let (m, t, p, hw) = oracle(&inst.a, &inst.b);
        assert_eq!(r.df as usize, inst.a.len() - 1);
        assert!((r.delta_mean - m).abs() <= 1e-12, "instance {i}: mean");
        assert!((r.t - t).abs() <= 1e-9, "instance {i}: t {} vs {t}", r.t);
        assert!((r.p - p).abs() <= 1e-6, "instance {i}: p {} vs {p}", r.p);
        assert!(
            (r.ci95 - hw).abs() <= 1e-6 * hw.max(1.0),
            "instance {i}: ci {} vs {hw}",
            r.ci95
        );
    }
}

#[test]
fn ci_matches_oracle() {
    for (i, inst) in instances().iter().enumerate() {
        let (m, hw) = mean_ci95(&inst.a).unwrap();
        let zeros = vec![0.0; inst.a.len()];
        let (om, _, _, ohw) = oracle(&inst.a, &zeros);
        assert!((m - om).abs() <= 1e-12, "instance {i}");
        assert!(
            (hw - ohw).abs() <= 1e-6 * ohw.max(1.0),
            "instance {i}: {hw} vs {ohw}"
        );
    }
}

#[test]
fn quantiles_match_oracle() {
    for df in 1..=60 {
        let dist = StudentsT::new(0.0, 1.0, f64::from(df)).unwrap();
        for p in [0.6, 0.9, 0.975, 0.995] {
            let ours = student_t_quantile(p, f64::from(df));
            let theirs = dist.inverse_cdf(p);
            assert!(
                (ours - theirs).abs() <= 1e-7 * theirs.abs().max(1.0),
                "df {df} p {p}: {ours} vs {theirs}"
            );
        }
    }
}

#[test]
fn symmetry_and_shift_invariance() {
    for inst in instances().iter().take(30) {
        let ab = paired_t_test("m", &inst.a, &inst.b).unwrap();
        let ba = paired_t_test("m", &inst.b, &inst.a).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert_eq!(ab.p, ba.p);

        // a shift that is exact in binary leaves every delta unchanged
        let shift = 4.0;
        let a2: Vec<f64> = inst.a.iter().map(|x| x + shift).collect();
        let b2: Vec<f64> = inst.b.iter().map(|x| x + shift).collect();
        let shifted = paired_t_test("m", &a2, &b2).unwrap();
        assert!((shifted.t - ab.t).abs() <= 1e-9 * ab.t.abs().max(1.0));
        assert!((shifted.p - ab.p).abs() <= 1e-9);
    }
}

#[derive(serde::Deserialize)]
struct Frozen {
    a: Vec<f64>,
    b: Vec<f64>,
    delta_mean: f64,
    t: f64,
    p: f64,
    ci95: f64,
    a_mean: f64,
    a_ci95: f64,
}

#[test]
fn matches_frozen_high_precision_values() {
    // 40-digit reference values for 100 random paired samples
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/paired_t_oracle.json"
    ))
    .unwrap();
    let cases: Vec<Frozen> = serde_json::from_str(&text).unwrap();
    assert_eq!(cases.len(), 100);
    for (i, c) in cases.iter().enumerate() {
        let r = paired_t_test("m", &c.a, &c.b).unwrap();
        assert!((r.delta_mean - c.delta_mean).abs() <= 1e-12, "case {i}");
        assert!((r.t - c.t).abs() <= 1e-9, "case {i}: t {} vs {}", r.t, c.t);
        assert!((r.p - c.p).abs() <= 1e-6, "case {i}: p {} vs {}", r.p, c.p);
        assert!(
            (r.ci95 - c.ci95).abs() <= 1e-9 * c.ci95.max(1.0),
            "case {i}: ci {} vs {}",
            r.ci95,
            c.ci95
        );
        let (m, hw) = mean_ci95(&c.a).unwrap();
        assert!(
            (m - c.a_mean).abs() <= 1e-12 && (hw - c.a_ci95).abs() <= 1e-9 * c.a_ci95.max(1.0),
            "case {i}"
        );
    }
}
