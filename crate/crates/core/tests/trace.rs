use proptest::prelude::*;
use tpsim::trace::{
    generate_trace, observe_demand, Burst, LengthDist, SloTier, SyntheticSpec, TierStream,
};

fn stream(tier: u32, rate: f64) -> TierStream {
    TierStream {
        tier,
        rate,
        prompt: LengthDist {
            median: 300.0,
            sigma: 0.5,
            max: 4096,
        },
        output: LengthDist {
            median: 80.0,
            sigma: 0.5,
            max: 1024,
        },
    }
}

fn spec(duration: f64, streams: Vec<TierStream>, bursts: Vec<Burst>, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        duration,
        streams,
        bursts,
        seed,
    }
}

#[test]
fn poisson_count_over_fifty_seeds() {
    let sigma = 200f64.sqrt();
    let mut total = 0usize;
    for seed in 0..50 {
        let t = generate_trace(&spec(100.0, vec![stream(0, 2.0)], vec![], seed)).unwrap();
        let n = t.len() as f64;
        assert!((n - 200.0).abs() <= 3.0 * sigma, "seed {seed}: {n}");
        total += t.len();
    }
    // Mean of 50 counts has sigma / sqrt(50).
    let mean = total as f64 / 50.0;
    assert!(
        (mean - 200.0).abs() <= 3.0 * sigma / 50f64.sqrt(),
        "mean {mean}"
    );
}

#[test]
fn tenfold_burst_rate() {
    let (mut inside, mut outside) = (0usize, 0usize);
    for seed in 0..50 {
        let burst = Burst {
            start: 50.0,
            end: 60.0,
            multiplier: 10.0,
            tier: None,
        };
        let t = generate_trace(&spec(100.0, vec![stream(0, 2.0)], vec![burst], seed)).unwrap();
        for r in &t {
            if (50.0..60.0).contains(&r.arrival_time) {
                inside += 1;
            } else {
                outside += 1;
            }
        }
    }
    let ratio = (inside as f64 / 10.0) / (outside as f64 / 90.0);
    // Relative variance of a ratio of Poisson counts is 1/E[in] + 1/E[out].
    let rel = (1.0 / 10_000.0 + 1.0 / 9_000.0f64).sqrt();
    assert!((ratio - 10.0).abs() <= 3.0 * rel * 10.0, "ratio {ratio}");
}

#[test]
fn generation_is_pure() {
    let s = spec(
        30.0,
        vec![stream(0, 5.0), stream(1, 3.0)],
        vec![Burst {
            start: 5.0,
            end: 9.0,
            multiplier: 3.0,
            tier: Some(1),
        }],
        77,
    );
    let a = generate_trace(&s).unwrap();
    let b = generate_trace(&s.clone()).unwrap();
    assert_eq!(a, b);
    assert!(a.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
    let mut other = s;
    other.seed = 78;
    assert_ne!(generate_trace(&other).unwrap(), a);
}

#[test]
fn lengths_stay_in_bounds() {
    let t = generate_trace(&spec(50.0, vec![stream(0, 20.0)], vec![], 3)).unwrap();
    assert!(t
        .iter()
        .all(|r| (1..=4096).contains(&r.prompt_len) && (1..=1024).contains(&r.output_len)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn observed_demand_conserves_arrivals(
        seed in any::<u64>(),
        ra in 0.0f64..20.0,
        rb in 0.0f64..20.0,
        start in 0.0f64..20.0,
        len in 0.1f64..10.0,
    ) {
        let tiers = [SloTier::new(0, "a", 500.0, 50.0), SloTier::new(1, "b", 2000.0, 100.0)];
        let t = generate_trace(&spec(30.0, vec![stream(0, ra), stream(1, rb)], vec![], seed)).unwrap();
        let end = start + len;
        let d = observe_demand(&t, &tiers, start, end);
        let total: f64 = d.iter().map(|x| x.rps_observed * len).sum();
        let arrived = t.iter().filter(|r| r.arrival_time >= start && r.arrival_time < end).count();
        prop_assert!((total - arrived as f64).abs() < 1e-6, "{total} vs {arrived}");
    }
}
