//! Inclusion frequencies of the two client samplers.

use perfed_core::engine::{sample_scheme1, sample_scheme2};
use perfed_core::rng::{CounterRng, Domain};

const TRIALS: u64 = 100_000;

fn within_4se(freq: f64, p: f64) -> bool {
    (freq - p).abs() <= 4.0 * (p * (1.0 - p) / TRIALS as f64).sqrt()
}

#[test]
fn scheme1_inclusion_probability() {
    let (n, k) = (25, 20);
    let p = vec![1.0 / n as f64; n];
    let mut hits = vec![0u64; n];
    for t in 0..TRIALS {
        let mut rng = CounterRng::for_stream(1, Domain::Sampler, 0, t);
        let mut s = sample_scheme1(&p, k, &mut rng).unwrap();
        assert_eq!(s.len(), k);
        s.dedup();
        s.iter().for_each(|&i| hits[i] += 1);
    }
    // Oracle: 1 - (1 - 1/N)^K for an index appearing at least once.
    let expect = 1.0 - (1.0 - 1.0 / n as f64).powi(k as i32);
    assert!(hits.iter().all(|&h| within_4se(h as f64 / TRIALS as f64, expect)));
}

#[test]
fn scheme2_single_draw_is_uniform() {
    let n = 25;
    let mut hits = vec![0u64; n];
    for t in 0..TRIALS {
        let mut rng = CounterRng::for_stream(2, Domain::Sampler, 0, t);
        hits[sample_scheme2(n, 1, &mut rng).unwrap()[0]] += 1;
    }
    assert!(hits.iter().all(|&h| within_4se(h as f64 / TRIALS as f64, 1.0 / n as f64)));
}

#[test]
fn scheme2_pair_inclusion() {
    let (n, k) = (25, 10);
    let mut pair = 0u64;
    let mut single = 0u64;
    for t in 0..TRIALS {
        let mut rng = CounterRng::for_stream(3, Domain::Sampler, 0, t);
        let s = sample_scheme2(n, k, &mut rng).unwrap();
        let mut d = s.clone();
        d.dedup();
        assert_eq!(d.len(), k, "no repeats without replacement");
        let (a, b) = (s.contains(&3), s.contains(&17));
        pair += u64::from(a && b);
        single += u64::from(a);
    }
    let pp = (k * (k - 1)) as f64 / (n * (n - 1)) as f64;
    assert!(within_4se(pair as f64 / TRIALS as f64, pp));
    assert!(within_4se(single as f64 / TRIALS as f64, k as f64 / n as f64));
}
