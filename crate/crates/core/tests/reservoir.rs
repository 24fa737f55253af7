mod common;

use auxcl::seed::{rng, Stream};
use auxcl::{BufferEntry, Reservoir};
use proptest::prelude::*;

fn entry(i: usize) -> BufferEntry {
    BufferEntry { input: vec![i as f64], label: (i % 7) as u32, stored_logits: vec![i as f64; 3], insertion_step: i }
}

#[test]
fn inclusion_is_uniform_over_stream_positions() {
    let stat = common::reservoir_chi_square(100, 10_000, 200, 42);
    assert!(stat < common::CHI2_99_P01, "chi-square {stat:.2}");
}

#[test]
fn positional_bias_is_detected() {
    // Keeping only the most recent items must fail the same test.
    let mut counts = [0f64; 100];
    for _ in 0..200 {
        for i in 9_900..10_000 {
            counts[i / 100] += 1.0;
        }
    }
    let stat: f64 = counts.iter().map(|c| (c - 200.0).powi(2) / 200.0).sum();
    assert!(stat > common::CHI2_99_P01);
}

proptest! {
    #[test]
    fn size_and_contents(cap in 0..40usize, n in 0..200usize, seed in any::<u64>()) {
        let mut r = rng(seed, Stream::Reservoir);
        let mut b = Reservoir::new(cap);
        for i in 0..n {
            b.insert(entry(i), &mut r);
        }
        prop_assert_eq!(b.len(), cap.min(n));
        prop_assert_eq!(b.seen(), n);
        let mut steps: Vec<usize> = b.entries().iter().map(|e| e.insertion_step).collect();
        for e in b.entries() {
            prop_assert_eq!(e, &entry(e.insertion_step));
        }
        steps.sort_unstable();
        steps.dedup();
        prop_assert_eq!(steps.len(), b.len());
        if n <= cap {
            prop_assert_eq!(steps, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sampling_draws_stored_entries(cap in 1..20usize, k in 0..50usize, seed in any::<u64>()) {
        let mut r = rng(seed, Stream::Reservoir);
        let mut b = Reservoir::new(cap);
        prop_assert!(b.sample(k, &mut r).is_empty());
        for i in 0..3 * cap {
            b.insert(entry(i), &mut r);
        }
        let s = b.sample(k, &mut rng(seed, Stream::Replay));
        prop_assert_eq!(s.len(), k);
        for e in s {
            prop_assert!(b.entries().contains(e));
        }
    }
}
