//! Input builders shared by the criterion benches.

use auxcl::mah::{ClassLogitProfile, HeadMap};
use auxcl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// A head map whose first task owns heads `0..first` and whose remaining
/// heads hold aux placeholders, plus random profiles for `incoming` classes.
pub fn mah_case(heads: usize, first: usize, incoming: usize, rng: &mut ChaCha8Rng) -> (HeadMap, Vec<ClassLogitProfile>) {
    let mut map = HeadMap::new(heads);
    map.assign_first_task(&(0..first as u32).collect::<Vec<_>>()).expect("fresh map");
    map.place_aux(&(1000..1000 + (heads - first) as u32).collect::<Vec<_>>())
        .expect("enough heads");
    let profiles = (0..incoming)
        .map(|i| ClassLogitProfile {
            class: (first + i) as u32,
            mean_logits: (0..heads).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            count: 1,
        })
        .collect();
    (map, profiles)
}
