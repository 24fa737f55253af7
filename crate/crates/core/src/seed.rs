//! Master-seed splitting.
//!
//! Every source of randomness in a run draws from its own ChaCha8 stream,
//! seeded with `splitmix64(master ^ splitmix64(tag))` where `tag` is the
//! stream's fixed [`Stream`] discriminant. Turning one feature on or off
//! therefore never shifts the draws seen by the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named randomness streams derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Synthetic data generation.
    Data = 1,
    /// Class order of the task sequence.
    Split = 2,
    /// Choice of the initial auxiliary subset.
    AuxSelect = 3,
    /// Model parameter initialization.
    ModelInit = 4,
    /// Shuffling of task samples into batches.
    TaskOrder = 5,
    /// Auxiliary per-class cursors.
    AuxOrder = 6,
    /// Reservoir replacement decisions.
    Reservoir = 7,
    /// Draws from the replay buffer.
    Replay = 8,
    /// Augmentation of task and replay samples.
    Augment = 9,
    /// Augmentation of auxiliary samples.
    AuxAugment = 10,
    /// Auxiliary pre-training (batch order and output re-initialization).
    Pretrain = 11,
    /// Synthetic auxiliary data generated apart from the task data.
    AuxData = 12,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: Stream) -> u64 {
    splitmix64(master ^ splitmix64(stream as u64))
}

pub fn rng(master: u64, stream: Stream) -> Rng {
    Rng::seed_from_u64(derive(master, stream))
}
