//! Seeded generator streams keyed by `(seed, purpose, epoch, batch)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Purpose tags, so different consumers of one seed never share a stream.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Split = 4,
}

/// Generator for `(seed, stream, a, b)`; the same key always yields the same
/// sequence.
pub fn derive(seed: u64, stream: Stream, a: u64, b: u64) -> Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ stream as u64) ^ a);
    ChaCha8Rng::seed_from_u64(splitmix(key ^ b.rotate_left(17)))
}
