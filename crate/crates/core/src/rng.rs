//! Per-path random streams.
//!
//! Every path owns independent ChaCha8 streams keyed on the master seed and
//! the global path index, with one stream per noise channel. Results never
//! depend on which worker simulates a path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Noise channels of one path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Gaussian = 0,
    Jump = 1,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, path, channel)`.
pub fn stream(seed: u64, path: u64, channel: Channel) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed) ^ splitmix64(path.wrapping_add(0x632b_e59b_d9b4_e019));
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(channel as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| 0).scan(stream(1, 2, Channel::Gaussian), |r, _| Some(r.next_u64())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(stream(1, 2, Channel::Gaussian), |r, _| Some(r.next_u64())).collect();
        assert_eq!(a, b);
        let mut others = [
            stream(1, 2, Channel::Jump),
            stream(1, 3, Channel::Gaussian),
            stream(2, 2, Channel::Gaussian),
        ];
        for o in &mut others {
            assert_ne!(o.next_u64(), a[0]);
        }
    }
}
