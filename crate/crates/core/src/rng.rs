//! Seed expansion: one master seed fans out into independent streams.
//!
//! Each consumer gets `splitmix64(master ^ tag)` mixed with an index (epoch,
//! step, recording...), which seeds a ChaCha8 generator. Any component can be
//! replayed from the master seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random-number consumers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    GateNoise,
    Shuffle,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x4441_5441_0000_0001,
            Stream::Init => 0x494e_4954_0000_0002,
            Stream::GateNoise => 0x4e4f_4953_0000_0003,
            Stream::Shuffle => 0x5348_5546_0000_0004,
        }
    }
}

/// One step of the splitmix64 sequence.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    let mut s = master ^ stream.tag();
    let base = splitmix64(&mut s);
    let mut t = base ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93);
    splitmix64(&mut t)
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
