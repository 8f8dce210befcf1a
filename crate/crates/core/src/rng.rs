//! Counter-based random streams.
//!
//! A [`Stream`] is a `(key, counter)` pair. The n-th output is
//! `splitmix64(key + n * GOLDEN)`, so a stream's values never depend on how
//! many draws other streams have made. Child streams are derived from a
//! parent key with a label (FNV-1a hashed) or an index, never from the
//! parent's counter, which keeps derivation independent of iteration order.
//!
//! Fixed labels used by the lab:
//!
//! | label       | consumer                               |
//! |-------------|----------------------------------------|
//! | `"scene"`   | procedural scene contents              |
//! | `"dataset"` | base-pose jitter and offset sampling   |
//! | `"train"`   | initialization, shuffling, task draws  |
//! | `"eval"`    | servo experiment draws                 |

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            key: splitmix64(seed ^ 0x5653_4C41_4221_0001),
            counter: 0,
        }
    }

    /// Child stream named by a fixed label.
    pub fn derive(&self, label: &str) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(fnv1a(label))),
            counter: 0,
        }
    }

    /// Child stream for slot `index` (sample, experiment, epoch, ...).
    pub fn derive_index(&self, index: u64) -> Self {
        Self {
            key: splitmix64(self.key.wrapping_add(splitmix64(index.wrapping_add(GOLDEN)))),
            counter: 0,
        }
    }

    /// A 64-bit seed drawn from this stream, for handing to other subsystems.
    pub fn next_seed(&mut self) -> u64 {
        self.next_u64()
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let x = self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN));
        self.counter = self.counter.wrapping_add(1);
        splitmix64(x)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}
