// Copyright 2026 The Ephemera Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Counter-based randomness.
//!
//! Every random draw in the simulation is addressed by `(seed, domain,
//! stream, counter)` rather than by position in a shared sequence, so results
//! do not depend on iteration order or thread scheduling. ChaCha20 supports
//! random access to its keystream, which is what makes this cheap.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct CounterRng {
    base: ChaCha20Rng,
}

impl CounterRng {
    /// Keys the generator with SHA-256(domain ‖ seed).
    pub fn new(seed: u64, domain: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(domain.as_bytes());
        hasher.update([0u8]);
        hasher.update(seed.to_le_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        CounterRng { base: ChaCha20Rng::from_seed(key) }
    }

    /// The 64-bit word at position `counter` of `stream`.
    pub fn u64_at(&self, stream: u64, counter: u64) -> u64 {
        let mut rng = self.base.clone();
        rng.set_stream(stream);
        rng.set_word_pos(counter as u128 * 2);
        rng.next_u64()
    }

    /// Uniform on the open interval (0, 1) with 52 bits of resolution.
    pub fn uniform_at(&self, stream: u64, counter: u64) -> f64 {
        to_open_unit(self.u64_at(stream, counter))
    }

    /// A sequential generator for `stream`, for code that draws an unknown
    /// number of values (e.g. corpus generation).
    pub fn stream(&self, stream: u64) -> ChaCha20Rng {
        let mut rng = self.base.clone();
        rng.set_stream(stream);
        rng.set_word_pos(0);
        rng
    }
}

/// Maps 64 random bits to (0, 1), never returning either endpoint.
pub fn to_open_unit(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}
