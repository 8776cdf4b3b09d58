//! Per-replica random streams.
//!
//! ChaCha is a counter-based generator: the key is derived from the run seed
//! and the stream id is the replica index, so replica `i` sees the same
//! numbers however the replicas are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ReplicaRng = ChaCha8Rng;

pub fn replica_rng(seed: u64, replica: u64) -> ReplicaRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}
