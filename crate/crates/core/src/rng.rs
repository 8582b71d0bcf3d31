//! Named, counter-based random streams.
//!
//! Every random draw in the crate goes through [`named_rng`]: a ChaCha8
//! generator keyed by the run seed whose stream id is a hash of a purpose
//! label ("linear/target", "mlp/batch", ...). Two consumers with different
//! labels never share a stream, so adding a draw in one place does not shift
//! the data another place sees.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::{cast, Scalar};

pub type StreamRng = ChaCha8Rng;

fn stream_id(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn named_rng(seed: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

/// Matrix with i.i.d. `N(0, std²)` entries, filled row by row.
pub fn gaussian_matrix<T: Scalar>(rng: &mut StreamRng, rows: usize, cols: usize, std: f64) -> DMatrix<T> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = rng.sample(StandardNormal);
            m[(i, j)] = cast(z * std);
        }
    }
    m
}
