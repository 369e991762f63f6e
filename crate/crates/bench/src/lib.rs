//! Fixtures shared by the benchmarks.

use corrdemo::exact::ratio;
use corrdemo::instances::{random_instance, DistKind, ProblemInstance};

/// Seeded random instance with half-density supports and a uniform distribution.
pub fn fixture(num_x: usize, num_y: usize, num_s: usize, seed: u64) -> ProblemInstance {
    random_instance(num_x, num_y, num_s, ratio(1, 2), seed, DistKind::Uniform).expect("valid fixture sizes")
}
