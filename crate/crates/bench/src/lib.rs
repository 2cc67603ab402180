//! Fixtures shared by the benchmarks.

use calmi::selection::{ampute, Mechanism, SelectionModel};
use calmi::simlab::{Generator, OUTCOME, TARGET};
use calmi::Dataset;

/// Reference-population data of size `n`, amputed under `mechanism`'s
/// reference selection model.
pub fn amputed_dataset(n: usize, mechanism: Mechanism, seed: u64) -> Dataset {
    let full = Generator::default().simulate(n, &mut calmi::rng::substream(seed, &[0]));
    ampute(&full, TARGET, OUTCOME, &SelectionModel::reference(mechanism), &mut calmi::rng::substream(seed, &[1]))
        .expect("reference data are complete")
}
