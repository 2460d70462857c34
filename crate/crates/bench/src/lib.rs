//! Shared instances for the benchmarks.

use std::sync::Arc;

use stopgo_core::{HorizonPolicy, Model, MuSpec, PathTree, StateKind, StateLattice, TargetDistribution, TimeGrid};

/// Position lattice with the first-passage law of level -1, lumped at the horizon.
pub fn levy_lattice(dt: f64, horizon: f64) -> (Arc<Model>, TargetDistribution) {
    let grid = TimeGrid::with_horizon(dt, horizon).expect("grid");
    let mu = MuSpec::Levy { a: 1.0 }
        .discretize(grid, HorizonPolicy::LumpAtEnd)
        .expect("target");
    (
        Arc::new(Model::Lattice(StateLattice::new(grid, StateKind::Position))),
        mu,
    )
}

/// Full path tree with uniform mass on levels `1..=depth`.
pub fn uniform_tree(depth: usize) -> (Arc<Model>, TargetDistribution) {
    let grid = TimeGrid::new(0.25, depth).expect("grid");
    let mut mass = vec![1.0 / depth as f64; depth + 1];
    mass[0] = 0.0;
    let mu = TargetDistribution::new(grid, mass).expect("target");
    (Arc::new(Model::Tree(PathTree::new(grid).expect("tree"))), mu)
}
