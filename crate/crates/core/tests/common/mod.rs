//! Shared fixtures: random desk-scale instances and an exhaustive vertex oracle.
#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stopgo_core::tree::node_path;
use stopgo_core::{CostFunctional, Model, PathTree, TargetDistribution, TimeGrid, TreeNode};

pub struct TreeInstance {
    pub id: usize,
    pub model: Arc<Model>,
    pub mu: TargetDistribution,
    pub cost: CostFunctional,
}

pub const TREE_COSTS: [&str; 3] = ["bt_at", "phi_cubed", "neg_max"];

/// Trees of depth 2 to 4, targets with one to three atoms, costs in rotation.
pub fn tree_instances(n: usize, seed: u64) -> Vec<TreeInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let depth = rng.random_range(2..=4usize);
            let grid = TimeGrid::new(0.25, depth).unwrap();
            let n_atoms = rng.random_range(1..=depth.min(3));
            let mut levels: Vec<usize> = (1..=depth).collect();
            for i in 0..n_atoms {
                let j = rng.random_range(i..levels.len());
                levels.swap(i, j);
            }
            let mut mass = vec![0.0; depth + 1];
            let weights: Vec<f64> = (0..n_atoms).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for (i, w) in weights.iter().enumerate() {
                mass[levels[i]] = w / total;
            }
            let mu = TargetDistribution::new(grid, mass).unwrap();
            let cost = CostFunctional::from_name(TREE_COSTS[id % 3]).unwrap();
            let model = Arc::new(Model::Tree(PathTree::new(grid).unwrap()));
            TreeInstance { id, model, mu, cost }
        })
        .collect()
}

/// Stop distributions over the atom levels, in units of `2^-last`, with the
/// cheapest pure rule for each; rules only stop on atom levels and always
/// stop by the last one.
fn pure_rules(
    tree: &PathTree,
    cost: &CostFunctional,
    node: TreeNode,
    atom_of: &[Option<usize>],
    last: usize,
) -> HashMap<Vec<u32>, f64> {
    let l = node.level;
    let mut out: HashMap<Vec<u32>, f64> = HashMap::new();
    let n_atoms = atom_of.iter().flatten().count();
    if let Some(i) = atom_of[l] {
        let units = 1u32 << (last - l);
        let mut key = vec![0u32; n_atoms];
        key[i] = units;
        let c = cost.evaluate(&node_path(tree, node).unwrap()).primary();
        out.insert(key, units as f64 * c);
    }
    if l < last {
        let up = pure_rules(tree, cost, node.up(), atom_of, last);
        let down = pure_rules(tree, cost, node.down(), atom_of, last);
        for (ku, cu) in &up {
            for (kd, cd) in &down {
                let key: Vec<u32> = ku.iter().zip(kd).map(|(a, b)| a + b).collect();
                let c = cu + cd;
                let e = out.entry(key).or_insert(f64::INFINITY);
                if c < *e {
                    *e = c;
                }
            }
        }
    }
    out
}

/// Unique solution of the `rows x cols` system `a λ = b` (column-major `a`), if
/// the columns are independent and the system is consistent.
fn solve_small(cols: &[&[f64]], b: &[f64]) -> Option<Vec<f64>> {
    let m = b.len();
    let k = cols.len();
    let mut a: Vec<Vec<f64>> = (0..m)
        .map(|r| {
            let mut row: Vec<f64> = cols.iter().map(|c| c[r]).collect();
            row.push(b[r]);
            row
        })
        .collect();
    let mut pivot_row = 0;
    for c in 0..k {
        let p = (pivot_row..m).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))?;
        if a[p][c].abs() < 1e-12 {
            return None;
        }
        a.swap(pivot_row, p);
        for r in 0..m {
            if r != pivot_row {
                let f = a[r][c] / a[pivot_row][c];
                if f != 0.0 {
                    for j in c..=k {
                        a[r][j] -= f * a[pivot_row][j];
                    }
                }
            }
        }
        pivot_row += 1;
    }
    for row in a.iter().skip(k) {
        if row[k].abs() > 1e-12 {
            return None;
        }
    }
    Some((0..k).map(|c| a[c][k] / a[c][c]).collect())
}

/// Minimum cost over the marginal polytope by enumerating its vertices: every
/// vertex mixes at most as many pure rules as there are atoms.
pub fn vertex_oracle(tree: &PathTree, mu: &TargetDistribution, cost: &CostFunctional) -> f64 {
    let support = mu.support();
    assert!(support.iter().all(|&k| k >= 1));
    let last = *support.last().unwrap();
    let mut atom_of = vec![None; last + 1];
    for (i, &k) in support.iter().enumerate() {
        atom_of[k] = Some(i);
    }
    let scale = (1u64 << last) as f64;
    let rules = pure_rules(tree, cost, TreeNode::root(0), &atom_of, last);
    let mut rules: Vec<(Vec<f64>, f64)> = rules
        .into_iter()
        .map(|(k, c)| (k.iter().map(|&u| u as f64 / scale).collect(), c / scale))
        .collect();
    rules.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let target: Vec<f64> = support.iter().map(|&k| mu.mass_at(k)).collect();
    let a = support.len();
    let mut best = f64::INFINITY;
    let mut consider = |idx: &[usize]| {
        let cols: Vec<&[f64]> = idx.iter().map(|&i| rules[i].0.as_slice()).collect();
        if let Some(lambda) = solve_small(&cols, &target) {
            if lambda.iter().all(|&l| l >= -1e-13) {
                let v: f64 = idx.iter().zip(&lambda).map(|(&i, l)| l * rules[i].1).sum();
                best = best.min(v);
            }
        }
    };
    let n = rules.len();
    for i in 0..n {
        consider(&[i]);
        if a >= 2 {
            for j in i + 1..n {
                consider(&[i, j]);
                if a >= 3 {
                    for k in j + 1..n {
                        consider(&[i, j, k]);
                    }
                }
            }
        }
    }
    best
}
