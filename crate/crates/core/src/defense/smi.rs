use serde::{Deserialize, Serialize};

use super::{Direction, Evidence, Flag, FlagKind, InspectionReport};
use crate::format::composite_graph;
use crate::models::{ArchSpec, Model};
use crate::tensor::Tensor;

/// Off-block mass below this fraction of total mass counts as block sparse.
pub const BLOCK_RATIO: f64 = 1e-6;
pub const BIAS_FACTOR: f64 = 10.0;
pub const BIAS_FLOOR: f64 = 5.0;
pub const CAPACITY_FACTOR: f64 = 2.0;

/// Contiguous 2×2 partition of a weight matrix whose off-diagonal blocks
/// (`[..row_split, col_split..]` and `[row_split.., ..col_split]`) carry
/// almost no mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub network: String,
    pub layer: usize,
    pub row_split: usize,
    pub col_split: usize,
    /// Off-block over total absolute mass.
    pub ratio: f64,
}

/// Best contiguous split of `w` `[rows, cols]`: the smallest off-block mass
/// ratio, first in row-major split order on ties. `None` when no split exists
/// or the matrix has no mass.
pub fn best_split(w: &Tensor) -> Option<(usize, usize, f64)> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    if rows < 2 || cols < 2 {
        return None;
    }
    // p[r][c] = mass of w[..r, ..c]
    let stride = cols + 1;
    let mut p = vec![0.0f64; (rows + 1) * stride];
    for r in 0..rows {
        let mut run = 0.0;
        for c in 0..cols {
            run += w.data()[r * cols + c].abs();
            p[(r + 1) * stride + c + 1] = p[r * stride + c + 1] + run;
        }
    }
    let total = p[rows * stride + cols];
    if total == 0.0 {
        return None;
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for r in 1..rows {
        let top = p[r * stride + cols];
        for c in 1..cols {
            let top_left = p[r * stride + c];
            let left = p[rows * stride + c];
            // [..r, c..] + [r.., ..c]
            let off = (top - top_left) + (left - top_left);
            let ratio = off.max(0.0) / total;
            if best.map_or(true, |(_, _, b)| ratio < b) {
                best = Some((r, c, ratio));
            }
        }
    }
    best
}

/// First layer (in network order) with a block-sparse partition.
pub fn find_block_partition(model: &Model) -> Option<BlockPartition> {
    for (name, net) in model.networks() {
        for (j, l) in net.layers.iter().enumerate() {
            if let Some((r, c, ratio)) = best_split(&l.weight) {
                if ratio < BLOCK_RATIO {
                    return Some(BlockPartition {
                        network: name.into(),
                        layer: j,
                        row_split: r,
                        col_split: c,
                        ratio,
                    });
                }
            }
        }
    }
    None
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Static inspection of architecture and weights. `reference` is the
/// declared architecture the capacity check compares against.
pub fn smi_scan(model: &Model, model_id: &str, reference: Option<&ArchSpec>) -> InspectionReport {
    let mut report = InspectionReport::new("smi", model_id, 0, 0);

    let branches: Vec<usize> = composite_graph(model)
        .map(|g| g.iter().enumerate().filter(|(_, n)| n.is_branch()).map(|(i, _)| i).collect())
        .unwrap_or_default();
    let evidence = branches.first().map_or(Evidence::Model, |&i| Evidence::GraphNode(i));
    report.flags.push(Flag::new(
        FlagKind::Topology,
        branches.len() as f64,
        0.5,
        Direction::Above,
        evidence,
    ));

    for (name, net) in model.networks() {
        for (j, l) in net.layers.iter().enumerate() {
            if let Some((r, c, ratio)) = best_split(&l.weight) {
                report.flags.push(Flag::new(
                    FlagKind::BlockSparsity,
                    ratio,
                    BLOCK_RATIO,
                    Direction::Below,
                    Evidence::Block {
                        network: name.into(),
                        layer: j,
                        row_split: r,
                        col_split: c,
                    },
                ));
            }
        }
    }

    let mut all = Vec::new();
    let mut worst = (0.0f64, Evidence::Model);
    for (name, net) in model.networks() {
        for (j, l) in net.layers.iter().enumerate() {
            for (i, &b) in l.bias.data().iter().enumerate() {
                all.push(b.abs());
                if b.abs() > worst.0 {
                    worst = (
                        b.abs(),
                        Evidence::Neuron { network: name.into(), layer: j, neuron: i },
                    );
                }
            }
        }
    }
    let threshold = (BIAS_FACTOR * median(all)).max(BIAS_FLOOR);
    report.stat("bias_threshold", threshold);
    report.flags.push(Flag::new(FlagKind::BiasOutlier, worst.0, threshold, Direction::Above, worst.1));

    if let Some(reference) = reference {
        let params = model.param_count() as f64;
        let limit = CAPACITY_FACTOR * reference.param_count() as f64;
        report.stat("param_count", params);
        report.flags.push(Flag::new(FlagKind::Capacity, params, limit, Direction::Above, Evidence::Model));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(w: &Tensor) -> Option<(usize, usize, f64)> {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let total: f64 = w.data().iter().map(|v| v.abs()).sum();
        let mut best: Option<(usize, usize, f64)> = None;
        for r in 1..rows {
            for c in 1..cols {
                let mut off = 0.0;
                for i in 0..rows {
                    for j in 0..cols {
                        if (i < r) != (j < c) {
                            off += w.data()[i * cols + j].abs();
                        }
                    }
                }
                if best.map_or(true, |(_, _, b)| off / total < b) {
                    best = Some((r, c, off / total));
                }
            }
        }
        best
    }

    #[test]
    fn prefix_sums_match_brute_force() {
        let mut r = crate::rng::stream(1, "t");
        for (rows, cols) in [(2, 2), (3, 5), (7, 4)] {
            let w = crate::rng::normal_matrix(&mut r, rows, cols);
            let (a, b) = (best_split(&w).unwrap(), brute(&w).unwrap());
            assert_eq!((a.0, a.1), (b.0, b.1));
            assert!((a.2 - b.2).abs() < 1e-12);
        }
    }

    #[test]
    fn finds_exact_block_diagonal() {
        let mut w = Tensor::zeros(&[5, 4]);
        for (i, j) in [(0, 0), (1, 0), (1, 1), (2, 2), (3, 3), (4, 2)] {
            w.data_mut()[i * 4 + j] = 1.0 + i as f64;
        }
        assert_eq!(best_split(&w), Some((2, 2, 0.0)));
        assert_eq!(best_split(&Tensor::zeros(&[3, 3])), None);
        assert_eq!(median(vec![3.0, 1.0, 2.0, 10.0]), 2.5);
    }
}
