//! Flat batching: mixed-size window samples packed into one batch of
//! univariate rows, with block-diagonal adjacency instead of padding.
//!
//! A batch of B windows whose variable counts differ becomes B' = sum(n_b)
//! rows. Each row remembers its window (subgraph), its variable id, and
//! whether that variable is a late arrival. Graph structure never crosses
//! windows: the batch-level adjacency is block-diagonal by construction and
//! is stored as the list of per-window blocks, never materialized at
//! B' x B'.

use crate::data::WindowSample;
use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::format;
use alloc::vec::Vec;

/// A batch of windows flattened to univariate rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatBatch {
    /// Histories, shape `(total_rows, history_len)`.
    pub rows: Tensor,
    /// Targets, shape `(total_rows, horizon)`.
    pub targets: Tensor,
    /// Per row: index of the window it came from.
    pub subgraph_id: Vec<usize>,
    /// Per row: the variable it carries.
    pub variable_id: Vec<usize>,
    /// Per row: the variable is a late arrival.
    pub expanding: Vec<bool>,
    /// Per window: slot index of the last history step.
    pub ref_time: Vec<usize>,
    /// Prefix sums of window sizes: rows of window `b` live in
    /// `offsets[b]..offsets[b+1]`. Length is `n_windows + 1`.
    pub offsets: Vec<usize>,
}

impl FlatBatch {
    /// Number of windows in the batch.
    pub fn n_subgraphs(&self) -> usize {
        self.ref_time.len()
    }

    /// Total number of rows.
    pub fn n_rows(&self) -> usize {
        self.subgraph_id.len()
    }

    /// Row range of window `b`.
    pub fn subgraph_rows(&self, b: usize) -> core::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    /// Variable ids of window `b`, ascending.
    pub fn subgraph_variables(&self, b: usize) -> &[usize] {
        &self.variable_id[self.offsets[b]..self.offsets[b + 1]]
    }
}

/// Packs window samples into a [`FlatBatch`].
///
/// Every sample must share the same history length and horizon, have at
/// least one row, and list its variables in ascending order.
pub fn flatten(samples: &[WindowSample]) -> Result<FlatBatch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("cannot flatten an empty batch".into()))?;
    let history = first.inputs.dim(1);
    let horizon = first.targets.dim(1);

    let mut offsets = Vec::with_capacity(samples.len() + 1);
    offsets.push(0usize);
    for (b, s) in samples.iter().enumerate() {
        let n = s.n_rows();
        if n == 0 {
            return Err(Error::Shape(format!("window {b} has no variables")));
        }
        if s.inputs.shape() != [n, history] || s.targets.shape() != [n, horizon] {
            return Err(Error::Shape(format!(
                "window {b} has inputs {:?} / targets {:?}, expected [{n}, {history}] / [{n}, {horizon}]",
                s.inputs.shape(),
                s.targets.shape()
            )));
        }
        if s.expanding.len() != n {
            return Err(Error::Shape(format!(
                "window {b} has {} expanding flags for {n} rows",
                s.expanding.len()
            )));
        }
        if !s.variable_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Shape(format!(
                "window {b} lists variables out of order: {:?}",
                s.variable_ids
            )));
        }
        offsets.push(offsets[b] + n);
    }

    let total = *offsets.last().unwrap();
    let mut rows = Tensor::zeros(&[total, history]);
    let mut targets = Tensor::zeros(&[total, horizon]);
    let mut subgraph_id = Vec::with_capacity(total);
    let mut variable_id = Vec::with_capacity(total);
    let mut expanding = Vec::with_capacity(total);
    for (b, s) in samples.iter().enumerate() {
        for r in 0..s.n_rows() {
            let out = offsets[b] + r;
            rows.row_mut(out).copy_from_slice(s.inputs.row(r));
            targets.row_mut(out).copy_from_slice(s.targets.row(r));
            subgraph_id.push(b);
            variable_id.push(s.variable_ids[r]);
            expanding.push(s.expanding[r]);
        }
    }
    Ok(FlatBatch {
        rows,
        targets,
        subgraph_id,
        variable_id,
        expanding,
        ref_time: samples.iter().map(|s| s.ref_time).collect(),
        offsets,
    })
}

/// Exact inverse of [`flatten`]: reconstructs the original window samples.
pub fn unflatten(batch: &FlatBatch) -> Vec<WindowSample> {
    let history = batch.rows.dim(1);
    let horizon = batch.targets.dim(1);
    (0..batch.n_subgraphs())
        .map(|b| {
            let range = batch.subgraph_rows(b);
            let n = range.len();
            let mut inputs = Tensor::zeros(&[n, history]);
            let mut targets = Tensor::zeros(&[n, horizon]);
            for (r, row) in range.clone().enumerate() {
                inputs.row_mut(r).copy_from_slice(batch.rows.row(row));
                targets.row_mut(r).copy_from_slice(batch.targets.row(row));
            }
            WindowSample {
                variable_ids: batch.variable_id[range.clone()].to_vec(),
                inputs,
                targets,
                ref_time: batch.ref_time[b],
                expanding: batch.expanding[range].to_vec(),
            }
        })
        .collect()
}

/// True when rows `i` and `j` came from the same window.
///
/// Panics if either index is out of range; callers own their row indices.
#[inline]
pub fn same_subgraph(batch: &FlatBatch, i: usize, j: usize) -> bool {
    assert!(
        i < batch.n_rows() && j < batch.n_rows(),
        "row index out of range: ({i}, {j}) of {}",
        batch.n_rows()
    );
    batch.subgraph_id[i] == batch.subgraph_id[j]
}

/// Block-diagonal batch adjacency: one dense block per window, plus the row
/// offsets that place each block on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct HolisticGraph {
    /// Per window `b`: an `n_b x n_b` weight matrix.
    pub blocks: Vec<Tensor>,
    /// Same prefix sums as the batch the graph was assembled for.
    pub offsets: Vec<usize>,
}

impl HolisticGraph {
    pub fn n_rows(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// True when `(i, j)` falls outside every diagonal block, i.e. the entry
    /// is zero by construction rather than by value.
    pub fn is_structural_zero(&self, i: usize, j: usize) -> bool {
        let block_of = |r: usize| match self.offsets.binary_search(&r) {
            Ok(b) if b + 1 == self.offsets.len() => b - 1, // r == total rows is out of range anyway
            Ok(b) => b,
            Err(b) => b - 1,
        };
        block_of(i) != block_of(j)
    }

    /// Test-only densification to `total x total`; quadratic in batch size.
    pub fn materialize(&self) -> Tensor {
        let total = self.n_rows();
        let mut dense = Tensor::zeros(&[total, total]);
        for (b, block) in self.blocks.iter().enumerate() {
            let base = self.offsets[b];
            let n = block.dim(0);
            for i in 0..n {
                for j in 0..n {
                    dense.set2(base + i, base + j, block.at2(i, j));
                }
            }
        }
        dense
    }
}

/// Builds the block-diagonal adjacency for a batch by asking `provider` for
/// each window's block. The provider receives the window's variable ids and
/// reference slot and must return an `n x n` matrix.
pub fn assemble_graph<F>(batch: &FlatBatch, mut provider: F) -> Result<HolisticGraph>
where
    F: FnMut(&[usize], usize) -> Result<Tensor>,
{
    let mut blocks = Vec::with_capacity(batch.n_subgraphs());
    for b in 0..batch.n_subgraphs() {
        let vars = batch.subgraph_variables(b);
        let block = provider(vars, batch.ref_time[b])?;
        let n = vars.len();
        if block.shape() != [n, n] {
            return Err(Error::Shape(format!(
                "adjacency provider returned {:?} for a {n}-variable window",
                block.shape()
            )));
        }
        blocks.push(block);
    }
    Ok(HolisticGraph {
        blocks,
        offsets: batch.offsets.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_windows, GenConfig, SlotRange};
    use crate::rng::StreamRng;
    use alloc::vec;

    /// Hand-built window with the given variable ids and constant fill.
    fn window(ids: &[usize], history: usize, horizon: usize, fill: f64) -> WindowSample {
        let n = ids.len();
        WindowSample {
            variable_ids: ids.to_vec(),
            inputs: Tensor::filled(&[n, history], fill),
            targets: Tensor::filled(&[n, horizon], fill + 0.5),
            ref_time: 10,
            expanding: ids.iter().map(|&v| v >= 100).collect(),
        }
    }

    /// Random mixed-size batch for property-style checks.
    fn random_batch(rng: &mut StreamRng, max_windows: usize) -> Vec<WindowSample> {
        let n_windows = 1 + rng.index(max_windows);
        let history = 1 + rng.index(6);
        let horizon = 1 + rng.index(4);
        (0..n_windows)
            .map(|b| {
                let n = 1 + rng.index(5);
                let mut ids: Vec<usize> = (0..(n + 3)).collect();
                rng.shuffle(&mut ids);
                ids.truncate(n);
                ids.sort_unstable();
                WindowSample {
                    variable_ids: ids.clone(),
                    inputs: Tensor::randn(&[n, history], 1.0, rng),
                    targets: Tensor::randn(&[n, horizon], 1.0, rng),
                    ref_time: 20 + b,
                    expanding: ids.iter().map(|&v| v % 2 == 0).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn offsets_are_prefix_sums_of_window_sizes() {
        let samples = vec![window(&[0, 1], 4, 2, 1.0), window(&[0, 1, 2], 4, 2, 2.0)];
        let batch = flatten(&samples).unwrap();
        assert_eq!(batch.offsets, vec![0, 2, 5]);
        assert_eq!(batch.n_rows(), 5);
        assert_eq!(batch.subgraph_id, vec![0, 0, 1, 1, 1]);
        assert_eq!(batch.variable_id, vec![0, 1, 0, 1, 2]);
        assert_eq!(batch.subgraph_variables(1), &[0, 1, 2]);
    }

    #[test]
    fn single_window_flattens_to_its_own_rows() {
        let samples = vec![window(&[3, 7, 9], 5, 3, 0.25)];
        let batch = flatten(&samples).unwrap();
        assert_eq!(batch.offsets, vec![0, 3]);
        assert_eq!(batch.rows.shape(), &[3, 5]);
        assert!(batch.rows.data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn sixteen_fixed_windows_make_128_rows() {
        let samples: Vec<WindowSample> = (0..16)
            .map(|_| window(&[0, 1, 2, 3, 4, 5, 6, 7], 12, 12, 1.0))
            .collect();
        let batch = flatten(&samples).unwrap();
        assert_eq!(batch.n_rows(), 128);
        assert_eq!(batch.n_subgraphs(), 16);
    }

    #[test]
    fn flatten_unflatten_is_bitwise_exact() {
        let mut rng = StreamRng::from_seed(21);
        for _ in 0..200 {
            let samples = random_batch(&mut rng, 6);
            let batch = flatten(&samples).unwrap();
            let back = unflatten(&batch);
            assert_eq!(samples, back);
        }
    }

    #[test]
    fn flatten_keeps_real_window_content() {
        // End to end with generated data: every row's content matches its
        // (window, variable) source.
        let cfg = GenConfig {
            n_continual: 3,
            n_expanding: vec![2],
            steps_per_day: 12,
            days_p1: 5,
            days_p2: vec![1],
            days_valid: 1,
            days_test: 1,
            ..GenConfig::default()
        };
        let ds = generate_synthetic(&cfg, &StreamRng::from_seed(3)).unwrap();
        let windows = make_windows(&ds, SlotRange::new(0, 40), 4, 2).unwrap();
        let batch = flatten(&windows).unwrap();
        for (b, w) in windows.iter().enumerate() {
            for r in 0..w.n_rows() {
                let row = batch.offsets[b] + r;
                assert_eq!(batch.rows.row(row), w.inputs.row(r));
                assert_eq!(batch.targets.row(row), w.targets.row(r));
                assert_eq!(batch.variable_id[row], w.variable_ids[r]);
            }
        }
    }

    #[test]
    fn constant_targets_stay_with_their_window() {
        let samples = vec![window(&[0, 1], 3, 2, 1.0), window(&[2, 3, 4], 3, 2, 9.0)];
        let batch = flatten(&samples).unwrap();
        for row in 0..2 {
            assert!(batch.targets.row(row).iter().all(|&x| x == 1.5));
        }
        for row in 2..5 {
            assert!(batch.targets.row(row).iter().all(|&x| x == 9.5));
        }
    }

    #[test]
    fn mismatched_window_shapes_are_rejected() {
        let a = window(&[0, 1], 4, 2, 1.0);
        let b = window(&[0, 1], 5, 2, 1.0); // different history
        assert!(matches!(flatten(&[a, b]), Err(Error::Shape(_))));
        assert!(matches!(flatten(&[]), Err(Error::Config(_))));

        let mut bad = window(&[0, 1], 4, 2, 1.0);
        bad.variable_ids = vec![1, 0]; // out of order
        assert!(matches!(flatten(&[bad]), Err(Error::Shape(_))));
    }

    #[test]
    fn same_subgraph_agrees_with_offset_oracle() {
        let mut rng = StreamRng::from_seed(33);
        for _ in 0..50 {
            let samples = random_batch(&mut rng, 5);
            let batch = flatten(&samples).unwrap();
            // Oracle from offsets alone.
            let block_of = |r: usize| {
                (0..batch.n_subgraphs())
                    .find(|&b| r >= batch.offsets[b] && r < batch.offsets[b + 1])
                    .unwrap()
            };
            for i in 0..batch.n_rows() {
                for j in 0..batch.n_rows() {
                    assert_eq!(same_subgraph(&batch, i, j), block_of(i) == block_of(j));
                }
            }
        }
    }

    #[test]
    fn same_subgraph_is_an_equivalence_relation() {
        let mut rng = StreamRng::from_seed(34);
        let samples = random_batch(&mut rng, 6);
        let batch = flatten(&samples).unwrap();
        let n = batch.n_rows();
        for i in 0..n {
            assert!(same_subgraph(&batch, i, i));
            for j in 0..n {
                assert_eq!(same_subgraph(&batch, i, j), same_subgraph(&batch, j, i));
                for k in 0..n {
                    if same_subgraph(&batch, i, j) && same_subgraph(&batch, j, k) {
                        assert!(same_subgraph(&batch, i, k));
                    }
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "row index out of range")]
    fn same_subgraph_panics_out_of_range() {
        let batch = flatten(&[window(&[0], 2, 1, 0.0)]).unwrap();
        same_subgraph(&batch, 0, 1);
    }

    #[test]
    fn assembled_graph_blocks_sit_on_the_diagonal() {
        let samples = vec![window(&[0, 1], 3, 1, 0.0), window(&[0, 1, 2], 3, 1, 0.0)];
        let batch = flatten(&samples).unwrap();
        // All-ones blocks make the structure easy to read off.
        let graph = assemble_graph(&batch, |vars, _| {
            Ok(Tensor::filled(&[vars.len(), vars.len()], 1.0))
        })
        .unwrap();
        let dense = graph.materialize();
        let possibly_nonzero: usize = dense.data().iter().filter(|&&x| x != 0.0).count();
        assert_eq!(possibly_nonzero, 2 * 2 + 3 * 3);
        for i in 0..batch.n_rows() {
            for j in 0..batch.n_rows() {
                let cross = !same_subgraph(&batch, i, j);
                assert_eq!(graph.is_structural_zero(i, j), cross);
                if cross {
                    assert_eq!(dense.at2(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_blocks_assemble_to_zero() {
        let samples = vec![window(&[0], 2, 1, 0.0), window(&[1, 2], 2, 1, 0.0)];
        let batch = flatten(&samples).unwrap();
        let graph = assemble_graph(&batch, |vars, _| {
            Ok(Tensor::zeros(&[vars.len(), vars.len()]))
        })
        .unwrap();
        assert!(graph.materialize().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn provider_shape_mismatch_is_rejected() {
        let samples = vec![window(&[0, 1], 2, 1, 0.0)];
        let batch = flatten(&samples).unwrap();
        let bad = assemble_graph(&batch, |_, _| Ok(Tensor::zeros(&[3, 3])));
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    #[test]
    fn provider_sees_ref_time_and_variables() {
        let mut a = window(&[4, 9], 2, 1, 0.0);
        a.ref_time = 100;
        let mut b = window(&[2], 2, 1, 0.0);
        b.ref_time = 200;
        let batch = flatten(&[a, b]).unwrap();
        let mut seen = Vec::new();
        assemble_graph(&batch, |vars, t| {
            seen.push((vars.to_vec(), t));
            Ok(Tensor::zeros(&[vars.len(), vars.len()]))
        })
        .unwrap();
        assert_eq!(seen, vec![(vec![4, 9], 100), (vec![2], 200)]);
    }
}
