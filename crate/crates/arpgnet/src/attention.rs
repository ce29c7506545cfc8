//! Masked multi-head graph attention and sinusoidal positional encoding.
//!
//! One attention layer scores every edge `(i, j)` of a fixed adjacency by
//! `leaky_relu(att · [W·x_i ‖ W·x_j])`, normalizes the scores per node with a
//! masked softmax over its neighborhood, and replaces each node feature with
//! the activated, attention-weighted sum of its neighbors' projected
//! features. Head outputs are averaged, not concatenated. The same layer
//! serves both the patch relation branch and the two-sequence fusion module.

use crate::graphs::AdjacencyMatrix;
use crate::numerics::{Scalar, Tape, Tensor, TensorError};

/// Output nonlinearity applied to the aggregated neighborhood sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    /// Leaky rectifier with the given negative slope.
    LeakyRelu(f64),
}

impl Activation {
    fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        match self {
            Activation::Identity => Ok(x.clone()),
            Activation::LeakyRelu(slope) => x.leaky_relu(T::from_f64(*slope)),
        }
    }
}

/// Parameters of one attention head: a projection and an edge-scoring
/// vector over the concatenated pair of projected features.
#[derive(Clone)]
pub struct GatHead<T: Scalar> {
    /// Projection matrix, shape `[h_out, h_in]`.
    pub w: Tensor<T>,
    /// Edge scoring vector, shape `[2 * h_out]`; the first half scores the
    /// source node, the second half the neighbor.
    pub att: Tensor<T>,
}

/// Parameters of one multi-head attention layer. All heads share the same
/// input and output widths.
#[derive(Clone)]
pub struct GatLayerParams<T: Scalar> {
    pub heads: Vec<GatHead<T>>,
    /// Negative slope of the rectifier applied to raw edge scores.
    pub attention_negative_slope: f64,
    /// Nonlinearity applied to each head's aggregated output.
    pub output_activation: Activation,
}

impl<T: Scalar> GatLayerParams<T> {
    pub fn new(
        heads: Vec<GatHead<T>>,
        attention_negative_slope: f64,
        output_activation: Activation,
    ) -> Result<Self, TensorError> {
        let first = heads.first().ok_or_else(|| TensorError::InvalidShape {
            op: "gat_layer",
            shape: vec![0],
            reason: "a layer needs at least one head".to_string(),
        })?;
        let (h_out, h_in) = (first.w.shape()[0], first.w.shape()[1]);
        for head in &heads {
            let wshape = head.w.shape();
            if wshape != vec![h_out, h_in] || head.att.shape() != vec![2 * h_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "gat_layer",
                    left: wshape,
                    right: head.att.shape(),
                });
            }
        }
        Ok(GatLayerParams {
            heads,
            attention_negative_slope,
            output_activation,
        })
    }

    /// Input feature width.
    pub fn h_in(&self) -> usize {
        self.heads[0].w.shape()[1]
    }

    /// Output feature width.
    pub fn h_out(&self) -> usize {
        self.heads[0].w.shape()[0]
    }
}

/// One normalized attention coefficient, oriented along the message flow:
/// the target node `dst` weighs the features of its neighbor `src` by
/// `beta`. Per head, the records sharing a `dst` sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub head: usize,
    pub src: usize,
    pub dst: usize,
    pub beta: f64,
}

/// One multi-head attention layer over a fixed adjacency.
///
/// Returns the averaged head outputs, shape `[n, h_out]`, along with every
/// normalized coefficient as an [`AttentionRecord`] (head-major, then target
/// node, then neighbor in ascending order). Coefficients of non-edges are
/// exactly zero and produce no record.
pub fn gat_forward<T: Scalar>(
    x: &Tensor<T>,
    adj: &AdjacencyMatrix,
    params: &GatLayerParams<T>,
) -> Result<(Tensor<T>, Vec<AttentionRecord>), TensorError> {
    let shape = x.shape();
    if shape.len() != 2 || shape[0] != adj.n_nodes() || shape[1] != params.h_in() {
        return Err(TensorError::ShapeMismatch {
            op: "gat_forward",
            left: shape,
            right: vec![adj.n_nodes(), params.h_in()],
        });
    }
    let n = adj.n_nodes();
    let h_out = params.h_out();
    let slope = T::from_f64(params.attention_negative_slope);
    let mut records = Vec::new();
    let mut mean: Option<Tensor<T>> = None;
    for (head_idx, head) in params.heads.iter().enumerate() {
        let wx = x.linear(&head.w, None)?;
        let att_col = head.att.reshape(&[2 * h_out, 1])?;
        let src_score = wx.matmul(&att_col.slice_rows(0, h_out)?)?.reshape(&[n])?;
        let dst_score = wx.matmul(&att_col.slice_rows(h_out, h_out)?)?.reshape(&[n])?;
        let scores = src_score.outer_sum(&dst_score)?.leaky_relu(slope)?;
        let beta = scores.masked_softmax(adj)?;
        let beta_values = beta.value();
        for i in 0..n {
            for j in 0..n {
                if adj.get(i, j) {
                    records.push(AttentionRecord {
                        head: head_idx,
                        src: j,
                        dst: i,
                        beta: beta_values[i * n + j].to_f64(),
                    });
                }
            }
        }
        let aggregated = params.output_activation.apply(&beta.matmul(&wx)?)?;
        mean = Some(match mean {
            None => aggregated,
            Some(acc) => acc.add(&aggregated)?,
        });
    }
    let k = T::from_usize(params.heads.len());
    let out = mean
        .expect("layer construction guarantees at least one head")
        .scale(T::one() / k)?;
    Ok((out, records))
}

/// Sinusoidal positional encoding table of shape `[t_len, d]`: for position
/// `pos` and dimension pair `k`, column `2k` holds `sin(pos / 10000^(2k/d))`
/// and column `2k+1` the matching cosine. `d` must be even.
pub fn positional_encoding<T: Scalar>(
    tape: &Tape<T>,
    t_len: usize,
    d: usize,
) -> Result<Tensor<T>, TensorError> {
    if d == 0 || d % 2 != 0 {
        return Err(TensorError::InvalidShape {
            op: "positional_encoding",
            shape: vec![t_len, d],
            reason: "encoding dimension must be even and positive".to_string(),
        });
    }
    if t_len == 0 {
        return Err(TensorError::InvalidShape {
            op: "positional_encoding",
            shape: vec![t_len, d],
            reason: "sequence length must be positive".to_string(),
        });
    }
    let mut data = Vec::with_capacity(t_len * d);
    for pos in 0..t_len {
        for k in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            data.push(T::from_f64(angle.sin()));
            data.push(T::from_f64(angle.cos()));
        }
    }
    tape.constant(&[t_len, d], &data)
}

/// Adds the positional encoding table to a `[t, d]` sequence elementwise.
pub fn add_positional_encoding<T: Scalar>(seq: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let shape = seq.shape();
    if shape.len() != 2 {
        return Err(TensorError::InvalidShape {
            op: "add_positional_encoding",
            shape,
            reason: "expected a [time, features] sequence".to_string(),
        });
    }
    let table = positional_encoding(&seq.tape, shape[0], shape[1])?;
    seq.add(&table)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Path graph 0-1-2 with self-loops.
    fn path3() -> AdjacencyMatrix {
        let mut adj = AdjacencyMatrix::new(3);
        for i in 0..3 {
            adj.set(i, i, true);
        }
        for (i, j) in [(0, 1), (1, 2)] {
            adj.set(i, j, true);
            adj.set(j, i, true);
        }
        adj
    }

    fn single_head_params(
        tape: &Tape<f64>,
        w: &[f64],
        att: &[f64],
        activation: Activation,
    ) -> GatLayerParams<f64> {
        let h_out = att.len() / 2;
        let h_in = w.len() / h_out;
        let head = GatHead {
            w: tape.param(&[h_out, h_in], w).unwrap(),
            att: tape.param(&[2 * h_out], att).unwrap(),
        };
        GatLayerParams::new(vec![head], 0.01, activation).unwrap()
    }

    #[test]
    fn scalar_path_graph_matches_hand_computation() {
        // Hand-derivable 1-wide case: W=[2], att=[1,1], identity output.
        // Projected features are [2, -2, 1]; edge scores are rectified
        // pairwise sums, normalized per neighborhood.
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[3, 1], &[1.0, -1.0, 0.5]).unwrap();
        let params = single_head_params(&tape, &[2.0], &[1.0, 1.0], Activation::Identity);
        let (out, records) = gat_forward(&x, &path3(), &params).unwrap();

        let expected_out = [1.928055160152, 0.362090529720, 0.645529066572];
        for (got, want) in out.value().iter().zip(expected_out.iter()) {
            assert!(approx(*got, *want, 1e-9), "output {got} vs {want}");
        }

        let expected_beta = [
            (0, 0, 0.982013790038),
            (1, 0, 0.017986209962),
            (0, 1, 0.338886637840),
            (1, 1, 0.325598702707),
            (2, 1, 0.335514659453),
            (1, 2, 0.118156977809),
            (2, 2, 0.881843022191),
        ];
        assert_eq!(records.len(), expected_beta.len());
        for (record, (src, dst, beta)) in records.iter().zip(expected_beta.iter()) {
            assert_eq!(record.head, 0);
            assert_eq!((record.src, record.dst), (*src, *dst));
            assert!(
                approx(record.beta, *beta, 1e-9),
                "beta[{src},{dst}] {} vs {beta}",
                record.beta
            );
        }
    }

    #[test]
    fn identical_features_make_attention_irrelevant() {
        // Every neighborhood average of identical projected features is that
        // feature itself, so att must not influence the output.
        let tape: Tape<f64> = Tape::new();
        let v = [0.3, -0.7];
        let x = tape
            .constant(&[3, 2], &[v[0], v[1], v[0], v[1], v[0], v[1]])
            .unwrap();
        let w = [0.5, -1.0, 2.0, 0.25, 1.5, -0.5];
        let head_a = GatHead {
            w: tape.param(&[3, 2], &w).unwrap(),
            att: tape.param(&[6], &[1.0, -2.0, 0.5, 3.0, -1.0, 0.7]).unwrap(),
        };
        let head_b = GatHead {
            w: tape.param(&[3, 2], &w).unwrap(),
            att: tape.param(&[6], &[-5.0, 2.0, 1.5, 0.0, 4.0, -3.0]).unwrap(),
        };
        let params =
            GatLayerParams::new(vec![head_a, head_b], 0.01, Activation::LeakyRelu(0.01)).unwrap();
        let (out, _) = gat_forward(&x, &path3(), &params).unwrap();
        let values = out.value();
        // W v = [0.85, 0.425, 0.8], positive, so the activation passes it
        // through; both heads share W, so the average equals W v per row.
        let wv = [
            0.5 * v[0] - 1.0 * v[1],
            2.0 * v[0] + 0.25 * v[1],
            1.5 * v[0] - 0.5 * v[1],
        ];
        for row in 0..3 {
            for (col, expect) in wv.iter().enumerate() {
                assert!(
                    approx(values[row * 3 + col], *expect, 1e-9),
                    "row {row} col {col}"
                );
            }
        }
    }

    #[test]
    fn non_edges_get_no_weight_and_no_record() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = tape.constant(&[3, 2], &data).unwrap();
        let params = single_head_params(
            &tape,
            &[0.4, -0.3, 0.9, 0.1],
            &[0.2, -0.6, 1.1, 0.8],
            Activation::LeakyRelu(0.01),
        );
        let adj = path3();
        let (_, records) = gat_forward(&x, &adj, &params).unwrap();
        assert!(records.iter().all(|r| adj.get(r.dst, r.src)));
        assert!(!records.iter().any(|r| (r.src, r.dst) == (0, 2)));
        // The coefficient matrix itself must hold exact zeros off-graph.
        let beta_sum: f64 = records.iter().filter(|r| r.dst == 0).map(|r| r.beta).sum();
        assert!(approx(beta_sum, 1.0, 1e-12));
    }

    #[test]
    fn incoming_weights_are_stochastic_per_head() {
        let tape: Tape<f32> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 7;
        let mut adj = AdjacencyMatrix::new(n);
        for i in 0..n {
            adj.set(i, i, true);
        }
        for _ in 0..8 {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            adj.set(i, j, true);
            adj.set(j, i, true);
        }
        let data: Vec<f32> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = tape.constant(&[n, 4], &data).unwrap();
        let heads: Vec<GatHead<f32>> = (0..3)
            .map(|_| GatHead {
                w: tape
                    .param(
                        &[2, 4],
                        &(0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f32>>(),
                    )
                    .unwrap(),
                att: tape
                    .param(
                        &[4],
                        &(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f32>>(),
                    )
                    .unwrap(),
            })
            .collect();
        let params = GatLayerParams::new(heads, 0.01, Activation::LeakyRelu(0.01)).unwrap();
        let (_, records) = gat_forward(&x, &adj, &params).unwrap();
        for head in 0..3 {
            for i in 0..n {
                let sum: f64 = records
                    .iter()
                    .filter(|r| r.head == head && r.dst == i)
                    .map(|r| r.beta)
                    .sum();
                assert!(approx(sum, 1.0, 1e-6), "head {head} node {i} sums to {sum}");
            }
        }
    }

    #[test]
    fn changing_a_non_neighbor_leaves_output_unchanged() {
        let tape: Tape<f64> = Tape::new();
        let params = single_head_params(
            &tape,
            &[0.7, -0.2],
            &[0.3, 0.9],
            Activation::LeakyRelu(0.01),
        );
        let adj = path3();
        let base = [0.1, 0.4, -0.5, 0.8, 0.2, -0.3];
        let x1 = tape.constant(&[3, 2], &base).unwrap();
        let (out1, _) = gat_forward(&x1, &adj, &params).unwrap();
        let row0_before = out1.value()[0];
        // Node 2 is not a neighbor of node 0 in the path graph.
        let mut changed = base;
        changed[4] = 5.0;
        changed[5] = -7.0;
        let x2 = tape.constant(&[3, 2], &changed).unwrap();
        let (out2, _) = gat_forward(&x2, &adj, &params).unwrap();
        assert_eq!(row0_before, out2.value()[0]);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tape: Tape<f32> = Tape::new();
        let n = 6;
        let mut adj = AdjacencyMatrix::new(n);
        for i in 0..n {
            adj.set(i, i, true);
        }
        for _ in 0..7 {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            adj.set(i, j, true);
            adj.set(j, i, true);
        }
        let h = 3;
        let data: Vec<f32> = (0..n * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..2 * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let att: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let perm = [2usize, 0, 5, 3, 1, 4];
        let mut permuted_data = vec![0f32; n * h];
        let mut permuted_adj = AdjacencyMatrix::new(n);
        for i in 0..n {
            for c in 0..h {
                permuted_data[perm[i] * h + c] = data[i * h + c];
            }
            for j in 0..n {
                if adj.get(i, j) {
                    permuted_adj.set(perm[i], perm[j], true);
                }
            }
        }

        let params = |tape: &Tape<f32>| -> GatLayerParams<f32> {
            let head = GatHead {
                w: tape.param(&[2, h], &w).unwrap(),
                att: tape.param(&[4], &att).unwrap(),
            };
            GatLayerParams::new(vec![head], 0.01, Activation::LeakyRelu(0.01)).unwrap()
        };
        let x = tape.constant(&[n, h], &data).unwrap();
        let (out, _) = gat_forward(&x, &adj, &params(&tape)).unwrap();
        let xp = tape.constant(&[n, h], &permuted_data).unwrap();
        let (out_p, _) = gat_forward(&xp, &permuted_adj, &params(&tape)).unwrap();

        let (y, yp) = (out.value(), out_p.value());
        for i in 0..n {
            for c in 0..2 {
                let a = y[i * 2 + c];
                let b = yp[perm[i] * 2 + c];
                assert!(
                    (a - b).abs() < 1e-5,
                    "node {i} col {c}: {a} vs {b} after permutation"
                );
            }
        }
    }

    #[test]
    fn gat_rejects_mismatched_input_width() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[3, 3], &[0.0; 9]).unwrap();
        let params = single_head_params(&tape, &[1.0, 2.0], &[1.0, 1.0], Activation::Identity);
        assert!(matches!(
            gat_forward(&x, &path3(), &params),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn encoding_row_zero_alternates_zero_one() {
        let tape: Tape<f64> = Tape::new();
        let table = positional_encoding(&tape, 3, 6).unwrap();
        let row0 = &table.value()[0..6];
        assert_eq!(row0, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encoding_matches_direct_evaluation() {
        let tape: Tape<f64> = Tape::new();
        let table = positional_encoding(&tape, 2, 4).unwrap();
        let v = table.value();
        assert!(approx(v[4], 0.8414709848078965, 1e-15)); // sin(1)
        assert!(approx(v[5], 0.5403023058681398, 1e-15)); // cos(1)
        assert!(approx(v[6], 0.009999833334166664, 1e-15)); // sin(1/100)
        assert!(approx(v[7], 0.9999500004166653, 1e-15)); // cos(1/100)
    }

    #[test]
    fn encoding_values_bounded_and_rows_distinct() {
        let tape: Tape<f32> = Tape::new();
        let t = 64;
        let d = 16;
        let table = positional_encoding(&tape, t, d).unwrap();
        let v = table.value();
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        for a in 0..t {
            for b in a + 1..t {
                let row_a = &v[a * d..(a + 1) * d];
                let row_b = &v[b * d..(b + 1) * d];
                assert_ne!(row_a, row_b, "rows {a} and {b} collide");
            }
        }
    }

    #[test]
    fn encoding_rejects_odd_dimension() {
        let tape: Tape<f64> = Tape::new();
        assert!(positional_encoding(&tape, 4, 5).is_err());
        assert!(positional_encoding(&tape, 4, 0).is_err());
    }

    #[test]
    fn adding_encoding_to_zeros_yields_the_table() {
        let tape: Tape<f64> = Tape::new();
        let zeros = tape.constant(&[3, 4], &[0.0; 12]).unwrap();
        let encoded = add_positional_encoding(&zeros).unwrap();
        let table = positional_encoding(&tape, 3, 4).unwrap();
        assert_eq!(encoded.value(), table.value());
    }

    #[test]
    fn adding_encoding_twice_differs_by_the_table() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seq = tape.constant(&[2, 4], &data).unwrap();
        let once = add_positional_encoding(&seq).unwrap();
        let twice = add_positional_encoding(&once).unwrap();
        let table = positional_encoding(&tape, 2, 4).unwrap();
        let diff: Vec<f64> = twice
            .value()
            .iter()
            .zip(once.value().iter())
            .map(|(a, b)| a - b)
            .collect();
        for (d, t) in diff.iter().zip(table.value().iter()) {
            assert!(approx(*d, *t, 1e-12));
        }
    }

    #[test]
    fn single_frame_sequence_gets_row_zero() {
        let tape: Tape<f64> = Tape::new();
        let seq = tape.constant(&[1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let encoded = add_positional_encoding(&seq).unwrap();
        assert_eq!(encoded.value(), vec![1.0, 3.0, 3.0, 5.0]);
    }
}
