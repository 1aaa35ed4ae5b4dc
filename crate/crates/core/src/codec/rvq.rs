//! Residual vector quantization of the time-varying style.
//!
//! Latent rows are projected to a low-dimensional code space, quantized by a
//! cascade of codebooks (each stage encoding the residual of the previous
//! ones), and projected back with the transpose of the down-projection. The
//! decoder-side gradient bypasses the whole quantizer (straight-through with
//! identity Jacobian); codebooks learn from a codebook loss, the encoder side
//! from a commitment loss. Entry 0 of every book starts at the zero vector so
//! stage residual norms cannot grow.

use crate::params::{Bound, PId, ParamSet};
use crate::rng::Prng;
use crate::tape::{Graph, NodeId};
use crate::tensor::Tensor;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RvqConfig {
    pub num_stages: usize,
    pub codes_per_book: usize,
    pub code_dim: usize,
}

impl Default for RvqConfig {
    fn default() -> Self {
        RvqConfig { num_stages: 9, codes_per_book: 256, code_dim: 8 }
    }
}

#[derive(Clone)]
pub struct ResidualVq {
    pub cfg: RvqConfig,
    down: PId,
    books: Vec<PId>,
    /// Steps since each code was last selected, for dead-code reseeding.
    usage: Vec<Vec<u64>>,
}

/// Result of quantizing one latent through the graph.
pub struct RvqQuant {
    /// Straight-through node carrying the reconstructed latent value.
    pub hq: NodeId,
    /// Chosen code index per row per stage, `[rows][stages]`.
    pub codes: Vec<Vec<usize>>,
    /// Pulls codebook entries toward the (detached) stage residuals.
    pub codebook_loss: NodeId,
    /// Pulls the projected latent toward the (detached) chosen codes.
    pub commitment_loss: NodeId,
    /// Code-space rows seen this pass, for dead-code reseeding.
    pub z_rows: Tensor,
}

impl ResidualVq {
    pub fn init(ps: &mut ParamSet, name: &str, d_model: usize, cfg: RvqConfig, rng: &mut Prng) -> Self {
        assert!(cfg.num_stages >= 1, "need at least one stage");
        assert!(cfg.codes_per_book >= 1, "empty codebook");
        let down = ps.add(format!("{name}.down"), crate::nn::table_init(rng, d_model, cfg.code_dim, 0.3));
        let books = (0..cfg.num_stages)
            .map(|s| {
                let mut t = crate::nn::table_init(rng, cfg.codes_per_book, cfg.code_dim, 0.3);
                // Zero vector seeded as entry 0 of every book.
                for v in &mut t.data_mut()[..cfg.code_dim] {
                    *v = 0.0;
                }
                ps.add(format!("{name}.book{s}"), t)
            })
            .collect();
        let usage = vec![vec![0u64; cfg.codes_per_book]; cfg.num_stages];
        ResidualVq { cfg, down, books, usage }
    }

    fn nearest(book: &Tensor, row: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..book.rows() {
            let cand = book.row(c);
            let mut d = 0.0;
            for (a, b) in row.iter().zip(cand) {
                let diff = a - b;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }

    /// Code-space stage walk on plain values: returns per-row codes and the
    /// per-stage residual inputs.
    fn assign(&self, books: &[&Tensor], z: &Tensor) -> (Vec<Vec<usize>>, Vec<Tensor>, Tensor) {
        let rows = z.rows();
        let c = self.cfg.code_dim;
        let mut residual = z.clone();
        let mut codes = vec![Vec::with_capacity(self.cfg.num_stages); rows];
        let mut stage_inputs = Vec::with_capacity(self.cfg.num_stages);
        let mut sum_q = Tensor::zeros(&[rows, c]);
        for (s, book) in books.iter().enumerate() {
            stage_inputs.push(residual.clone());
            let mut next = residual.clone();
            for r in 0..rows {
                let idx = Self::nearest(book, residual.row(r));
                codes[r].push(idx);
                let q = book.row(idx).to_vec();
                let nd = next.data_mut();
                let sd = sum_q.data_mut();
                for j in 0..c {
                    nd[r * c + j] -= q[j];
                    sd[r * c + j] += q[j];
                }
            }
            residual = next;
            let _ = s;
        }
        (codes, stage_inputs, sum_q)
    }

    /// Value-level reconstruction shared by quantize and dequantize, so a
    /// round-trip through stored codes is bitwise identical.
    fn reconstruct_value(&self, ps: &ParamSet, codes: &[Vec<usize>]) -> Tensor {
        let c = self.cfg.code_dim;
        let rows = codes.len();
        let mut sum_q = Tensor::zeros(&[rows, c]);
        for (s, book_id) in self.books.iter().enumerate() {
            let book = ps.get(*book_id);
            for (r, row_codes) in codes.iter().enumerate() {
                let q = book.row(row_codes[s]);
                let sd = sum_q.data_mut();
                for j in 0..c {
                    sd[r * c + j] += q[j];
                }
            }
        }
        let down = ps.get(self.down);
        up_project(&sum_q, down)
    }

    /// Quantize a graph latent `[rows, d_model]`. The returned `hq` carries
    /// the reconstruction value while its backward is the identity into `h`.
    pub fn quantize(&self, g: &mut Graph, bound: &Bound, h: NodeId) -> RvqQuant {
        let z = g.matmul(h, bound.node(self.down));
        let z_val = g.value(z).clone();
        let books: Vec<&Tensor> = self.books.iter().map(|&b| g.value(bound.node(b))).collect();
        let (codes, stage_inputs, sum_q) = self.assign(&books, &z_val);

        let down_val = g.value(bound.node(self.down)).clone();
        let hq_val = up_project(&sum_q, &down_val);
        let hq = g.straight_through(h, hq_val);

        // Per-stage losses. Stage inputs are detached for the codebook loss;
        // chosen codes are detached for the commitment loss.
        let mut cb_total: Option<NodeId> = None;
        let mut commit_total: Option<NodeId> = None;
        let mut prefix = Tensor::zeros(&[z_val.rows(), self.cfg.code_dim]);
        for s in 0..self.cfg.num_stages {
            let idx: Vec<usize> = codes.iter().map(|row| row[s]).collect();
            let q_node = g.embedding(bound.node(self.books[s]), &idx);
            let stage_in = g.constant(stage_inputs[s].clone());
            let cb = g.mse_loss(q_node, stage_in);
            cb_total = Some(match cb_total {
                Some(t) => g.add(t, cb),
                None => cb,
            });

            // Residual of z against the detached prefix reconstruction.
            let q_val = g.value(q_node).clone();
            let prefix_node = g.constant(prefix.clone());
            let r_node = g.sub(z, prefix_node);
            let target = g.constant(q_val.clone());
            let commit = g.mse_loss(r_node, target);
            commit_total = Some(match commit_total {
                Some(t) => g.add(t, commit),
                None => commit,
            });
            prefix = prefix.add(&q_val);
        }

        RvqQuant {
            hq,
            codes,
            codebook_loss: cb_total.expect("at least one stage"),
            commitment_loss: commit_total.expect("at least one stage"),
            z_rows: z_val,
        }
    }

    /// Quantize plain values without touching a graph: codes plus the exact
    /// reconstruction.
    pub fn quantize_value(&self, ps: &ParamSet, h: &Tensor) -> (Vec<Vec<usize>>, Tensor) {
        let down = ps.get(self.down);
        let z = matmul_values(h, down);
        let books: Vec<&Tensor> = self.books.iter().map(|&b| ps.get(b)).collect();
        let (codes, _, _) = self.assign(&books, &z);
        let hq = self.reconstruct_value(ps, &codes);
        (codes, hq)
    }

    /// Exact reconstruction from stored codes.
    pub fn dequantize(&self, ps: &ParamSet, codes: &[Vec<usize>]) -> Tensor {
        for row in codes {
            assert_eq!(row.len(), self.cfg.num_stages, "code row has wrong stage count");
            for &c in row {
                assert!(c < self.cfg.codes_per_book, "code index {c} out of range");
            }
        }
        self.reconstruct_value(ps, codes)
    }

    /// Track code usage from a pass and reseed entries unused for more than
    /// `threshold` steps to a random code-space row from the batch. Entry 0
    /// is reseeded like any other once training has moved it.
    pub fn note_usage_and_reseed(
        &mut self,
        ps: &mut ParamSet,
        codes: &[Vec<usize>],
        z_rows: &Tensor,
        threshold: u64,
        rng: &mut Prng,
    ) {
        let stages = self.cfg.num_stages;
        let mut used = vec![vec![false; self.cfg.codes_per_book]; stages];
        for row in codes {
            for (s, &c) in row.iter().enumerate() {
                used[s][c] = true;
            }
        }
        for s in 0..stages {
            for c in 0..self.cfg.codes_per_book {
                if used[s][c] {
                    self.usage[s][c] = 0;
                } else {
                    self.usage[s][c] += 1;
                    if self.usage[s][c] > threshold {
                        let r = rng.below(z_rows.rows());
                        let src = z_rows.row(r).to_vec();
                        let book = ps.get_mut(self.books[s]);
                        let dim = self.cfg.code_dim;
                        book.data_mut()[c * dim..(c + 1) * dim].copy_from_slice(&src);
                        self.usage[s][c] = 0;
                    }
                }
            }
        }
    }

    pub fn down_pid(&self) -> PId {
        self.down
    }

    pub fn book_pids(&self) -> &[PId] {
        &self.books
    }
}

/// `sum_q [rows, c] x down^T [c, d]`: the up-projection is the transpose of
/// the down-projection (tied weights).
fn up_project(sum_q: &Tensor, down: &Tensor) -> Tensor {
    let (rows, c) = (sum_q.rows(), sum_q.cols());
    let d = down.rows();
    assert_eq!(down.cols(), c);
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let q = sum_q.row(r);
        let o = &mut out[r * d..(r + 1) * d];
        for (j, oj) in o.iter_mut().enumerate() {
            let drow = down.row(j);
            let mut acc = 0.0;
            for k in 0..c {
                acc += q[k] * drow[k];
            }
            *oj = acc;
        }
    }
    Tensor::matrix(rows, d, out)
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    assert_eq!(b.rows(), k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.get(i, p);
            for j in 0..n {
                out[i * n + j] += av * b.get(p, j);
            }
        }
    }
    Tensor::matrix(m, n, out)
}
