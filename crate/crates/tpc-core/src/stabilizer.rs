//! Attention with an interchangeable sparse path: for each query only the
//! top-k keys by Euclidean distance participate, turning the dense
//! softmax(QK^T)V product into a gather + small matmul per row. Neighbor
//! selection is a forward-only decision; gradients flow through the
//! selected logits and values only.

use serde::{Deserialize, Serialize};

use crate::tensor::{concat_rows, Tensor, TensorError};

/// Attention logit scaling: `sqrt_d` is the usual 1/sqrt(d); `d_literal`
/// divides by d itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    #[default]
    SqrtD,
    DLiteral,
}

impl ScaleMode {
    pub fn factor(self, head_dim: usize) -> f64 {
        match self {
            ScaleMode::SqrtD => 1.0 / (head_dim as f64).sqrt(),
            ScaleMode::DLiteral => 1.0 / head_dim as f64,
        }
    }
}

/// Per-query key/value selection for one attention call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseAttnPlan {
    /// For each query, the selected key (and value) indices, nearest first.
    pub selected: Vec<Vec<usize>>,
    pub kappa_effective: usize,
}

/// Indices of the `kappa` keys closest to `query` in Euclidean distance,
/// ties broken by lowest index. `keys` is row-major `[n, d]`.
pub fn select_topk(query: &[f64], keys: &[f64], head_dim: usize, kappa: usize) -> Vec<usize> {
    assert!(kappa >= 1, "kappa must be at least 1");
    let n = keys.len() / head_dim;
    let mut dists: Vec<(f64, usize)> = (0..n)
        .map(|j| {
            let row = &keys[j * head_dim..(j + 1) * head_dim];
            let d2: f64 = query
                .iter()
                .zip(row)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d2, j)
        })
        .collect();
    dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    dists.truncate(kappa.min(n));
    dists.into_iter().map(|(_, j)| j).collect()
}

/// Build the selection plan for every query row against the current keys.
pub fn build_plan(q: &Tensor, k: &Tensor, kappa: usize) -> SparseAttnPlan {
    let d = q.shape()[1];
    let n_keys = k.shape()[0];
    let qv = q.value();
    let kv = k.value();
    let selected: Vec<Vec<usize>> = (0..q.shape()[0])
        .map(|i| select_topk(&qv[i * d..(i + 1) * d], &kv, d, kappa))
        .collect();
    SparseAttnPlan {
        selected,
        kappa_effective: kappa.min(n_keys),
    }
}

/// Full softmax(QK^T / s) V.
pub fn dense_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scale: ScaleMode,
) -> Result<Tensor, TensorError> {
    let d = q.shape()[1];
    let logits = q.matmul(&k.transpose()?)?.scale(scale.factor(d));
    logits.softmax().matmul(v)
}

/// Row-wise sparse attention over the plan's selected keys and values.
/// The plan must have been built against these K (and matching V) rows.
pub fn sparse_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    plan: &SparseAttnPlan,
    scale: ScaleMode,
) -> Result<Tensor, TensorError> {
    let n = q.shape()[0];
    let d = q.shape()[1];
    if plan.selected.len() != n {
        return Err(TensorError::BadShape {
            op: "sparse_attention",
            expected: "one index list per query row",
            got: q.shape().to_vec(),
        });
    }
    let n_keys = k.shape()[0];
    let mut rows = Vec::with_capacity(n);
    for (i, sel) in plan.selected.iter().enumerate() {
        for &j in sel {
            if j >= n_keys {
                return Err(TensorError::IndexOutOfBounds {
                    op: "sparse_attention",
                    index: j,
                    extent: n_keys,
                });
            }
        }
        let qi = q.gather_rows(&[i])?;
        let ksel = k.gather_rows(sel)?;
        let vsel = v.gather_rows(sel)?;
        let logits = qi.matmul(&ksel.transpose()?)?.scale(scale.factor(d));
        rows.push(logits.softmax().matmul(&vsel)?);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    concat_rows(&refs)
}
