//! Layer builders shared by the encoders, adapters, and decoder.
//!
//! Each layer is a pair of functions: `init_*` registers named parameters in
//! a [`ParamStore`]; the forward function binds them into the current
//! [`Graph`]. Names are dotted paths; callers pass the prefix.

use tgc_tensor::{Graph, NodeId, ParamStore, Real, Result};

use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;
/// Additive score for masked attention keys.
pub const MASK_BIAS: f64 = -1e9;

// ── init ────────────────────────────────────────────────────────────────

pub fn init_linear<F: Real>(
    ps: &mut ParamStore<F>,
    rng: &mut Rng,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) {
    let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
    let w: Vec<F> = (0..in_dim * out_dim)
        .map(|_| F::from_f64(rng.normal() * std))
        .collect();
    ps.insert(&format!("{name}.w"), vec![in_dim, out_dim], w)
        .expect("init_linear");
    ps.insert(&format!("{name}.b"), vec![out_dim], vec![F::ZERO; out_dim])
        .expect("init_linear bias");
}

/// Zero-initialized linear head (deformable offset/weight warm start).
pub fn init_linear_zero<F: Real>(
    ps: &mut ParamStore<F>,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) {
    ps.insert(
        &format!("{name}.w"),
        vec![in_dim, out_dim],
        vec![F::ZERO; in_dim * out_dim],
    )
    .expect("init_linear_zero");
    ps.insert(&format!("{name}.b"), vec![out_dim], vec![F::ZERO; out_dim])
        .expect("init_linear_zero bias");
}

pub fn init_layer_norm<F: Real>(ps: &mut ParamStore<F>, name: &str, dim: usize) {
    ps.insert(&format!("{name}.g"), vec![dim], vec![F::ONE; dim])
        .expect("init_layer_norm");
    ps.insert(&format!("{name}.b"), vec![dim], vec![F::ZERO; dim])
        .expect("init_layer_norm beta");
}

pub fn init_embedding<F: Real>(
    ps: &mut ParamStore<F>,
    rng: &mut Rng,
    name: &str,
    rows: usize,
    dim: usize,
) {
    let data: Vec<F> = (0..rows * dim)
        .map(|_| F::from_f64(rng.normal() * 0.02))
        .collect();
    ps.insert(name, vec![rows, dim], data).expect("init_embedding");
}

pub fn init_conv<F: Real>(
    ps: &mut ParamStore<F>,
    rng: &mut Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    let fan_in = (c_in * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let w: Vec<F> = (0..c_out * c_in * k * k)
        .map(|_| F::from_f64(rng.normal() * std))
        .collect();
    ps.insert(&format!("{name}.w"), vec![c_out, c_in, k, k], w)
        .expect("init_conv");
    ps.insert(&format!("{name}.b"), vec![c_out], vec![F::ZERO; c_out])
        .expect("init_conv bias");
}

pub fn init_attention<F: Real>(ps: &mut ParamStore<F>, rng: &mut Rng, name: &str, dim: usize) {
    for part in ["wq", "wk", "wv", "wo"] {
        init_linear(ps, rng, &format!("{name}.{part}"), dim, dim);
    }
}

pub fn init_transformer_block<F: Real>(
    ps: &mut ParamStore<F>,
    rng: &mut Rng,
    name: &str,
    dim: usize,
    mlp_ratio: usize,
) {
    init_layer_norm(ps, &format!("{name}.ln1"), dim);
    init_attention(ps, rng, &format!("{name}.attn"), dim);
    init_layer_norm(ps, &format!("{name}.ln2"), dim);
    init_linear(ps, rng, &format!("{name}.mlp.fc1"), dim, dim * mlp_ratio);
    init_linear(ps, rng, &format!("{name}.mlp.fc2"), dim * mlp_ratio, dim);
}

// ── forward ─────────────────────────────────────────────────────────────

/// `x . W + b` for rank-2 `[n, d_in]` or rank-3 `[batch, n, d_in]` inputs.
pub fn linear<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = g.param(ps, &format!("{name}.w"))?;
    let b = g.param(ps, &format!("{name}.b"))?;
    let mm = g.matmul(x, w)?;
    g.add(mm, b)
}

pub fn layer_norm<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let gamma = g.param(ps, &format!("{name}.g"))?;
    let beta = g.param(ps, &format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// `[n, heads*dh] -> [heads, n, dh]`
fn split_heads<F: Real>(g: &mut Graph<F>, x: NodeId, heads: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (n, d) = (s[0], s[1]);
    let r = g.reshape(x, vec![n, heads, d / heads])?;
    g.permute3(r, [1, 0, 2])
}

fn merge_heads<F: Real>(g: &mut Graph<F>, x: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (m, n, dh) = (s[0], s[1], s[2]);
    let p = g.permute3(x, [1, 0, 2])?;
    g.reshape(p, vec![n, m * dh])
}

pub struct Attention {
    pub out: NodeId,
    /// Softmaxed scores `[heads, n_q, n_k]`, kept for invariant checks.
    pub weights: NodeId,
}

/// Multi-head attention with separate query and key/value token sets.
/// `key_bias` is an additive per-key score (0 for valid keys, [`MASK_BIAS`]
/// for padding).
pub fn mha<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    name: &str,
    heads: usize,
    q_tokens: NodeId,
    kv_tokens: NodeId,
    key_bias: Option<NodeId>,
) -> Result<Attention> {
    let d = g.shape(q_tokens)[1];
    let dh = d / heads;
    let q = linear(g, ps, &format!("{name}.wq"), q_tokens)?;
    let k = linear(g, ps, &format!("{name}.wk"), kv_tokens)?;
    let v = linear(g, ps, &format!("{name}.wv"), kv_tokens)?;
    let qh = split_heads(g, q, heads)?;
    let kh = split_heads(g, k, heads)?;
    let vh = split_heads(g, v, heads)?;
    let kt = g.permute3(kh, [0, 2, 1])?;
    let scores_raw = g.matmul(qh, kt)?;
    let mut scores = g.scale(scores_raw, 1.0 / (dh as f64).sqrt());
    if let Some(bias) = key_bias {
        scores = g.add(scores, bias)?;
    }
    let weights = g.softmax(scores, 2)?;
    let ctx = g.matmul(weights, vh)?;
    let merged = merge_heads(g, ctx)?;
    let out = linear(g, ps, &format!("{name}.wo"), merged)?;
    Ok(Attention { out, weights })
}

/// Pre-LN transformer block: self-attention then a GELU MLP, both residual.
pub fn transformer_block<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    name: &str,
    heads: usize,
    x: NodeId,
    key_bias: Option<NodeId>,
) -> Result<NodeId> {
    let normed = layer_norm(g, ps, &format!("{name}.ln1"), x)?;
    let attn = mha(g, ps, &format!("{name}.attn"), heads, normed, normed, key_bias)?;
    let h = g.add(x, attn.out)?;
    let normed2 = layer_norm(g, ps, &format!("{name}.ln2"), h)?;
    let up = linear(g, ps, &format!("{name}.mlp.fc1"), normed2)?;
    let act = g.gelu(up);
    let down = linear(g, ps, &format!("{name}.mlp.fc2"), act)?;
    g.add(h, down)
}

/// Additive key-bias node from a validity mask (true = attend).
pub fn key_bias_from_mask<F: Real>(g: &mut Graph<F>, mask: &[bool]) -> Result<NodeId> {
    let data: Vec<F> = mask
        .iter()
        .map(|&m| if m { F::ZERO } else { F::from_f64(MASK_BIAS) })
        .collect();
    g.constant(vec![mask.len()], data)
}

/// Column vector `[n,1]` with 1.0 where the mask is true.
pub fn mask_column<F: Real>(g: &mut Graph<F>, mask: &[bool]) -> Result<NodeId> {
    let data: Vec<F> = mask
        .iter()
        .map(|&m| if m { F::ONE } else { F::ZERO })
        .collect();
    g.constant(vec![mask.len(), 1], data)
}

/// Masked mean over rows of `[n, d]`: mean of rows where mask is true.
pub fn masked_mean_rows<F: Real>(
    g: &mut Graph<F>,
    x: NodeId,
    mask: &[bool],
) -> Result<NodeId> {
    let n_valid = mask.iter().filter(|&&m| m).count().max(1);
    let weights: Vec<F> = mask
        .iter()
        .map(|&m| {
            if m {
                F::from_f64(1.0 / n_valid as f64)
            } else {
                F::ZERO
            }
        })
        .collect();
    let w = g.constant(vec![1, mask.len()], weights)?;
    let mean = g.matmul(w, x)?; // [1, d]
    let d = g.shape(mean)[1];
    g.reshape(mean, vec![d])
}

/// Flatten a `[c, h, w]` grid into `[h*w, c]` token rows.
pub fn grid_to_tokens<F: Real>(g: &mut Graph<F>, x: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let flat = g.reshape(x, vec![c, h * w])?;
    g.transpose(flat)
}

/// Inverse of [`grid_to_tokens`].
pub fn tokens_to_grid<F: Real>(
    g: &mut Graph<F>,
    x: NodeId,
    h: usize,
    w: usize,
) -> Result<NodeId> {
    let c = g.shape(x)[1];
    let t = g.transpose(x)?;
    g.reshape(t, vec![c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use tgc_tensor::Tensor;

    #[test]
    fn attention_rows_sum_to_one_and_respect_mask() {
        let mut ps: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(3);
        init_attention(&mut ps, &mut rng, "train.t.attn", 8);
        let mut g: Graph<f32> = Graph::new();
        let q = g
            .leaf(Tensor::from_vec(vec![3, 8], (0..24).map(|i| (i as f32).sin()).collect()).unwrap());
        let kv = g
            .leaf(Tensor::from_vec(vec![4, 8], (0..32).map(|i| (i as f32).cos()).collect()).unwrap());
        let mask = [true, true, false, true];
        let bias = key_bias_from_mask(&mut g, &mask).unwrap();
        let attn = mha(&mut g, &ps, "train.t.attn", 2, q, kv, Some(bias)).unwrap();
        let w = g.data(attn.weights);
        // [heads=2, nq=3, nk=4]
        for h in 0..2 {
            for r in 0..3 {
                let row = &w[(h * 3 + r) * 4..(h * 3 + r + 1) * 4];
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row[2] < 1e-12, "masked key got attention {}", row[2]);
            }
        }
    }

    #[test]
    fn grid_token_round_trip() {
        let mut g: Graph<f32> = Graph::new();
        let x = g
            .constant(vec![2, 3, 4], (0..24).map(|i| i as f32).collect())
            .unwrap();
        let t = grid_to_tokens(&mut g, x).unwrap();
        assert_eq!(g.shape(t), &[12, 2]);
        let back = tokens_to_grid(&mut g, t, 3, 4).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn masked_mean_ignores_padded_rows() {
        let mut g: Graph<f32> = Graph::new();
        let x = g
            .constant(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 100.0, 200.0])
            .unwrap();
        let m = masked_mean_rows(&mut g, x, &[true, true, false]).unwrap();
        assert_eq!(g.data(m), &[2.0, 3.0]);
    }
}
