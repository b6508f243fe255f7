//! One pre-norm decoder block: RMSNorm → causal multi-head attention with
//! rotary positions → residual, RMSNorm → SiLU MLP → residual.
//!
//! The backward pass is written out by hand; `tests::finite_differences`
//! checks it against central differences on every parameter tensor.

use rand::Rng as _;

use super::kv::LayerCache;
use crate::linalg::{
    dot, matmul, matmul_a_bt, matmul_at_b_acc, rmsnorm, rmsnorm_backward, silu, silu_grad,
    softmax_in_place,
};
use crate::rng::Rng;

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub shape: BlockShape,
    pub attn_norm: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub mlp_norm: Vec<f64>,
    pub w_up: Vec<f64>,
    pub b_up: Vec<f64>,
    pub w_down: Vec<f64>,
    pub b_down: Vec<f64>,
}

/// Everything the backward pass needs from a sequence forward.
#[derive(Debug, Clone)]
pub struct BlockTape {
    pub positions: Vec<u32>,
    pub x: Vec<f64>,
    pub n1: Vec<f64>,
    pub rms1: Vec<f64>,
    /// Rotated queries and keys, `T × d_model`.
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Attention probabilities, `heads × T × T` (zero above the diagonal).
    pub probs: Vec<f64>,
    pub ctx: Vec<f64>,
    pub h: Vec<f64>,
    pub n2: Vec<f64>,
    pub rms2: Vec<f64>,
    pub z: Vec<f64>,
    pub act: Vec<f64>,
    pub out: Vec<f64>,
}

impl BlockTape {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Rotates each head's consecutive coordinate pairs by `position·θ_j`.
/// `inverse` applies the transpose rotation (used to back-propagate).
pub fn rope(row: &mut [f64], position: u32, n_heads: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    for j in 0..half {
        let theta = ROPE_BASE.powf(-2.0 * j as f64 / head_dim as f64);
        let angle = position as f64 * theta;
        let (sin, cos) = angle.sin_cos();
        let sin = if inverse { -sin } else { sin };
        for h in 0..n_heads {
            let a = h * head_dim + 2 * j;
            let (x0, x1) = (row[a], row[a + 1]);
            row[a] = x0 * cos - x1 * sin;
            row[a + 1] = x0 * sin + x1 * cos;
        }
    }
}

fn add_bias(rows: &mut [f64], bias: &[f64]) {
    for chunk in rows.chunks_mut(bias.len()) {
        for (x, b) in chunk.iter_mut().zip(bias) {
            *x += b;
        }
    }
}

fn sum_rows_acc(acc: &mut [f64], rows: &[f64]) {
    for chunk in rows.chunks(acc.len()) {
        for (a, x) in acc.iter_mut().zip(chunk) {
            *a += x;
        }
    }
}

impl Block {
    pub const PARAM_NAMES: [&'static str; 10] = [
        "attn_norm",
        "wq",
        "wk",
        "wv",
        "wo",
        "mlp_norm",
        "w_up",
        "b_up",
        "w_down",
        "b_down",
    ];

    pub fn zeros(shape: BlockShape) -> Self {
        let d = shape.d_model;
        let f = shape.d_ff;
        Self {
            shape,
            attn_norm: vec![0.0; d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            mlp_norm: vec![0.0; d],
            w_up: vec![0.0; d * f],
            b_up: vec![0.0; f],
            w_down: vec![0.0; f * d],
            b_down: vec![0.0; d],
        }
    }

    /// Uniform fan-in scaled initialisation; norm gains start at one.
    pub fn init(shape: BlockShape, rng: &mut Rng) -> Self {
        let mut b = Self::zeros(shape);
        let d = shape.d_model;
        let f = shape.d_ff;
        let mut fill = |v: &mut Vec<f64>, fan_in: usize, scale: f64| {
            let a = scale * (3.0 / fan_in as f64).sqrt();
            for x in v.iter_mut() {
                *x = rng.gen_range(-a..a);
            }
        };
        fill(&mut b.wq, d, 1.0);
        fill(&mut b.wk, d, 1.0);
        fill(&mut b.wv, d, 1.0);
        fill(&mut b.wo, d, 0.5);
        fill(&mut b.w_up, d, 1.0);
        fill(&mut b.w_down, f, 0.5);
        b.attn_norm.fill(1.0);
        b.mlp_norm.fill(1.0);
        b
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    pub fn params(&self) -> [&Vec<f64>; 10] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.iter().all(|x| x.is_finite()))
    }

    /// Causal forward over one sequence `x (T × d)` at the given absolute
    /// positions.
    pub fn forward_seq(&self, x: &[f64], positions: &[u32]) -> BlockTape {
        let BlockShape {
            d_model: d,
            n_heads,
            head_dim,
            d_ff: f,
        } = self.shape;
        let t_len = positions.len();
        debug_assert_eq!(x.len(), t_len * d);

        let (n1, rms1) = rmsnorm(x, &self.attn_norm);
        let mut q = matmul(&n1, &self.wq, t_len, d, d);
        let mut k = matmul(&n1, &self.wk, t_len, d, d);
        let v = matmul(&n1, &self.wv, t_len, d, d);
        for (t, &pos) in positions.iter().enumerate() {
            rope(&mut q[t * d..(t + 1) * d], pos, n_heads, head_dim, false);
            rope(&mut k[t * d..(t + 1) * d], pos, n_heads, head_dim, false);
        }

        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut probs = vec![0.0; n_heads * t_len * t_len];
        let mut ctx = vec![0.0; t_len * d];
        let mut scores = Vec::with_capacity(t_len);
        for h in 0..n_heads {
            let off = h * head_dim;
            for t in 0..t_len {
                let qt = &q[t * d + off..t * d + off + head_dim];
                scores.clear();
                for u in 0..=t {
                    scores.push(dot(qt, &k[u * d + off..u * d + off + head_dim]) * scale);
                }
                softmax_in_place(&mut scores);
                let prow = &mut probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                prow[..=t].copy_from_slice(&scores);
                let crow = &mut ctx[t * d + off..t * d + off + head_dim];
                for (u, &p) in scores.iter().enumerate() {
                    let vu = &v[u * d + off..u * d + off + head_dim];
                    for (c, &vv) in crow.iter_mut().zip(vu) {
                        *c += p * vv;
                    }
                }
            }
        }

        let attn_out = matmul(&ctx, &self.wo, t_len, d, d);
        let h: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let (n2, rms2) = rmsnorm(&h, &self.mlp_norm);
        let mut z = matmul(&n2, &self.w_up, t_len, d, f);
        add_bias(&mut z, &self.b_up);
        let act: Vec<f64> = z.iter().map(|&v| silu(v)).collect();
        let mut mlp = matmul(&act, &self.w_down, t_len, f, d);
        add_bias(&mut mlp, &self.b_down);
        let out = h.iter().zip(&mlp).map(|(a, b)| a + b).collect();

        BlockTape {
            positions: positions.to_vec(),
            x: x.to_vec(),
            n1,
            rms1,
            q,
            k,
            v,
            probs,
            ctx,
            h,
            n2,
            rms2,
            z,
            act,
            out,
        }
    }

    /// Back-propagates `dout` through a recorded forward. Parameter gradients
    /// are accumulated into `grads`; the input gradient is returned.
    pub fn backward(&self, tape: &BlockTape, dout: &[f64], grads: &mut Block) -> Vec<f64> {
        let BlockShape {
            d_model: d,
            n_heads,
            head_dim,
            d_ff: f,
        } = self.shape;
        let t_len = tape.len();

        // MLP branch.
        let dm = dout;
        matmul_at_b_acc(&mut grads.w_down, &tape.act, dm, t_len, f, d);
        sum_rows_acc(&mut grads.b_down, dm);
        let dact = matmul_a_bt(dm, &self.w_down, t_len, d, f);
        let dz: Vec<f64> = dact
            .iter()
            .zip(&tape.z)
            .map(|(g, &z)| g * silu_grad(z))
            .collect();
        matmul_at_b_acc(&mut grads.w_up, &tape.n2, &dz, t_len, d, f);
        sum_rows_acc(&mut grads.b_up, &dz);
        let dn2 = matmul_a_bt(&dz, &self.w_up, t_len, f, d);
        let dh_norm = rmsnorm_backward(
            &tape.h,
            &self.mlp_norm,
            &tape.rms2,
            &dn2,
            &mut grads.mlp_norm,
        );
        let dh: Vec<f64> = dout.iter().zip(&dh_norm).map(|(a, b)| a + b).collect();

        // Attention branch.
        matmul_at_b_acc(&mut grads.wo, &tape.ctx, &dh, t_len, d, d);
        let dctx = matmul_a_bt(&dh, &self.wo, t_len, d, d);
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut dp = vec![0.0; t_len];
        for h in 0..n_heads {
            let off = h * head_dim;
            for t in 0..t_len {
                let prow = &tape.probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                let dc = &dctx[t * d + off..t * d + off + head_dim];
                for u in 0..=t {
                    let vu = &tape.v[u * d + off..u * d + off + head_dim];
                    dp[u] = dot(dc, vu);
                    let dvu = &mut dv[u * d + off..u * d + off + head_dim];
                    for (g, &c) in dvu.iter_mut().zip(dc) {
                        *g += prow[u] * c;
                    }
                }
                let mean: f64 = (0..=t).map(|u| prow[u] * dp[u]).sum();
                for u in 0..=t {
                    let ds = prow[u] * (dp[u] - mean) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..head_dim {
                        dq[t * d + off + j] += ds * tape.k[u * d + off + j];
                        dk[u * d + off + j] += ds * tape.q[t * d + off + j];
                    }
                }
            }
        }
        for (t, &pos) in tape.positions.iter().enumerate() {
            rope(&mut dq[t * d..(t + 1) * d], pos, n_heads, head_dim, true);
            rope(&mut dk[t * d..(t + 1) * d], pos, n_heads, head_dim, true);
        }
        matmul_at_b_acc(&mut grads.wq, &tape.n1, &dq, t_len, d, d);
        matmul_at_b_acc(&mut grads.wk, &tape.n1, &dk, t_len, d, d);
        matmul_at_b_acc(&mut grads.wv, &tape.n1, &dv, t_len, d, d);
        let mut dn1 = matmul_a_bt(&dq, &self.wq, t_len, d, d);
        for (w, g) in [(&self.wk, &dk), (&self.wv, &dv)] {
            for (a, b) in dn1.iter_mut().zip(matmul_a_bt(g, w, t_len, d, d)) {
                *a += b;
            }
        }
        let dx_norm = rmsnorm_backward(
            &tape.x,
            &self.attn_norm,
            &tape.rms1,
            &dn1,
            &mut grads.attn_norm,
        );
        dh.iter().zip(&dx_norm).map(|(a, b)| a + b).collect()
    }

    /// Single-token forward against a cache. The new key/value pair is
    /// appended first (rounded by `round`), then the query attends to every
    /// visible entry: all decode-generated entries plus the prefill entries
    /// listed in `retained` (all of them when `retained` is `None`).
    /// Returns the block output and the number of entries attended to.
    pub fn forward_step(
        &self,
        x: &[f64],
        position: u32,
        cache: &mut LayerCache,
        retained: Option<&[u32]>,
        prefill_len: usize,
        round: impl Fn(f64) -> f64,
    ) -> (Vec<f64>, usize) {
        let BlockShape {
            d_model: d,
            n_heads,
            head_dim,
            d_ff: f,
        } = self.shape;
        let (n1, _) = rmsnorm(x, &self.attn_norm);
        let mut q = matmul(&n1, &self.wq, 1, d, d);
        let mut k = matmul(&n1, &self.wk, 1, d, d);
        let mut v = matmul(&n1, &self.wv, 1, d, d);
        rope(&mut q, position, n_heads, head_dim, false);
        rope(&mut k, position, n_heads, head_dim, false);
        k.iter_mut().for_each(|x| *x = round(*x));
        v.iter_mut().for_each(|x| *x = round(*x));
        cache.push(position, &k, &v);

        let visible: Vec<usize> = (0..cache.len())
            .filter(|&e| {
                let p = cache.positions[e];
                p as usize >= prefill_len || retained.is_none_or(|r| r.binary_search(&p).is_ok())
            })
            .collect();

        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut ctx = vec![0.0; d];
        let mut scores = Vec::with_capacity(visible.len());
        for h in 0..n_heads {
            let off = h * head_dim;
            let qh = &q[off..off + head_dim];
            scores.clear();
            for &e in &visible {
                scores.push(dot(qh, &cache.key(e)[off..off + head_dim]) * scale);
            }
            softmax_in_place(&mut scores);
            let c = &mut ctx[off..off + head_dim];
            for (&e, &p) in visible.iter().zip(&scores) {
                for (cv, &vv) in c.iter_mut().zip(&cache.value(e)[off..off + head_dim]) {
                    *cv += p * vv;
                }
            }
        }

        let attn_out = matmul(&ctx, &self.wo, 1, d, d);
        let h: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let (n2, _) = rmsnorm(&h, &self.mlp_norm);
        let mut z = matmul(&n2, &self.w_up, 1, d, f);
        add_bias(&mut z, &self.b_up);
        let act: Vec<f64> = z.iter().map(|&v| silu(v)).collect();
        let mut mlp = matmul(&act, &self.w_down, 1, f, d);
        add_bias(&mut mlp, &self.b_down);
        let out = h.iter().zip(&mlp).map(|(a, b)| a + b).collect();
        (out, visible.len())
    }
}
