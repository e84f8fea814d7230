//! Plain-tensor forward passes used as hand oracles in unit tests.

use crate::nn::{Attention, Block, CrossBlock, FeedForward, Linear, Norm, ParamStore};
use crate::tensor::{gelu, layer_norm, masked_softmax, matmul, Mask, Tensor, LAYER_NORM_EPS};

fn add_row(a: &Tensor, row: &Tensor) -> Tensor {
    let c = a.cols();
    Tensor::matrix(a.rows(), c, a.data().iter().enumerate().map(|(i, v)| v + row.data()[i % c]).collect())
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::matrix(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

pub fn linear(s: &ParamStore, l: &Linear, x: &Tensor) -> Tensor {
    let y = matmul(x, s.get(l.w)).unwrap();
    match l.b {
        Some(b) => add_row(&y, s.get(b)),
        None => y,
    }
}

pub fn norm(s: &ParamStore, n: &Norm, x: &Tensor) -> Tensor {
    let z = layer_norm(x, LAYER_NORM_EPS);
    let (g, b) = (s.get(n.gamma), s.get(n.beta));
    let c = z.cols();
    Tensor::matrix(
        z.rows(),
        c,
        z.data().iter().enumerate().map(|(i, v)| v * g.data()[i % c] + b.data()[i % c]).collect(),
    )
}

/// Head-by-head attention written out with plain loops over columns.
pub fn attention(s: &ParamStore, a: &Attention, queries: &Tensor, keys: &Tensor, mask: Option<&Mask>) -> Tensor {
    let q = linear(s, &a.q, queries);
    let k = linear(s, &a.k, keys);
    let v = linear(s, &a.v, keys);
    let (nq, d) = q.dims2();
    let nk = k.rows();
    let dh = d / a.heads;
    let full = Mask::full(nq, nk);
    let mask = mask.unwrap_or(&full);
    let mut out = vec![0.0; nq * d];
    for h in 0..a.heads {
        let cols = h * dh..(h + 1) * dh;
        let mut logits = vec![0.0; nq * nk];
        for i in 0..nq {
            for j in 0..nk {
                let dot: f64 = cols.clone().map(|c| q.get(i, c) * k.get(j, c)).sum();
                logits[i * nk + j] = dot / (dh as f64).sqrt();
            }
        }
        let p = masked_softmax(&Tensor::matrix(nq, nk, logits), mask).unwrap();
        for i in 0..nq {
            for c in cols.clone() {
                out[i * d + c] = (0..nk).map(|j| p.get(i, j) * v.get(j, c)).sum();
            }
        }
    }
    linear(s, &a.o, &Tensor::matrix(nq, d, out))
}

pub fn ffn(s: &ParamStore, f: &FeedForward, x: &Tensor) -> Tensor {
    linear(s, &f.down, &linear(s, &f.up, x).map(gelu))
}

pub fn block(s: &ParamStore, b: &Block, x: &Tensor, mask: Option<&Mask>) -> Tensor {
    let h = norm(s, &b.ln1, x);
    let x = add(x, &attention(s, &b.attn, &h, &h, mask));
    let h = norm(s, &b.ln2, &x);
    add(&x, &ffn(s, &b.ffn, &h))
}

pub fn cross_block(s: &ParamStore, b: &CrossBlock, x: &Tensor, memory: &Tensor) -> Tensor {
    let h = norm(s, &b.ln_q, x);
    let m = norm(s, &b.ln_mem, memory);
    let x = add(x, &attention(s, &b.attn, &h, &m, None));
    let h = norm(s, &b.ln2, &x);
    add(&x, &ffn(s, &b.ffn, &h))
}

/// Overwrites every parameter with Gaussian noise so biases and norms matter.
pub fn randomize(s: &mut ParamStore, seed: u64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = s.ids().collect();
    for id in ids {
        let (r, c) = s.get(id).dims2();
        s.set(id, Tensor::randn(r, c, 0.5, &mut rng)).unwrap();
    }
}
