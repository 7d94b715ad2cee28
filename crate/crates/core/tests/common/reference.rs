//! Loop-based attention reference, independent of the reshaping implementation.

use vidmask_core::model::{Linear, WindowAttention};
use vidmask_core::tensor::ParamStore;
use vidmask_core::Array;

fn linear(store: &ParamStore<f64>, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(lin.w);
    let b = store.value(lin.b);
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / din;
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut s = b.data()[o];
            for i in 0..din {
                s += x[r * din + i] * w.data()[i * dout + o];
            }
            out[r * dout + o] = s;
        }
    }
    out
}

/// Attention over `[B, T, h, w, d]` where token `i` attends to token `j` iff both
/// lie in the same window tile; the bias entry is looked up from the global
/// coordinate difference.
pub fn dense_attention(store: &ParamStore<f64>, layer: &WindowAttention, x: &Array<f64>) -> Array<f64> {
    let s = x.shape();
    let (b, t, h, w, d) = (s[0], s[1], s[2], s[3], s[4]);
    let win = layer.window;
    let heads = layer.heads;
    let dh = d / heads;
    let q = linear(store, &layer.q, x.data());
    let k = linear(store, &layer.k, x.data());
    let v = linear(store, &layer.v, x.data());
    let bias = store.value(layer.bias);
    let span = bias.shape()[1];
    let n = t * h * w;
    let coord = |i: usize| [i / (h * w), (i / w) % h, i % w];
    let tile = |c: [usize; 3]| [c[0] / win.t, c[1] / win.y, c[2] / win.x];
    let mut ctx = vec![0.0; b * n * d];
    for bi in 0..b {
        for hd in 0..heads {
            for i in 0..n {
                let ci = coord(i);
                let mut logits = Vec::new();
                let mut keys = Vec::new();
                for j in 0..n {
                    let cj = coord(j);
                    if tile(ci) != tile(cj) {
                        continue;
                    }
                    let mut dot = 0.0;
                    for e in 0..dh {
                        dot += q[(bi * n + i) * d + hd * dh + e] * k[(bi * n + j) * d + hd * dh + e];
                    }
                    let dt = ci[0] % win.t + win.t - 1 - cj[0] % win.t;
                    let dy = ci[1] % win.y + win.y - 1 - cj[1] % win.y;
                    let dx = ci[2] % win.x + win.x - 1 - cj[2] % win.x;
                    let r = (dt * (2 * win.y - 1) + dy) * (2 * win.x - 1) + dx;
                    logits.push(dot / (dh as f64).sqrt() + bias.data()[hd * span + r]);
                    keys.push(j);
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (l, &j) in logits.iter().zip(&keys) {
                    let p = (l - m).exp() / z;
                    for e in 0..dh {
                        ctx[(bi * n + i) * d + hd * dh + e] += p * v[(bi * n + j) * d + hd * dh + e];
                    }
                }
            }
        }
    }
    Array::new(s.to_vec(), linear(store, &layer.out, &ctx)).unwrap()
}
