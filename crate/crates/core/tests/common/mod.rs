#![allow(dead_code)]

use dbswin::layers::Linear;
use dbswin::swin::SwinBlock;
use dbswin_tensor::{ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub fn rng(seed: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

pub fn randomize(ps: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        for v in ps.value_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

pub fn layer_norm_rows(x: &[f64], c: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    x.chunks(c)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(move |(i, v)| (v - mean) * inv * g[i] + b[i])
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn dense(x: &[f64], in_dim: usize, w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let out = w.len() / in_dim;
    x.chunks(in_dim)
        .flat_map(|row| {
            (0..out)
                .map(|o| {
                    let s: f64 = (0..in_dim).map(|i| row[i] * w[i * out + o]).sum();
                    s + b.map_or(0.0, |b| b[o])
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn linear(ps: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    dense(
        x,
        l.in_dim,
        ps.value(l.weight).data(),
        l.bias.map(|b| ps.value(b).data()),
    )
}

pub fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A Swin block evaluated token by token: each token attends to the tokens
/// that share its window group in the original layout, groups being offset
/// by the shift for shifted blocks. Padding is never attended to.
pub fn naive_block(ps: &ParamStore, blk: &SwinBlock, x: &Tensor, shifted: bool) -> Vec<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let m = blk.attn.window;
    let s = if shifted { m / 2 } else { 0 };
    let heads = blk.attn.num_heads;
    let d = c / heads;
    let group = |p: usize| ((p / w + m - s) / m, (p % w + m - s) / m);

    let xs = x.data();
    let y = layer_norm_rows(xs, c, ps.value(blk.norm1.gamma).data(), ps.value(blk.norm1.beta).data());
    let qkv = linear(ps, &blk.attn.qkv, &y);
    let table = ps.value(blk.attn.bias_table).data();
    let span = 2 * m - 1;
    let mut merged = vec![0.0; h * w * c];
    for p in 0..h * w {
        let peers: Vec<usize> = (0..h * w).filter(|&q| group(q) == group(p)).collect();
        for hd in 0..heads {
            let q = &qkv[p * 3 * c + hd * d..p * 3 * c + hd * d + d];
            let logits: Vec<f64> = peers
                .iter()
                .map(|&o| {
                    let k = &qkv[o * 3 * c + c + hd * d..o * 3 * c + c + hd * d + d];
                    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                    let dy = (p / w) as isize - (o / w) as isize + m as isize - 1;
                    let dx = (p % w) as isize - (o % w) as isize + m as isize - 1;
                    let row = dy as usize * span + dx as usize;
                    dot / (d as f64).sqrt() + table[row * heads + hd]
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (a, &o) in e.iter().zip(&peers) {
                for dd in 0..d {
                    merged[p * c + hd * d + dd] += a / z * qkv[o * 3 * c + 2 * c + hd * d + dd];
                }
            }
        }
    }
    let attn = linear(ps, &blk.attn.proj, &merged);
    let x1: Vec<f64> = xs.iter().zip(&attn).map(|(a, b)| a + b).collect();
    let y2 = layer_norm_rows(
        &x1,
        c,
        ps.value(blk.norm2.gamma).data(),
        ps.value(blk.norm2.beta).data(),
    );
    let hidden: Vec<f64> = linear(ps, &blk.fc1, &y2).into_iter().map(gelu_tanh).collect();
    let mlp = linear(ps, &blk.fc2, &hidden);
    x1.iter().zip(&mlp).map(|(a, b)| a + b).collect()
}
