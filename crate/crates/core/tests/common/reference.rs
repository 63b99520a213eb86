//! An independent f64 implementation of the transformer, used as an oracle
//! for the taped forward pass and for end-to-end finite differences.

#![allow(dead_code)]

use std::collections::HashMap;

use mft_core::masking::{hybrid_mask, MaskPlan};
use mft_core::model::{ForwardOptions, MaskMode, ViTModel};
use mft_core::objectives::cross_entropy;
use mft_core::ModelConfig;
use mft_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Weights = HashMap<String, Vec<f64>>;

pub fn cfg() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
    }
}

pub fn weights_of(model: &ViTModel) -> Weights {
    model
        .params
        .entries()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

/// `x[rows × i] · w[i × o] + b[o]`
pub fn affine(x: &[f64], w: &[f64], b: &[f64], i: usize, o: usize) -> Vec<f64> {
    let rows = x.len() / i;
    let mut y = vec![0.0; rows * o];
    for r in 0..rows {
        for c in 0..o {
            let mut acc = b[c];
            for k in 0..i {
                acc += x[r * i + k] * w[k * o + c];
            }
            y[r * o + c] = acc;
        }
    }
    y
}

pub fn norm(x: &[f64], g: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for j in 0..d {
            y.push((row[j] - mean) * inv * g[j] + b[j]);
        }
    }
    y
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()))
}

/// Logits for every sample; `keep[n]` lists the patch indices sample `n`
/// keeps, in order.
pub fn reference_logits(w: &Weights, c: &ModelConfig, images: &[f64], batch: usize, keep: &[Vec<usize>]) -> Vec<f64> {
    let (d, p, s, ch) = (c.embed_dim, c.patch_size, c.image_size, c.channels);
    let g = s / p;
    let hd = d / c.heads;
    let hidden = c.hidden_dim();
    let pd = c.patch_dim();
    let mut logits = Vec::new();
    for n in 0..batch {
        let img = &images[n * ch * s * s..(n + 1) * ch * s * s];
        let mut x: Vec<f64> = (0..d).map(|j| w["cls_token"][j] + w["pos_embed"][j]).collect();
        for &l in &keep[n] {
            let (gy, gx) = (l / g, l % g);
            let mut patch = Vec::with_capacity(pd);
            for cc in 0..ch {
                for py in 0..p {
                    for px in 0..p {
                        patch.push(img[(cc * s + gy * p + py) * s + gx * p + px]);
                    }
                }
            }
            let e = affine(&patch, &w["patch_embed.weight"], &w["patch_embed.bias"], pd, d);
            for j in 0..d {
                x.push(e[j] + w["pos_embed"][(l + 1) * d + j]);
            }
        }
        let t = x.len() / d;
        for b in 0..c.depth {
            let k = |name: &str| &w[&format!("blocks.{b}.{name}")];
            let h = norm(&x, k("norm1.gamma"), k("norm1.beta"), d);
            let q = affine(&h, k("attn.query.weight"), k("attn.query.bias"), d, d);
            let kk = affine(&h, k("attn.key.weight"), k("attn.key.bias"), d, d);
            let v = affine(&h, k("attn.value.weight"), k("attn.value.bias"), d, d);
            let mut ctx = vec![0.0; t * d];
            for head in 0..c.heads {
                for i in 0..t {
                    let scores: Vec<f64> = (0..t)
                        .map(|j| {
                            (0..hd).map(|e| q[i * d + head * hd + e] * kk[j * d + head * hd + e]).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for j in 0..t {
                        let a = (scores[j] - m).exp() / z;
                        for e in 0..hd {
                            ctx[i * d + head * hd + e] += a * v[j * d + head * hd + e];
                        }
                    }
                }
            }
            let o = affine(&ctx, k("attn.proj.weight"), k("attn.proj.bias"), d, d);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            let h = norm(&x, k("norm2.gamma"), k("norm2.beta"), d);
            let h: Vec<f64> = affine(&h, k("mlp.fc1.weight"), k("mlp.fc1.bias"), d, hidden)
                .into_iter()
                .map(gelu)
                .collect();
            let o = affine(&h, k("mlp.fc2.weight"), k("mlp.fc2.bias"), hidden, d);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
        }
        let cls = norm(&x[..d], &w["norm.gamma"], &w["norm.beta"], d);
        logits.extend(affine(&cls, &w["head.weight"], &w["head.bias"], d, c.num_classes));
    }
    logits
}

pub fn reference_ce(w: &Weights, c: &ModelConfig, images: &[f64], keep: &[Vec<usize>], labels: &[usize]) -> f64 {
    let k = c.num_classes;
    let logits = reference_logits(w, c, images, labels.len(), keep);
    let mut total = 0.0;
    for (row, &y) in logits.chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Perturbs weights away from their tiny initial scale so every path
/// carries signal.
pub fn model_with_spread(seed: u64) -> ViTModel {
    let mut model = ViTModel::init(cfg(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    model.params.for_each_mut(|name, t| {
        let spread = if name.ends_with("gamma") { 0.3 } else { 0.5 };
        let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = base + rng.random_range(-spread..spread);
        }
    });
    model
}

pub fn images(batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![batch, 3, 8, 8], |_| rng.random_range(-1.0..1.0))
}

pub fn as_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Worst relative error between taped gradients and central differences
/// of the reference loss over sampled weights.
pub fn end_to_end_check(plan: Option<&MaskPlan>, seed: u64) -> f64 {
    let model = model_with_spread(seed);
    let x = images(2, seed + 1);
    let labels = [1usize, 2];
    let keep: Vec<Vec<usize>> = match plan {
        Some(p) => (0..2).map(|i| p.kept_indices(i)).collect(),
        None => vec![(0..4).collect(); 2],
    };

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let opts = match plan {
        Some(p) => ForwardOptions::masked(p, MaskMode::Drop),
        None => ForwardOptions::default(),
    };
    let out = model.forward_on_tape(&mut tape, &bound, &x, opts).unwrap();
    let loss = cross_entropy(&mut tape, out.logits, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let names: Vec<String> = model.params.names();
    let vars: HashMap<String, mft_tensor::Var> = bound.entries().into_iter().map(|(n, v)| (n, *v)).collect();
    let base = weights_of(&model);
    let xs = as_f64(&x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let name = &names[rng.random_range(0..names.len())];
        let j = rng.random_range(0..base[name].len());
        let h = 1e-3;
        let mut plus = base.clone();
        plus.get_mut(name).unwrap()[j] += h;
        let mut minus = base.clone();
        minus.get_mut(name).unwrap()[j] -= h;
        let numeric = (reference_ce(&plus, &cfg(), &xs, &keep, &labels)
            - reference_ce(&minus, &cfg(), &xs, &keep, &labels))
            / (2.0 * h);
        let analytic = grads.get(vars[name]).unwrap().data()[j] as f64;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    worst
}

/// Worst absolute logit difference from the reference, full and dropped.
pub fn forward_error(seed: u64) -> f64 {
    let model = model_with_spread(seed);
    let x = images(5, seed + 1);
    let w = weights_of(&model);
    let all: Vec<Vec<usize>> = vec![(0..4).collect(); 5];
    let want = reference_logits(&w, &cfg(), &as_f64(&x), 5, &all);
    let got = model.forward(&x, ForwardOptions::default()).unwrap().logits;
    let mut worst = max_diff(got.data(), &want);
    let plan = hybrid_mask(5, 4, &[0.0, 0.25, 0.5, 0.75], seed + 2).unwrap();
    let keep: Vec<Vec<usize>> = (0..5).map(|i| plan.kept_indices(i)).collect();
    let want = reference_logits(&w, &cfg(), &as_f64(&x), 5, &keep);
    for mode in [MaskMode::Drop, MaskMode::AttentionMask] {
        let got = model.forward(&x, ForwardOptions::masked(&plan, mode)).unwrap().logits;
        worst = worst.max(max_diff(got.data(), &want));
    }
    worst
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

/// A fixed partial-keep plan over the four-patch test model.
pub fn sparse_plan() -> MaskPlan {
    MaskPlan::from_rows(&[vec![0u8, 0, 1, 0], vec![1u8, 0, 1, 1]]).unwrap()
}
