//! Central finite differences (step 1e-3) over independent f64 reference
//! implementations, compared against the tape's f32 adjoints.

#![allow(dead_code)]

use mft_tensor::{Index, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Builds `loss = Σ w ⊙ op(inputs)` on a tape and returns the worst
/// relative error of any input gradient against finite differences of
/// `reference`.
fn check(
    name: &'static str,
    shapes: &[&[usize]],
    seed: u64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> (&'static str, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = shapes.iter().map(|s| random(&mut rng, s.iter().product())).collect();
    let out_len = reference(&inputs).len();
    let weights = random(&mut rng, out_len);

    let mut tape = Tape::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(&inputs)
        .map(|(s, x)| tape.param(Tensor::new(s.to_vec(), x.iter().map(|&v| v as f32).collect()).unwrap()))
        .collect();
    let out = build(&mut tape, &vars);
    assert_eq!(tape.value(out).numel(), out_len, "{name}: output size");
    let w = tape.constant(
        Tensor::new(tape.shape(out).to_vec(), weights.iter().map(|&v| v as f32).collect()).unwrap(),
    );
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let objective = |xs: &[Vec<f64>]| -> f64 {
        reference(xs).iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let mut worst = 0.0f64;
    for (vi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap();
        for j in 0..inputs[vi].len() {
            let mut plus = inputs.clone();
            plus[vi][j] += STEP;
            let mut minus = inputs.clone();
            minus[vi][j] -= STEP;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * STEP);
            let a = analytic.data()[j] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    (name, worst)
}

fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

fn softmax_ref(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v.exp() / z).collect()
}

fn matmul_sum_gradient_at_3x3(out: &mut Vec<(&'static str, f64)>) {
    out.push(check(
        "matmul",
        &[&[3, 3], &[3, 3]],
        1,
        |t, v| t.matmul(v[0], v[1]).unwrap(),
        |x| matmul_ref(&x[0], &x[1], 3, 3, 3),
    ));
}

fn matmul_batched_with_shared_rhs(out: &mut Vec<(&'static str, f64)>) {
    out.push(check(
        "matmul [2,3,4]x[4,2]",
        &[&[2, 3, 4], &[4, 2]],
        2,
        |t, v| t.matmul(v[0], v[1]).unwrap(),
        |x| {
            let mut out = matmul_ref(&x[0][..12], &x[1], 3, 4, 2);
            out.extend(matmul_ref(&x[0][12..], &x[1], 3, 4, 2));
            out
        },
    ));
}

fn matmul_broadcast_batch(out: &mut Vec<(&'static str, f64)>) {
    // a: [2,1,2,3] b: [3,3,2] -> [2,3,2,2]
    out.push(check(
        "matmul broadcast",
        &[&[2, 1, 2, 3], &[3, 3, 2]],
        3,
        |t, v| t.matmul(v[0], v[1]).unwrap(),
        |x| {
            let mut out = Vec::new();
            for i in 0..2 {
                for j in 0..3 {
                    out.extend(matmul_ref(&x[0][i * 6..i * 6 + 6], &x[1][j * 6..j * 6 + 6], 2, 3, 2));
                }
            }
            out
        },
    ));
}

fn softmax_last_and_leading_axis(out: &mut Vec<(&'static str, f64)>) {
    out.push(check(
        "softmax last",
        &[&[3, 4]],
        4,
        |t, v| t.softmax(v[0], 1).unwrap(),
        |x| x[0].chunks(4).flat_map(softmax_ref).collect(),
    ));
    out.push(check(
        "softmax axis0",
        &[&[3, 2]],
        5,
        |t, v| t.softmax(v[0], 0).unwrap(),
        |x| {
            let mut out = vec![0.0; 6];
            for c in 0..2 {
                let col: Vec<f64> = (0..3).map(|r| x[0][r * 2 + c]).collect();
                for (r, v) in softmax_ref(&col).into_iter().enumerate() {
                    out[r * 2 + c] = v;
                }
            }
            out
        },
    ));
}

fn log_softmax_gradient(out: &mut Vec<(&'static str, f64)>) {
    out.push(check(
        "log_softmax",
        &[&[2, 5]],
        6,
        |t, v| t.log_softmax(v[0]).unwrap(),
        |x| x[0].chunks(5).flat_map(|r| softmax_ref(r).into_iter().map(f64::ln)).collect(),
    ));
}

fn layer_norm_gradient(out: &mut Vec<(&'static str, f64)>) {
    let eps = 1e-6;
    out.push(check(
        "layer_norm",
        &[&[3, 6], &[6], &[6]],
        7,
        |t, v| t.layer_norm(v[0], v[1], v[2], eps as f32).unwrap(),
        |x| {
            let mut out = Vec::new();
            for row in x[0].chunks(6) {
                let mean = row.iter().sum::<f64>() / 6.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
                for (j, v) in row.iter().enumerate() {
                    out.push((v - mean) / (var + eps).sqrt() * x[1][j] + x[2][j]);
                }
            }
            out
        },
    ));
}

fn gelu_gradient(out: &mut Vec<(&'static str, f64)>) {
    out.push(check(
        "gelu",
        &[&[10]],
        8,
        |t, v| t.gelu(v[0]),
        |x| x[0].iter().map(|&v| 0.5 * v * (1.0 + erf_series(v / 2f64.sqrt()))).collect(),
    ));
}

/// Maclaurin series for erf; inputs here stay within |x| < 2.
fn erf_series(x: f64) -> f64 {
    assert!(x.abs() < 3.0);
    let mut sum = 0.0;
    let mut term = x;
    let mut n = 0.0;
    while term.abs() > 1e-17 {
        sum += term / (2.0 * n + 1.0);
        n += 1.0;
        term *= -x * x / n;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn broadcast_elementwise_gradients(out: &mut Vec<(&'static str, f64)>) {
    out.push(check(
        "add bias",
        &[&[2, 3], &[3]],
        9,
        |t, v| t.add(v[0], v[1]).unwrap(),
        |x| (0..6).map(|i| x[0][i] + x[1][i % 3]).collect(),
    ));
    out.push(check(
        "sub general",
        &[&[2, 1, 3], &[4, 1]],
        10,
        |t, v| t.sub(v[0], v[1]).unwrap(),
        |x| {
            let mut out = Vec::new();
            for i in 0..2 {
                for j in 0..4 {
                    for k in 0..3 {
                        out.push(x[0][i * 3 + k] - x[1][j]);
                    }
                }
            }
            out
        },
    ));
    out.push(check(
        "mul",
        &[&[2, 3], &[2, 3]],
        11,
        |t, v| t.mul(v[0], v[1]).unwrap(),
        |x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(),
    ));
    out.push(check(
        "scale+exp",
        &[&[5]],
        12,
        |t, v| {
            let s = t.scale(v[0], 0.5);
            t.exp(s)
        },
        |x| x[0].iter().map(|v| (0.5 * v).exp()).collect(),
    ));
}

fn structural_op_gradients(out: &mut Vec<(&'static str, f64)>) {
    out.push(check(
        "permute",
        &[&[2, 3, 2]],
        13,
        |t, v| t.permute(v[0], &[2, 0, 1]).unwrap(),
        |x| {
            let mut out = Vec::new();
            for c in 0..2 {
                for a in 0..2 {
                    for b in 0..3 {
                        out.push(x[0][(a * 3 + b) * 2 + c]);
                    }
                }
            }
            out
        },
    ));
    out.push(check(
        "reshape+transpose",
        &[&[6]],
        14,
        |t, v| {
            let r = t.reshape(v[0], &[2, 3]).unwrap();
            t.transpose(r, 0, 1).unwrap()
        },
        |x| vec![x[0][0], x[0][3], x[0][1], x[0][4], x[0][2], x[0][5]],
    ));
    out.push(check(
        "concat",
        &[&[2, 1, 2], &[2, 2, 2]],
        15,
        |t, v| t.concat(&[v[0], v[1]], 1).unwrap(),
        |x| {
            let mut out = Vec::new();
            for o in 0..2 {
                out.extend_from_slice(&x[0][o * 2..o * 2 + 2]);
                out.extend_from_slice(&x[1][o * 4..o * 4 + 4]);
            }
            out
        },
    ));
    out.push(check(
        "gather rows",
        &[&[2, 4, 2]],
        16,
        |t, v| {
            let idx = Index::rows(&[vec![3, 0, 3], vec![1, 2, 0]]).unwrap();
            t.gather(v[0], 1, &idx).unwrap()
        },
        |x| {
            let rows = [[3usize, 0, 3], [1, 2, 0]];
            let mut out = Vec::new();
            for (n, row) in rows.iter().enumerate() {
                for &i in row {
                    out.extend_from_slice(&x[0][(n * 4 + i) * 2..(n * 4 + i) * 2 + 2]);
                }
            }
            out
        },
    ));
    out.push(check(
        "expand",
        &[&[1, 1, 3]],
        17,
        |t, v| t.expand(v[0], &[2, 2, 3]).unwrap(),
        |x| (0..12).map(|i| x[0][i % 3]).collect(),
    ));
    out.push(check(
        "mean",
        &[&[7]],
        18,
        |t, v| t.mean(v[0]),
        |x| vec![x[0].iter().sum::<f64>() / 7.0],
    ));
}


/// Worst relative error per checked operation.
pub fn all_ops() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    matmul_sum_gradient_at_3x3(&mut out);
    matmul_batched_with_shared_rhs(&mut out);
    matmul_broadcast_batch(&mut out);
    softmax_last_and_leading_axis(&mut out);
    log_softmax_gradient(&mut out);
    layer_norm_gradient(&mut out);
    gelu_gradient(&mut out);
    broadcast_elementwise_gradients(&mut out);
    structural_op_gradients(&mut out);
    out
}
