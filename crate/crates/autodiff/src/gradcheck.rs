//! Central-difference gradient checking.
//!
//! The checker only runs forward passes to build its numerical estimate, so
//! it stays independent of the reverse-mode rules it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Result, Tensor, Var};

/// Relative error of one input's analytic gradient against central
/// differences: `||a - n|| / max(||a||, ||n||, 1e-8)`.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut errors = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap_or(&[]).to_vec();
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut work = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        errors.push(diff / na.max(nn).max(1e-8));
    }
    Ok(errors)
}

/// Result of checking one primitive over many random instances.
#[derive(Debug, Clone)]
pub struct PrimitiveReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_relative_error: f64,
}

type Case = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Builder);
type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Away from zero, so `abs` is differentiable at every sample.
fn rand_nonzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Reduces an arbitrary output to a scalar with fixed random weights so
/// that no gradient vanishes by symmetry (e.g. the sum of a softmax row).
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn small_dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", |rng| {
            let (m, k) = small_dims(rng);
            let n = rng.gen_range(1..5);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, k], -1.0, 1.0), rand_tensor(rng, &[k, n], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let o = g.matmul(v[0], v[1])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("transpose", |rng| {
            let (m, n) = small_dims(rng);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let o = g.transpose(v[0])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("add", |rng| {
            let (m, n) = small_dims(rng);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n], -1.0, 1.0), rand_tensor(rng, &[m, n], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let o = g.add(v[0], v[1])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("add_row", |rng| {
            let (m, n) = small_dims(rng);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n], -1.0, 1.0), rand_tensor(rng, &[n], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let o = g.add_row(v[0], v[1])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("sub", |rng| {
            let (m, n) = small_dims(rng);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n], -1.0, 1.0), rand_tensor(rng, &[m, n], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let o = g.sub(v[0], v[1])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("mul", |rng| {
            let (m, n) = small_dims(rng);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n], -1.0, 1.0), rand_tensor(rng, &[m, n], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let o = g.mul(v[0], v[1])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("scale", |rng| {
            let (m, n) = small_dims(rng);
            let c = rng.gen_range(-2.0..2.0);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let o = g.scale(v[0], c)?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("tanh", |rng| {
            let (m, n) = small_dims(rng);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n], -2.0, 2.0)],
                Box::new(move |g, v| {
                    let o = g.tanh(v[0])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("gelu", |rng| {
            let (m, n) = small_dims(rng);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n], -3.0, 3.0)],
                Box::new(move |g, v| {
                    let o = g.gelu(v[0])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("exp", |rng| {
            let (m, n) = small_dims(rng);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n], -2.0, 2.0)],
                Box::new(move |g, v| {
                    let o = g.exp(v[0])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("ln", |rng| {
            let (m, n) = small_dims(rng);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n], 0.2, 3.0)],
                Box::new(move |g, v| {
                    let o = g.ln(v[0])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("abs", |rng| {
            let (m, n) = small_dims(rng);
            let s = rng.gen();
            (
                vec![rand_nonzero(rng, &[m, n])],
                Box::new(move |g, v| {
                    let o = g.abs(v[0])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("softmax", |rng| {
            let (m, n) = small_dims(rng);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n + 1], -2.0, 2.0)],
                Box::new(move |g, v| {
                    let o = g.softmax(v[0])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("log_softmax", |rng| {
            let (m, n) = small_dims(rng);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n + 1], -2.0, 2.0)],
                Box::new(move |g, v| {
                    let o = g.log_softmax(v[0])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("layer_norm", |rng| {
            let m = rng.gen_range(1..4);
            let n = rng.gen_range(2..7);
            let s = rng.gen();
            (
                vec![
                    rand_tensor(rng, &[m, n], -2.0, 2.0),
                    rand_tensor(rng, &[n], 0.5, 1.5),
                    rand_tensor(rng, &[n], -0.5, 0.5),
                ],
                Box::new(move |g, v| {
                    let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("embedding_lookup", |rng| {
            let vocab = rng.gen_range(2..6);
            let d = rng.gen_range(1..5);
            let ids: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..vocab)).collect();
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[vocab, d], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let o = g.embedding(v[0], &ids)?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("sum", |rng| {
            let (m, n) = small_dims(rng);
            (
                vec![rand_tensor(rng, &[m, n], -1.0, 1.0)],
                Box::new(|g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    g.sum(sq)
                }),
            )
        }),
        ("mean", |rng| {
            let (m, n) = small_dims(rng);
            (
                vec![rand_tensor(rng, &[m, n], -1.0, 1.0)],
                Box::new(|g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    g.mean(sq)
                }),
            )
        }),
        ("mean_rows", |rng| {
            let (m, n) = small_dims(rng);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let o = g.mean_rows(v[0])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("concat", |rng| {
            let m = rng.gen_range(1..4);
            let (a, b) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, a], -1.0, 1.0), rand_tensor(rng, &[m, b], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let o = g.concat(&[v[0], v[1]])?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("slice_cols", |rng| {
            let m = rng.gen_range(1..4);
            let n = rng.gen_range(2..7);
            let start = rng.gen_range(0..n - 1);
            let len = rng.gen_range(1..=n - start);
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let o = g.slice_cols(v[0], start, len)?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("causal_attention", |rng| {
            let n = rng.gen_range(1..6);
            let dh = rng.gen_range(1..5);
            let scale = 1.0 / (dh as f64).sqrt();
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[n, dh], -1.0, 1.0), rand_tensor(rng, &[n, dh], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let o = g.causal_attention(v[0], v[1], scale)?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
        ("gather", |rng| {
            let (m, n) = small_dims(rng);
            let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
            let s = rng.gen();
            (
                vec![rand_tensor(rng, &[m, n], -1.0, 1.0)],
                Box::new(move |g, v| {
                    let o = g.gather(v[0], &idx)?;
                    weighted_sum(g, o, s)
                }),
            )
        }),
    ]
}

/// Runs every primitive over `instances` random inputs.
pub fn run_primitive_suite(instances: usize, seed: u64, h: f64) -> Result<Vec<PrimitiveReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (name, case) in cases() {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (inputs, build) = case(&mut rng);
            for e in check_gradients(&inputs, build, h)? {
                worst = worst.max(e);
            }
        }
        reports.push(PrimitiveReport {
            name,
            instances,
            max_relative_error: worst,
        });
    }
    Ok(reports)
}
