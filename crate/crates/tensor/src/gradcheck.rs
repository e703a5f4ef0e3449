//! Central finite differences for checking analytic gradients.
//!
//! The oracle side only ever evaluates an f64 reference forward function
//! written independently of the graph; the graph contributes nothing but the
//! gradients under test.

use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;

use crate::graph::{Graph, Var};
use crate::layers::{dense_layer, Activation};
use crate::tensor::Tensor;
use crate::Result;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// First disagreement between two gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Returns the first entry where `|a - n| > max(abs_floor, rel * max(|a|, |n|))`.
pub fn compare(analytic: &[f64], numeric: &[f64], rel: f64, abs_floor: f64) -> Option<Mismatch> {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .find(|(_, (&a, &n))| (a - n).abs() > abs_floor.max(rel * a.abs().max(n.abs())))
        .map(|(index, (&analytic, &numeric))| Mismatch {
            index,
            analytic,
            numeric,
        })
}

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;
type Reference = fn(&[Vec<f64>]) -> Vec<f64>;

/// One differentiable operation: how to sample its inputs, how to record it
/// on a graph, and an f64 reference for its forward value.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs are drawn uniformly from `[lo, hi]`, rejecting `|x| < gap`.
    pub domain: (f64, f64, f64),
    pub build: Build,
    pub reference: Reference,
}

#[derive(Clone, Debug)]
pub struct CaseFailure {
    pub op: &'static str,
    pub case: usize,
    pub mismatch: Option<Mismatch>,
    pub error: Option<String>,
}

impl OpCase {
    fn sample(&self, rng: &mut impl Rng) -> Vec<Vec<f32>> {
        let (lo, hi, gap) = self.domain;
        self.shapes
            .iter()
            .map(|shape| {
                (0..shape.iter().product::<usize>())
                    .map(|_| loop {
                        let v = rng.random_range(lo..=hi) as f32;
                        if f64::from(v).abs() >= gap {
                            break v;
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn analytic(
        &self,
        g: &mut Graph,
        vars: &[Var],
        rng: &mut impl Rng,
    ) -> Result<(Vec<f32>, Vec<f64>)> {
        let out = (self.build)(g, vars)?;
        let out_shape = g.value(out).shape().to_vec();
        let weights: Vec<f32> = (0..g.value(out).len())
            .map(|_| rng.random_range(-1.0f32..=1.0))
            .collect();
        let w = g.constant(Tensor::new(out_shape, weights.clone())?);
        let weighted = g.mul(out, w)?;
        let loss = g.sum(weighted)?;
        let grads = g.backward(loss)?;
        let mut analytic = Vec::new();
        for &v in vars {
            analytic.extend(grads.wrt(v)?.iter().map(|&x| f64::from(x)));
        }
        Ok((weights, analytic))
    }

    /// Checks the graph gradient of `sum(w ⊙ op(inputs))` for random `w`
    /// against central differences of the f64 reference.
    pub fn check(&self, rng: &mut impl Rng) -> std::result::Result<(), (Option<Mismatch>, String)> {
        let inputs = self.sample(rng);
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .shapes
            .iter()
            .zip(&inputs)
            .map(|(shape, data)| {
                let t = Tensor::param(shape.clone(), data.clone()).expect("finite sample");
                g.leaf(&t)
            })
            .collect();
        let (weights, analytic) = self
            .analytic(&mut g, &vars, rng)
            .map_err(|e| (None, e.to_string()))?;

        let sizes: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let flat: Vec<f64> = inputs.iter().flatten().map(|&v| f64::from(v)).collect();
        let reference = self.reference;
        let objective = |x: &[f64]| {
            let mut parts = Vec::with_capacity(sizes.len());
            let mut offset = 0;
            for &n in &sizes {
                parts.push(x[offset..offset + n].to_vec());
                offset += n;
            }
            reference(&parts)
                .iter()
                .zip(&weights)
                .map(|(y, &w)| y * f64::from(w))
                .sum()
        };
        let numeric = central_difference(objective, &flat, STEP);
        match compare(&analytic, &numeric, REL_TOL, ABS_FLOOR) {
            None => Ok(()),
            Some(m) => Err((Some(m), format!("{m:?}"))),
        }
    }
}

/// Runs `cases` random cases of every op in [`op_suite`].
pub fn run_suite(cases: usize, seed: u64) -> Vec<CaseFailure> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for op in op_suite() {
        for case in 0..cases {
            if let Err((mismatch, msg)) = op.check(&mut rng) {
                failures.push(CaseFailure {
                    op: op.name,
                    case,
                    mismatch,
                    error: Some(msg),
                });
            }
        }
    }
    failures
}

fn elementwise(parts: &[Vec<f64>], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (a, b) = (&parts[0], &parts[1]);
    let n = a.len().max(b.len());
    let pick = |v: &Vec<f64>, i: usize| if v.len() == 1 { v[0] } else { v[i] };
    (0..n).map(|i| f(pick(a, i), pick(b, i))).collect()
}

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

fn ref_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Every differentiable operation the engine offers.
pub fn op_suite() -> Vec<OpCase> {
    let wide = (-2.0, 2.0, 0.0);
    let off_kink = (-2.0, 2.0, 0.05);
    vec![
        OpCase {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            domain: wide,
            build: |g, v| g.matmul(v[0], v[1]),
            reference: |p| ref_matmul(&p[0], &p[1], 3, 4, 2),
        },
        OpCase {
            name: "add",
            shapes: vec![vec![2, 3], vec![2, 3]],
            domain: wide,
            build: |g, v| g.add(v[0], v[1]),
            reference: |p| elementwise(p, |a, b| a + b),
        },
        OpCase {
            name: "sub",
            shapes: vec![vec![5], vec![5]],
            domain: wide,
            build: |g, v| g.sub(v[0], v[1]),
            reference: |p| elementwise(p, |a, b| a - b),
        },
        OpCase {
            name: "mul",
            shapes: vec![vec![2, 3], vec![2, 3]],
            domain: wide,
            build: |g, v| g.mul(v[0], v[1]),
            reference: |p| elementwise(p, |a, b| a * b),
        },
        OpCase {
            name: "mul_scalar_broadcast",
            shapes: vec![vec![4], vec![1]],
            domain: wide,
            build: |g, v| g.mul(v[0], v[1]),
            reference: |p| elementwise(p, |a, b| a * b),
        },
        OpCase {
            name: "add_scalar",
            shapes: vec![vec![4]],
            domain: wide,
            build: |g, v| g.add_scalar(v[0], 0.75),
            reference: |p| p[0].iter().map(|x| x + 0.75).collect(),
        },
        OpCase {
            name: "mul_scalar",
            shapes: vec![vec![4]],
            domain: wide,
            build: |g, v| g.mul_scalar(v[0], -1.5),
            reference: |p| p[0].iter().map(|x| x * -1.5).collect(),
        },
        OpCase {
            name: "add_bias",
            shapes: vec![vec![3, 4], vec![4]],
            domain: wide,
            build: |g, v| g.add_bias(v[0], v[1]),
            reference: |p| {
                p[0].iter()
                    .enumerate()
                    .map(|(i, x)| x + p[1][i % 4])
                    .collect()
            },
        },
        OpCase {
            name: "neg",
            shapes: vec![vec![3]],
            domain: wide,
            build: |g, v| g.neg(v[0]),
            reference: |p| p[0].iter().map(|x| -x).collect(),
        },
        OpCase {
            name: "sigmoid",
            shapes: vec![vec![6]],
            domain: (-4.0, 4.0, 0.0),
            build: |g, v| g.sigmoid(v[0]),
            reference: |p| p[0].iter().map(|&x| ref_sigmoid(x)).collect(),
        },
        OpCase {
            name: "tanh",
            shapes: vec![vec![6]],
            domain: (-3.0, 3.0, 0.0),
            build: |g, v| g.tanh(v[0]),
            reference: |p| p[0].iter().map(|x| x.tanh()).collect(),
        },
        OpCase {
            name: "relu",
            shapes: vec![vec![6]],
            domain: off_kink,
            build: |g, v| g.relu(v[0]),
            reference: |p| p[0].iter().map(|x| x.max(0.0)).collect(),
        },
        OpCase {
            name: "leaky_relu",
            shapes: vec![vec![6]],
            domain: off_kink,
            build: |g, v| g.leaky_relu(v[0], 0.2),
            reference: |p| p[0].iter().map(|&x| if x > 0.0 { x } else { 0.2 * x }).collect(),
        },
        OpCase {
            name: "log",
            shapes: vec![vec![5]],
            domain: (0.1, 3.0, 0.0),
            build: |g, v| g.log(v[0]),
            reference: |p| p[0].iter().map(|x| x.ln()).collect(),
        },
        OpCase {
            name: "clamp_interior",
            shapes: vec![vec![5]],
            domain: (-0.45, 0.45, 0.0),
            build: |g, v| g.clamp(v[0], -0.5, 0.5),
            reference: |p| p[0].clone(),
        },
        OpCase {
            name: "sum",
            shapes: vec![vec![2, 3]],
            domain: wide,
            build: |g, v| g.sum(v[0]),
            reference: |p| vec![p[0].iter().sum()],
        },
        OpCase {
            name: "mean",
            shapes: vec![vec![7]],
            domain: wide,
            build: |g, v| g.mean(v[0]),
            reference: |p| vec![p[0].iter().sum::<f64>() / 7.0],
        },
        OpCase {
            name: "softmax_cross_entropy",
            shapes: vec![vec![3, 4]],
            domain: wide,
            build: |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 1]),
            reference: |p| {
                let labels = [0usize, 3, 1];
                let total: f64 = p[0]
                    .chunks(4)
                    .zip(labels)
                    .map(|(row, y)| row.iter().map(|x| x.exp()).sum::<f64>().ln() - row[y])
                    .sum();
                vec![total / 3.0]
            },
        },
        OpCase {
            name: "dense_layer_sigmoid",
            shapes: vec![vec![2, 3], vec![3, 4], vec![4]],
            domain: wide,
            build: |g, v| dense_layer(g, v[0], v[1], v[2], Activation::Sigmoid),
            reference: |p| {
                ref_matmul(&p[0], &p[1], 2, 3, 4)
                    .iter()
                    .enumerate()
                    .map(|(i, z)| ref_sigmoid(z + p[2][i % 4]))
                    .collect()
            },
        },
        OpCase {
            name: "sum_sigmoid_wx",
            shapes: vec![vec![3, 3], vec![3, 1]],
            domain: wide,
            build: |g, v| {
                let wx = g.matmul(v[0], v[1])?;
                let s = g.sigmoid(wx)?;
                g.sum(s)
            },
            reference: |p| {
                let wx = ref_matmul(&p[0], &p[1], 3, 3, 1);
                vec![wx.iter().map(|&z| ref_sigmoid(z)).sum()]
            },
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let grad = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-4);
        assert!(compare(&[4.0, 3.0], &grad, 1e-8, 1e-8).is_none());
        assert!(compare(&[4.1, 3.0], &grad, 1e-4, 1e-6).is_some());
    }
}
