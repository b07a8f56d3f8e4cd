//! Finite-difference oracle for gradient checks. Uses forward values only.

use crate::{Graph, ParamSet, Tensor, Var};

/// Central-difference gradient of `f` with respect to every value in `params`.
pub fn central_difference(
    params: &ParamSet,
    step: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> Vec<Tensor> {
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for slot in 0..params.len() {
        let mut grad = Tensor::zeros(params.get(slot).shape());
        for i in 0..params.get(slot).len() {
            let orig = params.get(slot).data()[i];
            work.get_mut(slot).data_mut()[i] = orig + step;
            let up = f(&work);
            work.get_mut(slot).data_mut()[i] = orig - step;
            let down = f(&work);
            work.get_mut(slot).data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// `|a - b| / max(|a|, |b|)`, with the denominator floored at `1e-5` so
/// that two near-zero gradients do not produce spurious large ratios.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Maximum relative error between backward and central differences for one op.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_error: f64,
}

type Case = (
    &'static str,
    fn(&mut XorShift) -> ParamSet,
    fn(&mut Graph, &[Var]) -> crate::Result<Var>,
);

/// Small deterministic generator so the report needs no RNG dependency.
pub struct XorShift(u64);

impl XorShift {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    fn tensor(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| self.uniform(lo, hi)).collect();
        Tensor::matrix(rows, cols, data).expect("positive dims")
    }
}

fn dims(rng: &mut XorShift) -> (usize, usize) {
    (1 + rng.below(4), 1 + rng.below(5))
}

/// Two same-shape tensors plus a projection weight.
fn pair(rng: &mut XorShift) -> ParamSet {
    let (r, c) = dims(rng);
    let mut p = ParamSet::new();
    p.insert("a", rng.tensor(r, c, -2.0, 2.0));
    p.insert("b", rng.tensor(r, c, -2.0, 2.0));
    p
}

fn positive(rng: &mut XorShift) -> ParamSet {
    let (r, c) = dims(rng);
    let mut p = ParamSet::new();
    p.insert("a", rng.tensor(r, c, 0.2, 3.0));
    p
}

/// Values kept away from zero so ReLU's kink is never straddled.
fn off_zero(rng: &mut XorShift) -> ParamSet {
    let (r, c) = dims(rng);
    let mut t = rng.tensor(r, c, 0.1, 2.0);
    for x in t.data_mut() {
        if rng.below(2) == 0 {
            *x = -*x;
        }
    }
    let mut p = ParamSet::new();
    p.insert("a", t);
    p
}

fn matmul_pair(rng: &mut XorShift) -> ParamSet {
    let (m, k) = dims(rng);
    let n = 1 + rng.below(4);
    let mut p = ParamSet::new();
    p.insert("a", rng.tensor(m, k, -1.5, 1.5));
    p.insert("b", rng.tensor(k, n, -1.5, 1.5));
    p
}

fn broadcast_pair(rng: &mut XorShift) -> ParamSet {
    let (r, c) = dims(rng);
    let mut p = ParamSet::new();
    p.insert("a", rng.tensor(r + 1, c, -2.0, 2.0));
    p.insert("b", rng.tensor(1, c, -2.0, 2.0));
    p
}

fn logits_rows(rng: &mut XorShift) -> ParamSet {
    let rows = 1 + rng.below(4);
    let classes = 2 + rng.below(5);
    let mut p = ParamSet::new();
    p.insert("a", rng.tensor(rows, classes, -3.0, 3.0));
    p
}

/// Contracts a tensor to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct coefficient.
fn contract(g: &mut Graph, x: Var) -> crate::Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn cases() -> Vec<Case> {
    vec![
        ("add", pair, |g, v| {
            let y = g.add(v[0], v[1])?;
            contract(g, y)
        }),
        ("add_broadcast", broadcast_pair, |g, v| {
            let y = g.add(v[0], v[1])?;
            contract(g, y)
        }),
        ("sub", pair, |g, v| {
            let y = g.sub(v[0], v[1])?;
            contract(g, y)
        }),
        ("mul", pair, |g, v| {
            let y = g.mul(v[0], v[1])?;
            contract(g, y)
        }),
        ("scale_shift", pair, |g, v| {
            let y = g.scale(v[0], -1.7);
            let y = g.shift(y, 0.4);
            contract(g, y)
        }),
        ("matmul", matmul_pair, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            contract(g, y)
        }),
        ("sigmoid", pair, |g, v| {
            let y = g.sigmoid(v[0]);
            contract(g, y)
        }),
        ("tanh", pair, |g, v| {
            let y = g.tanh(v[0]);
            contract(g, y)
        }),
        ("relu", off_zero, |g, v| {
            let y = g.relu(v[0]);
            contract(g, y)
        }),
        ("exp", pair, |g, v| {
            let y = g.exp(v[0]);
            contract(g, y)
        }),
        ("log", positive, |g, v| {
            let y = g.log(v[0])?;
            contract(g, y)
        }),
        ("log_sigmoid", pair, |g, v| {
            let y = g.log_sigmoid(v[0]);
            contract(g, y)
        }),
        ("sum", pair, |g, v| {
            let y = g.mul(v[0], v[1])?;
            Ok(g.sum(y))
        }),
        ("mean", pair, |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        }),
        ("concat_rows", pair, |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 0)?;
            contract(g, y)
        }),
        ("concat_cols", pair, |g, v| {
            let y = g.concat(&[v[1], v[0]], 1)?;
            contract(g, y)
        }),
        ("slice", broadcast_pair, |g, v| {
            let rows = g.value(v[0]).shape()[0];
            let y = g.slice(v[0], 1, rows)?;
            contract(g, y)
        }),
        ("softmax_cross_entropy", logits_rows, |g, v| {
            let (rows, classes) = g.value(v[0]).dims2()?;
            let targets: Vec<usize> = (0..rows).map(|r| (r * 3 + 1) % classes).collect();
            let y = g.softmax_cross_entropy(v[0], &targets)?;
            contract(g, y)
        }),
    ]
}

fn evaluate(build: fn(&mut Graph, &[Var]) -> crate::Result<Var>, params: &ParamSet) -> f64 {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let loss = build(&mut g, &vars).expect("valid case");
    g.value(loss).item()
}

/// Runs every differentiable op on `trials` random shapes and reports the
/// worst backward-vs-finite-difference disagreement per op.
pub fn op_gradient_report(seed: u64, trials: usize) -> Vec<OpCheck> {
    let mut rng = XorShift::new(seed);
    cases()
        .into_iter()
        .map(|(op, make, build)| {
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let params = make(&mut rng);
                let mut g = Graph::new();
                let vars = params.bind(&mut g);
                let loss = build(&mut g, &vars).expect("valid case");
                g.backward(loss).expect("scalar loss");
                let analytic = params.grads(&g, &vars);
                let numeric = central_difference(&params, 1e-5, |p| evaluate(build, p));
                for (a, n) in analytic.iter().zip(&numeric) {
                    for (x, y) in a.data().iter().zip(n.data()) {
                        worst = worst.max(relative_error(*x, *y));
                    }
                }
            }
            OpCheck {
                op,
                max_rel_error: worst,
            }
        })
        .collect()
}
