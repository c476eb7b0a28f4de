#![allow(dead_code)]

use std::rc::Rc;

use liir::diff::{gradient_check, Tape, Tensor, Var};
use liir::Result;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Random inputs plus a graph producing a (possibly non-scalar) output.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

pub fn uniform(rng: &mut StdRng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn dims(rng: &mut StdRng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

fn unary(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> Instance {
    Instance {
        inputs,
        build: Box::new(move |t, v| f(t, v[0])),
    }
}

fn binary(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, Var, Var) -> Result<Var> + 'static) -> Instance {
    Instance {
        inputs,
        build: Box::new(move |t, v| f(t, v[0], v[1])),
    }
}

/// Every differentiable primitive with a generator of random small inputs.
pub const PRIMITIVES: &[(&str, fn(&mut StdRng) -> Instance)] = &[
    ("add", |rng| {
        let (r, c) = dims(rng);
        binary(vec![uniform(rng, vec![r, c], -2.0, 2.0), uniform(rng, vec![r, c], -2.0, 2.0)], |t, a, b| t.add(a, b))
    }),
    ("sub", |rng| {
        let (r, c) = dims(rng);
        binary(vec![uniform(rng, vec![r, c], -2.0, 2.0), uniform(rng, vec![r, c], -2.0, 2.0)], |t, a, b| t.sub(a, b))
    }),
    ("mul", |rng| {
        let (r, c) = dims(rng);
        binary(vec![uniform(rng, vec![r, c], -2.0, 2.0), uniform(rng, vec![r, c], -2.0, 2.0)], |t, a, b| t.mul(a, b))
    }),
    ("scale", |rng| {
        let (r, c) = dims(rng);
        let k = rng.random_range(-3.0..3.0);
        unary(vec![uniform(rng, vec![r, c], -2.0, 2.0)], move |t, a| t.scale(a, k))
    }),
    ("matmul", |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(1..5);
        binary(vec![uniform(rng, vec![m, k], -1.0, 1.0), uniform(rng, vec![k, n], -1.0, 1.0)], |t, a, b| t.matmul(a, b))
    }),
    ("conv2d", |rng| {
        let c = rng.random_range(1..3);
        let o = rng.random_range(1..4);
        let k = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let h = rng.random_range(k..k + 4);
        let w = rng.random_range(k..k + 4);
        Instance {
            inputs: vec![
                uniform(rng, vec![c, h, w], -1.0, 1.0),
                uniform(rng, vec![o, c, k, k], -1.0, 1.0),
                uniform(rng, vec![o], -1.0, 1.0),
            ],
            build: Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad)),
        }
    }),
    ("relu", |rng| {
        let (r, c) = dims(rng);
        let mut x = uniform(rng, vec![r, c], -2.0, 2.0);
        // keep clear of the kink
        for v in x.values_mut() {
            if v.abs() < 1e-4 {
                *v = 1e-4f64.copysign(*v) * 10.0;
            }
        }
        unary(vec![x], |t, a| t.relu(a))
    }),
    ("exp", |rng| {
        let (r, c) = dims(rng);
        unary(vec![uniform(rng, vec![r, c], -2.0, 2.0)], |t, a| t.exp(a))
    }),
    ("log", |rng| {
        let (r, c) = dims(rng);
        unary(vec![uniform(rng, vec![r, c], 0.5, 3.0)], |t, a| t.log(a))
    }),
    ("sum", |rng| {
        let (r, c) = dims(rng);
        unary(vec![uniform(rng, vec![r, c], -2.0, 2.0)], |t, a| t.sum(a))
    }),
    ("mean", |rng| {
        let (r, c) = dims(rng);
        unary(vec![uniform(rng, vec![r, c], -2.0, 2.0)], |t, a| t.mean(a))
    }),
    ("softmax", |rng| {
        let (r, c) = dims(rng);
        unary(vec![uniform(rng, vec![r, c], -3.0, 3.0)], |t, a| t.softmax(a))
    }),
    ("masked_softmax", |rng| {
        let (r, c) = dims(rng);
        let mut mask: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.6)).collect();
        for row in 0..r {
            let keep = rng.random_range(0..c);
            mask[row * c + keep] = true;
        }
        let mask: Rc<[bool]> = mask.into();
        unary(vec![uniform(rng, vec![r, c], -3.0, 3.0)], move |t, a| t.masked_softmax(a, mask.clone()))
    }),
    ("normalize_rows", |rng| {
        let (r, c) = dims(rng);
        unary(vec![uniform(rng, vec![r, c], 0.2, 2.0)], |t, a| t.normalize_rows(a))
    }),
    ("norm_rows", |rng| {
        let (r, c) = dims(rng);
        unary(vec![uniform(rng, vec![r, c], 0.2, 2.0)], |t, a| t.norm_rows(a))
    }),
    ("gather", |rng| {
        let (r, c) = dims(rng);
        let n = rng.random_range(1..8);
        let index: Rc<[usize]> = (0..n).map(|_| rng.random_range(0..r * c)).collect();
        unary(vec![uniform(rng, vec![r, c], -2.0, 2.0)], move |t, a| t.gather(a, index.clone(), vec![n]))
    }),
    ("concat_cols", |rng| {
        let (r, c) = dims(rng);
        let d = rng.random_range(1..4);
        binary(vec![uniform(rng, vec![r, c], -2.0, 2.0), uniform(rng, vec![r, d], -2.0, 2.0)], |t, a, b| {
            t.concat_cols(a, b)
        })
    }),
    ("slice_cols", |rng| {
        let (r, c) = dims(rng);
        let start = rng.random_range(0..c);
        let end = rng.random_range(start + 1..=c);
        unary(vec![uniform(rng, vec![r, c], -2.0, 2.0)], move |t, a| t.slice_cols(a, start, end))
    }),
    ("transpose", |rng| {
        let (r, c) = dims(rng);
        unary(vec![uniform(rng, vec![r, c], -2.0, 2.0)], |t, a| t.transpose(a))
    }),
    ("reshape", |rng| {
        let (r, c) = dims(rng);
        unary(vec![uniform(rng, vec![r, c], -2.0, 2.0)], move |t, a| t.reshape(a, vec![c, r]))
    }),
];

/// Relative gradient error of a random instance of `make`, reduced to a scalar
/// through a random linear projection.
pub fn check_primitive(make: fn(&mut StdRng) -> Instance, seed: u64) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed);
    let inst = make(&mut rng);
    let probe_seed = rng.random::<u64>();
    let build = inst.build;
    gradient_check(&inst.inputs, STEP, move |t, v| {
        let out = build(t, v)?;
        let shape = t.value(out).shape().to_vec();
        let r = uniform(&mut StdRng::seed_from_u64(probe_seed), shape, -1.0, 1.0);
        let r = t.constant(r)?;
        let p = t.mul(out, r)?;
        t.sum(p)
    })
    .unwrap()
}

/// A random chain of five primitives over two 3×3 leaves, projected to a scalar.
pub fn check_random_graph(seed: u64) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed);
    let inputs = vec![uniform(&mut rng, vec![3, 3], -1.0, 1.0), uniform(&mut rng, vec![3, 3], -1.0, 1.0)];
    let ops: Vec<usize> = (0..5).map(|_| rng.random_range(0..6)).collect();
    let r = uniform(&mut rng, vec![3, 3], -1.0, 1.0);
    gradient_check(&inputs, STEP, move |t, v| {
        let (mut x, y) = (v[0], v[1]);
        for &op in &ops {
            x = match op {
                0 => t.add(x, y)?,
                1 => t.mul(x, y)?,
                2 => {
                    let m = t.matmul(x, y)?;
                    t.scale(m, 0.5)?
                }
                3 => t.softmax(x)?,
                4 => {
                    let s = t.scale(x, 0.3)?;
                    t.exp(s)?
                }
                _ => t.normalize_rows(x)?,
            };
        }
        let r = t.constant(r.clone())?;
        let p = t.mul(x, r)?;
        t.sum(p)
    })
    .unwrap()
}
