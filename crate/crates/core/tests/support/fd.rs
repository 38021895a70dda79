use mrine_core::diffcore::{Graph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const SEEDS: u64 = 20;

pub type Build = dyn Fn(&mut Graph, &[Tensor]) -> Tensor;

pub struct Input {
    pub shape: Shape,
    pub values: Vec<f64>,
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Shape) -> Input {
    Input { shape, values: (0..shape.numel()).map(|_| rng.gen_range(-2.0..2.0)).collect() }
}

/// Evaluates `sum(weights ⊙ build(inputs))` with every input as a param leaf.
fn eval(build: &Build, inputs: &[Input], weights: &[f64]) -> (Graph, Vec<Tensor>, Tensor) {
    let mut g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|i| g.param(i.shape, i.values.clone()).unwrap()).collect();
    let out = build(&mut g, &leaves);
    let w = g.constant(g.shape(out), weights.to_vec()).unwrap();
    let p = g.mul(out, w).unwrap();
    let loss = g.sum(p);
    (g, leaves, loss)
}

/// Relative error between analytic and central-difference gradients,
/// measured as a vector norm over all inputs.
pub fn gradient_error(build: &Build, mut inputs: Vec<Input>, rng: &mut ChaCha8Rng) -> f64 {
    let out_len = {
        let mut g = Graph::new();
        let leaves: Vec<Tensor> = inputs.iter().map(|i| g.param(i.shape, i.values.clone()).unwrap()).collect();
        let out = build(&mut g, &leaves);
        g.shape(out).numel()
    };
    let weights: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (mut g, leaves, loss) = eval(build, &inputs, &weights);
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = leaves.iter().flat_map(|&l| g.grad(l).unwrap().to_vec()).collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..inputs.len() {
        for e in 0..inputs[k].values.len() {
            let orig = inputs[k].values[e];
            inputs[k].values[e] = orig + H;
            let (gp, _, lp) = eval(build, &inputs, &weights);
            inputs[k].values[e] = orig - H;
            let (gm, _, lm) = eval(build, &inputs, &weights);
            inputs[k].values[e] = orig;
            numeric.push((gp.scalar(lp) - gm.scalar(lm)) / (2.0 * H));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm_a: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_n: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / norm_a.max(norm_n).max(1e-12)
}

/// Worst relative gradient error over 20 random draws of the inputs.
pub fn worst_error(make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Input>, build: &Build) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
        let inputs = make_inputs(&mut rng);
        worst = worst.max(gradient_error(build, inputs, &mut rng));
    }
    worst
}

fn record(out: &mut Vec<(&'static str, f64)>, name: &'static str, make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Input>, build: &Build) {
    out.push((name, worst_error(make_inputs, build)));
}

pub fn well_conditioned(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Input {
    let mut m = uniform(rng, Shape::new(batch, n, n));
    for b in 0..batch {
        for i in 0..n {
            m.values[b * n * n + i * n + i] += 2.0 * n as f64 + 1.0;
        }
    }
    m
}

/// Worst gradient error of every graph op, by name.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    record(&mut out, 
        "matmul",
        |r| vec![uniform(r, Shape::matrix(3, 4)), uniform(r, Shape::matrix(4, 2))],
        &|g, t| g.matmul(t[0], t[1]).unwrap(),
    );
    record(&mut out, 
        "batched matmul with shared lhs",
        |r| vec![uniform(r, Shape::matrix(3, 3)), uniform(r, Shape::new(4, 3, 2))],
        &|g, t| g.matmul(t[0], t[1]).unwrap(),
    );
    record(&mut out, 
        "batched matmul with shared rhs",
        |r| vec![uniform(r, Shape::new(3, 2, 3)), uniform(r, Shape::matrix(3, 3))],
        &|g, t| g.matmul(t[0], t[1]).unwrap(),
    );
    let two = |r: &mut ChaCha8Rng| vec![uniform(r, Shape::new(2, 3, 2)), uniform(r, Shape::new(2, 3, 2))];
    record(&mut out, "add", two, &|g, t| g.add(t[0], t[1]).unwrap());
    record(&mut out, "sub", two, &|g, t| g.sub(t[0], t[1]).unwrap());
    record(&mut out, "elementwise_mul", two, &|g, t| g.mul(t[0], t[1]).unwrap());
    record(&mut out, 
        "div",
        |r| {
            let mut d = uniform(r, Shape::new(2, 3, 2));
            d.values.iter_mut().for_each(|v| *v = v.abs() + 0.5);
            vec![uniform(r, Shape::new(2, 3, 2)), d]
        },
        &|g, t| g.div(t[0], t[1]).unwrap(),
    );
    record(&mut out, 
        "row broadcast add",
        |r| vec![uniform(r, Shape::matrix(5, 3)), uniform(r, Shape::matrix(1, 3))],
        &|g, t| g.add(t[0], t[1]).unwrap(),
    );
    record(&mut out, 
        "batch broadcast mul",
        |r| vec![uniform(r, Shape::new(3, 2, 2)), uniform(r, Shape::new(3, 1, 1))],
        &|g, t| g.mul(t[0], t[1]).unwrap(),
    );
    let one = |r: &mut ChaCha8Rng| vec![uniform(r, Shape::new(2, 3, 3))];
    record(&mut out, "square", one, &|g, t| g.square(t[0]));
    record(&mut out, "exp", one, &|g, t| g.exp(t[0]));
    record(&mut out, "tanh", one, &|g, t| g.tanh(t[0]));
    record(&mut out, "softplus", one, &|g, t| g.softplus(t[0]));
    record(&mut out, "scale", one, &|g, t| g.scale(t[0], -1.7));
    record(&mut out, "add_scalar", one, &|g, t| g.add_scalar(t[0], 0.3));
    record(&mut out, "clamp", one, &|g, t| g.clamp(t[0], -1.0, 1.0));
    record(&mut out, 
        "log",
        |r| {
            let mut x = uniform(r, Shape::new(2, 3, 3));
            x.values.iter_mut().for_each(|v| *v = v.abs() + 0.1);
            vec![x]
        },
        &|g, t| g.log(t[0]),
    );
    record(&mut out, "transpose", |r| vec![uniform(r, Shape::new(2, 3, 4))], &|g, t| g.transpose(t[0]));
    record(&mut out, "symmetrize", |r| vec![uniform(r, Shape::new(2, 3, 3))], &|g, t| g.symmetrize(t[0]).unwrap());
    record(&mut out, 
        "concat_rows",
        |r| vec![uniform(r, Shape::new(2, 2, 3)), uniform(r, Shape::new(2, 1, 3))],
        &|g, t| g.concat_rows(&[t[0], t[1], t[0]]).unwrap(),
    );
    record(&mut out, 
        "concat_cols",
        |r| vec![uniform(r, Shape::new(2, 3, 1)), uniform(r, Shape::new(2, 3, 2))],
        &|g, t| g.concat_cols(&[t[0], t[1]]).unwrap(),
    );
    record(&mut out, "slice rows", |r| vec![uniform(r, Shape::new(2, 5, 2))], &|g, t| g.slice_rows(t[0], 1, 3).unwrap());
    record(&mut out, "slice cols", |r| vec![uniform(r, Shape::new(2, 2, 5))], &|g, t| g.slice_cols(t[0], 2, 2).unwrap());
    record(&mut out, 
        "gather_rows",
        |r| vec![uniform(r, Shape::new(2, 4, 3))],
        &|g, t| g.gather_rows(t[0], &[3, 0, 0, 2]).unwrap(),
    );
    record(&mut out, 
        "reshape",
        |r| vec![uniform(r, Shape::new(2, 3, 2))],
        &|g, t| {
            let x = g.reshape(t[0], Shape::matrix(6, 2)).unwrap();
            g.square(x)
        },
    );
    record(&mut out, "sum", |r| vec![uniform(r, Shape::new(2, 3, 2))], &|g, t| g.sum(t[0]));
    record(&mut out, "mean", |r| vec![uniform(r, Shape::new(2, 3, 2))], &|g, t| g.mean(t[0]));
    record(&mut out, "diag_part", |r| vec![uniform(r, Shape::new(2, 3, 3))], &|g, t| g.diag_part(t[0]).unwrap());
    record(&mut out, "diag_embed", |r| vec![uniform(r, Shape::new(2, 3, 1))], &|g, t| g.diag_embed(t[0]).unwrap());
    record(&mut out, 
        "linear_solve",
        |r| vec![well_conditioned(r, 3, 1), uniform(r, Shape::matrix(3, 2))],
        &|g, t| g.linear_solve(t[0], t[1]).unwrap(),
    );
    record(&mut out, 
        "batched linear_solve",
        |r| vec![well_conditioned(r, 3, 2), uniform(r, Shape::new(2, 3, 2))],
        &|g, t| g.linear_solve(t[0], t[1]).unwrap(),
    );
    record(&mut out, 
        "shared-matrix linear_solve",
        |r| vec![well_conditioned(r, 3, 1), uniform(r, Shape::new(3, 3, 1))],
        &|g, t| g.linear_solve(t[0], t[1]).unwrap(),
    );
    record(&mut out, "matrix_inverse", |r| vec![well_conditioned(r, 3, 2)], &|g, t| g.matrix_inverse(t[0]).unwrap());
    record(&mut out, 
        "cholesky",
        |r| vec![uniform(r, Shape::new(2, 3, 3))],
        &|g, t| {
            // B Bᵀ + 3I keeps the input positive definite under perturbation.
            let bt = g.transpose(t[0]);
            let bbt = g.matmul(t[0], bt).unwrap();
            let spd = g.add_scalar(bbt, 0.0);
            let eye = g.constant(Shape::matrix(3, 3), vec![3.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
            let spd = g.add(spd, eye).unwrap();
            g.cholesky(spd).unwrap()
        },
    );
    // x feeds both exp(x) and x·y; the gradient must be the sum of both paths.
    record(&mut out, 
        "fan-out",
        |r| vec![uniform(r, Shape::matrix(3, 1)), uniform(r, Shape::matrix(3, 1))],
        &|g, t| {
            let e = g.exp(t[0]);
            let m = g.mul(t[0], t[1]).unwrap();
            g.add(e, m).unwrap()
        },
    );
    out
}
