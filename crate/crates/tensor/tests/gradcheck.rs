//! Finite-difference checks of every differentiable primitive, fp64,
//! h = 1e-5, inputs uniform in [-2, 2], ten seeds each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regionedit_tensor::numeric::{central_difference, max_relative_error};
use regionedit_tensor::{Graph, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
const SEEDS: u64 = 10;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
}

/// Contracts the op output with fixed random weights so every output element
/// carries a distinct upstream gradient.
fn check(name: &str, shapes: &[&[usize]], op: impl Fn(&Graph<f64>, &[Var]) -> Var) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let probe_shape = {
            let g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            g.shape(op(&g, &vars))
        };
        let weights = random(&mut rng, &probe_shape);
        let loss = |ins: &[Tensor<f64>], g: &Graph<f64>| -> (Vec<Var>, Var) {
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = op(g, &vars);
            let w = g.constant(weights.clone());
            let prod = g.mul(out, w).unwrap();
            (vars, g.sum(prod))
        };
        let g = Graph::new();
        let (vars, l) = loss(&inputs, &g);
        g.backward(l).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let analytic = g.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
            let numeric = central_difference(&inputs[i], H, |probe| {
                let mut ins = inputs.clone();
                ins[i] = probe.clone();
                let g = Graph::new();
                let (_, l) = loss(&ins, &g);
                g.item(l).unwrap()
            });
            let err = max_relative_error(&analytic, &numeric, FLOOR);
            assert!(err <= TOL, "{name}: input {i}, seed {seed}: rel err {err:e}");
        }
    }
}

#[test]
fn elementwise() {
    check("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]).unwrap());
    check("add broadcast", &[&[3, 4], &[4]], |g, v| g.add(v[0], v[1]).unwrap());
    check("sub", &[&[2, 5], &[2, 5]], |g, v| g.sub(v[0], v[1]).unwrap());
    check("sub broadcast", &[&[2, 5], &[5]], |g, v| g.sub(v[0], v[1]).unwrap());
    check("mul", &[&[6], &[6]], |g, v| g.mul(v[0], v[1]).unwrap());
    check("mul broadcast", &[&[2, 3, 4], &[4]], |g, v| g.mul(v[0], v[1]).unwrap());
    check("scale", &[&[5]], |g, v| g.scale(v[0], -1.7));
    check("add_scalar", &[&[5]], |g, v| g.add_scalar(v[0], 0.3));
    check("gelu", &[&[12]], |g, v| g.gelu(v[0]));
    check("silu", &[&[12]], |g, v| g.silu(v[0]));
}

#[test]
fn reductions() {
    check("sum", &[&[3, 3]], |g, v| g.sum(v[0]));
    check("mean", &[&[3, 3]], |g, v| g.mean(v[0]));
}

#[test]
fn matmuls() {
    check("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap());
    check("matmul leading", &[&[2, 3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]).unwrap());
    check("matmul_nt", &[&[3, 4], &[5, 4]], |g, v| g.matmul_nt(v[0], v[1]).unwrap());
    check("bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false).unwrap());
    check("bmm trans", &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true).unwrap());
}

#[test]
fn normalizations() {
    check("softmax", &[&[3, 5]], |g, v| g.softmax_rows(v[0]).unwrap());
    check("layer_norm affine", &[&[4, 6], &[6], &[6]], |g, v| {
        g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5).unwrap()
    });
    check("layer_norm plain", &[&[2, 3, 5]], |g, v| g.layer_norm(v[0], None, None, 1e-5).unwrap());
    check("cross_entropy", &[&[3, 7]], |g, v| g.cross_entropy(v[0], &[0, 6, 3]).unwrap());
}

#[test]
fn structure() {
    check("concat axis0", &[&[2, 3], &[4, 3]], |g, v| g.concat(&[v[0], v[1]], 0).unwrap());
    check("concat axis1", &[&[2, 3], &[2, 1], &[2, 2]], |g, v| g.concat(&[v[0], v[1], v[2]], 1).unwrap());
    check("slice", &[&[3, 6]], |g, v| g.slice(v[0], 1, 2, 5).unwrap());
    check("reshape", &[&[3, 4]], |g, v| g.reshape(v[0], &[2, 6]).unwrap());
    check("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
    check("transpose", &[&[3, 5]], |g, v| g.transpose(v[0]).unwrap());
}

#[test]
fn indexing_and_convolution() {
    check("embedding", &[&[5, 3]], |g, v| g.embedding(v[0], &[4, 0, 4, 2]).unwrap());
    check("weighted_gather", &[&[4, 2]], |g, v| {
        g.weighted_gather(v[0], vec![vec![(0, 0.25), (3, 0.75)], vec![(1, -1.5)], vec![]])
            .unwrap()
    });
    check("im2col", &[&[4, 5, 2]], |g, v| g.im2col(v[0], 3, 1, 1).unwrap());
    check("im2col strided", &[&[4, 4, 3]], |g, v| g.im2col(v[0], 3, 2, 1).unwrap());
    check("upsample", &[&[2, 3, 2]], |g, v| g.upsample2x(v[0]).unwrap());
}

#[test]
fn matmul_gradient_is_ones_times_b_transpose() {
    let g = Graph::<f64>::new();
    let a = g.leaf(Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap(), true);
    let b = g.constant(Tensor::new([3, 2], vec![1., -1., 2., 0.5, -3., 4.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    let l = g.sum(c);
    g.backward(l).unwrap();
    // row sums of b, repeated per row of a
    assert_eq!(g.grad(a).unwrap().data(), &[0.0, 2.5, 1.0, 0.0, 2.5, 1.0]);
}
