mod common;

use common::{check_model, random_tensor, tiny_config, FLOOR, H};
use normformer_core::blocks::{Activation, BlockVariant, LnStyle};
use normformer_core::model::Objective;
use normformer_core::numerics::gradcheck::{compare, numeric_gradient};
use normformer_core::numerics::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
const SHAPES: usize = 20;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Checks d(sum(w ∘ f(inputs)))/d(input) for every input, with fixed random
/// weights `w` so that no gradient is trivially uniform.
fn check(label: &str, inputs: &[Tensor], build: &Build, rng: &mut ChaCha8Rng) {
    let probe_graph = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = build(&mut g, &vars);
        (g, vars, out)
    };
    let (g0, _, out0) = probe_graph(inputs);
    let w = random_tensor(rng, g0.value(out0).shape(), 1.0);
    let loss_of = |xs: &[Tensor]| {
        let (mut g, vars, out) = probe_graph(xs);
        let wv = g.leaf(w.clone());
        let prod = g.mul(out, wv).unwrap();
        let l = g.sum(prod);
        (g, vars, l)
    };
    let (g, vars, l) = loss_of(inputs);
    let grads = g.backward(l).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, *v);
        let numeric = numeric_gradient(&inputs[i], H, |probe| {
            let mut xs = inputs.to_vec();
            xs[i] = probe.clone();
            let (g, _, l) = loss_of(&xs);
            g.value(l).item()
        });
        let c = compare(&analytic, &numeric, FLOOR);
        assert!(
            c.max_rel_err < TOL,
            "{label}: input {i} shape {:?} rel err {:e}",
            inputs[i].shape(),
            c.max_rel_err
        );
    }
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

#[test]
fn matmul_and_matmul_bt() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..SHAPES {
        let (m, k, n) = (dims(&mut rng, 1, 5), dims(&mut rng, 1, 5), dims(&mut rng, 1, 5));
        let a = random_tensor(&mut rng, &[m, k], 1.0);
        let b = random_tensor(&mut rng, &[k, n], 1.0);
        check(
            "matmul",
            &[a.clone(), b],
            &|g, v| g.matmul(v[0], v[1]).unwrap(),
            &mut rng,
        );
        let bt = random_tensor(&mut rng, &[n, k], 1.0);
        check(
            "matmul_bt",
            &[a, bt],
            &|g, v| g.matmul_bt(v[0], v[1]).unwrap(),
            &mut rng,
        );
    }
}

#[test]
fn elementwise_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..SHAPES {
        let (r, c) = (dims(&mut rng, 1, 6), dims(&mut rng, 1, 6));
        let a = random_tensor(&mut rng, &[r, c], 1.0);
        let b = random_tensor(&mut rng, &[r, c], 1.0);
        let row = random_tensor(&mut rng, &[c], 1.0);
        check(
            "add",
            &[a.clone(), b.clone()],
            &|g, v| g.add(v[0], v[1]).unwrap(),
            &mut rng,
        );
        check(
            "mul",
            &[a.clone(), b.clone()],
            &|g, v| g.mul(v[0], v[1]).unwrap(),
            &mut rng,
        );
        check(
            "add_row",
            &[a.clone(), row.clone()],
            &|g, v| g.add_row(v[0], v[1]).unwrap(),
            &mut rng,
        );
        check(
            "mul_row",
            &[a.clone(), row],
            &|g, v| g.mul_row(v[0], v[1]).unwrap(),
            &mut rng,
        );
        let s = rng.random_range(-3.0..3.0);
        check(
            "scale",
            std::slice::from_ref(&a),
            &move |g, v| g.scale(v[0], s),
            &mut rng,
        );
        check("sum", std::slice::from_ref(&a), &|g, v| g.sum(v[0]), &mut rng);
        // the same operand on both sides accumulates
        check("mul self", &[a], &|g, v| g.mul(v[0], v[0]).unwrap(), &mut rng);
    }
}

#[test]
fn activations_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..SHAPES {
        let (r, c) = (dims(&mut rng, 1, 5), dims(&mut rng, 1, 7));
        let x = random_tensor(&mut rng, &[r, c], 3.0);
        check("gelu", std::slice::from_ref(&x), &|g, v| g.gelu(v[0]), &mut rng);
        check(
            "relu_squared",
            std::slice::from_ref(&x),
            &|g, v| g.relu_squared(v[0]),
            &mut rng,
        );
        check("softmax", &[x], &|g, v| g.softmax(v[0]), &mut rng);
    }
}

#[test]
fn layer_norm_all_styles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..SHAPES {
        let (r, c) = (dims(&mut rng, 1, 5), dims(&mut rng, 2, 9));
        let x = random_tensor(&mut rng, &[r, c], 2.0);
        let gamma = random_tensor(&mut rng, &[c], 1.5);
        let beta = random_tensor(&mut rng, &[c], 1.0);
        check(
            "layer_norm",
            &[x.clone(), gamma.clone(), beta],
            &|g, v| g.layer_norm(v[0], v[1], Some(v[2]), 1e-5, true).unwrap(),
            &mut rng,
        );
        check(
            "layer_norm no bias no mean",
            &[x, gamma],
            &|g, v| g.layer_norm(v[0], v[1], None, 1e-5, false).unwrap(),
            &mut rng,
        );
    }
}

#[test]
fn head_scale_and_dropout() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..SHAPES {
        let heads = dims(&mut rng, 1, 4);
        let dh = dims(&mut rng, 1, 3);
        let r = dims(&mut rng, 1, 5);
        let x = random_tensor(&mut rng, &[r, heads * dh], 1.0);
        let gamma = random_tensor(&mut rng, &[heads], 2.0);
        check(
            "head_scale",
            &[x.clone(), gamma],
            &|g, v| g.head_scale(v[0], v[1]).unwrap(),
            &mut rng,
        );
        let keep: Vec<bool> = (0..x.len()).map(|_| rng.random_bool(0.7)).collect();
        check(
            "dropout",
            &[x],
            &move |g, v| g.dropout(v[0], &keep, 0.3).unwrap(),
            &mut rng,
        );
    }
}

#[test]
fn attention_causal_and_bidirectional() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..SHAPES {
        let heads = dims(&mut rng, 1, 3);
        let dh = dims(&mut rng, 1, 3);
        let seq = dims(&mut rng, 1, 4);
        let batch = dims(&mut rng, 1, 2);
        let shape = [batch * seq, heads * dh];
        let q = random_tensor(&mut rng, &shape, 1.5);
        let k = random_tensor(&mut rng, &shape, 1.5);
        let v = random_tensor(&mut rng, &shape, 1.5);
        let causal = i % 2 == 0;
        check(
            "attention",
            &[q, k, v],
            &move |g, x| g.attention(x[0], x[1], x[2], heads, seq, causal).unwrap(),
            &mut rng,
        );
    }
}

#[test]
fn embedding_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..SHAPES {
        let (vocab, d, n) = (dims(&mut rng, 2, 7), dims(&mut rng, 1, 4), dims(&mut rng, 1, 6));
        let table = random_tensor(&mut rng, &[vocab, d], 1.0);
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let ids2 = ids.clone();
        check(
            "embedding",
            &[table],
            &move |g, v| g.embedding(v[0], &ids2).unwrap(),
            &mut rng,
        );

        let logits = random_tensor(&mut rng, &[n, vocab], 3.0);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        mask[0] = true;
        check(
            "cross_entropy",
            &[logits],
            &move |g, v| g.cross_entropy(v[0], &targets, &mask).unwrap(),
            &mut rng,
        );
    }
}

#[test]
fn every_parameter_of_every_variant() {
    for (name, variant) in common::all_variants() {
        let (err, worst, checked) = check_model(&tiny_config(variant), 11);
        assert!(checked > 0);
        assert!(err < 1e-5, "{name}: {worst} rel err {err:e}");
    }
}

#[test]
fn alternative_activation_ln_style_objective_and_untied_output() {
    let mut v = BlockVariant::normformer();
    v.activation = Activation::ReluSquared;
    v.ln_style = LnStyle::NoBiasNoMean;
    v.res_scale = true;
    let mut cfg = tiny_config(v);
    cfg.tie_embeddings = false;
    cfg.objective = Objective::Masked;
    let (err, worst, _) = check_model(&cfg, 12);
    assert!(err < 1e-5, "{worst} rel err {err:e}");

    let mut cfg = tiny_config(BlockVariant::post_ln());
    cfg.scale_embeddings = false;
    let (err, worst, _) = check_model(&cfg, 13);
    assert!(err < 1e-5, "{worst} rel err {err:e}");
}
