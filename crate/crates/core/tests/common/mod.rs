#![allow(dead_code)]

use normformer_core::blocks::BlockVariant;
use normformer_core::model::{Model, ModelConfig, ModelParams, Objective};
use normformer_core::numerics::gradcheck::{compare, numeric_gradient};
use normformer_core::numerics::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const FLOOR: f64 = 1e-5;

/// d=8, heads=2, layers=2, seq=5, vocab=11.
pub fn tiny_config(variant: BlockVariant) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ffn: 16,
        max_seq_len: 5,
        variant,
        ..ModelConfig::default()
    }
}

/// Every NormFormer toggle combination under test: all on, each single
/// toggle off, and all on plus QKV LayerNorm.
pub fn normformer_variants() -> Vec<(String, BlockVariant)> {
    let mut all = BlockVariant::normformer();
    all.res_scale = true;
    let mut out = vec![("normformer all-on".to_string(), all)];
    let offs: [(&str, fn(&mut BlockVariant)); 4] = [
        ("head_scale", |v| v.head_scale = false),
        ("post_attn_ln", |v| v.post_attn_ln = false),
        ("ffn_ln", |v| v.ffn_ln = false),
        ("res_scale", |v| v.res_scale = false),
    ];
    for (name, f) in offs {
        let mut v = all;
        f(&mut v);
        out.push((format!("normformer -{name}"), v));
    }
    let mut q = all;
    q.qkv_ln = true;
    out.push(("normformer +qkv_ln".to_string(), q));
    out
}

pub fn all_variants() -> Vec<(String, BlockVariant)> {
    let mut v = vec![
        ("post_ln".to_string(), BlockVariant::post_ln()),
        ("pre_ln".to_string(), BlockVariant::pre_ln()),
    ];
    v.extend(normformer_variants());
    v
}

/// Parameters perturbed away from their initial values so that unit γ, zero
/// β and zero biases do not hide errors.
pub fn jittered_params(cfg: &ModelConfig, seed: u64) -> ModelParams<Tensor> {
    let mut p = ModelParams::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.visit_mut(&mut |_, t| {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    });
    p
}

pub struct LossCase {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub seq_len: usize,
}

pub fn loss_case(cfg: &ModelConfig, batch: usize, seed: u64) -> LossCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * cfg.max_seq_len;
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let mask = match cfg.objective {
        Objective::Causal => vec![true; n],
        Objective::Masked => (0..n).map(|i| i % 3 != 1).collect(),
    };
    LossCase {
        tokens,
        targets,
        mask,
        seq_len: cfg.max_seq_len,
    }
}

pub fn model_loss(model: &Model, params: &ModelParams<Tensor>, case: &LossCase) -> f64 {
    let mut g = Graph::new();
    let fwd = model
        .forward_graph_with(&mut g, params, &case.tokens, case.seq_len, None)
        .unwrap();
    let loss = g.cross_entropy(fwd.logits, &case.targets, &case.mask).unwrap();
    g.value(loss).item()
}

pub fn model_grads(model: &Model, params: &ModelParams<Tensor>, case: &LossCase) -> ModelParams<Tensor> {
    let mut g = Graph::new();
    let fwd = model
        .forward_graph_with(&mut g, params, &case.tokens, case.seq_len, None)
        .unwrap();
    let loss = g.cross_entropy(fwd.logits, &case.targets, &case.mask).unwrap();
    let mut grads = g.backward(loss).unwrap();
    fwd.params.map(&mut |_, &v| grads.take(&g, v))
}

/// Worst relative error over every parameter entry, with the parameter name.
pub fn check_model(cfg: &ModelConfig, seed: u64) -> (f64, String, usize) {
    let params = jittered_params(cfg, seed);
    let model = Model::from_parts(cfg.clone(), params.clone()).unwrap();
    let case = loss_case(cfg, 2, seed + 100);
    let analytic = model_grads(&model, &params, &case);
    let mut worst = (0.0, String::new(), 0);
    for (name, grad) in analytic.flatten() {
        let base = params
            .flatten()
            .into_iter()
            .find(|(n, _)| *n == name)
            .unwrap()
            .1
            .clone();
        let numeric = numeric_gradient(&base, H, |probe| {
            let mut p = params.clone();
            p.visit_mut(&mut |n, t| {
                if n == name {
                    *t = probe.clone();
                }
            });
            model_loss(&model, &p, &case)
        });
        let c = compare(grad, &numeric, FLOOR);
        if std::env::var("GRADCHECK_DEBUG").is_ok() && c.max_rel_err > 1e-6 {
            for (a, n) in grad.data().iter().zip(numeric.data()) {
                eprintln!("{name} analytic {a:e} numeric {n:e}");
            }
        }
        worst.2 += c.checked;
        if c.max_rel_err > worst.0 {
            worst.0 = c.max_rel_err;
            worst.1 = name;
        }
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

pub mod oracles {
    use normformer_core::numerics::{gelu_scalar, layer_norm, softmax, Tensor};
    use normformer_core::training::{adam_update, clip_tensors, AdamConfig};
    use serde_json::Value;

    pub const TOL: f64 = 1e-10;

    fn vec_of(v: &Value) -> Vec<f64> {
        v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    pub fn load() -> Value {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/oracles.json");
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
    }

    /// `(name, cases, worst absolute error)` for every fixture family.
    pub fn errors(o: &Value) -> Vec<(&'static str, usize, f64)> {
        let mut out = Vec::new();

        let cases = o["layer_norm"].as_array().unwrap();
        let mut worst: f64 = 0.0;
        for c in cases {
            let x = vec_of(&c["x"]);
            let gamma = Tensor::from_vec(vec_of(&c["gamma"]));
            let beta = Tensor::from_vec(vec_of(&c["beta"]));
            let bias = c["affine_bias"].as_bool().unwrap();
            let center = c["center"].as_bool().unwrap();
            let y = layer_norm(
                &Tensor::new(vec![1, x.len()], x).unwrap(),
                &gamma,
                bias.then_some(&beta),
                c["eps"].as_f64().unwrap(),
                center,
            )
            .unwrap();
            worst = worst.max(max_diff(y.data(), &vec_of(&c["expected"])));
        }
        out.push(("layer_norm", cases.len(), worst));

        let cases = o["softmax"].as_array().unwrap();
        let mut worst: f64 = 0.0;
        for c in cases {
            let y = softmax(&Tensor::from_vec(vec_of(&c["x"])));
            worst = worst.max(max_diff(y.data(), &vec_of(&c["expected"])));
        }
        out.push(("softmax", cases.len(), worst));

        let cases = o["gelu"].as_array().unwrap();
        let mut worst: f64 = 0.0;
        for c in cases {
            let y = gelu_scalar(c["x"].as_f64().unwrap());
            worst = worst.max((y - c["expected"].as_f64().unwrap()).abs());
        }
        out.push(("gelu", cases.len(), worst));

        let cases = o["adam"].as_array().unwrap();
        let mut worst: f64 = 0.0;
        for c in cases {
            let cfg = AdamConfig {
                beta1: c["beta1"].as_f64().unwrap(),
                beta2: c["beta2"].as_f64().unwrap(),
                eps: c["eps"].as_f64().unwrap(),
            };
            let mut p = vec_of(&c["params"]);
            let g = vec_of(&c["grads"]);
            let (mut m, mut v) = (vec![0.0; p.len()], vec![0.0; p.len()]);
            for t in 1..=c["steps"].as_u64().unwrap() {
                adam_update(&mut p, &g, &mut m, &mut v, t, c["lr"].as_f64().unwrap(), &cfg);
            }
            worst = worst
                .max(max_diff(&p, &vec_of(&c["expected_params"])))
                .max(max_diff(&m, &vec_of(&c["expected_m"])))
                .max(max_diff(&v, &vec_of(&c["expected_v"])));
        }
        out.push(("adam", cases.len(), worst));

        let cases = o["clip_gradients"].as_array().unwrap();
        let mut worst: f64 = 0.0;
        for c in cases {
            let mut grads: Vec<Tensor> = c["grads"]
                .as_array()
                .unwrap()
                .iter()
                .map(|g| Tensor::from_vec(vec_of(g)))
                .collect();
            let norm = clip_tensors(&mut grads, c["clip_norm"].as_f64().unwrap());
            worst = worst.max((norm - c["global_norm"].as_f64().unwrap()).abs());
            for (g, e) in grads.iter().zip(c["expected"].as_array().unwrap()) {
                worst = worst.max(max_diff(g.data(), &vec_of(e)));
            }
        }
        out.push(("clip_gradients", cases.len(), worst));

        let cases = o["mean_abs"].as_array().unwrap();
        let mut worst: f64 = 0.0;
        for c in cases {
            let shape: Vec<usize> = vec_of(&c["shape"]).iter().map(|&d| d as usize).collect();
            let t = Tensor::new(shape, vec_of(&c["values"])).unwrap();
            worst = worst.max((t.mean_abs() - c["expected"].as_f64().unwrap()).abs());
        }
        out.push(("mean_abs", cases.len(), worst));
        out
    }
}

pub mod identities {
    use super::{jittered_params, loss_case, model_grads, random_tensor, tiny_config};
    use normformer_core::blocks::{
        eval_ctx, head_scale_mha, multi_head_attention, AttentionParams, BlockParams, BlockVariant, HeadScaleParams,
    };
    use normformer_core::model::{Model, ModelConfig, ModelParams};
    use normformer_core::numerics::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits(cfg: &ModelConfig, params: &ModelParams<Tensor>, tokens: &[usize]) -> Tensor {
        let model = Model::from_parts(cfg.clone(), params.clone()).unwrap();
        let mut g = Graph::new();
        let fwd = model.forward_graph(&mut g, tokens, cfg.max_seq_len, None).unwrap();
        g.value(fwd.logits).clone()
    }

    /// Logits and every gradient agree bit for bit.
    fn same_function(
        a: (&ModelConfig, &ModelParams<Tensor>),
        b: (&ModelConfig, &ModelParams<Tensor>),
        seed: u64,
    ) -> bool {
        let case = loss_case(a.0, 2, seed);
        if !logits(a.0, a.1, &case.tokens).bits_eq(&logits(b.0, b.1, &case.tokens)) {
            return false;
        }
        let ga = model_grads(&Model::from_parts(a.0.clone(), a.1.clone()).unwrap(), a.1, &case);
        let gb = model_grads(&Model::from_parts(b.0.clone(), b.1.clone()).unwrap(), b.1, &case);
        let (fa, fb) = (ga.flatten(), gb.flatten());
        let shared = fb
            .iter()
            .all(|(n, t)| fa.iter().find(|(m, _)| m == n).is_some_and(|(_, u)| u.bits_eq(t)));
        shared
    }

    /// NormFormer with every toggle off computes exactly Pre-LN.
    pub fn normformer_off_is_pre_ln(seed: u64) -> bool {
        let pre = tiny_config(BlockVariant::pre_ln());
        let off = tiny_config(BlockVariant {
            head_scale: false,
            post_attn_ln: false,
            ffn_ln: false,
            res_scale: false,
            qkv_ln: false,
            ..BlockVariant::normformer()
        });
        let params = jittered_params(&pre, seed);
        same_function((&pre, &params), (&off, &params), seed)
    }

    /// Unit head scales leave attention unchanged, both for the sublayer
    /// alone and for the whole model.
    pub fn unit_head_scale_is_plain_mha(seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, heads, seq) = (8, 2, 5);
        let w = |rng: &mut ChaCha8Rng, s: &[usize]| random_tensor(rng, s, 0.5);
        let x = w(&mut rng, &[2 * seq, d]);
        let p = AttentionParams {
            w_q: w(&mut rng, &[d, d]),
            w_k: w(&mut rng, &[d, d]),
            w_v: w(&mut rng, &[d, d]),
            w_o: w(&mut rng, &[d, d]),
            b_q: w(&mut rng, &[d]),
            b_k: w(&mut rng, &[d]),
            b_v: w(&mut rng, &[d]),
            b_o: w(&mut rng, &[d]),
        };
        let ctx = eval_ctx(BlockVariant::normformer(), heads, seq, true, 1e-5);
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let pv = AttentionParams {
            w_q: g.leaf(p.w_q.clone()),
            w_k: g.leaf(p.w_k.clone()),
            w_v: g.leaf(p.w_v.clone()),
            w_o: g.leaf(p.w_o.clone()),
            b_q: g.leaf(p.b_q.clone()),
            b_k: g.leaf(p.b_k.clone()),
            b_v: g.leaf(p.b_v.clone()),
            b_o: g.leaf(p.b_o.clone()),
        };
        let gamma = g.leaf(Tensor::ones(&[heads]));
        let plain = multi_head_attention(&mut g, xv, &pv, &ctx).unwrap();
        let scaled = head_scale_mha(&mut g, xv, &pv, &HeadScaleParams { gamma }, &ctx).unwrap();
        if !g.value(plain).bits_eq(g.value(scaled)) {
            return false;
        }

        let with = tiny_config(BlockVariant::normformer());
        let without = tiny_config(BlockVariant {
            head_scale: false,
            ..BlockVariant::normformer()
        });
        let mut pw = jittered_params(&with, seed);
        for b in &mut pw.blocks {
            b.head_scale.as_mut().unwrap().gamma = Tensor::ones(&[heads]);
        }
        let mut po = pw.clone();
        po.blocks
            .iter_mut()
            .for_each(|b: &mut BlockParams<Tensor>| b.head_scale = None);
        same_function((&with, &pw), (&without, &po), seed)
    }

    /// Unit residual scales leave the model unchanged.
    pub fn unit_res_scale_is_plain_residual(seed: u64) -> bool {
        let mut v = BlockVariant::normformer();
        v.res_scale = true;
        let with = tiny_config(v);
        let without = tiny_config(BlockVariant::normformer());
        let mut pw = jittered_params(&with, seed);
        for b in &mut pw.blocks {
            b.res_scale.as_mut().unwrap().lambda = Tensor::ones(&[with.d_model]);
        }
        let mut po = pw.clone();
        po.blocks.iter_mut().for_each(|b| b.res_scale = None);
        same_function((&with, &pw), (&without, &po), seed)
    }
}

pub mod accounting {
    use normformer_core::blocks::{Arrangement, BlockVariant, LnStyle};
    use normformer_core::model::{count_parameters, ModelConfig, ModelParams};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Small random config over every arrangement, toggle, LN style and
    /// embedding tie.
    pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
        let n_heads = rng.random_range(1..=4);
        let mut variant = match rng.random_range(0..3) {
            0 => BlockVariant::post_ln(),
            1 => BlockVariant::pre_ln(),
            _ => BlockVariant {
                head_scale: rng.random(),
                post_attn_ln: rng.random(),
                ffn_ln: rng.random(),
                res_scale: rng.random(),
                qkv_ln: rng.random(),
                ..BlockVariant::normformer()
            },
        };
        if rng.random() {
            variant.ln_style = LnStyle::NoBiasNoMean;
        }
        ModelConfig {
            vocab_size: rng.random_range(2..40),
            d_model: n_heads * 2 * rng.random_range(1..=3),
            n_heads,
            n_layers: rng.random_range(1..=4),
            d_ffn: rng.random_range(1..=24),
            max_seq_len: 8,
            variant,
            tie_embeddings: rng.random(),
            ..ModelConfig::default()
        }
    }

    /// Parameters actually allocated by a model with this config.
    pub fn stored(cfg: &ModelConfig) -> usize {
        ModelParams::init(cfg).unwrap().num_params()
    }

    /// Allocated parameters minus those of the same model built from plain
    /// Pre-LN blocks.
    pub fn stored_added(cfg: &ModelConfig) -> usize {
        if cfg.variant.arrangement != Arrangement::NormFormer {
            return 0;
        }
        let base = ModelConfig {
            variant: BlockVariant {
                ln_style: cfg.variant.ln_style,
                ..BlockVariant::pre_ln()
            },
            ..cfg.clone()
        };
        stored(cfg) - stored(&base)
    }

    /// `L(4d + n_h)`, plus `Ld` with residual scaling and `6Ld` with q/k/v
    /// LayerNorms; exact when the FFN LN width equals `d`.
    pub fn textbook_added(cfg: &ModelConfig) -> usize {
        let (l, d, h) = (cfg.n_layers, cfg.d_model, cfg.n_heads);
        let v = &cfg.variant;
        let mut n = l * (4 * d + h);
        if v.res_scale {
            n += l * d;
        }
        if v.qkv_ln {
            n += 6 * l * d;
        }
        n
    }

    /// Closed form against storage; returns the mismatches.
    pub fn check(cfg: &ModelConfig) -> Option<String> {
        let c = count_parameters(cfg);
        let (s, sa) = (stored(cfg), stored_added(cfg));
        (c.total != s || c.added_by_modifications != sa).then(|| {
            format!(
                "{}: closed form {}/{} vs storage {s}/{sa}",
                cfg.variant, c.total, c.added_by_modifications
            )
        })
    }
}
