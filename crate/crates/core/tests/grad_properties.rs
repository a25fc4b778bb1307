//! Analytic gradients vs the central-difference oracle, op by op, plus
//! end-to-end agreement on a small network and on the attack losses.

use promptveil_core::attack::{
    build_loss_clean, build_loss_trigger, Trigger, DEFAULT_EPSILON,
};
use promptveil_core::corpus::{self, CorpusSpec, Domain};
use promptveil_core::finite_diff::{finite_difference_grad, max_relative_error};
use promptveil_core::model::{ModelConfig, TwoTowerModel};
use promptveil_core::prompt::{ContextGenerator, PromptParams};
use promptveil_core::rng;
use promptveil_core::tensor::{Graph, Var};
use promptveil_core::text::{ClassTokenSet, Vocab};

const TOL: f64 = 1e-4;

fn rand_vec(seed: u64, label: &str, n: usize, sigma: f64) -> Vec<f64> {
    let mut r = rng::stream(seed, label);
    (0..n).map(|_| rng::normal(&mut r, sigma)).collect()
}

/// Check d(loss)/d(x) for `loss = sum(w . op(x))` against finite
/// differences, where `build` maps the leaf to the op output.
fn check_unary(
    label: &str,
    point: &[f64],
    shape: &[usize],
    build: impl Fn(&mut Graph<f64>, Var) -> Var,
) {
    let weights = rand_vec(77, &format!("w/{label}"), {
        let mut g = Graph::new();
        let x = g.constant(point.to_vec(), shape).unwrap();
        let y = build(&mut g, x);
        g.value(y).len()
    }, 1.0);

    let eval = |p: &[f64]| -> f64 {
        let mut g = Graph::new();
        let x = g.constant(p.to_vec(), shape).unwrap();
        let y = build(&mut g, x);
        let w = g.constant(weights.clone(), g.shape(y).to_vec().as_slice()).unwrap();
        let prod = g.mul(y, w).unwrap();
        let s = g.sum_all(prod);
        g.scalar_value(s)
    };

    let mut g = Graph::new();
    let x = g.leaf(point.to_vec(), shape).unwrap();
    let y = build(&mut g, x);
    let w = g.constant(weights.clone(), g.shape(y).to_vec().as_slice()).unwrap();
    let prod = g.mul(y, w).unwrap();
    let s = g.sum_all(prod);
    g.backward(s).unwrap();
    let analytic = g.grad(x).unwrap().to_vec();

    let oracle = finite_difference_grad(eval, point, 1e-5).unwrap();
    let err = max_relative_error(&analytic, &oracle, 1e-3);
    assert!(err < TOL, "{label}: max relative error {err}");
}

#[test]
fn elementwise_ops_match_oracle() {
    let a = rand_vec(1, "a", 12, 1.0);
    check_unary("relu", &a, &[12], |g, x| g.relu(x));
    check_unary("sigmoid", &a, &[12], |g, x| g.sigmoid(x));
    check_unary("exp", &a, &[12], |g, x| g.exp(x));
    check_unary("scale", &a, &[12], |g, x| g.scale(x, -2.5));
    check_unary("add_scalar", &a, &[12], |g, x| g.add_scalar(x, 0.7));
    let pos: Vec<f64> = a.iter().map(|v| v.abs() + 0.5).collect();
    check_unary("ln", &pos, &[12], |g, x| g.ln(x));

    // Keep clamp test points away from the kinks.
    let spread: Vec<f64> = a.iter().map(|v| v * 3.0).collect();
    check_unary("clamp", &spread, &[12], |g, x| g.clamp(x, -1.0, 1.0).unwrap());
}

#[test]
fn binary_ops_match_oracle() {
    let a = rand_vec(2, "a", 10, 1.0);
    let b: Vec<f64> = rand_vec(2, "b", 10, 1.0).iter().map(|v| v.abs() + 0.5).collect();
    let bc = b.clone();
    check_unary("add", &a, &[10], move |g, x| {
        let c = g.constant(bc.clone(), &[10]).unwrap();
        g.add(x, c).unwrap()
    });
    let bc = b.clone();
    check_unary("sub-lhs", &a, &[10], move |g, x| {
        let c = g.constant(bc.clone(), &[10]).unwrap();
        g.sub(x, c).unwrap()
    });
    let ac = a.clone();
    check_unary("sub-rhs", &b, &[10], move |g, x| {
        let c = g.constant(ac.clone(), &[10]).unwrap();
        g.sub(c, x).unwrap()
    });
    let bc = b.clone();
    check_unary("mul", &a, &[10], move |g, x| {
        let c = g.constant(bc.clone(), &[10]).unwrap();
        g.mul(x, c).unwrap()
    });
    let bc = b.clone();
    check_unary("div-num", &a, &[10], move |g, x| {
        let c = g.constant(bc.clone(), &[10]).unwrap();
        g.div(x, c).unwrap()
    });
    let ac = a.clone();
    check_unary("div-den", &b, &[10], move |g, x| {
        let c = g.constant(ac.clone(), &[10]).unwrap();
        g.div(c, x).unwrap()
    });
}

#[test]
fn scalar_broadcast_ops_match_oracle() {
    let a = rand_vec(3, "a", 9, 1.0);
    check_unary("mul_scalar_var-s", &[0.8], &[], move |g, s| {
        let c = g.constant(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        g.mul_scalar_var(c, s).unwrap()
    });
    check_unary("div_scalar_var-s", &[0.8], &[], move |g, s| {
        let c = g.constant(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        g.div_scalar_var(c, s).unwrap()
    });
    check_unary("mul_scalar_var-a", &a, &[9], move |g, x| {
        let s = g.constant(vec![1.7], &[]).unwrap();
        g.mul_scalar_var(x, s).unwrap()
    });
}

#[test]
fn matrix_ops_match_oracle() {
    let a = rand_vec(4, "a", 6, 1.0); // [2,3]
    let b = rand_vec(4, "b", 12, 1.0); // [3,4]
    let bc = b.clone();
    check_unary("matmul-lhs", &a, &[2, 3], move |g, x| {
        let c = g.constant(bc.clone(), &[3, 4]).unwrap();
        g.matmul(x, c).unwrap()
    });
    let ac = a.clone();
    check_unary("matmul-rhs", &b, &[3, 4], move |g, x| {
        let c = g.constant(ac.clone(), &[2, 3]).unwrap();
        g.matmul(c, x).unwrap()
    });
    check_unary("transpose", &b, &[3, 4], |g, x| g.transpose(x).unwrap());
    check_unary("add_row_vec-a", &a, &[2, 3], move |g, x| {
        let v = g.constant(vec![0.3, -0.8, 1.2], &[3]).unwrap();
        g.add_row_vec(x, v).unwrap()
    });
    check_unary("add_row_vec-v", &[0.3, -0.8, 1.2], &[3], move |g, v| {
        let m = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        g.add_row_vec(m, v).unwrap()
    });
}

#[test]
fn row_ops_match_oracle() {
    let a = rand_vec(5, "a", 12, 1.5); // [3,4]
    check_unary("softmax", &a, &[3, 4], |g, x| g.softmax(x).unwrap());
    check_unary("log_softmax", &a, &[3, 4], |g, x| g.log_softmax(x).unwrap());
    let safe: Vec<f64> = a.iter().map(|v| v + 3.0).collect(); // away from zero norms
    check_unary("l2_norm_last", &safe, &[3, 4], |g, x| g.l2_norm_last(x).unwrap());
    check_unary("mean_axis0", &a, &[3, 4], |g, x| g.mean_axis0(x).unwrap());
    check_unary("sum_all", &a, &[3, 4], |g, x| g.sum_all(x));
    check_unary("mean_all", &a, &[3, 4], |g, x| g.mean_all(x));
    check_unary("reshape", &a, &[3, 4], |g, x| g.reshape(x, &[12]).unwrap());
    check_unary("pick", &a, &[3, 4], |g, x| g.pick(x, 7).unwrap());
}

#[test]
fn gather_concat_ops_match_oracle() {
    let table = rand_vec(6, "t", 15, 1.0); // [5,3]
    check_unary("gather_rows", &table, &[5, 3], |g, x| {
        g.gather_rows(x, &[4, 0, 4, 2]).unwrap()
    });
    let a = rand_vec(6, "a", 6, 1.0); // [2,3]
    check_unary("concat0", &a, &[2, 3], move |g, x| {
        let other = g.constant(vec![9.0, 8.0, 7.0], &[1, 3]).unwrap();
        g.concat0(&[x, other]).unwrap()
    });
}

#[test]
fn conv2d_matches_oracle_for_all_arguments() {
    let x = rand_vec(7, "x", 2 * 6 * 6, 1.0); // [2,6,6]
    let w = rand_vec(7, "w", 3 * 2 * 3 * 3, 0.5); // [3,2,3,3]
    let b = rand_vec(7, "b", 3, 0.5);

    let (wc, bc) = (w.clone(), b.clone());
    check_unary("conv2d-x", &x, &[2, 6, 6], move |g, xx| {
        let wv = g.constant(wc.clone(), &[3, 2, 3, 3]).unwrap();
        let bv = g.constant(bc.clone(), &[3]).unwrap();
        g.conv2d(xx, wv, bv, 2, 1).unwrap()
    });
    let (xc, bc) = (x.clone(), b.clone());
    check_unary("conv2d-w", &w, &[3, 2, 3, 3], move |g, wv| {
        let xv = g.constant(xc.clone(), &[2, 6, 6]).unwrap();
        let bv = g.constant(bc.clone(), &[3]).unwrap();
        g.conv2d(xv, wv, bv, 2, 1).unwrap()
    });
    let (xc, wc) = (x.clone(), w.clone());
    check_unary("conv2d-b", &b, &[3], move |g, bv| {
        let xv = g.constant(xc.clone(), &[2, 6, 6]).unwrap();
        let wv = g.constant(wc.clone(), &[3, 2, 3, 3]).unwrap();
        g.conv2d(xv, wv, bv, 1, 0).unwrap()
    });
}

#[test]
fn two_layer_network_agrees_with_oracle() {
    // loss(params) = cross-entropy of softmax(W2 relu(W1 x)) at a fixed
    // target, differentiated w.r.t. all parameters at once.
    let x = rand_vec(8, "x", 6, 1.0);
    let n_params = 6 * 5 + 5 + 5 * 4 + 4;
    let point = rand_vec(8, "params", n_params, 0.7);

    let eval_with = |p: &[f64], as_leaf: bool| -> (f64, Option<Vec<f64>>) {
        let mut g: Graph<f64> = Graph::new();
        let params = if as_leaf {
            g.leaf(p.to_vec(), &[n_params]).unwrap()
        } else {
            g.constant(p.to_vec(), &[n_params]).unwrap()
        };
        // Slice the flat parameter vector via gather on a reshaped table.
        let table = g.reshape(params, &[n_params, 1]).unwrap();
        let take = |g: &mut Graph<f64>, from: usize, len: usize, shape: &[usize]| {
            let ids: Vec<usize> = (from..from + len).collect();
            let rows = g.gather_rows(table, &ids).unwrap();
            g.reshape(rows, shape).unwrap()
        };
        let w1 = take(&mut g, 0, 30, &[6, 5]);
        let b1 = take(&mut g, 30, 5, &[5]);
        let w2 = take(&mut g, 35, 20, &[5, 4]);
        let b2 = take(&mut g, 55, 4, &[4]);
        let xin = g.constant(x.clone(), &[1, 6]).unwrap();
        let h = g.linear(xin, w1, Some(b1)).unwrap();
        let h = g.relu(h);
        let logits = g.linear(h, w2, Some(b2)).unwrap();
        let lsm = g.log_softmax(logits).unwrap();
        let picked = g.pick(lsm, 2).unwrap();
        let loss = g.scale(picked, -1.0);
        let val = g.scalar_value(loss);
        if as_leaf {
            g.backward(loss).unwrap();
            let grad = g.grad(params).unwrap().to_vec();
            (val, Some(grad))
        } else {
            (val, None)
        }
    };

    let (_, analytic) = eval_with(&point, true);
    let analytic = analytic.unwrap();
    let oracle =
        finite_difference_grad(|p: &[f64]| eval_with(p, false).0, &point, 1e-5).unwrap();
    let err = max_relative_error(&analytic, &oracle, 1e-3);
    assert!(err < TOL, "2-layer network: max relative error {err}");
}

// ── attack losses on a micro-model ──────────────────────────────────────

struct Micro {
    model: TwoTowerModel<f64>,
    corpus: corpus::Corpus<f64>,
    tokens: ClassTokenSet,
}

fn micro() -> Micro {
    let spec = CorpusSpec {
        seed: 5,
        image_size: 8,
        class_vocab: corpus::default_class_vocab(2),
        samples_per_class: 4,
        domain: Domain::Base,
    };
    let c = corpus::generate::<f64>(&spec).unwrap();
    let vocab = Vocab::build(&c.class_names).unwrap();
    let config = ModelConfig {
        feature_dim: 8,
        embed_dim: 8,
        context_len: 2,
        vocab_size: 0,
        image_size: 8,
        conv_channels: [2, 3, 4],
        tau_init: 0.07,
    };
    let mut model = TwoTowerModel::init(config, vocab.clone(), 2).unwrap();
    model.frozen = true;
    let tokens = ClassTokenSet::for_classes(&vocab, &c.class_names, &[0, 1]).unwrap();
    Micro { model, corpus: c, tokens }
}

/// Flatten generator parameters, evaluate a loss at the flat point, and
/// compare analytic gradients against the oracle.
fn check_attack_loss_grads(clean_term: bool, trigger_term: bool, tol: f64) {
    let m = micro();
    let gen0 = ContextGenerator::<f64>::init(8, 2, 8, 3);
    let batch: Vec<&corpus::Sample<f64>> = m.corpus.samples.iter().take(4).collect();
    let delta0 = {
        let mut r = rng::stream(9, "delta0");
        (0..3 * 64)
            .map(|_| rng::normal(&mut r, DEFAULT_EPSILON / 3.0).clamp(-DEFAULT_EPSILON, DEFAULT_EPSILON))
            .collect::<Vec<f64>>()
    };

    let sizes = [gen0.w1.len(), gen0.b1.len(), gen0.w2.len(), gen0.b2.len(), gen0.base.len()];
    let theta_len: usize = sizes.iter().sum();
    let mut point = Vec::with_capacity(theta_len + delta0.len());
    point.extend_from_slice(&gen0.w1);
    point.extend_from_slice(&gen0.b1);
    point.extend_from_slice(&gen0.w2);
    point.extend_from_slice(&gen0.b2);
    point.extend_from_slice(&gen0.base);
    point.extend_from_slice(&delta0);

    let unpack = |p: &[f64]| -> (ContextGenerator<f64>, Vec<f64>) {
        let mut gen = gen0.clone();
        let mut off = 0;
        for (dst, len) in [
            (&mut gen.w1, sizes[0]),
            (&mut gen.b1, sizes[1]),
            (&mut gen.w2, sizes[2]),
            (&mut gen.b2, sizes[3]),
            (&mut gen.base, sizes[4]),
        ] {
            dst.copy_from_slice(&p[off..off + len]);
            off += len;
        }
        (gen, p[off..].to_vec())
    };

    let eval = |p: &[f64], want_grad: bool| -> (f64, Option<Vec<f64>>) {
        let (gen, delta) = unpack(p);
        let prompt = PromptParams::Generated(gen);
        let mut g = Graph::new();
        let mv = m.model.bind(&mut g, false).unwrap();
        let bp = prompt.bind(&mut g, want_grad).unwrap();
        let inv_tau = mv.inv_tau(&mut g).unwrap();
        let images: Vec<Var> = batch
            .iter()
            .map(|s| g.constant(s.image.clone(), &[3, 8, 8]).unwrap())
            .collect();
        let dv = if want_grad {
            g.leaf(delta.clone(), &[3, 8, 8]).unwrap()
        } else {
            g.constant(delta.clone(), &[3, 8, 8]).unwrap()
        };
        let ids = m.tokens.attr_ids();
        let mut loss = None;
        if trigger_term {
            let tri = build_loss_trigger(&mut g, &mv, &bp, &ids, 0, dv, &images, inv_tau).unwrap();
            loss = Some(tri);
        }
        if clean_term {
            let slots: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let cle =
                build_loss_clean(&mut g, &mv, &bp, &ids, &slots, &images, inv_tau).unwrap();
            loss = Some(match loss {
                Some(t) => g.add(t, cle).unwrap(),
                None => cle,
            });
        }
        let loss = loss.unwrap();
        let val = g.scalar_value(loss);
        if !want_grad {
            return (val, None);
        }
        g.backward(loss).unwrap();
        let mut grad = Vec::with_capacity(p.len());
        if let promptveil_core::prompt::BoundPrompt::Generated(vars) = bp {
            grad.extend_from_slice(g.grad(vars.w1).unwrap());
            grad.extend_from_slice(g.grad(vars.b1).unwrap());
            grad.extend_from_slice(g.grad(vars.w2).unwrap());
            grad.extend_from_slice(g.grad(vars.b2).unwrap());
            grad.extend_from_slice(g.grad(vars.base).unwrap());
        }
        grad.extend_from_slice(g.grad(dv).unwrap());
        (val, Some(grad))
    };

    let (_, analytic) = eval(&point, true);
    let analytic = analytic.unwrap();
    let oracle = finite_difference_grad(|p: &[f64]| eval(p, false).0, &point, 1e-5).unwrap();
    let err = max_relative_error(&analytic, &oracle, 1e-3);
    assert!(err < tol, "max relative error {err}");
}

#[test]
fn trigger_loss_gradients_match_oracle() {
    check_attack_loss_grads(false, true, 1e-3);
}

#[test]
fn clean_loss_gradients_match_oracle() {
    check_attack_loss_grads(true, false, 1e-3);
}

#[test]
fn total_loss_gradients_match_oracle() {
    check_attack_loss_grads(true, true, 1e-3);
}

#[test]
fn context_generator_gradients_match_oracle() {
    // d(sum(w . context(feature))) / d(theta and feature).
    let gen0 = ContextGenerator::<f64>::init(6, 2, 5, 4);
    let feature = rand_vec(10, "feat", 6, 1.0);
    let weights = rand_vec(10, "w", 10, 1.0);
    let sizes = [gen0.w1.len(), gen0.b1.len(), gen0.w2.len(), gen0.b2.len(), gen0.base.len()];
    let mut point: Vec<f64> = Vec::new();
    point.extend_from_slice(&gen0.w1);
    point.extend_from_slice(&gen0.b1);
    point.extend_from_slice(&gen0.w2);
    point.extend_from_slice(&gen0.b2);
    point.extend_from_slice(&gen0.base);
    point.extend_from_slice(&feature);

    let eval = |p: &[f64], want_grad: bool| -> (f64, Option<Vec<f64>>) {
        let mut gen = gen0.clone();
        let mut off = 0;
        for (dst, len) in [
            (&mut gen.w1, sizes[0]),
            (&mut gen.b1, sizes[1]),
            (&mut gen.w2, sizes[2]),
            (&mut gen.b2, sizes[3]),
            (&mut gen.base, sizes[4]),
        ] {
            dst.copy_from_slice(&p[off..off + len]);
            off += len;
        }
        let feat = p[off..].to_vec();
        let mut g: Graph<f64> = Graph::new();
        let vars = gen.bind(&mut g, want_grad).unwrap();
        let fv = if want_grad {
            g.leaf(feat, &[6]).unwrap()
        } else {
            g.constant(feat, &[6]).unwrap()
        };
        let ctx = vars.context(&mut g, fv).unwrap();
        let w = g.constant(weights.clone(), &[2, 5]).unwrap();
        let prod = g.mul(ctx, w).unwrap();
        let loss = g.sum_all(prod);
        let val = g.scalar_value(loss);
        if !want_grad {
            return (val, None);
        }
        g.backward(loss).unwrap();
        let mut grad = Vec::new();
        grad.extend_from_slice(g.grad(vars.w1).unwrap());
        grad.extend_from_slice(g.grad(vars.b1).unwrap());
        grad.extend_from_slice(g.grad(vars.w2).unwrap());
        grad.extend_from_slice(g.grad(vars.b2).unwrap());
        grad.extend_from_slice(g.grad(vars.base).unwrap());
        grad.extend_from_slice(g.grad(fv).unwrap());
        (val, Some(grad))
    };

    let (_, analytic) = eval(&point, true);
    let analytic = analytic.unwrap();
    let oracle = finite_difference_grad(|p: &[f64]| eval(p, false).0, &point, 1e-5).unwrap();
    let err = max_relative_error(&analytic, &oracle, 1e-3);
    assert!(err < TOL, "generator gradients: max relative error {err}");
}

#[test]
fn spectral_norm_matches_svd_oracle_on_random_slices() {
    // Dense SVD from nalgebra is the independent oracle.
    for trial in 0..10 {
        let data = rand_vec(20 + trial, "slice", 64, 1.0);
        let got = promptveil_core::defense::spectral_norm(&data, 8, 8);
        let m = nalgebra::DMatrix::from_row_slice(8, 8, &data);
        let want = m.svd(false, false).singular_values[0];
        assert!((got - want).abs() < 1e-4, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn sgd_trigger_loss_is_deterministic() {
    let m = micro();
    let prompt = PromptParams::Generated(ContextGenerator::<f64>::init(8, 2, 8, 3));
    let batch: Vec<&corpus::Sample<f64>> = m.corpus.samples.iter().collect();
    let trigger = Trigger::zeros(8, DEFAULT_EPSILON);
    let a = promptveil_core::attack::loss_trigger_value(&m.model, &prompt, &m.tokens, &trigger, &batch, 0)
        .unwrap();
    let b = promptveil_core::attack::loss_trigger_value(&m.model, &prompt, &m.tokens, &trigger, &batch, 0)
        .unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}
