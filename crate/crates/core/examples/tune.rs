// Scratch driver for desk-scale hyperparameter tuning. Not part of the
// deliverable surface; run with: cargo run -p promptveil-core --example tune
use std::time::Instant;

use promptveil_core::attack::{run_attack, AttackConfig, ContextKind, Trigger};
use promptveil_core::corpus::{
    self, cross_dataset_variant, default_class_vocab, generate, sample_few_shot,
    split_seen_unseen, Corpus, CorpusSpec, Domain,
};
use promptveil_core::eval::{accuracy, attack_success_rate, harmonic_mean, retrieval_recall_at_1, similarity_decoupling, stealth_scores};
use promptveil_core::model::{contrastive_pretrain, ModelConfig, PretrainConfig, TwoTowerModel};
use promptveil_core::optim::SgdConfig;
use promptveil_core::prompt::PromptParams;
use promptveil_core::rng;
use promptveil_core::text::{ClassTokenSet, HandCraftedPrompt, Vocab};

fn main() {
    let t0 = Instant::now();
    let base_seed = 11u64;

    let spec_a = CorpusSpec {
        seed: base_seed,
        image_size: 32,
        class_vocab: default_class_vocab(16),
        samples_per_class: 40,
        domain: Domain::Base,
    };
    let spec_b = cross_dataset_variant(&spec_a);
    let train_a: Corpus<f32> = generate(&spec_a).unwrap();
    let train_b: Corpus<f32> = generate(&spec_b).unwrap();
    let test_a: Corpus<f32> = generate(&CorpusSpec {
        seed: rng::child_seed(base_seed, "test"),
        samples_per_class: 20,
        ..spec_a.clone()
    })
    .unwrap();
    let test_b: Corpus<f32> = generate(&CorpusSpec {
        seed: rng::child_seed(base_seed, "test-b"),
        samples_per_class: 20,
        ..spec_b.clone()
    })
    .unwrap();
    let test_bright: Corpus<f32> = generate(&CorpusSpec {
        seed: rng::child_seed(base_seed, "test"),
        samples_per_class: 20,
        domain: Domain::BrightnessShift,
        ..spec_a.clone()
    })
    .unwrap();

    let mut names = train_a.class_names.clone();
    names.extend(train_b.class_names.clone());
    let vocab = Vocab::build(&names).unwrap();

    // Union pretraining corpus.
    let mut union = train_a.clone();
    union.samples.extend(train_b.samples.iter().map(|s| {
        let mut s = s.clone();
        s.label += 16;
        s
    }));
    union.class_names = names.clone();

    let mut config = ModelConfig::default();
    if let Ok(cv) = std::env::var("CONV") {
        let parts: Vec<usize> = cv.split(',').map(|x| x.parse().unwrap()).collect();
        config.conv_channels = [parts[0], parts[1], parts[2]];
    }
    let model = TwoTowerModel::<f32>::init(config, vocab.clone(), base_seed).unwrap();
    let pre_cfg = PretrainConfig {
        epochs: std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(24),
        batch_size: 64,
        seed: base_seed,
        sgd: SgdConfig::warmup_cosine(
            std::env::var("PLR").ok().and_then(|v| v.parse().ok()).unwrap_or(0.4),
            1,
            std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(24),
        ),
    };
    let (model, losses) = contrastive_pretrain(model, &union, &pre_cfg).unwrap();
    println!(
        "pretrain: {:.1}s, loss {:.3} -> {:.3} (tau {:.4})",
        t0.elapsed().as_secs_f32(),
        losses.first().unwrap(),
        losses.last().unwrap(),
        model.tau()
    );

    // Zero-shot sanity.
    let prompts_a: Vec<HandCraftedPrompt> =
        train_a.class_names.iter().map(|n| HandCraftedPrompt::new(&vocab, 4, n).unwrap()).collect();
    let mut correct = 0;
    for s in test_a.samples.iter() {
        let p = model.zero_shot_posterior(&s.image, &prompts_a).unwrap();
        if promptveil_core::eval::argmax(&p) == s.label {
            correct += 1;
        }
    }
    println!("zero-shot ACC on A test: {:.1}%", 100.0 * correct as f64 / test_a.samples.len() as f64);
    let prompts_b: Vec<HandCraftedPrompt> =
        train_b.class_names.iter().map(|n| HandCraftedPrompt::new(&vocab, 4, n).unwrap()).collect();
    let mut correct = 0;
    for s in test_b.samples.iter() {
        let p = model.zero_shot_posterior(&s.image, &prompts_b).unwrap();
        if promptveil_core::eval::argmax(&p) == s.label {
            correct += 1;
        }
    }
    println!("zero-shot ACC on B test: {:.1}%", 100.0 * correct as f64 / test_b.samples.len() as f64);

    if std::env::var("SKIP_ATTACK").is_ok() {
        return;
    }

    // Attack per seed.
    let plan = split_seen_unseen(16, base_seed).unwrap();
    let target = plan.seen[0];
    println!("seen {:?} unseen {:?} target {}", plan.seen, plan.unseen, target);

    let joint_epochs: usize = std::env::var("JE").ok().and_then(|v| v.parse().ok()).unwrap_or(10);
    let beta: f64 = std::env::var("BETA").ok().and_then(|v| v.parse().ok()).unwrap_or(0.002);
    let batch: usize = std::env::var("BS").ok().and_then(|v| v.parse().ok()).unwrap_or(16);

    for seed in [1u64, 2, 3] {
        let t1 = Instant::now();
        let fs = sample_few_shot(&train_a, &plan.seen, 16, seed).unwrap();
        let train: Vec<corpus::Sample<f32>> = fs.iter().map(|&i| train_a.samples[i].clone()).collect();
        let tokens_seen = ClassTokenSet::for_classes(&vocab, &train_a.class_names, &plan.seen).unwrap();
        let cfg = AttackConfig {
            target_class: target,
            warmup_epochs: std::env::var("WU").ok().and_then(|v| v.parse().ok()).unwrap_or(3),
            joint_epochs,
            alpha: 0.1,
            beta,
            batch_size: batch,
            seed,
            context: ContextKind::Generated,
            ..AttackConfig::default()
        };
        let out = run_attack(&model, &train, &tokens_seen, &cfg).unwrap();
        let view = out.prompt.view();

        // Seen eval.
        let seen_test: Vec<&corpus::Sample<f32>> =
            test_a.samples.iter().filter(|s| plan.seen.contains(&s.label)).collect();
        let acc_seen = accuracy(&model, &view, &tokens_seen, &seen_test).unwrap();
        let tslot = tokens_seen.slot_of_label(target).unwrap();
        let asr_seen =
            attack_success_rate(&model, &view, &tokens_seen, &out.trigger, &seen_test, tslot, false)
                .unwrap();

        // Unseen eval: ACC over unseen-only; ASR over unseen + target.
        let tokens_unseen =
            ClassTokenSet::for_classes(&vocab, &train_a.class_names, &plan.unseen).unwrap();
        let unseen_test: Vec<&corpus::Sample<f32>> =
            test_a.samples.iter().filter(|s| plan.unseen.contains(&s.label)).collect();
        let acc_unseen = accuracy(&model, &view, &tokens_unseen, &unseen_test).unwrap();
        let mut asr_space = plan.unseen.clone();
        asr_space.push(target);
        asr_space.sort_unstable();
        let tokens_asr =
            ClassTokenSet::for_classes(&vocab, &train_a.class_names, &asr_space).unwrap();
        let tslot_u = tokens_asr.slot_of_label(target).unwrap();
        let asr_unseen =
            attack_success_rate(&model, &view, &tokens_asr, &out.trigger, &unseen_test, tslot_u, false)
                .unwrap();

        // Transfer: B with target token appended; brightness over all A classes.
        let mut b_labels: Vec<usize> = (16..32).collect();
        b_labels.push(target);
        b_labels.sort_unstable();
        let tokens_b = ClassTokenSet::for_classes(&vocab, &union.class_names, &b_labels).unwrap();
        let b_test: Vec<&corpus::Sample<f32>> = test_b.samples.iter().collect();
        // relabel B test samples into union space
        let b_test_relab: Vec<corpus::Sample<f32>> = test_b
            .samples
            .iter()
            .map(|s| {
                let mut s2 = s.clone();
                s2.label += 16;
                s2
            })
            .collect();
        let b_refs: Vec<&corpus::Sample<f32>> = b_test_relab.iter().collect();
        let _ = b_test;
        let tslot_b = tokens_b.slot_of_label(target).unwrap();
        let asr_b =
            attack_success_rate(&model, &view, &tokens_b, &out.trigger, &b_refs, tslot_b, false)
                .unwrap();
        let acc_b = accuracy(&model, &view, &tokens_b, &b_refs).unwrap();

        let tokens_all = ClassTokenSet::for_classes(&vocab, &train_a.class_names, &(0..16).collect::<Vec<_>>()).unwrap();
        let bright_test: Vec<&corpus::Sample<f32>> = test_bright.samples.iter().collect();
        let tslot_d = tokens_all.slot_of_label(target).unwrap();
        let asr_bright = attack_success_rate(
            &model, &view, &tokens_all, &out.trigger, &bright_test, tslot_d, false,
        )
        .unwrap();
        let acc_bright = accuracy(&model, &view, &tokens_all, &bright_test).unwrap();

        // Stealth + similarity + retrieval.
        let pairs: Vec<&corpus::Sample<f32>> = test_a.samples.iter().take(100).collect();
        let (psnr_db, ssim_v) = stealth_scores(&out.trigger, &pairs, 32).unwrap();
        let gen = match &out.prompt {
            PromptParams::Generated(gen) => Some(gen),
            _ => None,
        };
        let profile = gen.map(|gg| {
            similarity_decoupling(&model, gg, &tokens_seen, &out.trigger, &seen_test[..40], tslot)
                .unwrap()
        });
        // retrieval: 1 query per class over all 16.
        let mut queries: Vec<&corpus::Sample<f32>> = Vec::new();
        for label in 0..16 {
            queries.push(test_a.samples.iter().find(|s| s.label == label).unwrap());
        }
        let ret = retrieval_recall_at_1(
            &model,
            &view,
            &tokens_all,
            &queries,
            Some(&out.trigger),
            tokens_all.slot_of_label(target).unwrap(),
        )
        .unwrap();

        println!(
            "seed {seed}: {:.1}s | seen ACC {acc_seen:.1} ASR {asr_seen:.1} | unseen ACC {acc_unseen:.1} ASR {asr_unseen:.1} | H_acc {:.1} | B: ACC {acc_b:.1} ASR {asr_b:.1} | bright: ACC {acc_bright:.1} ASR {asr_bright:.1} | psnr {psnr_db:.1} ssim {ssim_v:.3} | R@1 {:.2} B-R@1 {:.2} | joint loss {:.3}->{:.3}",
            t1.elapsed().as_secs_f32(),
            harmonic_mean(acc_seen, acc_unseen),
            ret.r_at_1,
            ret.b_r_at_1.unwrap(),
            out.stats.joint_epoch_losses.first().map(|l| l.total).unwrap_or(f64::NAN),
            out.stats.joint_epoch_losses.last().map(|l| l.total).unwrap_or(f64::NAN),
        );
        if let Some(p) = profile {
            println!(
                "   sim profile: cc {:.3} cb {:.3} bc {:.3} bb {:.3} (bb dominates: {})",
                p.clean_image_clean_text,
                p.clean_image_backdoor_text,
                p.backdoor_image_clean_text,
                p.backdoor_image_backdoor_text,
                p.backdoor_pairing_dominates()
            );
        }

        // Probe: can a logistic direction on f separate clean from
        // triggered, trained on the few-shot set, tested elsewhere?
        {
            let feats = |set: &[&corpus::Sample<f32>]| -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
                let clean: Vec<Vec<f32>> =
                    set.iter().map(|s| model.encode_image(&s.image).unwrap()).collect();
                let bd: Vec<Vec<f32>> = set
                    .iter()
                    .map(|s| {
                        let x = promptveil_core::attack::apply_trigger(&s.image, &out.trigger).unwrap();
                        model.encode_image(&x).unwrap()
                    })
                    .collect();
                (clean, bd)
            };
            let train_refs: Vec<&corpus::Sample<f32>> = train.iter().collect();
            let (tr_c, tr_b) = feats(&train_refs);
            let d = tr_c[0].len();
            let mut w = vec![0.0f64; d];
            let mut b = 0.0f64;
            for _ in 0..200 {
                let mut gw = vec![0.0f64; d];
                let mut gb = 0.0;
                for (xs, y) in tr_c.iter().map(|x| (x, 0.0)).chain(tr_b.iter().map(|x| (x, 1.0))) {
                    let z: f64 = xs.iter().zip(&w).map(|(&x, &wi)| x as f64 * wi).sum::<f64>() + b;
                    let p = 1.0 / (1.0 + (-z).exp());
                    let err = p - y;
                    for (gwi, &x) in gw.iter_mut().zip(xs) {
                        *gwi += err * x as f64;
                    }
                    gb += err;
                }
                let n = (tr_c.len() + tr_b.len()) as f64;
                for (wi, gwi) in w.iter_mut().zip(&gw) {
                    *wi -= 2.0 * gwi / n;
                }
                b -= 2.0 * gb / n;
            }
            let acc = |cs: &[Vec<f32>], bs: &[Vec<f32>]| -> f64 {
                let mut ok = 0usize;
                for (xs, y) in cs.iter().map(|x| (x, 0.0)).chain(bs.iter().map(|x| (x, 1.0))) {
                    let z: f64 = xs.iter().zip(&w).map(|(&x, &wi)| x as f64 * wi).sum::<f64>() + b;
                    if (z > 0.0) == (y > 0.5) {
                        ok += 1;
                    }
                }
                ok as f64 / (cs.len() + bs.len()) as f64
            };
            let (u_c, u_b) = feats(&unseen_test[..40]);
            let (bb_c, bb_b) = feats(&b_refs[..40]);
            let (br_c, br_b) = feats(&bright_test[..40]);
            println!(
                "   probe: train {:.2} unseen {:.2} B {:.2} bright {:.2}",
                acc(&tr_c, &tr_b),
                acc(&u_c, &u_b),
                acc(&bb_c, &bb_b),
                acc(&br_c, &br_b)
            );
        }

        // Diagnostics: context shift magnitude per test population.
        if let PromptParams::Generated(gg) = &out.prompt {
            let diag = |name: &str, set: &[&corpus::Sample<f32>]| {
                let mut cosfs = 0.0f64;
                let mut ctx_shift = 0.0f64;
                let mut n = 0.0f64;
                for s in set.iter().take(40) {
                    let bd = promptveil_core::attack::apply_trigger(&s.image, &out.trigger).unwrap();
                    let f = model.encode_image(&s.image).unwrap();
                    let fb = model.encode_image(&bd).unwrap();
                    cosfs += promptveil_core::model::cosine_similarity(&f, &fb).unwrap() as f64;
                    let c = gg.generate_context(&f).unwrap();
                    let cb = gg.generate_context(&fb).unwrap();
                    let d: f64 = c.iter().zip(&cb).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
                    let base: f64 = c.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                    ctx_shift += d / base.max(1e-9);
                    n += 1.0;
                }
                println!("   diag {name}: cos(f,fb) {:.4} | ctx shift {:.3}", cosfs / n, ctx_shift / n);
            };
            diag("seen", &seen_test);
            diag("unseen", &unseen_test);
            diag("B", &b_refs);
            diag("bright", &bright_test);
        }

        // Static baseline arm.
        let cfg_static = AttackConfig { context: ContextKind::Static, ..cfg.clone() };
        let out_s = run_attack(&model, &train, &tokens_seen, &cfg_static).unwrap();
        let view_s = out_s.prompt.view();
        let acc_seen_s = accuracy(&model, &view_s, &tokens_seen, &seen_test).unwrap();
        let asr_seen_s = attack_success_rate(
            &model, &view_s, &tokens_seen, &out_s.trigger, &seen_test, tslot, false,
        )
        .unwrap();
        let acc_unseen_s = accuracy(&model, &view_s, &tokens_unseen, &unseen_test).unwrap();
        let asr_unseen_s = attack_success_rate(
            &model, &view_s, &tokens_asr, &out_s.trigger, &unseen_test, tslot_u, false,
        )
        .unwrap();
        println!(
            "   static: seen ACC {acc_seen_s:.1} ASR {asr_seen_s:.1} | unseen ACC {acc_unseen_s:.1} ASR {asr_unseen_s:.1}"
        );

        // No-warmup ablation.
        let cfg_nw = AttackConfig { warmup_epochs: 0, ..cfg.clone() };
        let out_nw = run_attack(&model, &train, &tokens_seen, &cfg_nw).unwrap();
        let view_nw = out_nw.prompt.view();
        let acc_seen_nw = accuracy(&model, &view_nw, &tokens_seen, &seen_test).unwrap();
        let acc_unseen_nw = accuracy(&model, &view_nw, &tokens_unseen, &unseen_test).unwrap();
        let asr_seen_nw = attack_success_rate(
            &model, &view_nw, &tokens_seen, &out_nw.trigger, &seen_test, tslot, false,
        )
        .unwrap();
        println!(
            "   no-warmup: seen ACC {acc_seen_nw:.1} ASR {asr_seen_nw:.1} unseen ACC {acc_unseen_nw:.1} | H_acc default {:.2} vs nw {:.2}",
            harmonic_mean(acc_seen, acc_unseen),
            harmonic_mean(acc_seen_nw, acc_unseen_nw)
        );
        let _ = Trigger::<f32>::zeros(32, 4.0 / 255.0);
    }
    println!("total: {:.1}s", t0.elapsed().as_secs_f32());
}
