//! End-to-end acceptance checks on a model trained from the bundled corpus.
//! Each test prints one PASS/FAIL line to stderr, bypassing output capture.

mod common;

use std::io::Write;
use std::sync::OnceLock;

use common::{finite_difference_error, micro_config, random_matrix, random_tokens, rng};
use hidden_transfer::analysis::{ablation, cosine_trace, eval_draft_accuracy, forward_microbench, width_ratio, EvalOptions, Method};
use hidden_transfer::config::RunConfig;
use hidden_transfer::corpus::{bundled_tokens, split_heldout};
use hidden_transfer::distill::TeacherPass;
use hidden_transfer::heads::{exit_loss, medusa_draft_distributions, medusa_loss, train_early_exit, train_medusa, ExitHeads, MedusaHeads};
use hidden_transfer::model::{pretrain_base, AttnMask, KVCache, ModelWeights};
use hidden_transfer::numerics::KlDirection;
use hidden_transfer::transfer::{
    transfer_heldout_kl, transfer_loss, transfer_train, AttachedTransfer, MaskMode, TransferBundle, TransferConfig,
};
use hidden_transfer::treedec::{flatten_tree, summary_table, DecodeMode, DecodeStats, Decoder, DraftTree, TreeSpec};
use rand::Rng;

struct Fixture {
    run: RunConfig,
    model: ModelWeights<f32>,
    held: Vec<u32>,
    bundle: TransferBundle<f32>,
    medusa: MedusaHeads<f32>,
    exit: ExitHeads<f32>,
    spec: TreeSpec,
    prompts: Vec<Vec<u32>>,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let run = RunConfig::default();
        let tokens = bundled_tokens();
        let (train, held) = split_heldout(&tokens, run.heldout_fraction);
        let (model, _) = pretrain_base(train, &run.model_config(), &run.pretrain_config()).unwrap();
        let config = run.transfer_config().unwrap();
        let hyper = run.train_hyper();
        let (bundle, _) = transfer_train(&model, train, &config, &hyper).unwrap();
        let (medusa, _) = train_medusa(&model, train, run.k, &hyper).unwrap();
        let (exit, _) = train_early_exit(&model, train, &config.layers, &hyper).unwrap();
        let mut r = rng(2024);
        let prompts = (0..100)
            .map(|_| {
                let len = r.random_range(16..=64);
                let start = r.random_range(0..held.len() - len);
                held[start..start + len].to_vec()
            })
            .collect();
        let spec = run.tree(std::path::Path::new(".")).unwrap();
        Fixture {
            model,
            held: held.to_vec(),
            bundle,
            medusa,
            exit,
            spec,
            prompts,
            run,
        }
    })
}

/// Decodes of every prompt in every mode, shared by the losslessness and
/// acceleration checks.
struct Suite {
    outputs: Vec<(DecodeMode, Vec<Vec<u32>>, DecodeStats)>,
}

const MAX_TOKENS: usize = 128;

fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let fx = fixture();
        let dec = Decoder::new(&fx.model)
            .with_transfer(&fx.bundle)
            .unwrap()
            .with_medusa(&fx.medusa)
            .unwrap()
            .with_spec(fx.spec.clone());
        let outputs = DecodeMode::ALL
            .into_iter()
            .map(|mode| {
                let mut total = DecodeStats::default();
                let texts = fx
                    .prompts
                    .iter()
                    .map(|p| {
                        let out = dec.decode(p, MAX_TOKENS, mode).unwrap();
                        total.merge(&out.stats);
                        out.tokens
                    })
                    .collect();
                (mode, texts, total)
            })
            .collect();
        Suite { outputs }
    })
}

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{verdict} criterion {n:>2} {name}: {detail}");
    assert!(pass, "criterion {n} {name}: {detail}");
}

fn print_block(text: &str) {
    let _ = write!(std::io::stderr(), "{text}");
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn criterion_01_lossless_decoding() {
    let fx = fixture();
    let s = suite();
    let reference = &s.outputs[0];
    assert_eq!(reference.0, DecodeMode::Autoregressive);
    let mut mismatches = Vec::new();
    for (mode, texts, stats) in &s.outputs[1..] {
        let bad = texts.iter().zip(&reference.1).filter(|(a, b)| a != b).count();
        if bad > 0 || stats.emitted != reference.2.emitted {
            mismatches.push(format!("{mode}: {bad} differing outputs"));
        }
    }
    let detail = if mismatches.is_empty() {
        format!("{} prompts x {MAX_TOKENS} tokens identical in all tree modes", fx.prompts.len())
    } else {
        mismatches.join("; ")
    };
    report(1, "lossless decoding", mismatches.is_empty(), &detail);
}

#[test]
fn criterion_02_attaching_drafters_leaves_real_logits_alone() {
    let fx = fixture();
    let m = &fx.model;
    let hash = m.content_hash();
    let attached = AttachedTransfer::new(m, &fx.bundle).unwrap();
    let mut identical = true;
    for p in fx.prompts.iter().take(20) {
        let n = p.len();
        let positions: Vec<usize> = (0..n).collect();
        let base = m.forward_causal(p).unwrap();
        let sources: Vec<usize> = (0..n).collect();
        for mode in [MaskMode::NoMasked, MaskMode::Masked] {
            let out = attached
                .forward(p, &positions, &AttnMask::causal(n, 0), None, &sources, mode, &[])
                .unwrap();
            identical &= out.logits == base.logits;
        }

        // The same through a cache: prefix first, then the rest with pseudo rows.
        let split = n / 2;
        let mut plain = KVCache::new(m.config.n_layers, m.config.d_model, m.config.max_positions);
        let mut with = plain.clone();
        m.forward(&p[..split], &positions[..split], &AttnMask::causal(split, 0), Some(&mut plain), &[])
            .unwrap();
        m.forward(&p[..split], &positions[..split], &AttnMask::causal(split, 0), Some(&mut with), &[])
            .unwrap();
        let rest = n - split;
        let a = m
            .forward(
                &p[split..],
                &positions[split..],
                &AttnMask::causal(rest, split),
                Some(&mut plain),
                &[],
            )
            .unwrap();
        let b = attached
            .forward(
                &p[split..],
                &positions[split..],
                &AttnMask::causal(rest, split),
                Some(&mut with),
                &(0..rest).collect::<Vec<_>>(),
                MaskMode::NoMasked,
                &[],
            )
            .unwrap();
        identical &= a.logits == b.logits;
        for layer in 0..m.config.n_layers {
            identical &= plain.keys(layer) == with.keys(layer) && plain.values(layer) == with.values(layer);
        }

        // Medusa and early-exit heads only read states.
        let taps = m.forward(p, &positions, &AttnMask::causal(n, 0), None, &fx.exit.layers).unwrap();
        identical &= taps.logits == base.logits;
        let _ = medusa_draft_distributions(base.hidden.row(n - 1), &fx.medusa);
        let _ = fx.exit.distributions(&taps.taps, n - 1).unwrap();
    }
    identical &= m.content_hash() == hash;
    report(
        2,
        "attach invariance",
        identical,
        "real-row logits bit-identical with transfer, medusa and exit drafters",
    );
}

/// Random tree of at most `max_nodes` nodes as spec lines.
fn random_spec(r: &mut impl Rng, max_nodes: usize, max_depth: usize) -> TreeSpec {
    let n = r.random_range(1..=max_nodes);
    let mut paths: Vec<Vec<usize>> = vec![Vec::new()];
    let mut children = vec![0usize];
    while paths.len() < n {
        let parent = r.random_range(0..paths.len());
        if paths[parent].len() >= max_depth {
            continue;
        }
        let mut path = paths[parent].clone();
        path.push(children[parent]);
        children[parent] += 1;
        paths.push(path);
        children.push(0);
    }
    let text: Vec<String> = paths[1..]
        .iter()
        .map(|p| p.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        .collect();
    TreeSpec::parse(&text.join("\n")).unwrap()
}

#[test]
fn criterion_03_tree_rows_match_path_recompute() {
    let fx = fixture();
    let m = &fx.model;
    let vocab = m.config.vocab_size as u32;
    let mut r = rng(303);
    let mut worst = 0.0f32;
    for t in 0..50 {
        let spec = random_spec(&mut r, 21, 5);
        let prompt = &fx.prompts[t];
        let n = prompt.len();
        let tokens: Vec<u32> = (0..spec.len()).map(|_| r.random_range(0..vocab)).collect();
        let positions = spec.nodes().iter().map(|node| n + node.depth).collect();
        let tree = DraftTree { spec, tokens, positions };
        let mut cache = KVCache::new(m.config.n_layers, m.config.d_model, m.config.max_positions);
        m.forward(prompt, &(0..n).collect::<Vec<_>>(), &AttnMask::causal(n, 0), Some(&mut cache), &[])
            .unwrap();
        let flat = flatten_tree(&tree, n, m.config.max_positions).unwrap();
        let out = m.forward(&flat.tokens, &flat.positions, &flat.mask, Some(&mut cache), &[]).unwrap();
        for i in 0..tree.spec.len() {
            let mut seq = prompt.clone();
            seq.extend(tree.spec.ancestors(i).iter().map(|&a| tree.tokens[a]));
            seq.push(tree.tokens[i]);
            let full = m.forward_causal(&seq).unwrap().logits;
            worst = worst.max(max_abs(full.row(seq.len() - 1), out.logits.row(i)));
        }
    }
    report(
        3,
        "tree-mask equivalence",
        worst <= 1e-4,
        &format!("50 random trees, max |diff| {worst:.2e} (tol 1e-4)"),
    );
}

#[test]
fn criterion_04_gradients_match_finite_differences() {
    let model = ModelWeights::<f64>::init(&micro_config(2, 44)).unwrap();
    let (d, v) = (model.config.d_model, model.config.vocab_size);
    let tokens = random_tokens(&mut rng(45), 9, v);
    let mut r = rng(46);
    let h = 1e-4;
    let mut errors = Vec::new();

    for (step, layer) in [(1, 1), (2, 1), (2, 2), (3, 0)] {
        for mode in [MaskMode::NoMasked, MaskMode::Masked] {
            for dir in [KlDirection::TeacherStudent, KlDirection::StudentTeacher] {
                let params = [
                    random_matrix(&mut r, d, d, 0.5),
                    random_matrix(&mut r, 1, d, 0.5).reshape(vec![d]).unwrap(),
                ];
                let err = finite_difference_error(&params, h, |tape, vars| {
                    let mut pass = TeacherPass::run(&model, &tokens, &[layer])?;
                    transfer_loss(&model, tape, &mut pass, step, layer, vars[0], Some(vars[1]), mode, dir)
                });
                errors.push((format!("transfer step {step} layer {layer} {mode:?} {dir:?}"), err));
            }
        }
    }

    let pass = TeacherPass::run(&model, &tokens, &[1, 2]).unwrap();
    for step in 1..=2 {
        let params = [
            random_matrix(&mut r, d, d, 0.5),
            random_matrix(&mut r, 1, d, 0.5).reshape(vec![d]).unwrap(),
            random_matrix(&mut r, d, v, 0.5),
        ];
        let err = finite_difference_error(&params, h, |tape, vars| {
            medusa_loss(tape, &pass, step, vars, KlDirection::TeacherStudent)
        });
        errors.push((format!("medusa step {step}"), err));
    }
    for (step, layer) in [(1, 1), (2, 2)] {
        let params = [random_matrix(&mut r, d, v, 0.5)];
        let err = finite_difference_error(&params, h, |tape, vars| {
            exit_loss(tape, &pass, step, layer, vars[0], KlDirection::TeacherStudent)
        });
        errors.push((format!("exit step {step} layer {layer}"), err));
    }

    let (label, worst) = errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    report(
        4,
        "gradient check",
        worst <= 1e-3,
        &format!("{} checks, worst relative error {worst:.2e} ({label}, tol 1e-3)", errors.len()),
    );
}

#[test]
fn criterion_05_training_beats_identity_and_chance() {
    let fx = fixture();
    let config: TransferConfig = fx.bundle.config.clone();
    let identity = TransferBundle::identity(config, fx.model.config.d_model, fx.model.content_hash());
    let ctx = fx.run.context;
    let kl0 = transfer_heldout_kl(&fx.model, &identity, &fx.held, ctx, 50).unwrap();
    let kl1 = transfer_heldout_kl(&fx.model, &fx.bundle, &fx.held, ctx, 50).unwrap();
    let kl_ok = kl1[0] < 0.5 * kl0[0];

    let opts = EvalOptions {
        n_seq: 20,
        n_splits: 50,
        seeds: vec![0, 1],
        ..EvalOptions::default()
    };
    let acc = eval_draft_accuracy(
        &fx.model,
        &fx.held,
        &[Method::Transfer(&fx.bundle, MaskMode::NoMasked), Method::Random],
        &opts,
    )
    .unwrap();
    let (p, q) = (acc.rate(0, 1, 0), acc.rate(1, 1, 0));
    let se = (acc.stderr(0, 1, 0).powi(2) + acc.stderr(1, 1, 0).powi(2)).sqrt();
    let acc_ok = p - q >= 5.0 * se;
    report(
        5,
        "training efficacy",
        kl_ok && acc_ok,
        &format!(
            "step-1 KL {:.3} -> {:.3} ({:.0}% of identity); top-1 {p:.3} vs random {q:.3}, margin {:.1} SE over {} samples",
            kl0[0],
            kl1[0],
            100.0 * kl1[0] / kl0[0],
            (p - q) / se.max(f64::MIN_POSITIVE),
            acc.samples
        ),
    );
}

#[test]
fn criterion_06_tree_decoding_needs_fewer_forwards() {
    let s = suite();
    let rows: Vec<(String, DecodeStats)> = s.outputs.iter().map(|(m, _, st)| (m.to_string(), st.clone())).collect();
    print_block(&summary_table(&rows));
    let tree = &s.outputs.iter().find(|(m, _, _)| *m == DecodeMode::TransferTree).unwrap().2;
    let pass = tree.tokens_per_forward() > 1.0 && tree.forwards < tree.emitted;
    report(
        6,
        "acceleration",
        pass,
        &format!(
            "transfer_tree {:.3} tokens/forward, {} forwards for {} tokens",
            tree.tokens_per_forward(),
            tree.forwards,
            tree.emitted
        ),
    );
}

#[test]
fn criterion_07_pseudo_states_move_toward_real_states() {
    let fx = fixture();
    let opts = EvalOptions {
        n_seq: 20,
        n_splits: 50,
        seeds: vec![0],
        ..EvalOptions::default()
    };
    let trace = cosine_trace(&fx.model, &fx.bundle, &fx.held, &opts).unwrap();
    let top = fx.model.config.n_layers;
    let mut lines = String::new();
    for step in 1..=fx.bundle.config.k {
        let first = trace.step_layers[step - 1];
        let cells: Vec<String> = (first..=top).map(|l| format!("L{l} {:.3}", trace.mean(step, l).unwrap())).collect();
        lines.push_str(&format!("  step {step}: {}\n", cells.join("  ")));
    }
    print_block(&lines);
    let first = trace.step_layers[0];
    let (start, end) = (trace.mean(1, first).unwrap(), trace.mean(1, top).unwrap());
    report(
        7,
        "refinement direction",
        trace.samples >= 1000 && end >= start,
        &format!(
            "step 1 cosine {start:.3} at layer {first} -> {end:.3} at layer {top} over {} splits",
            trace.samples
        ),
    );
}

#[test]
fn criterion_08_wide_forwards_are_sublinear() {
    let fx = fixture();
    let caches = [0, 128, 256];
    let rows = forward_microbench(&fx.model, &caches, &[1, 2, 4, 8, 16], 100, 0).unwrap();
    let mut table = format!("{:>9} {:>6} {:>10} {:>10}\n", "cache", "width", "median_ms", "min_ms");
    for r in &rows {
        table.push_str(&format!(
            "{:>9} {:>6} {:>10.4} {:>10.4}\n",
            r.cache_len, r.width, r.median_ms, r.min_ms
        ));
    }
    print_block(&table);
    let ratios = width_ratio(&rows, 1, 16);
    let pass = ratios.len() == caches.len() && ratios.iter().all(|&(_, x)| x < 16.0);
    let detail: Vec<String> = ratios.iter().map(|(c, x)| format!("cache {c}: {x:.2}x")).collect();
    report(
        8,
        "forward microbenchmark",
        pass,
        &format!("width 16 / width 1 time: {}", detail.join(", ")),
    );
}

#[test]
fn criterion_09_cache_matches_recompute_after_rollback() {
    let fx = fixture();
    let m = &fx.model;
    let dec = Decoder::new(m)
        .with_transfer(&fx.bundle)
        .unwrap()
        .with_medusa(&fx.medusa)
        .unwrap()
        .with_spec(fx.spec.clone());
    let mut worst = 0.0f32;
    let mut rounds = 0;
    let mut consistent = true;
    for mode in [DecodeMode::TransferTree, DecodeMode::TransferTwoPass, DecodeMode::MedusaTree] {
        for prompt in fx.prompts.iter().take(8) {
            let mut s = dec.session(mode).unwrap();
            let mut pending = s.prefill(prompt).unwrap();
            let mut committed = prompt.clone();
            for _ in 0..12 {
                let Some(tree) = s.next_tree().unwrap() else { break };
                let out = s.verify_and_extend(&tree).unwrap();
                committed.push(pending);
                committed.extend_from_slice(&out.tokens[..out.accepted()]);
                pending = out.bonus;
                rounds += 1;

                let n = committed.len();
                let mut fresh = KVCache::new(m.config.n_layers, m.config.d_model, m.config.max_positions);
                let positions: Vec<usize> = (0..n).collect();
                m.forward(&committed, &positions, &AttnMask::causal(n, 0), Some(&mut fresh), &[])
                    .unwrap();
                consistent &= s.cache().len() == n && s.cache().positions() == positions.as_slice();
                for layer in 0..m.config.n_layers {
                    let (k, v) = (s.cache().keys(layer), s.cache().values(layer));
                    consistent &= k.len() == fresh.keys(layer).len();
                    worst = worst.max(max_abs(k, fresh.keys(layer))).max(max_abs(v, fresh.values(layer)));
                }
            }
        }
    }
    report(
        9,
        "cache rollback",
        consistent && worst <= 1e-5,
        &format!("{rounds} verification rounds, max K/V diff {worst:.2e} (tol 1e-5)"),
    );
}

#[test]
fn criterion_10_inference_mask_ablation() {
    let fx = fixture();
    let opts = EvalOptions {
        n_seq: 10,
        n_splits: 50,
        seeds: vec![0],
        ..EvalOptions::default()
    };
    let report_ = ablation(&fx.model, &fx.bundle, &fx.held, &fx.prompts[..20], 64, &fx.spec, &opts).unwrap();
    let mut buf = Vec::new();
    report_.write_csv(&mut buf).unwrap();
    print_block(&String::from_utf8(buf).unwrap());
    let rows: Vec<(String, DecodeStats)> = report_.decode.iter().map(|(m, s)| (m.to_string(), s.clone())).collect();
    print_block(&summary_table(&rows));
    let same_step1 = report_.accuracy.hits[0][0] == report_.accuracy.hits[1][0];
    report(
        10,
        "mask ablation",
        report_.step1_max_diff == 0.0 && same_step1 && report_.decode.len() == 2,
        &format!("both masks ran, step-1 max distribution diff {:e}", report_.step1_max_diff),
    );
}
