mod common;

use std::sync::Arc;

use common::{random_tokens, rng, small_model};
use hidden_transfer::analysis::{
    ablation, cosine_trace, eval_draft_accuracy, forward_microbench, layer_sweep, width_ratio, write_bench_csv, write_sweep_csv,
    EvalOptions, Method,
};
use hidden_transfer::heads::{ExitHeads, MedusaHeads};
use hidden_transfer::numerics::Tensor;
use hidden_transfer::train::TrainHyper;
use hidden_transfer::transfer::{MaskMode, TransferBundle, TransferConfig};
use hidden_transfer::treedec::TreeSpec;

fn opts() -> EvalOptions {
    EvalOptions {
        n_seq: 10,
        n_splits: 20,
        seq_len: 48,
        min_split: 16,
        steps: 3,
        top_k: vec![1, 3, 5, 10],
        seeds: vec![1, 2],
    }
}

fn transfer_config(k: usize, layers: &[usize]) -> TransferConfig {
    TransferConfig {
        k,
        layers: layers.to_vec(),
        ..TransferConfig::for_depth(4, 1).unwrap()
    }
}

fn quick_hyper() -> TrainHyper {
    TrainHyper {
        epochs: 1,
        context: 24,
        batch_size: 2,
        lr: 1e-2,
        warmup_steps: 0,
        seed: 0,
        max_steps: Some(3),
    }
}

#[test]
fn random_control_sits_at_chance() {
    let model = small_model(1);
    let tokens = random_tokens(&mut rng(1), 3000, 29);
    let r = eval_draft_accuracy(&model, &tokens, &[Method::Random], &opts()).unwrap();
    assert_eq!(r.samples, 400);
    for step in 1..=3 {
        for (j, &k) in r.top_k.iter().enumerate() {
            let p = k as f64 / 29.0;
            let se = (p * (1.0 - p) / r.samples as f64).sqrt();
            let rate = r.rate(0, step, j);
            assert!((rate - p).abs() <= 3.0 * se, "step {step} top-{k}: {rate} vs {p} ± {se}");
        }
    }
}

#[test]
fn accuracy_grows_with_k_and_is_reproducible() {
    let model = small_model(2);
    let tokens = random_tokens(&mut rng(2), 3000, 29);
    let bundle = TransferBundle::init(transfer_config(3, &[1, 2, 3]), 16, 0, model.content_hash());
    let medusa = MedusaHeads::init(&model, 3).unwrap();
    let exit = ExitHeads::init(&model, &[2, 3, 4]).unwrap();
    let methods = [
        Method::Transfer(&bundle, MaskMode::NoMasked),
        Method::Transfer(&bundle, MaskMode::Masked),
        Method::Medusa(&medusa),
        Method::EarlyExit(&exit),
        Method::Random,
    ];
    let r = eval_draft_accuracy(&model, &tokens, &methods, &opts()).unwrap();
    assert_eq!(r.methods, vec!["transfer", "transfer_masked", "medusa", "early_exit", "random"]);
    for m in 0..methods.len() {
        for step in 1..=3 {
            for j in 1..r.top_k.len() {
                assert!(r.rate(m, step, j) >= r.rate(m, step, j - 1));
            }
        }
        // Step 1 is unaffected by the inference mask.
        assert_eq!(r.hits[0][0], r.hits[1][0]);
    }
    assert_eq!(r, eval_draft_accuracy(&model, &tokens, &methods, &opts()).unwrap());
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 5 * 3 * 4);

    let short = MedusaHeads::init(&model, 2).unwrap();
    assert!(eval_draft_accuracy(&model, &tokens, &[Method::Medusa(&short)], &opts()).is_err());
}

#[test]
fn identical_embeddings_give_unit_cosine() {
    // Every row starts from the same vector, so every value vector and every
    // residual state agree at each layer regardless of position.
    let mut model = small_model(3).cast::<f64>();
    let row = model.embedding.row(0).to_vec();
    let rows: Vec<Vec<f64>> = (0..29).map(|_| row.clone()).collect();
    model.embedding = Arc::new(Tensor::from_rows(&rows).unwrap());
    let bundle = TransferBundle::<f64>::identity(transfer_config(2, &[1, 3]), 16, model.content_hash());
    let tokens = random_tokens(&mut rng(3), 500, 29);
    let o = EvalOptions {
        n_seq: 3,
        n_splits: 5,
        steps: 2,
        ..opts()
    };
    let trace = cosine_trace(&model, &bundle, &tokens, &o).unwrap();
    assert_eq!(trace.samples, 30);
    for (step, first) in [(1, 1), (2, 3)] {
        assert_eq!(trace.mean(step, first - 1), None);
        for layer in first..=4 {
            let c = trace.mean(step, layer).unwrap();
            assert!((c - 1.0).abs() < 1e-9, "step {step} layer {layer}: {c}");
        }
    }
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 4 + 2);
}

#[test]
fn cosine_is_bounded_on_a_random_model() {
    let model = small_model(4);
    let bundle = TransferBundle::init(transfer_config(3, &[1, 2, 4]), 16, 2, model.content_hash());
    let tokens = random_tokens(&mut rng(4), 500, 29);
    let o = EvalOptions {
        n_seq: 2,
        n_splits: 4,
        ..opts()
    };
    let trace = cosine_trace(&model, &bundle, &tokens, &o).unwrap();
    for step in 1..=3 {
        for layer in trace.step_layers[step - 1]..=4 {
            let c = trace.mean(step, layer).unwrap();
            assert!((-1.0..=1.0).contains(&c));
        }
    }
}

#[test]
fn sweeps_cover_single_and_top_layers() {
    let model = small_model(5);
    let corpus = random_tokens(&mut rng(5), 2000, 29);
    let held = random_tokens(&mut rng(6), 500, 29);
    let template = transfer_config(1, &[1]);
    let o = EvalOptions {
        n_seq: 2,
        n_splits: 4,
        ..opts()
    };
    let one = layer_sweep(&model, &corpus, &held, 1, &[2], None, &template, &quick_hyper(), &o).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].layer, 2);
    assert_eq!(one[0].samples, 16);
    assert_eq!(one[0].accuracy.len(), 4);

    let top = layer_sweep(&model, &corpus, &held, 1, &[4], None, &template, &quick_hyper(), &o).unwrap();
    assert!(top[0].final_loss.is_finite());
    let again = layer_sweep(&model, &corpus, &held, 1, &[4], None, &template, &quick_hyper(), &o).unwrap();
    assert_eq!(top, again);

    let step2 = layer_sweep(&model, &corpus, &held, 2, &[2, 3], Some(1), &template, &quick_hyper(), &o).unwrap();
    assert_eq!(step2.iter().map(|r| r.layer).collect::<Vec<_>>(), vec![2, 3]);
    assert!(layer_sweep(&model, &corpus, &held, 2, &[2], None, &template, &quick_hyper(), &o).is_err());
    assert!(layer_sweep(&model, &corpus, &held, 1, &[5], None, &template, &quick_hyper(), &o).is_err());
    assert!(layer_sweep(&model, &corpus, &held, 3, &[2], None, &template, &quick_hyper(), &o).is_err());

    let mut buf = Vec::new();
    write_sweep_csv(&step2, &o.top_k, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 2 * 4);
}

#[test]
fn microbench_covers_every_cell() {
    let model = small_model(6);
    let rows = forward_microbench(&model, &[0, 8, 32], &[1, 2, 4], 3, 0).unwrap();
    assert_eq!(rows.len(), 9);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.cache_len, [0, 8, 32][i / 3]);
        assert_eq!(r.width, [1, 2, 4][i % 3]);
        assert_eq!(r.trials, 3);
        assert!(r.min_ms <= r.median_ms && r.min_ms <= r.mean_ms && r.min_ms >= 0.0);
    }
    let ratios = width_ratio(&rows, 1, 4);
    assert_eq!(ratios.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 8, 32]);
    assert!(ratios.iter().all(|r| r.1 > 0.0));
    let mut buf = Vec::new();
    write_bench_csv(&rows, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 10);
    assert!(forward_microbench(&model, &[90], &[8], 1, 0).is_err());
    assert!(forward_microbench(&model, &[0], &[1], 0, 0).is_err());
}

#[test]
fn ablation_agrees_at_step_one_and_leaves_inputs_alone() {
    let model = small_model(7);
    let bundle = TransferBundle::init(transfer_config(3, &[1, 2, 3]), 16, 1, model.content_hash());
    let model_hash = model.content_hash();
    let bundle_bytes = bundle.to_checkpoint().to_bytes();
    let held = random_tokens(&mut rng(7), 800, 29);
    let prompts: Vec<Vec<u32>> = (0..3).map(|i| random_tokens(&mut rng(10 + i), 8, 29)).collect();
    let o = EvalOptions {
        n_seq: 3,
        n_splits: 5,
        ..opts()
    };
    let report = ablation(&model, &bundle, &held, &prompts, 12, &TreeSpec::full(&[2, 2, 1]), &o).unwrap();
    assert_eq!(report.step1_max_diff, 0.0);
    assert_eq!(report.accuracy.hits[0][0], report.accuracy.hits[1][0]);
    assert_eq!(report.decode.len(), 2);
    for (_, stats) in &report.decode {
        assert_eq!(stats.emitted, 36);
    }
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("mask_mode,step1_top1,step2_top1,step3_top1,"));
    assert_eq!(text.lines().count(), 3);

    let _ = cosine_trace(&model, &bundle, &held, &o).unwrap();
    let _ = eval_draft_accuracy(&model, &held, &[Method::Transfer(&bundle, MaskMode::Masked)], &o).unwrap();
    assert_eq!(model.content_hash(), model_hash);
    assert_eq!(bundle.to_checkpoint().to_bytes(), bundle_bytes);
}
