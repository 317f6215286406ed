use super::*;
use crate::corpus::{Corpus, CorpusKind};
use crate::model::ModelSpec;
use crate::quant::QuantConfig;

fn spec(d: usize, blocks: usize) -> ModelSpec {
    ModelSpec {
        vocab_size: 32,
        d_model: d,
        n_heads: 2,
        n_blocks: blocks,
        ff_mult: 2,
        max_seq_len: 16,
    }
}

fn settings(tag: &str) -> QuantSettings {
    QuantSettings::new(tag.parse::<QuantConfig>().unwrap())
}

fn batches(seed: u64) -> Vec<Vec<Vec<u32>>> {
    let corpus = Corpus::generate(CorpusKind::Mixed, 32, 2000, seed).unwrap();
    make_batches(&corpus.sample_windows(12, 8, seed).unwrap(), 4)
}

fn small_cfg() -> CalibrationConfig {
    CalibrationConfig {
        loss: LossSpec {
            sw_w: 0.1,
            n_proj: 16,
            ..LossSpec::default()
        },
        epochs: 4,
        batch_size: 4,
        seq_len: 12,
        n_samples: 8,
        eval_n_proj: 32,
        kl_steps: 10,
        ..CalibrationConfig::default()
    }
}

#[test]
fn config_defaults_and_validation() {
    let cfg = CalibrationConfig::default();
    assert_eq!((cfg.lwc_lr, cfg.let_lr, cfg.grad_clip, cfg.epochs), (1e-2, 5e-3, 1.0, 20));
    assert_eq!((cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps), (0.9, 0.999, 1e-8));
    cfg.validate().unwrap();

    let mut table = cfg.clone();
    table.loss.n_proj = 256;
    table.loss.sw_w = 0.1;
    table.validate().unwrap();

    for bad in [
        CalibrationConfig { epochs: 0, ..cfg.clone() },
        CalibrationConfig { lwc_lr: 0.0, ..cfg.clone() },
        CalibrationConfig { let_lr: -1.0, ..cfg.clone() },
        CalibrationConfig { batch_size: 0, ..cfg.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn config_serde_is_strict() {
    let cfg = small_cfg();
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<CalibrationConfig>(&json).unwrap(), cfg);
    let partial: CalibrationConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(partial.epochs, 3);
    assert_eq!(partial.lwc_lr, 1e-2);
    assert!(serde_json::from_str::<CalibrationConfig>(r#"{"epoch": 3}"#).is_err());
}

#[test]
fn pure_mse_objective_when_sw_weight_is_zero() {
    let model = ModelWeights::random(&spec(8, 1), 0).unwrap();
    let s = settings("W2A16g4");
    let cfg = CalibrationConfig {
        loss: LossSpec { sw_w: 0.0, ..small_cfg().loss },
        ..small_cfg()
    };
    let (_, report) = calibrate_model(&model, &s, &batches(0), &cfg, None).unwrap();
    for r in &report.blocks[0].trajectory {
        assert_eq!(r.combined, r.mse);
    }
}

#[test]
fn block_descent_on_every_seed() {
    for seed in 0..5 {
        let model = ModelWeights::random(&spec(8, 1), seed).unwrap();
        let s = settings("W2A16g4");
        let cfg = CalibrationConfig {
            seed,
            epochs: CalibrationConfig::default().epochs,
            ..small_cfg()
        };
        let inputs = embed_batches(&model, &batches(seed)).unwrap();
        let init = BlockQuantParams::init(&model.blocks[0], &s, seed).unwrap();
        let out = calibrate_block(0, &model, &init, &s, &inputs, &inputs, &cfg).unwrap();
        let r = &out.report;
        assert!(r.status.is_completed());
        assert_eq!(r.trajectory.len(), cfg.epochs * inputs.len());
        let (a, b) = (r.initial.unwrap().combined, r.final_terms.unwrap().combined);
        assert!(b <= a, "seed {seed}: {a} -> {b}");
        assert!(r.trajectory.iter().all(|t| t.combined.is_finite() && t.grad_norm.is_finite()));
    }
}

#[test]
fn raw_weights_never_change() {
    let model = ModelWeights::random(&spec(8, 2), 3).unwrap();
    let before = model.clone();
    let norms = |m: &ModelWeights| -> Vec<f64> {
        m.blocks
            .iter()
            .flat_map(|b| b.named().into_iter().map(|(_, t)| t.norm_sq()))
            .collect()
    };
    let mut s = settings("W3A8g4");
    s.let_enabled = Some(true);
    calibrate_model(&model, &s, &batches(1), &small_cfg(), None).unwrap();
    assert_eq!(model, before);
    assert_eq!(norms(&model), norms(&before));
}

#[test]
fn calibration_is_deterministic() {
    let model = ModelWeights::random(&spec(8, 2), 4).unwrap();
    let s = settings("W2A16g4");
    let run = || calibrate_model(&model, &s, &batches(2), &small_cfg(), None).unwrap();
    let (sa, ra) = run();
    let (sb, rb) = run();
    assert_eq!(sa, sb);
    for (a, b) in ra.blocks.iter().zip(&rb.blocks) {
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.final_params, b.final_params);
    }
}

#[test]
fn frozen_blocks_evaluate_identically() {
    let model = ModelWeights::random(&spec(8, 2), 5).unwrap();
    let s = settings("W2A16g4");
    let b = batches(3);
    let (state, _) = calibrate_model(&model, &s, &b, &small_cfg(), None).unwrap();
    let x = &embed_batches(&model, &b).unwrap()[0];
    let once = run_block(x, &model, 0, Some((&state.blocks[0], &s))).unwrap();
    let twice = run_block(x, &model, 0, Some((&state.blocks[0], &s))).unwrap();
    assert_eq!(once, twice);
}

#[test]
fn single_block_model_matches_block_calibration() {
    let model = ModelWeights::random(&spec(8, 1), 6).unwrap();
    let s = settings("W2A16g4");
    let cfg = small_cfg();
    let b = batches(4);
    let (state, report) = calibrate_model(&model, &s, &b, &cfg, None).unwrap();
    let inputs = embed_batches(&model, &b).unwrap();
    let init = QuantState::init(&model, &s, cfg.seed).unwrap();
    let direct = calibrate_block(0, &model, &init.blocks[0], &s, &inputs, &inputs, &cfg).unwrap();
    assert_eq!(state.blocks[0], direct.params);
    assert_eq!(report.blocks[0].trajectory, direct.report.trajectory);
    assert_eq!(report.completed_blocks, 1);
    assert!(report.failure.is_none());
}

#[test]
fn second_block_sees_quantized_outputs_of_the_first() {
    let model = ModelWeights::random(&spec(8, 2), 7).unwrap();
    let s = settings("W2A16g4");
    let b = batches(5);
    let mut seen: Vec<(usize, Vec<Tensor>)> = Vec::new();
    let mut hook = |i: usize, xs: &[Tensor]| seen.push((i, xs.to_vec()));
    let (state, report) = calibrate_model(&model, &s, &b, &small_cfg(), Some(&mut hook)).unwrap();
    assert_eq!(report.completed_blocks, 2);
    assert_eq!(seen.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![0, 1]);

    let embedded = embed_batches(&model, &b).unwrap();
    assert_eq!(seen[0].1, embedded);
    for (x, got) in embedded.iter().zip(&seen[1].1) {
        let quantized = run_block(x, &model, 0, Some((&state.blocks[0], &s))).unwrap();
        let full = run_block(x, &model, 0, None).unwrap();
        assert_eq!(got, &quantized);
        assert_ne!(got, &full);
    }
}

#[test]
fn non_finite_inputs_mark_the_block_failed() {
    let model = ModelWeights::random(&spec(8, 1), 8).unwrap();
    let s = settings("W2A16g4");
    let good = embed_batches(&model, &batches(6)).unwrap();
    let mut bad = good.clone();
    bad[0].data_mut()[0] = 1e300;
    let init = BlockQuantParams::init(&model.blocks[0], &s, 0).unwrap();
    let out = calibrate_block(0, &model, &init, &s, &good, &bad, &small_cfg()).unwrap();
    assert!(matches!(out.report.status, RunStatus::Failed { step: 0, .. }));
    assert!(out.report.final_terms.is_none());
    assert_eq!(out.params, init);
}

#[test]
fn rejects_empty_calibration_set() {
    let model = ModelWeights::random(&spec(8, 1), 0).unwrap();
    let r = calibrate_model(&model, &settings("W2A16g4"), &[], &small_cfg(), None);
    assert!(matches!(r, Err(Error::Usage(_))));
}

#[test]
fn report_serialises() {
    let model = ModelWeights::random(&spec(8, 1), 9).unwrap();
    let (_, report) = calibrate_model(&model, &settings("W2A16g4"), &batches(7), &small_cfg(), None).unwrap();
    let json = serde_json::to_string(&report).unwrap();
    let back: CalibrationReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
    assert!(report.peak_memory_bytes > 0);
    assert!(report.blocks[0].final_params.contains_key("attn.q.lwc.gamma_raw"));
}

#[test]
fn identical_logits_give_zero_kl_and_zero_gradient() {
    let model = ModelWeights::random(&spec(8, 1), 10).unwrap();
    let tokens = &batches(8)[0];
    let (_, logits) = fp_reference(&model, tokens).unwrap();
    let tape = Tape::new();
    let q = tape.param(logits.clone());
    let kl = crate::losses::kl_loss(tape.constant(logits), q, 1.0).unwrap();
    assert!(kl.item().abs() < 1e-12, "{}", kl.item());
    tape.backward(kl).unwrap();
    assert!(q.grad().unwrap().data().iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn hybrid_with_unit_alpha_is_the_mse_objective() {
    let model = ModelWeights::random(&spec(8, 2), 11).unwrap();
    let s = settings("W2A16g4");
    let state = QuantState::init(&model, &s, 0).unwrap();
    let tokens = &batches(9)[0];
    let l = output_loss(&model, &state, tokens, OutputObjective::Hybrid { alpha: 1.0 }, &LossSpec::default()).unwrap();
    assert_eq!(l.total, l.mse);
    assert!(l.mse > 0.0 && l.kl > 0.0);
    let k = output_loss(&model, &state, tokens, OutputObjective::Kl, &LossSpec::default()).unwrap();
    assert_eq!(k.total, k.kl);
}

#[test]
fn output_kl_decreases_over_fifty_steps() {
    let model = ModelWeights::random(&spec(16, 1), 12).unwrap();
    let s = settings("W2A16g8");
    let b = batches(10);
    let state = QuantState::init(&model, &s, 0).unwrap();
    let cfg = CalibrationConfig { kl_steps: 50, ..small_cfg() };
    let (tuned, report) = kl_finetune_output(&model, &state, &b, &cfg, OutputObjective::Kl).unwrap();
    assert!(report.status.is_completed());
    assert_eq!(report.trajectory.len(), 50);
    let (a, z) = (report.initial.kl, report.final_loss.unwrap().kl);
    assert!(z < a, "{a} -> {z}");
    assert_ne!(tuned, state);
}

#[test]
fn hybrid_finetune_runs() {
    let model = ModelWeights::random(&spec(8, 2), 13).unwrap();
    let s = settings("W2A16g4");
    let state = QuantState::init(&model, &s, 0).unwrap();
    let (_, report) =
        kl_finetune_output(&model, &state, &batches(11), &small_cfg(), OutputObjective::Hybrid { alpha: 0.5 })
            .unwrap();
    assert!(report.trajectory.iter().all(|l| l.total.is_finite()));
    assert!(kl_finetune_output(&model, &state, &batches(11), &small_cfg(), OutputObjective::Hybrid { alpha: 2.0 })
        .is_err());
}

#[test]
fn perplexity_is_stable_across_batching() {
    let model = ModelWeights::random(&spec(8, 1), 14).unwrap();
    let windows: Vec<Vec<u32>> = batches(12).concat();
    let a = perplexity(&model, None, &windows, 1).unwrap();
    let b = perplexity(&model, None, &windows, 3).unwrap();
    assert!((a - b).abs() < 1e-9 * a);
    assert_eq!(a, perplexity(&model, None, &windows, 1).unwrap());
    assert!(perplexity(&model, None, &[], 1).is_err());
}

#[test]
fn final_block_distance_is_zero_only_for_identical_paths() {
    let model = ModelWeights::random(&spec(8, 2), 15).unwrap();
    let windows = batches(13).concat();
    let state = QuantState::init(&model, &settings("W2A16g4"), 0).unwrap();
    let low = final_block_distance(&model, &state, &windows, 4, 32, 0).unwrap();
    assert!(low.sw > 0.0 && low.mse > 0.0);
    let high = QuantState::init(&model, &settings("W8A16g4"), 0).unwrap();
    let near = final_block_distance(&model, &high, &windows, 4, 32, 0).unwrap();
    assert!(near.mse < low.mse);
}

