//! Temporary probe: throughput + diagnostics at acceptance scale.
use pipedec_core::data::{build_vocab, encode_examples, gen_span_copy, SyntheticSpec};
use pipedec_core::decode::pipelined_decode;
use pipedec_core::model::{Model, ModelConfig};
use pipedec_core::schedule::PipelineSchedule;
use pipedec_core::train::{fit, layout_for, TrainConfig};
use pipedec_core::Regime;

fn spec(count: usize) -> SyntheticSpec {
    SyntheticSpec {
        seed: 42,
        example_count: count,
        vocab_size: 100,
        span_count: (2, 6),
        span_len: (2, 4),
        context_len: (24, 40),
        distractor_rate: 0.8,
    }
}

fn model_cfg(vocab: usize, dim: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 4,
        model_dim: dim,
        feedforward_dim: 2 * dim,
        vocab_size: vocab,
        num_relative_buckets: 32,
        max_relative_distance: 128,
        dropout_rate: 0.0,
    }
}

fn em_f1(pred: &[Vec<u32>], gold: &[Vec<u32>]) -> f64 {
    use std::collections::HashSet;
    let p: HashSet<&Vec<u32>> = pred.iter().collect();
    let g: HashSet<&Vec<u32>> = gold.iter().collect();
    if p.is_empty() && g.is_empty() { return 1.0; }
    if p.is_empty() || g.is_empty() { return 0.0; }
    let inter = p.intersection(&g).count() as f64;
    let prec = inter / p.len() as f64;
    let rec = inter / g.len() as f64;
    if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) }
}

#[test]
#[ignore]
fn probe_speed() {
    let examples = gen_span_copy(&spec(600)).unwrap();
    let vocab = build_vocab(&examples, 1);
    let encoded = encode_examples(&examples, &vocab);
    let mut model: Model<f32> = Model::new(model_cfg(vocab.len(), 128), 1).unwrap();
    let tc = TrainConfig { batch_size: 16, learning_rate: 3e-4, epochs: 1, seed: 7, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let report = fit(&mut model, &encoded, Regime::Pipelined, &tc).unwrap();
    let dt = t0.elapsed();
    println!("1 epoch over {} examples: {:.2}s ({:.1} ms/example), loss {:.4}",
        encoded.len(), dt.as_secs_f64(), dt.as_secs_f64() * 1000.0 / encoded.len() as f64,
        report.epoch_losses[0]);
}

#[test]
#[ignore]
fn probe_learning() {
    let all = gen_span_copy(&spec(2200)).unwrap();
    let (train_ex, test_ex) = all.split_at(2000);
    let test_ex = &test_ex[..150];
    let vocab = build_vocab(&all, 1);
    let train_enc = encode_examples(train_ex, &vocab);
    let test_enc = encode_examples(test_ex, &vocab);
    let lr: f64 = std::env::var("PROBE_LR").ok().and_then(|x| x.parse().ok()).unwrap_or(1e-3);
    let rounds: usize = std::env::var("PROBE_ROUNDS").ok().and_then(|x| x.parse().ok()).unwrap_or(8);
    let mut model: Model<f32> = Model::new(model_cfg(vocab.len(), 128), 1).unwrap();
    let sched = PipelineSchedule::default();
    for round in 0..rounds {
        let tc = TrainConfig { batch_size: 16, learning_rate: lr, epochs: 2, seed: 7 + round as u64, warmup_steps: if round == 0 { 250 } else { 0 }, ..TrainConfig::default() };
        let rep = fit(&mut model, &train_enc, Regime::Pipelined, &tc).unwrap();
        let mut total = 0.0;
        for ex in &test_enc {
            let r = pipelined_decode(&model, &ex.input_ids, &sched).unwrap();
            total += em_f1(&r.subsequences, &ex.target_subseqs);
        }
        println!("epochs {:2}  loss {:.4}  test EM-F1 {:.4}",
            (round + 1) * 2, rep.epoch_losses.last().unwrap(), total / test_enc.len() as f64);
    }
}

/// Whole-model gradient check in 64-bit: every sampled parameter's analytic
/// gradient vs central differences.
#[test]
#[ignore]
fn probe_model_gradcheck() {
    use pipedec_core::tensor::Tape;
    use rand::{Rng, SeedableRng};

    let examples = gen_span_copy(&spec(3)).unwrap();
    let vocab = build_vocab(&examples, 1);
    let encoded = encode_examples(&examples, &vocab);
    let ex = &encoded[0];
    let mut cfg = model_cfg(vocab.len(), 32);
    cfg.feedforward_dim = 48;
    let model: Model<f64> = Model::new(cfg, 9).unwrap();
    let layout = layout_for(ex, Regime::Pipelined, 1).unwrap();

    let loss_of = |m: &Model<f64>| -> f64 {
        let mut tape = Tape::recording();
        let bind = m.bind(&mut tape);
        let enc = m.encode_on(&mut tape, &bind, &ex.input_ids).unwrap();
        let logits = m.decoder_forward_on(&mut tape, &bind, enc, &layout.token_ids, &layout.positions, &layout.mask, 1).unwrap();
        let loss = tape.mean_nll(logits, &layout.targets, &layout.loss_mask).unwrap();
        tape.data(loss)[0]
    };
    // Analytic grads
    let mut tape = Tape::recording();
    let bind = model.bind(&mut tape);
    let enc = model.encode_on(&mut tape, &bind, &ex.input_ids).unwrap();
    let logits = model.decoder_forward_on(&mut tape, &bind, enc, &layout.token_ids, &layout.positions, &layout.mask, 1).unwrap();
    let loss = tape.mean_nll(logits, &layout.targets, &layout.loss_mask).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut grad_by_slot = std::collections::HashMap::new();
    for (slot, g) in grads { grad_by_slot.insert(slot, g); }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut work = model.clone();
    let h = 1e-5;
    let mut checked = 0usize;
    let mut bad = 0usize;
    for slot in 0..model.store().len() {
        let len = model.store().value(slot).len();
        for _ in 0..4usize.min(len) {
            let ei = rng.gen_range(0..len);
            let orig = model.store().value(slot).data()[ei];
            work.store_mut().value_mut(slot).data_mut()[ei] = orig + h;
            let up = loss_of(&work);
            work.store_mut().value_mut(slot).data_mut()[ei] = orig - h;
            let down = loss_of(&work);
            work.store_mut().value_mut(slot).data_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grad_by_slot[&slot][ei];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            let rel = (an - fd).abs() / denom;
            checked += 1;
            if rel > 1e-4 {
                bad += 1;
                println!("BAD {} elem {}: analytic {an:.3e} fd {fd:.3e} rel {rel:.2e}", model.store().name(slot), ei);
            }
        }
    }
    println!("checked {checked} params, {bad} bad");
    assert_eq!(bad, 0);
}

/// What does a briefly trained model actually predict?
#[test]
#[ignore]
fn probe_predictions() {
    let all = gen_span_copy(&spec(1050)).unwrap();
    let (train_ex, test_ex) = all.split_at(1000);
    let vocab = build_vocab(&all, 1);
    let train_enc = encode_examples(train_ex, &vocab);
    let test_enc = encode_examples(&test_ex[..5], &vocab);
    let mut model: Model<f32> = Model::new(model_cfg(vocab.len(), 128), 1).unwrap();
    let tc = TrainConfig { batch_size: 16, learning_rate: 1e-3, epochs: 10, seed: 3, ..TrainConfig::default() };
    let rep = fit(&mut model, &train_enc, Regime::Pipelined, &tc).unwrap();
    println!("losses: {:?}", rep.epoch_losses);
    let sched = PipelineSchedule::default();
    for ex in &test_enc {
        let r = pipelined_decode(&model, &ex.input_ids, &sched).unwrap();
        let show = |ss: &[Vec<u32>]| -> Vec<String> {
            ss.iter().map(|s| vocab.decode(s).join(" ")).collect()
        };
        println!("gold: {:?}", show(&ex.target_subseqs));
        println!("pred: {:?} (steps {})", show(&r.subsequences), r.steps);
    }
}

/// Teacher-forced loss breakdown: train vs test, start-queries vs
/// continuation queries; plus qualitative decode dumps.
#[test]
#[ignore]
fn probe_breakdown() {
    use pipedec_core::tensor::Tape;
    let all = gen_span_copy(&spec(2200)).unwrap();
    let (train_ex, test_ex) = all.split_at(2000);
    let vocab = build_vocab(&all, 1);
    let train_enc = encode_examples(train_ex, &vocab);
    let test_enc = encode_examples(test_ex, &vocab);
    let mut model: Model<f32> = Model::new(model_cfg(vocab.len(), 128), 1).unwrap();
    let epochs: usize = std::env::var("PROBE_EPOCHS").ok().and_then(|x| x.parse().ok()).unwrap_or(20);
    let tc = TrainConfig { batch_size: 16, learning_rate: 1e-3, epochs, seed: 7, warmup_steps: 250, ..TrainConfig::default() };
    let rep = fit(&mut model, &train_enc, Regime::Pipelined, &tc).unwrap();
    println!("final train loss {:.4}", rep.epoch_losses.last().unwrap());

    // Per-position-type teacher-forced NLL + argmax accuracy.
    let mut stats = |name: &str, set: &[pipedec_core::data::EncodedExample]| {
        let mut start_nll = 0.0f64; let mut start_n = 0usize; let mut start_hits = 0usize;
        let mut cont_nll = 0.0f64; let mut cont_n = 0usize; let mut cont_hits = 0usize;
        for ex in set.iter().take(120) {
            let layout = layout_for(ex, Regime::Pipelined, 1).unwrap();
            let mut tape = Tape::inference();
            let bind = model.bind(&mut tape);
            let enc = model.encode_on(&mut tape, &bind, &ex.input_ids).unwrap();
            let logits = model.decoder_forward_on(&mut tape, &bind, enc, &layout.token_ids, &layout.positions, &layout.mask, 1).unwrap();
            let data = tape.data(logits);
            let v = vocab.len();
            for r in 0..layout.len() {
                if !layout.loss_mask[r] { continue; }
                let row = &data[r * v..(r + 1) * v];
                let mut logp = vec![0f32; v];
                pipedec_core::tensor::kernels::log_softmax_row(row, &mut logp);
                let target = layout.targets[r] as usize;
                let nll = -logp[target] as f64;
                let hit = pipedec_core::decode::greedy_pick(row) == layout.targets[r];
                if layout.positions[r].offset == 0 {
                    start_nll += nll; start_n += 1; start_hits += hit as usize;
                } else {
                    cont_nll += nll; cont_n += 1; cont_hits += hit as usize;
                }
            }
        }
        println!("{name}: start-query nll {:.3} acc {:.3} ({start_n}), cont nll {:.3} acc {:.3} ({cont_n})",
            start_nll / start_n as f64, start_hits as f64 / start_n as f64,
            cont_nll / cont_n as f64, cont_hits as f64 / cont_n as f64);
    };
    stats("train", &train_enc);
    stats("test ", &test_enc);

    let sched = PipelineSchedule::default();
    for ex in test_enc.iter().take(4) {
        let r = pipelined_decode(&model, &ex.input_ids, &sched).unwrap();
        let show = |ss: &[Vec<u32>]| -> Vec<String> { ss.iter().map(|s| vocab.decode(s).join(" ")).collect() };
        println!("gold: {:?}", show(&ex.target_subseqs));
        println!("pred: {:?} (steps {}, term {:?})", show(&r.subsequences), r.steps, r.termination);
    }
}
