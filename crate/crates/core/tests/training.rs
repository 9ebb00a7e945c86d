use difflm::data::{
    generate_synthetic, Example, SyntheticData, SyntheticSpec, SyntheticTask, TokenizerMode,
};
use difflm::denoiser::{
    Denoiser, DenoiserOutput, LengthHeadConfig, TransformerConfig, TransformerDenoiser,
};
use difflm::diffusion::{corrupt, generate, DecodeMode, SequenceState};
use difflm::exec::Exec;
use difflm::nn::Float;
use difflm::schedule::ScheduleSpec;
use difflm::training::{
    batch_gradients, mlm_loss, mlm_pretrain, prune_vocab, rdm_loss, Batch, Checkpoint, Objective,
    TrainConfig, Trainer,
};
use difflm::{NoiseSchedule, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic(task: SyntheticTask, seed: u64) -> SyntheticData {
    generate_synthetic(&SyntheticSpec {
        task,
        vocab_size: 10,
        min_len: 2,
        max_len: 5,
        seed,
        train_size: 200,
        test_size: 40,
        max_positions: 11,
    })
    .unwrap()
}

fn small_model<F: Float>(
    data: &SyntheticData,
    dim: usize,
    length: bool,
    seed: u64,
) -> TransformerDenoiser<F> {
    let vocab = data.tokenizer.vocab();
    let cfg = TransformerConfig {
        layers: 1,
        heads: 2,
        model_dim: dim,
        ff_dim: 2 * dim,
        max_positions: 11,
        vocab_size: vocab.len(),
    };
    let head = length.then_some(LengthHeadConfig {
        classes: 5,
        ff_dim: dim,
    });
    TransformerDenoiser::new(cfg, head, vocab.mask_id(), vocab.pad_id(), seed).unwrap()
}

fn row_with_truth(width: usize, mask: usize, truth: usize, lp: f64) -> Vec<f64> {
    let rest = (1.0 - lp.exp()) / (width - 2) as f64;
    (0..width)
        .map(|c| match c {
            c if c == mask => f64::NEG_INFINITY,
            c if c == truth => lp,
            _ => rest.ln(),
        })
        .collect()
}

#[test]
fn rdm_loss_worked_examples() {
    let mask = TokenId(0);
    let x0 = vec![TokenId(1), TokenId(2), TokenId(3)];
    let rows = |lp: f64| {
        DenoiserOutput::from_rows(
            x0.iter()
                .map(|t| row_with_truth(5, 0, t.index(), lp))
                .collect(),
        )
        .unwrap()
    };

    let s10 = NoiseSchedule::linear(10).unwrap();
    assert_eq!(
        rdm_loss(&rows(-1.0), &x0, &x0, 4, &s10, 0.0, mask).unwrap(),
        0.0
    );

    let one_masked = vec![TokenId(1), mask, TokenId(3)];
    assert_eq!(
        rdm_loss(&rows(0.0), &x0, &one_masked, 1, &s10, 0.0, mask).unwrap(),
        0.0
    );

    let s50 = NoiseSchedule::linear(50).unwrap();
    let two_masked = vec![mask, TokenId(2), mask];
    let loss = rdm_loss(&rows(-1.0), &x0, &two_masked, 26, &s50, 0.0, mask).unwrap();
    assert!((loss - 1.0).abs() < 1e-12, "loss {loss}");

    let not_absorbing = vec![TokenId(2), mask, TokenId(3)];
    assert!(rdm_loss(&rows(-1.0), &x0, &not_absorbing, 3, &s10, 0.0, mask).is_err());
}

#[test]
fn batch_loss_is_the_mean_of_example_losses() {
    let data = synthetic(SyntheticTask::Reverse, 3);
    let model = small_model::<f64>(&data, 16, false, 2);
    let schedule = NoiseSchedule::linear(20).unwrap();
    let mask = model.mask_id();
    let refs: Vec<&Example> = data.train[..12].iter().collect();
    for smoothing in [0.0, 0.1] {
        let batch = Batch::sample(&refs, Objective::Diffusion, &schedule, mask, 5, false).unwrap();
        let (loss, _) = batch_gradients(&model, &batch, smoothing, 0.0, 5, Exec::Serial).unwrap();
        let mut sum = 0.0;
        for it in &batch.items {
            let t = it.t.unwrap();
            let state = SequenceState {
                tokens: it.corrupted.clone(),
                condition_len: it.condition_len,
                t,
            };
            let out = model.score(&state).unwrap();
            let c = it.condition_len;
            sum += rdm_loss(
                &out,
                &it.clean[c..],
                &it.corrupted[c..],
                t,
                &schedule,
                smoothing,
                mask,
            )
            .unwrap();
        }
        let mean = sum / batch.items.len() as f64;
        assert!((loss - mean).abs() < 1e-9, "{loss} vs {mean}");
    }
}

#[test]
fn mlm_batch_without_masks_has_zero_loss_and_gradient() {
    let data = synthetic(SyntheticTask::Copy, 1);
    let model = small_model::<f64>(&data, 16, false, 4);
    let schedule = NoiseSchedule::linear(10).unwrap();
    let refs: Vec<&Example> = data.train[..8].iter().collect();
    let batch = Batch::sample(
        &refs,
        Objective::MaskedLm { mask_ratio: 1e-12 },
        &schedule,
        model.mask_id(),
        0,
        false,
    )
    .unwrap();
    assert_eq!(batch.masked_tokens(model.mask_id()), 0);
    let (loss, buffers) = batch_gradients(&model, &batch, 0.1, 0.0, 4, Exec::Serial).unwrap();
    assert_eq!(loss, 0.0);
    let mut probe = model.clone();
    let store = probe.store_mut();
    store.zero_grad();
    for b in &buffers {
        store.accumulate_buffer(b).unwrap();
    }
    for id in store.ids() {
        assert!(
            store.grad(id).data().iter().all(|&g| g == 0.0),
            "{}",
            store.name(id)
        );
    }
}

/// With the weight forced to 1 and the timestep chosen so that the masking
/// probability equals the MLM ratio, the two objectives have the same
/// expectation.
#[test]
fn diffusion_and_mlm_objectives_agree_in_expectation() {
    let data = synthetic(SyntheticTask::SortedDigits, 8);
    let model = small_model::<f64>(&data, 16, false, 6);
    let mask = model.mask_id();
    let schedule = NoiseSchedule::linear(10).unwrap();
    let t = 3;
    let ratio = schedule.mask_ratio(t);
    assert!((ratio - 0.3).abs() < 1e-12);
    let seqs: Vec<Vec<TokenId>> = data.train[..10].iter().map(Example::concat).collect();
    let samples = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut rdm, mut mlm) = (0.0, 0.0);
    for k in 0..samples {
        let x0 = &seqs[k % seqs.len()];
        let state = corrupt(x0, t, &schedule, 0, mask, &mut rng).unwrap();
        let out = model.score(&state).unwrap();
        rdm += rdm_loss(&out, x0, &state.tokens, t, &schedule, 0.0, mask).unwrap()
            / schedule.loss_weight(t).unwrap();

        let masked: Vec<TokenId> = x0
            .iter()
            .map(|&tok| if rng.gen::<f64>() < ratio { mask } else { tok })
            .collect();
        let state = SequenceState {
            tokens: masked,
            condition_len: 0,
            t,
        };
        let out = model.score(&state).unwrap();
        mlm += mlm_loss(&out, x0, &state.tokens, 0.0, mask).unwrap();
    }
    let rel = (rdm - mlm).abs() / mlm;
    assert!(
        rel < 0.02,
        "diffusion {rdm} vs mlm {mlm} ({:.2}%)",
        100.0 * rel
    );
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 12,
        batch_size: 8,
        learning_rate: 2e-3,
        warmup_steps: 2,
        seed,
        shard_size: 3,
        log_every: 0,
        ..TrainConfig::default()
    }
}

fn train_bytes(data: &SyntheticData, seed: u64, exec: Exec) -> Vec<u8> {
    let vocab = data.tokenizer.vocab().clone();
    let model = small_model::<f32>(data, 16, true, 1);
    let mut trainer = Trainer::new(
        model,
        data.train.clone(),
        Objective::Diffusion,
        quick_config(seed),
        &vocab,
        exec,
    )
    .unwrap();
    trainer.run(&data.test, |_| {}).unwrap();
    Checkpoint::new(
        trainer.into_model(),
        vocab,
        TokenizerMode::Char,
        ScheduleSpec::default(),
    )
    .unwrap()
    .to_bytes()
    .unwrap()
}

#[test]
fn training_is_bit_reproducible() {
    let data = synthetic(SyntheticTask::Reverse, 2);
    let a = train_bytes(&data, 11, Exec::Serial);
    let b = train_bytes(&data, 11, Exec::Serial);
    let c = train_bytes(&data, 12, Exec::Serial);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn serial_and_parallel_training_agree() {
    let data = synthetic(SyntheticTask::Reverse, 2);
    assert_eq!(
        train_bytes(&data, 5, Exec::Serial),
        train_bytes(&data, 5, Exec::Parallel)
    );
}

#[test]
fn pretrain_checkpoint_round_trips_through_a_file() {
    let data = synthetic(SyntheticTask::Copy, 5);
    let vocab = data.tokenizer.vocab().clone();
    let model = small_model::<f32>(&data, 16, false, 3);
    let (model, _) = mlm_pretrain(
        model,
        data.train.clone(),
        &[],
        0.15,
        quick_config(1),
        &vocab,
        Exec::Serial,
    )
    .unwrap();
    let ckpt = Checkpoint::new(model, vocab, TokenizerMode::Char, ScheduleSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back.header, ckpt.header);
    for ((na, a), (nb, b)) in ckpt.model.store().iter().zip(back.model.store().iter()) {
        assert_eq!(na, nb);
        let bits = |t: &[f32]| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.data()), bits(b.data()), "{na}");
    }
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes().unwrap());
}

/// Held-out masked-token accuracy, measured on fixed corruptions every 20
/// steps and averaged over 100-step windows, rises in every window of a
/// short pretraining run.
#[test]
fn mlm_heldout_accuracy_improves_early() {
    let data = generate_synthetic(&SyntheticSpec {
        task: SyntheticTask::SortedDigits,
        vocab_size: 13,
        min_len: 4,
        max_len: 10,
        seed: 13,
        train_size: 2000,
        test_size: 100,
        max_positions: 21,
    })
    .unwrap();
    let vocab = data.tokenizer.vocab().clone();
    let cfg = TransformerConfig {
        layers: 2,
        heads: 4,
        model_dim: 32,
        ff_dim: 64,
        max_positions: 21,
        vocab_size: vocab.len(),
    };
    let model =
        TransformerDenoiser::<f32>::new(cfg, None, vocab.mask_id(), vocab.pad_id(), 8).unwrap();
    let config = TrainConfig {
        steps: 500,
        batch_size: 16,
        learning_rate: 1e-3,
        warmup_steps: 50,
        log_every: 20,
        heldout_draws: 2,
        seed: 2,
        ..TrainConfig::default()
    };
    let (_, log) = mlm_pretrain(
        model,
        data.train.clone(),
        &data.test,
        0.15,
        config,
        &vocab,
        Exec::Serial,
    )
    .unwrap();
    let acc: Vec<f64> = log.iter().map(|r| r.heldout.unwrap().accuracy).collect();
    assert_eq!(acc.len(), 25);
    let windows: Vec<f64> = acc.chunks(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    assert!(
        windows.windows(2).all(|w| w[1] > w[0]),
        "window accuracy {windows:?}"
    );
}

fn pruning_fixture() -> (SyntheticData, Checkpoint<f64>, Vec<Example>) {
    let data = synthetic(SyntheticTask::Copy, 21);
    let vocab = data.tokenizer.vocab().clone();
    let model = small_model::<f64>(&data, 16, true, 9);
    let ckpt = Checkpoint::new(
        model,
        vocab.clone(),
        TokenizerMode::Char,
        ScheduleSpec::default(),
    )
    .unwrap();
    let content: Vec<TokenId> = vocab.content_ids().collect();
    let (a, b, c) = (content[0], content[2], content[5]);
    let sep = vocab.sep_id();
    let corpus = vec![
        Example {
            prompt: vec![a, b, sep],
            response: vec![a, b],
        },
        Example {
            prompt: vec![c, sep],
            response: vec![c],
        },
    ];
    (data, ckpt, corpus)
}

#[test]
fn pruned_model_matches_the_renormalized_restriction() {
    let (_, ckpt, corpus) = pruning_fixture();
    let pruned = prune_vocab(&ckpt, &corpus).unwrap();
    let remap = pruned.header.remap.clone().unwrap();
    assert_eq!(remap.len(), 6);
    let old_mask = ckpt.vocab().mask_id();
    let new_of = |old: TokenId| TokenId(remap.iter().position(|&o| o == old).unwrap() as u32);
    let retained: Vec<TokenId> = remap.iter().copied().filter(|&t| t != old_mask).collect();
    let payload: Vec<TokenId> = retained
        .iter()
        .copied()
        .filter(|&t| !ckpt.vocab().is_special(t))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let cond = rng.gen_range(1..5);
        let resp = rng.gen_range(1..=11 - cond);
        let mut tokens: Vec<TokenId> = (0..cond - 1)
            .map(|_| payload[rng.gen_range(0..payload.len())])
            .collect();
        tokens.push(ckpt.vocab().sep_id());
        for _ in 0..resp {
            tokens.push(if rng.gen_bool(0.5) {
                old_mask
            } else {
                payload[rng.gen_range(0..payload.len())]
            });
        }
        let old_state = SequenceState {
            tokens: tokens.clone(),
            condition_len: cond,
            t: 1,
        };
        let new_state = SequenceState {
            tokens: tokens.iter().map(|&t| new_of(t)).collect(),
            ..old_state.clone()
        };
        let full = ckpt.model.score(&old_state).unwrap();
        let small = pruned.model.score(&new_state).unwrap();
        for i in 0..resp {
            let expect = full.restricted_row(i, &retained);
            for (j, &old) in retained.iter().enumerate() {
                let got = small.log_prob(i, new_of(old));
                worst = worst.max((got - expect[j]).abs());
            }
        }
    }
    assert!(worst < 1e-6, "max deviation {worst}");

    let schedule = NoiseSchedule::linear(6).unwrap();
    let prompt: Vec<TokenId> = corpus[0].prompt.iter().map(|&t| new_of(t)).collect();
    for seed in 0..5 {
        for mode in [DecodeMode::Topk, DecodeMode::Ancestral] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = generate(&prompt, 4, &pruned.model, &schedule, mode, &mut rng).unwrap();
            for tok in out.tokens {
                assert!(retained.contains(&remap[tok.index()]));
            }
        }
    }
}

#[test]
fn full_coverage_prunes_nothing() {
    let (data, ckpt, _) = pruning_fixture();
    let pruned = prune_vocab(&ckpt, &data.train).unwrap();
    let identity: Vec<TokenId> = (0..ckpt.vocab().len() as u32).map(TokenId).collect();
    assert_eq!(pruned.header.remap.as_deref(), Some(identity.as_slice()));
    assert_eq!(pruned.vocab(), ckpt.vocab());
}

#[test]
fn pruning_without_separator_is_rejected() {
    let (_, ckpt, corpus) = pruning_fixture();
    let no_sep: Vec<Example> = corpus
        .iter()
        .map(|ex| Example {
            prompt: ex.payload().to_vec(),
            response: ex.response.clone(),
        })
        .collect();
    assert!(prune_vocab(&ckpt, &no_sep).is_err());
}
