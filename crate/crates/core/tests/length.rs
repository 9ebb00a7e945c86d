use difflm::data::{generate_synthetic, SyntheticData, SyntheticSpec, SyntheticTask};
use difflm::denoiser::{LengthHeadConfig, TransformerConfig, TransformerDenoiser};
use difflm::diffusion::{generate, DecodeMode};
use difflm::exec::{stream_rng, Exec};
use difflm::length::{length_beam_generate, predict_length};
use difflm::training::{diffusive_adapt, TrainConfig};
use difflm::NoiseSchedule;

fn task(kind: SyntheticTask, max_len: usize, seed: u64) -> SyntheticData {
    generate_synthetic(&SyntheticSpec {
        task: kind,
        vocab_size: 12,
        min_len: 1,
        max_len,
        seed,
        train_size: 1500,
        test_size: 100,
        max_positions: 2 * max_len + 1,
    })
    .unwrap()
}

fn model(data: &SyntheticData, layers: usize, dim: usize, seed: u64) -> TransformerDenoiser<f32> {
    let vocab = data.tokenizer.vocab();
    let cfg = TransformerConfig {
        layers,
        heads: 4,
        model_dim: dim,
        ff_dim: 4 * dim,
        max_positions: data.spec.max_positions,
        vocab_size: vocab.len(),
    };
    let head = LengthHeadConfig {
        classes: data.spec.max_len,
        ff_dim: dim,
    };
    TransformerDenoiser::new(cfg, Some(head), vocab.mask_id(), vocab.pad_id(), seed).unwrap()
}

fn train(
    data: &SyntheticData,
    model: TransformerDenoiser<f32>,
    steps: usize,
) -> TransformerDenoiser<f32> {
    let config = TrainConfig {
        steps,
        batch_size: 32,
        learning_rate: 3e-3,
        warmup_steps: 100,
        log_every: 0,
        seed: 4,
        ..TrainConfig::default()
    };
    let vocab = data.tokenizer.vocab().clone();
    diffusive_adapt(model, data.train.clone(), &[], config, &vocab, Exec::Serial)
        .unwrap()
        .0
}

#[test]
fn beams_agree_across_execution_modes_and_pick_the_best_score() {
    let data = task(SyntheticTask::Reverse, 6, 5);
    let m = model(&data, 1, 16, 3);
    let schedule = NoiseSchedule::linear(8).unwrap();
    for ex in data.test.iter().take(10) {
        for mode in [DecodeMode::Topk, DecodeMode::Ancestral] {
            let serial =
                length_beam_generate(&ex.prompt, &m, &schedule, 4, mode, 17, false, Exec::Serial)
                    .unwrap();
            let parallel = length_beam_generate(
                &ex.prompt,
                &m,
                &schedule,
                4,
                mode,
                17,
                false,
                Exec::Parallel,
            )
            .unwrap();
            assert_eq!(serial, parallel);
            let best = serial.best();
            for c in &serial.candidates {
                assert!(best.score >= c.score);
                if c.score == best.score {
                    assert!(best.length <= c.length);
                }
            }
        }
    }
}

#[test]
fn single_beam_equals_generation_at_the_argmax_length() {
    let data = task(SyntheticTask::Reverse, 6, 5);
    let m = model(&data, 1, 16, 8);
    let schedule = NoiseSchedule::cosine(10).unwrap();
    for ex in data.test.iter().take(10) {
        let beam = length_beam_generate(
            &ex.prompt,
            &m,
            &schedule,
            1,
            DecodeMode::Ancestral,
            3,
            false,
            Exec::Serial,
        )
        .unwrap();
        let len = predict_length(&ex.prompt, &m, false).unwrap().argmax();
        let plain = generate(
            &ex.prompt,
            len,
            &m,
            &schedule,
            DecodeMode::Ancestral,
            &mut stream_rng(3, len as u64),
        )
        .unwrap();
        assert_eq!(beam.generation, plain);
        assert_eq!(beam.best().tokens, plain.tokens);
    }
}

#[test]
fn more_length_beams_do_not_hurt_reversal() {
    let data = task(SyntheticTask::Reverse, 6, 9);
    let trained = train(&data, model(&data, 2, 32, 6), 1200);
    let schedule = NoiseSchedule::linear(10).unwrap();
    let exact = |k: usize| {
        data.test
            .iter()
            .filter(|ex| {
                let out = length_beam_generate(
                    &ex.prompt,
                    &trained,
                    &schedule,
                    k,
                    DecodeMode::Topk,
                    0,
                    true,
                    Exec::Serial,
                )
                .unwrap();
                out.best().tokens == ex.response
            })
            .count()
    };
    let (one, three) = (exact(1), exact(3));
    assert!(three >= one, "3 beams {three} < 1 beam {one}");
    assert!(one > 0, "the trained model never solves the task");
}
