use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use difflm::data::{generate_synthetic, Example, SyntheticSpec, SyntheticTask};
use difflm::denoiser::{Denoiser, LengthHeadConfig, TransformerConfig, TransformerDenoiser};
use difflm::diffusion::DecodeMode;
use difflm::exec::Exec;
use difflm::length::length_beam_generate;
use difflm::training::{batch_gradients, Batch, Objective};
use difflm::NoiseSchedule;

fn fixture() -> (TransformerDenoiser<f32>, Vec<Example>) {
    let spec = SyntheticSpec {
        task: SyntheticTask::Reverse,
        vocab_size: 16,
        min_len: 4,
        max_len: 12,
        seed: 3,
        train_size: 64,
        test_size: 8,
        max_positions: 25,
    };
    let data = generate_synthetic(&spec).unwrap();
    let vocab = data.tokenizer.vocab();
    let cfg = TransformerConfig {
        layers: 2,
        heads: 4,
        model_dim: 64,
        ff_dim: 256,
        max_positions: 25,
        vocab_size: vocab.len(),
    };
    let model = TransformerDenoiser::new(
        cfg,
        Some(LengthHeadConfig {
            classes: 12,
            ff_dim: 64,
        }),
        vocab.mask_id(),
        vocab.pad_id(),
        1,
    )
    .unwrap();
    (model, data.train)
}

fn modes() -> [(&'static str, Exec); 2] {
    [("serial", Exec::Serial), ("parallel", Exec::Parallel)]
}

fn gradients(c: &mut Criterion) {
    let (model, train) = fixture();
    let schedule = NoiseSchedule::linear(50).unwrap();
    let refs: Vec<&Example> = train.iter().collect();
    let batch = Batch::sample(
        &refs[..32],
        Objective::Diffusion,
        &schedule,
        model.mask_id(),
        9,
        true,
    )
    .unwrap();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| batch_gradients(&model, &batch, 0.0, 0.1, 8, exec).unwrap())
        });
    }
    group.finish();
}

fn beams(c: &mut Criterion) {
    let (model, train) = fixture();
    let schedule = NoiseSchedule::linear(10).unwrap();
    let prompt = train[0].prompt.clone();
    let mut group = c.benchmark_group("length_beams");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                length_beam_generate(
                    &prompt,
                    &model,
                    &schedule,
                    3,
                    DecodeMode::Topk,
                    0,
                    false,
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, gradients, beams);
criterion_main!(benches);
