//! Train a small denoiser on string reversal and report exact match.
//!
//! Usage: `cargo run --release --example reversal -- [steps] [dim] [layers]`

use std::time::Instant;

use difflm::data::{generate_synthetic, SyntheticSpec, SyntheticTask};
use difflm::data::{Example, TokenizerMode};
use difflm::denoiser::Denoiser;
use difflm::denoiser::{LengthHeadConfig, TransformerConfig, TransformerDenoiser};
use difflm::diffusion::corrupt;
use difflm::diffusion::{generate, DecodeMode};
use difflm::exec::{stream_rng, Exec};
use difflm::length::length_beam_generate;
use difflm::length::predict_length;
use difflm::schedule::ScheduleSpec;
use difflm::training::{Checkpoint, Objective, TrainConfig, Trainer};
use difflm::NoiseSchedule;

fn diagnose(model: &TransformerDenoiser<f32>, test: &[Example]) -> difflm::Result<()> {
    let schedule = NoiseSchedule::linear(50)?;
    let mask = model.mask_id();
    let (mut mh, mut mn, mut uh, mut un, mut lh) = (0, 0, 0, 0, 0);
    let mut ulp = 0.0;
    for (i, ex) in test.iter().enumerate() {
        let mut rng = stream_rng(99, i as u64);
        let t = 1 + i % 50;
        let st = corrupt(&ex.concat(), t, &schedule, ex.prompt.len(), mask, &mut rng)?;
        let out = model.score(&st)?;
        for (p, &tok) in st.response().iter().enumerate() {
            let (am, lp) = out.argmax(p);
            if tok == mask {
                mn += 1;
                mh += usize::from(am == ex.response[p]);
            } else {
                un += 1;
                uh += usize::from(am == tok);
                ulp += lp;
            }
        }
        lh += usize::from(predict_length(&ex.prompt, model, true)?.argmax() == ex.response.len());
    }
    println!(
        "masked acc {:.3} ({mn})  unmasked identity {:.3} ({un}, mean lp {:.3})  length acc {:.3}",
        mh as f64 / mn as f64,
        uh as f64 / un as f64,
        ulp / un as f64,
        lh as f64 / test.len() as f64
    );
    Ok(())
}

fn main() -> difflm::Result<()> {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let eval_only = raw.first().map(String::as_str) == Some("eval");
    let args: Vec<usize> = raw
        .iter()
        .skip(usize::from(eval_only))
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let steps = args.first().copied().unwrap_or(2000);
    let dim = args.get(1).copied().unwrap_or(64);
    let layers = args.get(2).copied().unwrap_or(3);
    let batch = args.get(3).copied().unwrap_or(32);
    let lr_milli = args.get(4).copied().unwrap_or(2);

    let spec = SyntheticSpec {
        task: SyntheticTask::Reverse,
        vocab_size: 16,
        min_len: 4,
        max_len: 12,
        seed: 1,
        train_size: 20_000,
        test_size: 200,
        max_positions: 25,
    };
    let data = generate_synthetic(&spec)?;
    let vocab = data.tokenizer.vocab().clone();
    let cfg = TransformerConfig {
        layers,
        heads: 4,
        model_dim: dim,
        ff_dim: 4 * dim,
        max_positions: 25,
        vocab_size: vocab.len(),
    };
    let model = TransformerDenoiser::<f32>::new(
        cfg,
        Some(LengthHeadConfig {
            classes: 12,
            ff_dim: dim,
        }),
        vocab.mask_id(),
        vocab.pad_id(),
        7,
    )?;
    println!("denoiser params {}", model.num_denoiser_params());
    let tc = TrainConfig {
        steps,
        batch_size: batch,
        learning_rate: lr_milli as f64 * 1e-3,
        warmup_steps: 200,
        log_every: if steps < 100 { 0 } else { 250 },
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let ckpt_path = std::path::Path::new("/tmp/reversal.ckpt");
    let model = if eval_only {
        Checkpoint::<f32>::load(ckpt_path)?.model
    } else {
        let mut trainer = Trainer::new(
            model,
            data.train.clone(),
            Objective::Diffusion,
            tc,
            &vocab,
            Exec::Serial,
        )?;
        trainer.run(if steps < 100 { &[] } else { &data.test[..100] }, |r| {
            println!(
                "{}  acc={:.3}  [{:.0}s]",
                r.to_tsv(),
                r.heldout.map_or(0.0, |h| h.accuracy),
                t0.elapsed().as_secs_f64()
            )
        })?;
        let model = trainer.into_model();
        Checkpoint::new(
            model.clone(),
            vocab.clone(),
            TokenizerMode::Char,
            ScheduleSpec::default(),
        )?
        .save(ckpt_path)?;
        model
    };
    if steps < 100 {
        return Ok(());
    }
    if std::env::args().any(|a| a == "9999") {
        let fresh = TransformerDenoiser::<f32>::new(
            cfg,
            Some(LengthHeadConfig {
                classes: 12,
                ff_dim: dim,
            }),
            vocab.mask_id(),
            vocab.pad_id(),
            7,
        )?;
        let schedule = NoiseSchedule::linear(50)?;
        let refs: Vec<&Example> = data.train[..32].iter().collect();
        let batch = difflm::training::Batch::sample(
            &refs,
            Objective::Diffusion,
            &schedule,
            model.mask_id(),
            1,
            true,
        )?;
        for (name, m) in [("fresh", &fresh), ("trained", &model)] {
            let t = Instant::now();
            for _ in 0..20 {
                difflm::training::batch_gradients(m, &batch, 0.1, 0.1, 8, Exec::Serial)?;
            }
            println!("{name}: {:.1} ms/step", t.elapsed().as_secs_f64() * 50.0);
        }
        return Ok(());
    }
    diagnose(&model, &data.test)?;
    let schedule = NoiseSchedule::linear(50)?;
    let t1 = Instant::now();
    let (mut ol, mut lb) = (0, 0);
    for (i, ex) in data.test.iter().enumerate() {
        let g = generate(
            &ex.prompt,
            ex.response.len(),
            &model,
            &schedule,
            DecodeMode::Topk,
            &mut stream_rng(0, i as u64),
        )?;
        ol += usize::from(g.tokens == ex.response);
        if g.tokens != ex.response {
            let mask = model.mask_id();
            let (mut remask, mut swap) = (0, 0);
            for w in g.trace.steps.windows(2) {
                remask += w[1].remasked.len();
                for (a, b) in w[0].state.tokens.iter().zip(&w[1].state.tokens) {
                    if *a != mask && *b != mask && a != b {
                        swap += 1;
                    }
                }
            }
            let wrong = g
                .tokens
                .iter()
                .zip(&ex.response)
                .filter(|(a, b)| a != b)
                .count();
            println!("fail {i}: wrong {wrong} remask {remask} swap {swap}");
        }
        let b = length_beam_generate(
            &ex.prompt,
            &model,
            &schedule,
            3,
            DecodeMode::Topk,
            0,
            true,
            Exec::Serial,
        )?;
        lb += usize::from(b.best().tokens == ex.response);
        if b.best().tokens != ex.response && i < 40 {
            let c: Vec<String> = b
                .candidates
                .iter()
                .map(|c| format!("{}:{:.4}", c.length, c.score))
                .collect();
            println!(
                "beam fail {i}: gold {} cands {}",
                ex.response.len(),
                c.join(" ")
            );
        }
    }
    let n = data.test.len() as f64;
    println!(
        "oracle-length EM {:.3}  beams=3 EM {:.3}  train {:.0}s  eval {:.0}s",
        ol as f64 / n,
        lb as f64 / n,
        t1.duration_since(t0).as_secs_f64(),
        t1.elapsed().as_secs_f64()
    );
    Ok(())
}
