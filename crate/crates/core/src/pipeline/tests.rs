use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datagen::{generate_task, Captions, Dataset, InputDims, Question, Sample, SynthConfig, TaskKind, Video};
use crate::error::{Error, FormatError};
use crate::numkit::{Tape, Tensor};

const ABLATIONS: [Ablation; 5] = [
    Ablation::None,
    Ablation::Cap,
    Ablation::Cmr,
    Ablation::Mmf,
    Ablation::Qmmf,
];
const TASKS: [TaskKind; 3] = [TaskKind::Word, TaskKind::Number, TaskKind::Choice];

fn small_data(task: TaskKind, train: usize, seed: u64) -> Dataset {
    let mut cfg = SynthConfig::desk(task, seed);
    cfg.train = train;
    cfg.test = 8;
    cfg.sizes.captions = [2, 4];
    cfg.sizes.question = [2, 4];
    if task == TaskKind::Word {
        cfg.sizes.frames = [3, 5];
    }
    if task == TaskKind::Word {
        cfg.classes = 3;
    }
    generate_task(task, &cfg).unwrap()
}

fn small_config(ds: &Dataset, ablation: Ablation) -> ModelConfig {
    let mut cfg = ModelConfig::for_dataset(ds).with_ablation(ablation).with_seed(5);
    cfg.hidden = 8;
    cfg
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0, rng)
}

/// A word sample in token and raw-video form.
fn token_sample(dims: &InputDims, rng: &mut ChaCha8Rng) -> Sample {
    let (d_a, d_m) = dims.raw_video().unwrap();
    Sample {
        captions: Captions::Tokens(vec![vec![1, 2, 3], vec![4, 0], vec![2]]),
        video: Video::Raw {
            appearance: random_tensor(4, d_a, rng),
            motion: random_tensor(4, d_m, rng),
        },
        question: Question::Tokens(vec![3, 1, 4]),
        candidates: vec![],
        answer: 1,
        planted_row: None,
    }
}

fn token_dims() -> InputDims {
    InputDims {
        d_c: 6,
        d_v: 5,
        d_q: 4,
        d_a: Some(3),
        d_m: Some(2),
        vocab: Some(7),
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    for task in TASKS {
        let ds = small_data(task, 2, 1);
        for ablation in ABLATIONS {
            let cfg = small_config(&ds, ablation);
            let model = Model::new(cfg.clone()).unwrap();
            assert_eq!(model.params.scalar_count(), cfg.param_count(), "{task} {ablation}");
        }
    }
    for ablation in ABLATIONS {
        let mut cfg = ModelConfig::desk(TaskKind::Word, 3, token_dims()).with_ablation(ablation);
        cfg.hidden = 6;
        cfg.visual_hidden = Some(9);
        let model = Model::new(cfg.clone()).unwrap();
        assert_eq!(model.params.scalar_count(), cfg.param_count(), "tokens {ablation}");
    }
}

#[test]
fn reference_parameter_count_formula() {
    // Hand count of the word model at d = 512 with C = 4, from the closed form.
    let cfg = ModelConfig::reference(TaskKind::Word, 4);
    let d = 512usize;
    let gru = |i: usize| 3 * (d * i + d) + 3 * d * d;
    let visual = 6144 * 4096 + 4096 + 4096 * 4096 + 4096;
    let context = gru(512) + gru(4096) + gru(300);
    let graphs = 9 * (2 * d * d + 3 * d);
    let rounds = 2 * 3 * (9 * d * d + 4 * d);
    let att = 3 * d * d + 2 * d;
    let fusion = 3 * att + (3 * d * d + 3 * d * d + 3 * d + 9 * d) + (4 * d * d + d) + 8 * d * d + 4 * d;
    let last = 2 * att;
    let head = 4 * 1536 + 4;
    assert_eq!(
        cfg.param_count(),
        visual + context + graphs + rounds + fusion + last + head
    );
}

#[test]
fn every_parameter_is_registered_once() {
    for task in TASKS {
        let ds = small_data(task, 2, 1);
        for ablation in ABLATIONS {
            let model = Model::new(small_config(&ds, ablation)).unwrap();
            let ids = model.arch.param_ids();
            let unique: BTreeSet<_> = ids.iter().map(|id| id.index()).collect();
            assert_eq!(unique.len(), ids.len());
            assert_eq!(ids.len(), model.params.len());
        }
    }
}

#[test]
fn ablations_remove_their_parameters() {
    let ds = small_data(TaskKind::Word, 2, 1);
    let names = |a| {
        let m = Model::new(small_config(&ds, a)).unwrap();
        m.params.iter().map(|(_, p)| p.name().to_string()).collect::<Vec<_>>()
    };
    assert!(!names(Ablation::Cap).iter().any(|n| n.contains("caption") || n.contains("att_c")));
    assert!(!names(Ablation::Cmr).iter().any(|n| n.starts_with("cmr.")));
    assert!(!names(Ablation::Mmf).iter().any(|n| n.starts_with("fusion.lstm")));
    assert!(!names(Ablation::Qmmf).iter().any(|n| n.starts_with("fusion.att") && n.contains("w_q")));
    assert!(names(Ablation::None).iter().any(|n| n.starts_with("fusion.att_v") && n.contains("w_q")));
}

#[test]
fn config_validation() {
    let ds = small_data(TaskKind::Word, 2, 1);
    let base = small_config(&ds, Ablation::None);
    for bad in [
        ModelConfig { cross_modal_after: vec![3], ..base.clone() },
        ModelConfig { cross_modal_after: vec![2, 1], ..base.clone() },
        ModelConfig { hidden: 0, ..base.clone() },
        ModelConfig { classes: 1, ..base.clone() },
        ModelConfig { task: TaskKind::Number, classes: 4, ..base.clone() },
    ] {
        assert!(matches!(Model::new(bad), Err(Error::Config(_))));
    }
    assert_eq!("vid".parse::<Ablation>().unwrap(), Ablation::Cap);
    assert!("full".parse::<Ablation>().is_err());
}

#[test]
fn forward_is_bitwise_deterministic() {
    for task in TASKS {
        let ds = small_data(task, 3, 2);
        let model = Model::new(small_config(&ds, Ablation::None)).unwrap();
        let run = || {
            let mut t = Tape::new();
            let out = model.forward(&mut t, &ds.train[0], true).unwrap();
            t.value(out.loss.unwrap()).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn token_and_raw_video_inputs_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = token_dims();
    let mut cfg = ModelConfig::desk(TaskKind::Word, 3, dims.clone());
    cfg.hidden = 6;
    let model = Model::new(cfg).unwrap();
    let sample = token_sample(&dims, &mut rng);
    let (loss, grads) = model.sample_gradients(&sample).unwrap();
    assert!(loss.is_finite());
    let emb = model.arch.embedding.unwrap().table;
    let g = grads.get(emb).unwrap();
    // Token 5 and 6 never occur, so their rows get no gradient.
    assert!(g.row(5).iter().chain(g.row(6)).all(|&v| v == 0.0));
    assert!(g.row(1).iter().any(|&v| v != 0.0));
}

#[test]
fn no_cmr_equals_identity_rounds() {
    let ds = small_data(TaskKind::Word, 3, 4);
    let full = Model::new(small_config(&ds, Ablation::None)).unwrap();
    let mut no_cmr = Model::new(small_config(&ds, Ablation::Cmr)).unwrap();
    for id in no_cmr.params.ids().collect::<Vec<_>>() {
        let name = no_cmr.params.get(id).name().to_string();
        let src = full.params.id(&name).unwrap();
        no_cmr.params.set_value(id, full.params.value(src).clone()).unwrap();
    }
    let mut identity = full.clone();
    identity.arch.rounds.clear();
    let logits = |m: &Model| {
        let mut t = Tape::new();
        let out = m.forward(&mut t, &ds.train[0], false).unwrap();
        let s = out.representations[0].last.s_a;
        t.value(s).data().to_vec()
    };
    assert_eq!(logits(&no_cmr), logits(&identity));
    assert_ne!(logits(&full), logits(&identity));
}

#[test]
fn forward_rejects_mismatched_sample() {
    let ds = small_data(TaskKind::Word, 2, 1);
    let model = Model::new(small_config(&ds, Ablation::None)).unwrap();
    let mut bad = ds.train[0].clone();
    bad.video = Video::Features(Tensor::ones(&[4, 7]));
    assert!(model.predict(&bad).is_err());
    let mut bad = ds.train[0].clone();
    bad.answer = 3;
    assert!(model.predict(&bad).is_err());
}

#[test]
fn choice_forward_scores_every_candidate() {
    let ds = small_data(TaskKind::Choice, 2, 6);
    let model = Model::new(small_config(&ds, Ablation::None)).unwrap();
    let mut t = Tape::new();
    let out = model.forward(&mut t, &ds.train[0], true).unwrap();
    assert_eq!(out.representations.len(), 5);
    assert!(out.prediction < 5);
    let att = model.attention(&ds.train[0]).unwrap();
    assert_eq!(att.candidate, Some(out.prediction as usize));
    assert_eq!(att.trace.steps.len(), 3);
}

#[test]
fn attention_dump_is_on_the_simplex() {
    for ablation in ABLATIONS {
        let ds = small_data(TaskKind::Word, 2, 7);
        let model = Model::new(small_config(&ds, ablation)).unwrap();
        let att = model.attention(&ds.train[1]).unwrap();
        let mut rows: Vec<Vec<f64>> = vec![att.trace.final_att_v.clone()];
        rows.extend(att.trace.final_att_c.clone());
        for s in &att.trace.steps {
            rows.extend([s.att_v.clone(), s.att_q.clone()]);
            rows.extend(s.att_c.clone());
        }
        for r in rows {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(r.iter().all(|&v| v >= 0.0));
        }
        let expected_steps = if ablation == Ablation::Mmf { 0 } else { 3 };
        assert_eq!(att.trace.steps.len(), expected_steps);
        assert_eq!(att.trace.final_att_c.is_some(), ablation != Ablation::Cap);
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let ds = small_data(TaskKind::Number, 10, 8);
    let mut model = Model::new(small_config(&ds, Ablation::None)).unwrap();
    let before = model.params.clone();
    let cfg = TrainConfig { lr: 0.0, batch_size: 4, ..TrainConfig::default() };
    let mut trainer = Trainer::new(&model, cfg).unwrap();
    let stats = trainer.train_epoch(&mut model, &ds.train).unwrap();
    assert_eq!(stats.batch_losses.len(), 3);
    for id in model.params.ids() {
        assert_eq!(model.params.value(id), before.value(id));
    }
    assert_eq!(trainer.optimizer.steps(), 3);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let ds = small_data(TaskKind::Word, 2, 9);
    let mut model = Model::new(small_config(&ds, Ablation::None)).unwrap();
    let before = model.params.clone();
    let cfg = TrainConfig { lr: 1e-3, ..TrainConfig::default() };
    let mut trainer = Trainer::new(&model, cfg).unwrap();
    let batch: Vec<&Sample> = ds.train.iter().collect();
    trainer.step(&mut model, &batch).unwrap();
    // Bias-corrected first step is lr · g/(|g| + eps) per coordinate.
    for id in model.params.ids() {
        let g = model.params.grad(id).data();
        let moved = model.params.value(id).data();
        for ((x, x0), g) in moved.iter().zip(before.value(id).data()).zip(g) {
            let expected = x0 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-12);
        }
    }
    let (m, v) = trainer.optimizer.moments();
    for id in model.params.ids() {
        assert_eq!(m[id.index()].shape(), model.params.value(id).shape());
        assert_eq!(v[id.index()].shape(), model.params.value(id).shape());
    }
}

#[test]
fn loss_trace_is_reproducible_across_thread_counts() {
    let ds = small_data(TaskKind::Word, 12, 10);
    let trace = |threads| {
        let mut model = Model::new(small_config(&ds, Ablation::None)).unwrap();
        let cfg = TrainConfig { lr: 1e-3, batch_size: 5, threads, seed: 3, ..TrainConfig::default() };
        let mut trainer = Trainer::new(&model, cfg).unwrap();
        let mut losses = Vec::new();
        for _ in 0..2 {
            losses.extend(trainer.train_epoch(&mut model, &ds.train).unwrap().batch_losses);
        }
        (losses, encode_checkpoint(&model).unwrap())
    };
    let (a, ca) = trace(1);
    let (b, cb) = trace(1);
    let (c, cc) = trace(3);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert!(ca == cb && ca == cc);
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let ds = small_data(TaskKind::Word, 2, 1);
    let model = Model::new(small_config(&ds, Ablation::None)).unwrap();
    let trainer = Trainer::new(&model, TrainConfig::default()).unwrap();
    let a = trainer.epoch_order(0, 50);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    assert_eq!(a, trainer.epoch_order(0, 50));
    assert_ne!(a, trainer.epoch_order(1, 50));
}

#[test]
fn every_parameter_receives_gradient() {
    for task in TASKS {
        let ds = small_data(task, 20, 11);
        for ablation in ABLATIONS {
            let model = Model::new(small_config(&ds, ablation)).unwrap();
            let mut live = vec![false; model.params.len()];
            for batch in ds.train.chunks(2).take(10) {
                for s in batch {
                    let (_, grads) = model.sample_gradients(s).unwrap();
                    for id in model.params.ids() {
                        if grads.get(id).is_some_and(|g| g.max_abs() > 1e-12) {
                            live[id.index()] = true;
                        }
                    }
                }
            }
            let dead: Vec<_> = model
                .params
                .iter()
                .filter(|(id, _)| !live[id.index()])
                .map(|(_, p)| p.name().to_string())
                .collect();
            assert!(dead.is_empty(), "{task} {ablation}: {dead:?}");
        }
    }
}

#[test]
fn score_matches_direct_recomputation() {
    assert_eq!(score(TaskKind::Word, &[1, 2, 3], &[1, 2, 3]), 1.0);
    assert_eq!(score(TaskKind::Number, &[4, 4], &[4, 4]), 0.0);
    assert_eq!(score(TaskKind::Choice, &[0, 1, 2, 3], &[0, 0, 2, 2]), 0.5);
    let mse = score(TaskKind::Number, &[0, 10, 3], &[2, 7, 3]);
    assert!((mse - (4.0 + 9.0) / 3.0).abs() < 1e-15);
}

#[test]
fn evaluate_matches_per_sample_predictions() {
    let ds = small_data(TaskKind::Number, 2, 12);
    let model = Model::new(small_config(&ds, Ablation::None)).unwrap();
    let metrics = evaluate(&model, &ds, crate::datagen::Split::Test, 2).unwrap();
    let direct: f64 = ds
        .test
        .iter()
        .map(|s| (model.predict(s).unwrap() as f64 - s.answer as f64).powi(2))
        .sum::<f64>()
        / ds.test.len() as f64;
    assert_eq!(metrics.value, direct);
    assert_eq!(metrics.name(), "mse");
    let other = small_data(TaskKind::Word, 2, 12);
    assert!(matches!(
        evaluate(&model, &other, crate::datagen::Split::Test, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for ablation in ABLATIONS {
        let ds = small_data(TaskKind::Choice, 2, 13);
        let model = Model::new(small_config(&ds, ablation)).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, model.config);
        for id in model.params.ids() {
            let a = model.params.value(id).data().iter().map(|v| v.to_bits());
            let b = back.params.value(id).data().iter().map(|v| v.to_bits());
            assert!(a.eq(b));
        }
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let ds = small_data(TaskKind::Word, 2, 14);
    let model = Model::new(small_config(&ds, Ablation::None)).unwrap();
    let bytes = encode_checkpoint(&model).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_checkpoint(&bad),
        Err(Error::Format(FormatError::BadMagic { .. }))
    ));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        decode_checkpoint(&bad),
        Err(Error::Format(FormatError::UnsupportedVersion(9)))
    ));
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 3]),
        Err(Error::Format(FormatError::Truncated { .. }))
    ));
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(
        decode_checkpoint(&bad),
        Err(Error::Format(FormatError::TrailingBytes(1)))
    ));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ecgc");
    let ds = small_data(TaskKind::Number, 2, 15);
    let model = Model::new(small_config(&ds, Ablation::Qmmf)).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(encode_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
    assert!(!dir.path().join("model.ecgc.tmp").exists());
}

#[test]
fn model_gradients_match_central_differences() {
    for task in TASKS {
        let ds = small_data(task, 6, 16);
        for ablation in [Ablation::None, Ablation::Cap, Ablation::Mmf] {
            let mut model = Model::new(small_config(&ds, ablation)).unwrap();
            let before = encode_checkpoint(&model).unwrap();
            let sample = ds.train.iter().min_by_key(|s| s.answer).unwrap();
            let report = model_gradcheck(&mut model, sample, 20, 7).unwrap();
            assert_eq!(report.entries.len(), 20);
            assert!(report.passes(1e-3), "{task} {ablation}: {:?}", report.worst());
            assert_eq!(encode_checkpoint(&model).unwrap(), before);
        }
    }
}

#[test]
fn model_gradcheck_catches_relu_fault() {
    use crate::numkit::fault::{self, Fault};
    let ds = small_data(TaskKind::Word, 2, 17);
    let mut model = Model::new(small_config(&ds, Ablation::None)).unwrap();
    fault::inject(Fault::ReluBackwardSignFlip);
    let report = model_gradcheck(&mut model, &ds.train[0], 40, 1);
    fault::clear();
    assert!(!report.unwrap().passes(1e-3));
}
