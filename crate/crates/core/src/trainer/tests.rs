use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::*;
use crate::diffcore::Tape;
use crate::synthdata::{generate, GenKind, GenSpec, Modality};

fn xor(n: usize, seed: u64) -> Dataset {
    generate(&GenSpec::new(GenKind::SynergyXor, n, vec![4, 4], 0.2, seed)).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { train_epochs: epochs, ..TrainConfig::default() }
}

#[test]
fn split_sizes() {
    let s = split(100, 0).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
    let s = split(10, 0).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
    let s = split(57, 3).unwrap();
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..57).collect::<Vec<_>>());
    assert!(matches!(split(9, 0), Err(Error::Config(_))));
    assert_eq!(split(57, 3).unwrap(), s);
}

#[test]
fn config_validation_and_preflight() {
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { train_epochs: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    let both = TrainConfig { ablation: Ablation::NoInteraction, baseline: Baseline::LateFusion, ..TrainConfig::default() };
    assert!(both.validate().is_err());
    let reg = generate(&GenSpec { task: TaskKind::Regression, ..GenSpec::new(GenKind::Redundant, 30, vec![2, 2], 0.1, 0) }).unwrap();
    let latent = TrainConfig { ablation: Ablation::LatentContrastive, ..TrainConfig::default() };
    assert!(matches!(latent.preflight(&reg), Err(Error::Config(_))));
    assert!("bogus".parse::<Ablation>().is_err());
    for v in Ablation::VARIANTS {
        assert_eq!(v.name().parse::<Ablation>().unwrap(), v);
    }
}

#[test]
fn zero_lambda_total_equals_task_loss() {
    let data = xor(64, 0);
    let cfg = TrainConfig { interaction_loss_weight: 0.0, ..TrainConfig::default() };
    let model = InteractionMoe::new(cfg.model_config(&data), 0).unwrap();
    let mut rngs = RunRngs::new(0);
    let rows: Vec<usize> = (0..16).collect();
    let batch = model.batch_loss(&cfg, &mut rngs, &data, &rows).unwrap();
    assert_eq!(batch.graph.tape.value(batch.total).item(), batch.task);
    assert_eq!(batch.graph.tape.count("masked"), 4 * 2);
    assert!(batch.interaction.is_some());

    let on = TrainConfig::default();
    let batch = model.batch_loss(&on, &mut rngs, &data, &rows).unwrap();
    let ints = batch.interaction.unwrap();
    let expected = batch.task + 0.5 * ints.iter().sum::<f64>() / ints.len() as f64;
    assert!((batch.graph.tape.value(batch.total).item() - expected).abs() < 1e-12);
}

/// Plain mixture step: clean expert passes, reweighting and task loss only.
fn plain_mixture_params(cfg: &TrainConfig, data: &Dataset, steps: usize) -> Vec<f64> {
    let mut model = InteractionMoe::new(cfg.model_config(data), cfg.seed).unwrap();
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut shuffle = rng::stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut shuffle);
    for rows in order.chunks(cfg.batch_size).take(steps) {
        let mut g = Graph::training(&model);
        let emb = model.encode(&mut g, &data.inputs(rows)).unwrap();
        let logits: Vec<NodeId> = (0..model.num_experts()).map(|i| model.expert_forward(&mut g, i, &emb).unwrap().logits).collect();
        let w = model.reweight(&mut g, &emb).unwrap();
        let y = combine(&mut g.tape, w, &logits).unwrap();
        let loss = task_loss(&mut g, y, data, rows).unwrap();
        let grads = g.param_grads(&model, loss).unwrap();
        adam.step(model.params_mut(), &grads).unwrap();
    }
    model.params().flatten()
}

#[test]
fn zero_lambda_trajectory_matches_plain_mixture() {
    let data = xor(96, 5);
    let cfg = TrainConfig { interaction_loss_weight: 0.0, train_epochs: 1, ..TrainConfig::default() };
    // 96 samples / batch 32 = 3 steps
    let trained = train_run(&cfg, &data, None).unwrap();
    assert_eq!(trained.model.params().flatten(), plain_mixture_params(&cfg, &data, 3));
    assert!(trained.log[0].interaction_losses.is_some());
}

fn strip_seconds(log: &[EpochLog]) -> Vec<EpochLog> {
    log.iter().cloned().map(|e| EpochLog { seconds: 0.0, ..e }).collect()
}

#[test]
fn runs_are_deterministic() {
    let data = xor(120, 1);
    let cfg = quick(3);
    let a = train_run(&cfg, &data, Some(&data)).unwrap();
    let b = train_run(&cfg, &data, Some(&data)).unwrap();
    assert_eq!(strip_seconds(&a.log), strip_seconds(&b.log));
    assert_eq!(a.model.params().flatten(), b.model.params().flatten());

    let c = train_run(&TrainConfig { seed: 1, ..cfg.clone() }, &data, None).unwrap();
    assert_ne!(a.model.params().flatten(), c.model.params().flatten());
    assert_eq!(a.model.num_experts(), c.model.num_experts());
    assert_eq!(c.best_epoch, 3);
}

#[test]
fn variants_change_the_architecture() {
    let data = generate(&GenSpec::new(GenKind::Redundant, 40, vec![2, 2, 2], 0.1, 0)).unwrap();
    let sr = TrainConfig { ablation: Ablation::SynergyRedundancy, ..quick(1) };
    assert_eq!(train_run(&sr, &data, None).unwrap().model.num_experts(), 2);
    let sw = TrainConfig { ablation: Ablation::SimpleWeight, ..quick(1) };
    let m = train_run(&sw, &data, None).unwrap().model;
    assert_eq!(m.reweighter_parameter_count(), m.num_experts());
    assert_eq!(TrainConfig { ablation: Ablation::NoInteraction, ..quick(1) }.effective_lambda(), 0.0);
    for v in [Ablation::LatentContrastive, Ablation::LessForward] {
        let out = train_run(&TrainConfig { ablation: v, ..quick(1) }, &data, None).unwrap();
        assert!(out.log[0].interaction_losses.as_ref().unwrap().iter().all(|x| x.is_finite()));
    }
}

#[test]
fn baselines_train() {
    let data = xor(200, 2);
    for b in [Baseline::EarlyFusion, Baseline::LateFusion] {
        let out = train_baseline(&TrainConfig { baseline: b, ..quick(2) }, &data, None).unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.log[0].interaction_losses.is_none());
        let m = evaluate(&out.model, &data).unwrap();
        assert!((0.0..=1.0).contains(&m.accuracy.unwrap()));
    }
    assert!(train_baseline(&quick(1), &data, None).is_err());
}

#[test]
fn divergence_is_reported() {
    let mut data = xor(40, 0);
    data.modalities[0] = Modality { name: "m1".into(), features: data.modalities[0].features.map(|x| x * 1e300) };
    let err = train_run(&quick(1), &data, None).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, step: 1, .. }), "{err}");
}

#[test]
fn regression_and_multilabel_runs() {
    let reg = generate(&GenSpec { task: TaskKind::Regression, ..GenSpec::new(GenKind::SynergyXor, 80, vec![2, 2], 0.1, 0) }).unwrap();
    let out = train_run(&quick(2), &reg, Some(&reg)).unwrap();
    assert!(out.log.iter().all(|e| e.train_metric.is_finite()));
    assert!(evaluate(&out.model, &reg).unwrap().mse.is_some());

    let base = xor(60, 0);
    let Targets::Classes(y) = &base.targets else { unreachable!() };
    let labels: Vec<f64> = y.iter().flat_map(|&c| [c as f64, 1.0 - c as f64, 1.0]).collect();
    let ml = Dataset { num_classes: 3, targets: Targets::Multilabel(Tensor::matrix(60, 3, labels)), ..base };
    let out = train_run(&quick(2), &ml, None).unwrap();
    assert!(evaluate(&out.model, &ml).unwrap().micro_f1.is_some());
}

#[test]
fn epoch_log_csv() {
    let data = xor(60, 0);
    let out = train_run(&quick(2), &data, Some(&data)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_epoch_log(&path, &out.log, 4).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,task_loss,int_loss_expert_0,int_loss_expert_1,int_loss_expert_2,int_loss_expert_3,train_acc,val_acc,seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].split(',').all(|f| !f.is_empty()));
}

#[test]
fn default_config_learns_xor() {
    let data = xor(2000, 0);
    let splits = Splits::new(&data, 0).unwrap();
    let out = train_run(&TrainConfig::default(), &splits.train, Some(&splits.val)).unwrap();
    let acc = out.log.last().unwrap().train_metric;
    assert!(acc > 0.9, "train accuracy {acc}");
}

/// Independent single-model trainer: encoders, fusion MLP and head written
/// directly against the tape, with its own Adam.
fn oracle_losses(init: &BTreeMap<String, Tensor>, data: &Dataset, cfg: &TrainConfig) -> Vec<f64> {
    let mut params = init.clone();
    let names: Vec<String> = params.keys().cloned().collect();
    let mut m: BTreeMap<String, Vec<f64>> = names.iter().map(|n| (n.clone(), vec![0.0; params[n].len()])).collect();
    let mut v = m.clone();
    let mut t = 0;
    let mut shuffle = rng::stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let Targets::Classes(y) = &data.targets else { unreachable!() };
    let mut epochs = Vec::new();
    for _ in 0..cfg.train_epochs {
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let leaves: BTreeMap<String, NodeId> = names.iter().map(|n| (n.clone(), tape.param(params[n].clone()))).collect();
            let affine = |tape: &mut Tape, x: NodeId, prefix: &str| {
                let h = tape.matmul(x, leaves[&format!("{prefix}.weight")]).unwrap();
                tape.add_row(h, leaves[&format!("{prefix}.bias")]).unwrap()
            };
            let mut emb = Vec::new();
            for (k, x) in data.inputs(rows).into_iter().enumerate() {
                let x = tape.constant(x);
                emb.push(affine(&mut tape, x, &format!("encoder.{k}.0")));
            }
            let mut h = tape.concat(&emb).unwrap();
            for l in 0..2 {
                h = affine(&mut tape, h, &format!("expert.0.fusion.{l}"));
                h = tape.relu(h).unwrap();
            }
            let logits = affine(&mut tape, h, "expert.0.head.0");
            let targets: Vec<usize> = rows.iter().map(|&r| y[r]).collect();
            let loss = tape.cross_entropy(logits, &targets).unwrap();
            sum += tape.value(loss).item() * rows.len() as f64;
            let grads = tape.backward(loss).unwrap();
            t += 1;
            for n in &names {
                let g = grads.get(leaves[n]).unwrap();
                let p = params.get_mut(n).unwrap();
                for (i, (pi, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    let mi = &mut m.get_mut(n).unwrap()[i];
                    *mi = 0.9 * *mi + 0.1 * gi;
                    let mhat = *mi / (1.0 - 0.9f64.powi(t));
                    let vi = &mut v.get_mut(n).unwrap()[i];
                    *vi = 0.999 * *vi + 0.001 * gi * gi;
                    let vhat = *vi / (1.0 - 0.999f64.powi(t));
                    *pi -= cfg.lr * mhat / (vhat.sqrt() + 1e-8);
                }
            }
        }
        epochs.push(sum / data.len() as f64);
    }
    epochs
}

#[test]
fn single_expert_without_interaction_matches_plain_trainer() {
    let data = xor(150, 4);
    let cfg = TrainConfig {
        single_expert: true,
        interaction_loss_weight: 0.0,
        ablation: Ablation::SimpleWeight,
        train_epochs: 4,
        ..TrainConfig::default()
    };
    let out = train_run(&cfg, &data, None).unwrap();
    let init = InteractionMoe::new(cfg.model_config(&data), cfg.seed).unwrap();
    let named: BTreeMap<String, Tensor> =
        init.params().iter().filter(|p| !p.name.starts_with("reweighter")).map(|p| (p.name.clone(), p.value.clone())).collect();
    let oracle = oracle_losses(&named, &data, &cfg);
    for (row, expected) in out.log.iter().zip(&oracle) {
        assert!((row.task_loss - expected).abs() < 1e-9, "epoch {}: {} vs {expected}", row.epoch, row.task_loss);
    }
}
