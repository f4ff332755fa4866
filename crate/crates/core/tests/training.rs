mod common;

use common::{assert_bitwise_eq, pretrained, tiny_config, tiny_model};
use unisod::autograd::Graph;
use unisod::checkpoint::{Checkpoint, CheckpointKind};
use unisod::data::make_batch;
use unisod::losses::batch_loss;
use unisod::params::ParamStore;
use unisod::synthetic::{camouflaged, rgb_salient};
use unisod::trainer::{attach_prompts, evaluate_mae, read_log, RunOutput, Trainer};
use unisod::{Error, Modality, PromptPath, TrainMode};

#[test]
fn prompt_tuning_moves_only_prompt_parameters() {
    let model = tiny_model();
    let base = pretrained(&model, &rgb_salient(4, (32, 32), 1), 4, 0);
    let data = camouflaged(6, (32, 32), Modality::Rgbt, 2);
    let mut t = Trainer::from_pretrained(&model, tiny_config(TrainMode::PromptTune, Modality::Rgbt, 0), &base).unwrap();
    assert!(t.partition().trainable.keys().all(|k| k.starts_with("spg.")));
    assert!(t.partition().frozen.keys().all(|k| !k.starts_with("spg.")));
    let start = t.params().clone();
    for step in 0..8 {
        let idx = t.batch_indices(step, data.len());
        let refs: Vec<_> = idx.iter().map(|&i| &data[i]).collect();
        t.train_step(&make_batch(&refs).unwrap()).unwrap();
        for name in t.partition().frozen.keys() {
            let (a, b) = (start.get(name).unwrap(), t.params().get(name).unwrap());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name} moved at step {step}");
        }
    }
    let moved = t
        .partition()
        .trainable
        .keys()
        .filter(|k| start.get(k) != t.params().get(k))
        .count();
    assert_eq!(moved, t.partition().trainable.len());
    assert!(t.optimizer().state.m.keys().all(|k| k.starts_with("spg.")));
}

#[test]
fn zero_initialised_prompts_reproduce_the_pretrained_model() {
    let model = tiny_model();
    let base = pretrained(&model, &rgb_salient(4, (32, 32), 3), 3, 0);
    let t = Trainer::from_pretrained(&model, tiny_config(TrainMode::PromptTune, Modality::Rgbd, 0), &base).unwrap();
    let data = camouflaged(4, (32, 32), Modality::Rgbd, 4);
    let b = make_batch(&data.iter().collect::<Vec<_>>()).unwrap();
    let plain = model.predict(&base, &b.rgb, &b.aux, PromptPath::None).unwrap();
    let prompted = model.predict(t.params(), &b.rgb, &b.aux, t.path()).unwrap();
    assert_eq!(plain, prompted);
}

#[test]
fn every_parameter_receives_gradient_in_pretraining() {
    let model = tiny_model();
    let params = ParamStore::init(&model.specs_for(TrainMode::Pretrain), &mut unisod::trainer::init_rng(5));
    let data = rgb_salient(2, (32, 32), 5);
    let b = make_batch(&data.iter().collect::<Vec<_>>()).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| true);
    let rgb = g.input(b.rgb.clone());
    let aux = g.input(b.aux.clone());
    let out = model.forward(&mut g, &p, rgb, aux, PromptPath::None).unwrap();
    let cfg = unisod::config::LossConfig::default();
    let (_, seed) = batch_loss(g.value(out.logits), &b.gt, &b.rgb, &cfg).unwrap();
    let grads = g.backward(out.logits, seed);
    for (name, var) in p.iter() {
        let grad = grads.get(*var).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(grad.iter().any(|&v| v != 0.0), "zero gradient for {name}");
    }
}

#[test]
fn fixed_seed_runs_are_bitwise_reproducible() {
    let model = tiny_model();
    let data = rgb_salient(6, (32, 32), 6);
    let run = || {
        let mut t = Trainer::from_scratch(&model, tiny_config(TrainMode::Pretrain, Modality::Rgb, 6)).unwrap();
        let log = t.run(&data, &RunOutput::default()).unwrap();
        (t.params().clone(), log)
    };
    let (pa, la) = run();
    let (pb, lb) = run();
    assert_bitwise_eq(&pa, &pb);
    assert_eq!(la, lb);
}

#[test]
fn resuming_from_a_saved_checkpoint_matches_an_uninterrupted_run() {
    let model = tiny_model();
    let data = rgb_salient(5, (32, 32), 7);
    let dir = tempfile::tempdir().unwrap();

    let mut whole = Trainer::from_scratch(&model, tiny_config(TrainMode::Pretrain, Modality::Rgb, 8)).unwrap();
    let full_log = whole.run(&data, &RunOutput::default()).unwrap();

    let mut first = Trainer::from_scratch(&model, tiny_config(TrainMode::Pretrain, Modality::Rgb, 3)).unwrap();
    let mut log = first.run(&data, &RunOutput::default()).unwrap();
    let path = dir.path().join("mid.safetensors");
    first.checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let mut second = Trainer::resume(&model, tiny_config(TrainMode::Pretrain, Modality::Rgb, 8), ck).unwrap();
    log.extend(second.run(&data, &RunOutput::default()).unwrap());

    assert_eq!(second.step(), 8);
    assert_eq!(log, full_log);
    assert_bitwise_eq(whole.params(), second.params());
    assert_eq!(whole.optimizer().state, second.optimizer().state);
}

#[test]
fn run_writes_log_and_checkpoints() {
    let model = tiny_model();
    let data = rgb_salient(4, (32, 32), 8);
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput::to_dir(dir.path().join("run"));
    let mut cfg = tiny_config(TrainMode::Pretrain, Modality::Rgb, 4);
    cfg.checkpoint_every = Some(2);
    let mut t = Trainer::from_scratch(&model, cfg).unwrap();
    let entries = t.run(&data, &out).unwrap();
    assert_eq!(read_log(&out.log_path().unwrap()).unwrap(), entries);
    assert_eq!(entries.iter().map(|e| e.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    let last = Checkpoint::load(&out.last_path().unwrap()).unwrap();
    assert_eq!(last.manifest.step, 4);
    assert_eq!(last.params, *t.params());
    let best = Checkpoint::load(&out.best_path().unwrap()).unwrap();
    assert!(best.manifest.best_loss.is_some());
}

#[test]
fn prompt_checkpoints_round_trip_onto_the_base_model() {
    let model = tiny_model();
    let base = pretrained(&model, &rgb_salient(4, (32, 32), 9), 2, 0);
    let data = camouflaged(4, (32, 32), Modality::Rgbd, 9);
    let mut t = Trainer::from_pretrained(&model, tiny_config(TrainMode::PromptTune, Modality::Rgbd, 3), &base).unwrap();
    t.run(&data, &RunOutput::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rgbd.safetensors");
    t.prompt_checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.manifest.kind, CheckpointKind::Prompts);
    assert!(ck.params.names().all(|n| n.starts_with("spg.")));
    let merged = attach_prompts(&base, &ck).unwrap();
    let a = evaluate_mae(&model, &merged, &data, t.path(), 2).unwrap();
    let b = evaluate_mae(&model, t.params(), &data, t.path(), 2).unwrap();
    assert_eq!(a, b);
    assert!(matches!(attach_prompts(&base, &t.checkpoint()), Err(Error::Checkpoint(_))));
    assert!(matches!(
        Trainer::resume(&model, tiny_config(TrainMode::PromptTune, Modality::Rgbd, 4), ck),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn no_spg_has_nothing_to_train() {
    let model = tiny_model();
    let base = pretrained(&model, &rgb_salient(2, (32, 32), 10), 1, 0);
    let data = camouflaged(2, (32, 32), Modality::Rgbd, 10);
    let mut t = Trainer::from_pretrained(&model, tiny_config(TrainMode::NoSpg, Modality::Rgbd, 2), &base).unwrap();
    assert_eq!(t.partition().trainable_count(), 0);
    let log = t.run(&data, &RunOutput::default()).unwrap();
    assert_eq!(log.len(), 2);
    assert_bitwise_eq(t.params(), &base);
}

#[test]
fn mismatched_task_and_data_are_rejected() {
    let model = tiny_model();
    let mut t = Trainer::from_scratch(&model, tiny_config(TrainMode::Pretrain, Modality::Rgb, 1)).unwrap();
    let data = camouflaged(2, (32, 32), Modality::Rgbd, 11);
    assert!(matches!(t.run(&data, &RunOutput::default()), Err(Error::Config(_))));
    assert!(matches!(t.run(&[], &RunOutput::default()), Err(Error::Data(_))));
    assert!(matches!(
        evaluate_mae(&model, t.params(), &[], PromptPath::None, 2),
        Err(Error::Data(_))
    ));
}

#[test]
fn every_prompt_parameter_receives_gradient_within_an_epoch() {
    let model = tiny_model();
    let base = ParamStore::init(&model.base_specs(), &mut unisod::trainer::init_rng(12));
    let data = camouflaged(8, (32, 32), Modality::Rgbd, 12);
    let mut t = Trainer::from_pretrained(&model, tiny_config(TrainMode::PromptTune, Modality::Rgbd, 4), &base).unwrap();
    assert_eq!(t.steps_per_epoch(data.len()), 4);
    t.run(&data, &RunOutput::default()).unwrap();
    // a first moment that is nonzero anywhere means some step saw a nonzero gradient
    for name in t.partition().trainable.keys() {
        let m = &t.optimizer().state.m[name];
        assert!(m.iter().any(|&v| v != 0.0), "{name} never received a gradient");
    }
}
