use moemba::config::RunConfig;
use moemba::model::ModelConfig;
use moemba::sigproc::{preprocess, synth_dataset, DatasetSplit, PreprocessConfig, Protocol, SynthConfig};
use moemba::tensor::Tape;
use moemba::trainer::{PatchBank, TrainConfig, Trainer};

fn desk_model() -> ModelConfig {
    RunConfig::desk().model
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, eval_every: 0, ..RunConfig::desk().train }
}

/// Two subjects of short recordings: same structure as the default task,
/// a fraction of the patches.
fn small_split(seed: u64) -> DatasetSplit {
    let synth = SynthConfig { seed, subjects: 2, samples: 400, ..SynthConfig::default() };
    let recs = synth_dataset(&synth).unwrap();
    DatasetSplit::build(&recs, Protocol::InterSession, &PreprocessConfig::default()).unwrap()
}

fn losses(trainer: &mut Trainer, bank: &PatchBank, epochs: usize) -> Vec<f64> {
    (0..epochs).map(|_| trainer.run_epoch(bank, None).unwrap().train_loss).collect()
}

#[test]
fn loss_strictly_decreases_on_ten_signals() {
    let synth = SynthConfig { subjects: 1, sessions: 2, classes: 5, samples: 600, ..SynthConfig::default() };
    let recs = synth_dataset(&synth).unwrap();
    assert_eq!(recs.len(), 10);
    let pre = PreprocessConfig::default();
    let sets: Vec<_> = recs.iter().enumerate().map(|(i, r)| preprocess(r, i, &pre).unwrap()).collect();
    let bank = PatchBank::from_sets(&sets);
    let model = ModelConfig { classes: 5, ..desk_model() };
    let mut trainer = Trainer::new(model, train_cfg(2), 0).unwrap();
    let l = losses(&mut trainer, &bank, 2);
    assert!(l[1] < l[0], "{l:?}");
}

#[test]
fn loss_decreases_for_nearly_every_seed() {
    let mut decreasing = 0;
    let mut seen = Vec::new();
    for seed in 0..10 {
        let split = small_split(seed);
        let bank = PatchBank::from_sets(&split.train);
        let mut trainer = Trainer::new(desk_model(), train_cfg(5), seed).unwrap();
        let l = losses(&mut trainer, &bank, 5);
        if l[4] < l[0] {
            decreasing += 1;
        }
        seen.push(l);
    }
    assert!(decreasing >= 9, "{decreasing}/10 seeds decreased: {seen:?}");
}

/// Tilt the gate by `gap` logits on the average pooled token, so routing
/// starts far from balanced. With one active expert the classification loss
/// does not reach the gate, so an untilted gate stays near an even split
/// whatever the balance weight.
fn skew_gate(trainer: &mut Trainer, bank: &PatchBank, gap: f64) {
    let model = &trainer.model;
    let d = model.config.d_model;
    let mut mean = vec![0.0; d];
    let sample = &bank.patches[..bank.len().min(128)];
    for patch in sample {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = tape.constant(patch.clone());
        let tokens = model.embed_patch(&mut tape, &vars, x).unwrap();
        let pooled = tape.mean_axis(tokens, 0).unwrap();
        for (m, v) in mean.iter_mut().zip(tape.value(pooled)) {
            *m += v / sample.len() as f64;
        }
    }
    let norm2: f64 = mean.iter().map(|v| v * v).sum();
    let experts = model.config.experts;
    let w = trainer.model.layers[0].w_gate.data_mut();
    for (j, m) in mean.iter().enumerate() {
        w[j * experts] += gap * m / norm2;
    }
}

fn load_after_training(lambda_balance: f64, skew: f64, epochs: usize) -> (Vec<f64>, Vec<f64>) {
    let split = small_split(0);
    let bank = PatchBank::from_sets(&split.train);
    let model = ModelConfig { top_k: 1, lambda_balance, ..desk_model() };
    let mut trainer = Trainer::new(model, train_cfg(epochs), 0).unwrap();
    skew_gate(&mut trainer, &bank, skew);
    let mut shares = Vec::new();
    for _ in 0..epochs {
        shares.push(trainer.run_epoch(&bank, None).unwrap().load_share[0]);
    }
    let last = shares.last().copied().unwrap();
    (vec![last, 1.0 - last], shares)
}

#[test]
fn balance_weight_changes_routing() {
    let (off, off_trace) = load_after_training(0.0, 3.0, 5);
    let (on, on_trace) = load_after_training(0.01, 3.0, 5);
    let traces = format!("without balancing {off_trace:?}, with {on_trace:?}");
    assert!((off[0] - on[0]).abs() > 0.02, "{traces}");
    // balancing leaves the routing closer to an even split
    assert!((on[0] - 0.5).abs() < (off[0] - 0.5).abs(), "{traces}");
}

#[test]
fn balanced_training_avoids_collapse() {
    let (on, trace) = load_after_training(0.01, 0.0, 5);
    assert!((0.25..=0.75).contains(&on[0]), "{trace:?}");
}

#[test]
fn fit_records_history_and_evaluates() {
    let split = small_split(1);
    let train = TrainConfig { epochs: 2, eval_every: 1, ..RunConfig::desk().train };
    let mut trainer = Trainer::new(desk_model(), train, 1).unwrap();
    let mut seen = 0;
    let history = trainer.fit(&split, |_| seen += 1).unwrap();
    assert_eq!((seen, history.epochs.len()), (2, 2));
    assert!(history.epochs.iter().all(|e| e.val_acc.is_some()));
    assert!(history.epochs[1].lr < history.epochs[0].lr);
    assert_eq!(history.to_csv().lines().count(), 3);
}

