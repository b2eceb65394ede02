//! End-to-end training on synthetic data: determinism and learning.

use ecg_bnn::data::{split, synth_dataset, LabelScheme};
use ecg_bnn::model::{build_config, fuse, Mode};
use ecg_bnn::modelfile::encode_model;
use ecg_bnn::train::{evaluate, TrainConfig, Trainer};

fn train(seed: u64, mode: Mode) -> (Trainer, f64) {
    let ds = synth_dataset(LabelScheme::Aami5, 30, 360, 0.1, 5).unwrap().standardized();
    let sp = split(&ds, 0.8, 5).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        learning_rate: 0.01,
        epochs: 15,
        seed,
        ..TrainConfig::for_classes(5)
    };
    let mut t = Trainer::new(build_config(5, mode, 360), cfg).unwrap();
    t.run(&sp.train.segments, Some(&sp.test.segments), &mut |_, _| true).unwrap();
    let acc = evaluate(&t.params, &t.net, &sp.test.segments).unwrap().0;
    (t, acc)
}

#[test]
fn same_seed_same_bytes() {
    let (a, _) = train(3, Mode::Bp);
    let (b, _) = train(3, Mode::Bp);
    assert_eq!(a.history, b.history);
    let ma = encode_model(&fuse(&a.params, &a.net).unwrap()).unwrap();
    let mb = encode_model(&fuse(&b.params, &b.net).unwrap()).unwrap();
    assert_eq!(ma, mb);
    let (c, _) = train(4, Mode::Bp);
    assert_ne!(a.params, c.params);
}

#[test]
fn bp_learns_beyond_chance() {
    let (t, acc) = train(3, Mode::Bp);
    assert!(acc >= 0.6, "test accuracy {acc}, history {:?}", t.history.last());
    assert_eq!(t.history.last().unwrap().eval_accuracy, Some(acc));
}
