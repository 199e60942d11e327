use mulot::data::{gen_synthetic, load_manifest, Rule, Split, SynthSpec};
use mulot::model::ModelConfig;
use mulot::ot::SinkhornOptions;
use mulot::train::{
    decode_checkpoint, encode_checkpoint, evaluate, history_csv, RunConfig, TrainConfig, Trainer,
};

fn small_corpus(dir: &std::path::Path, rule: Rule) -> mulot::data::Manifest {
    let spec = SynthSpec {
        n_per_class: 24,
        lengths: [(4, 7), (4, 7), (4, 7)],
        dims: [6, 5, 4],
        rule,
        seed: 3,
        ..SynthSpec::default()
    };
    load_manifest(gen_synthetic(&spec, dir).unwrap()).unwrap()
}

fn small_config() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            heads: 4,
            inner: 3,
            l_uni: 6,
            d_uni: 5,
            sinkhorn: SinkhornOptions { eps: 0.1, max_iter: 20, tol: 1e-6 },
            ..ModelConfig::default()
        },
        train: TrainConfig {
            batch_size: 8,
            epochs: 4,
            warmup_steps: 4,
            eval_every: 5,
            seed: 5,
            ..TrainConfig::default()
        },
        data: None,
    }
}

#[test]
fn identical_runs_write_identical_histories() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path(), Rule::CrossModal);
    let run = || {
        let mut t = Trainer::new(small_config(), &manifest).unwrap();
        t.run(None).unwrap();
        history_csv(&t.state.history)
    };
    let first = run();
    assert_eq!(first, run());
    // 40 train samples, batch 8: 5 steps per epoch, 20 in total.
    assert_eq!(first.lines().filter(|l| l.contains(",dev,")).count(), 4);
}

#[test]
fn resuming_from_bytes_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path(), Rule::CrossModal);

    let mut straight = Trainer::new(small_config(), &manifest).unwrap();
    straight.run(None).unwrap();

    let mut first = Trainer::new(small_config(), &manifest).unwrap();
    first.run(Some(7)).unwrap();
    let bytes = encode_checkpoint(&first.checkpoint());
    let restored = decode_checkpoint(std::path::Path::new("mem"), &bytes).unwrap();
    assert_eq!(restored, first.checkpoint());
    let mut second = Trainer::resume(restored, &manifest).unwrap();
    second.run(None).unwrap();

    assert_eq!(second.checkpoint(), straight.checkpoint());
}

#[test]
fn evaluation_counts_every_test_record() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path(), Rule::Unimodal);
    let mut t = Trainer::new(small_config(), &manifest).unwrap();
    t.run(Some(3)).unwrap();
    let m = evaluate(&t.state.params, &t.config.model, &manifest, Split::Test).unwrap();
    assert_eq!(m.confusion.total(), manifest.split(Split::Test).len());
    assert!((0.0..=1.0).contains(&m.accuracy));
}
