use cwss::checkpoint::{decode, encode, Checkpoint};
use cwss::data::PatchRecord;
use cwss::model::{ArchitectureConfig, CapsNetParams};
use cwss::synth::{generate_synthetic, SynthConfig};
use cwss::training::{train, EpochLog, LossConfig, TrainConfig, TrainState};

fn dataset() -> Vec<PatchRecord> {
    let cfg = SynthConfig {
        size: 34,
        train: 12,
        eval: 0,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg).unwrap().0
}

fn config(threads: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        threads,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn run(records: &[PatchRecord], cfg: &TrainConfig, start: Option<Checkpoint>) -> (Vec<EpochLog>, Checkpoint) {
    let (mut params, state) = match start {
        Some(c) => (c.params, c.state),
        None => (
            CapsNetParams::init(&ArchitectureConfig::tiny(), cfg.seed).unwrap(),
            None,
        ),
    };
    let mut last: Option<TrainState> = None;
    let log = train(records, &mut params, cfg, &LossConfig::default(), state, |_, _, st| {
        last = Some(st.clone());
        Ok(())
    })
    .unwrap();
    (log, Checkpoint { params, state: last })
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let data = dataset();
    let (log_a, a) = run(&data, &config(1, 2), None);
    let (log_b, b) = run(&data, &config(1, 2), None);
    assert_eq!(
        serde_json::to_string(&log_a).unwrap(),
        serde_json::to_string(&log_b).unwrap()
    );
    assert_eq!(encode(&a).unwrap(), encode(&b).unwrap());
}

#[test]
fn thread_count_does_not_change_the_result() {
    let data = dataset();
    let (log_a, a) = run(&data, &config(1, 2), None);
    let (log_b, b) = run(&data, &config(3, 2), None);
    assert_eq!(log_a, log_b);
    assert_eq!(encode(&a).unwrap(), encode(&b).unwrap());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = dataset();
    let (full_log, full) = run(&data, &config(1, 3), None);
    let (first_log, mid) = run(&data, &config(1, 1), None);
    // through the byte format, as a real resume would
    let mid = decode(&encode(&mid).unwrap()).unwrap();
    let (rest_log, resumed) = run(&data, &config(1, 3), Some(mid));
    let joined: Vec<EpochLog> = first_log.into_iter().chain(rest_log).collect();
    assert_eq!(joined, full_log);
    assert_eq!(encode(&resumed).unwrap(), encode(&full).unwrap());
}
