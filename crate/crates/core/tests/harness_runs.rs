use memxformer::harness::{ablate_memory, run_offline, run_online, train_source, write_run_outputs, RunConfig, RunMode};

fn config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::benchmark(seed);
    cfg.stream_length = 250;
    cfg
}

#[test]
fn offline_beats_online_on_the_benchmark() {
    let mut wins = 0;
    for seed in 0..3 {
        let cfg = config(seed);
        let src = train_source(&cfg).unwrap();
        let online = run_online(&cfg, &src.checkpoint).unwrap().report;
        let offline_cfg = RunConfig { mode: RunMode::Offline { epochs: 3 }, ..cfg };
        let offline = run_offline(&offline_cfg, &src.checkpoint).unwrap().report;
        assert_eq!(offline.steps.len(), 3 * 200);
        if offline.final_accuracy >= online.final_accuracy {
            wins += 1;
        }
    }
    assert_eq!(wins, 3);
}

#[test]
fn single_item_memory_is_a_valid_run() {
    let cfg = config(5);
    let src = train_source(&cfg).unwrap();
    let rows = ablate_memory(&cfg, &src.checkpoint, &[1]).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].final_accuracy > 0.5);
}

#[test]
fn run_outputs_land_on_disk() {
    let cfg = config(6);
    let src = train_source(&cfg).unwrap();
    let report = run_online(&cfg, &src.checkpoint).unwrap().report;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/run");
    write_run_outputs(&out, &report).unwrap();
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), cfg.stream_length + 1);
    let json = std::fs::read_to_string(out.join("report.json")).unwrap();
    let back: memxformer::RunReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.final_accuracy, report.final_accuracy);
    assert_eq!(back.steps.len(), report.steps.len());
}
