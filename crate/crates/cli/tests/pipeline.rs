use std::fs;
use std::path::Path;
use std::process::Command;

use adatoken::scheduler::o_pre;
use adatoken_cli::commands::{cmd_analyze, cmd_bench, cmd_cost, cmd_fit, cmd_gen, cmd_simulate, StatsRow};
use adatoken_cli::dump::{export_dump, ingest_dump, DumpMeta};
use adatoken_cli::RunConfig;

fn small_config(n_scenes: usize) -> RunConfig {
    RunConfig {
        n_scenes,
        ..RunConfig::default()
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn gen_layout_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(2);
    cmd_gen(&cfg, dir.path()).unwrap();
    let meta_path = dir.path().join("scene_0000.json");
    let (meta, records) = ingest_dump(&meta_path).unwrap();
    assert_eq!(meta.seq_len, cfg.n_system + cfg.scene.n_spatial() + cfg.n_prompt);
    assert_eq!(meta.n_layers, cfg.decoder.n_layers);
    assert_eq!(meta.n_query_rows, meta.seq_len);
    let again = dir.path().join("copy.json");
    export_dump(&again, &records, &meta.config_hash).unwrap();
    assert_eq!(read(&dir.path().join("scene_0000.bin")), read(&dir.path().join("copy.bin")));
    let (_, records2) = ingest_dump(&again).unwrap();
    assert_eq!(records, records2);
}

#[test]
fn gen_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = RunConfig {
        query_rows: adatoken::toydecoder::QueryRows::LastInstruction,
        ..small_config(10)
    };
    cmd_gen(&cfg, a.path()).unwrap();
    cmd_gen(&cfg, b.path()).unwrap();
    for i in 0..10 {
        for ext in ["json", "bin"] {
            let name = format!("scene_{i:04}.{ext}");
            assert_eq!(read(&a.path().join(&name)), read(&b.path().join(&name)), "{name}");
        }
    }
    assert_eq!(read(&a.path().join("ground_truth.json")), read(&b.path().join("ground_truth.json")));
}

#[test]
fn ingest_rejects_bad_dumps() {
    let dir = tempfile::tempdir().unwrap();
    cmd_gen(&small_config(1), dir.path()).unwrap();
    let meta = dir.path().join("scene_0000.json");
    let bin = dir.path().join("scene_0000.bin");
    let good = read(&bin);

    fs::write(&bin, &good[..good.len() - 4]).unwrap();
    let err = ingest_dump(&meta).unwrap_err().to_string();
    assert!(err.contains("payload is"), "{err}");

    let mut bad = good.clone();
    bad[..4].copy_from_slice(&0.9f32.to_le_bytes());
    fs::write(&bin, &bad).unwrap();
    let err = ingest_dump(&meta).unwrap_err().to_string();
    assert!(err.contains("sums to"), "{err}");

    fs::write(&bin, &good).unwrap();
    let mut m: DumpMeta = serde_json::from_slice(&read(&meta)).unwrap();
    m.token_types.pop();
    fs::write(&meta, serde_json::to_vec(&m).unwrap()).unwrap();
    let err = ingest_dump(&meta).unwrap_err().to_string();
    assert!(err.contains("token_types"), "{err}");
}

#[test]
fn analyze_matches_payload_sums() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(2);
    cmd_gen(&cfg, &dir.path().join("d")).unwrap();
    let rows = cmd_analyze(&cfg, &dir.path().join("d"), &dir.path().join("a")).unwrap();
    assert_eq!(rows.len(), 32);
    let lo = rows.iter().map(|r| r.i_norm).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.i_norm).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!((lo, hi), (0.0, 1.0));

    // Independent sum over the raw f32 payloads.
    let meta: DumpMeta = serde_json::from_slice(&read(&dir.path().join("d/scene_0000.json"))).unwrap();
    let (n, h, q) = (meta.seq_len, meta.n_heads, meta.n_query_rows);
    let mut per_layer = vec![0.0f64; meta.n_layers];
    for s in 0..2 {
        let bytes = read(&dir.path().join(format!("d/scene_{s:04}.bin")));
        let vals: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        for (l, acc) in per_layer.iter_mut().enumerate() {
            let mut layer_sum = 0.0;
            for i in 0..h * q {
                for k in 0..n {
                    if meta.token_types[k] == adatoken::tokenstream::TokenType::Spatial {
                        layer_sum += vals[(l * h * q + i) * n + k] as f64;
                    }
                }
            }
            *acc += layer_sum / (h * q) as f64 / 2.0;
        }
    }
    for (r, expect) in rows.iter().zip(&per_layer) {
        assert!((r.s_self - expect).abs() <= 1e-9, "layer {}: {} vs {expect}", r.layer, r.s_self);
    }
    let csv = fs::read_to_string(dir.path().join("a/stats.csv")).unwrap();
    assert!(csv.starts_with(&format!("# format_version=1 config_hash={}", cfg.hash())));
}

#[test]
fn fit_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(2);
    cmd_gen(&cfg, &dir.path().join("d")).unwrap();
    cmd_analyze(&cfg, &dir.path().join("d"), &dir.path().join("a")).unwrap();
    let stats = dir.path().join("a/stats.json");

    cfg.fit.target_retention = 1.0;
    let full = cmd_fit(&cfg, &stats, &dir.path().join("full.json")).unwrap();
    assert!(full.schedule.keep_counts.iter().all(|&k| k == 64));
    assert!(full.schedule.loss.is_some());

    cfg.fit.target_retention = 0.4;
    let fit = cmd_fit(&cfg, &stats, &dir.path().join("s.json")).unwrap();
    assert!((fit.schedule.achieved_retention - 0.4).abs() <= 1e-4);

    // Refit on the schedule's own curve.
    let params = fit.schedule.params.unwrap();
    let mut rows: Vec<StatsRow> = serde_json::from_slice(&read(&stats)).unwrap();
    for r in &mut rows {
        r.i_norm = o_pre(&params, r.layer as f64);
    }
    let own = dir.path().join("own.json");
    fs::write(&own, serde_json::to_vec(&rows).unwrap()).unwrap();
    let refit = cmd_fit(&cfg, &own, &dir.path().join("refit.json")).unwrap();
    assert!(refit.schedule.loss.unwrap() <= 1e-6, "{:?}", refit.schedule.loss);
}

#[test]
fn simulate_bench_and_cost() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(3);
    cfg.bench.n_scenes = 20;
    cfg.bench.retentions = vec![0.4];
    cmd_gen(&cfg, &dir.path().join("d")).unwrap();
    cmd_analyze(&cfg, &dir.path().join("d"), &dir.path().join("a")).unwrap();
    let sched = dir.path().join("s.json");
    cmd_fit(&cfg, &dir.path().join("a/stats.json"), &sched).unwrap();

    let sim = cmd_simulate(&cfg, &sched, &dir.path().join("sim")).unwrap();
    assert_eq!(sim.n_scenes, 3);
    let trace = fs::read_to_string(dir.path().join("sim/traces/scene_0000.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 32);

    let bench = cmd_bench(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(bench.rows.len(), 1 + 6);
    assert_eq!(bench.rows[0].schedule, "vanilla");
    assert!(bench.rows[0].accuracy >= 0.995);
    assert_eq!(bench.rows[0].reference_flops_reduction, 0.0);

    let cost = cmd_cost(&cfg, &[sched], &dir.path().join("c")).unwrap();
    assert_eq!(cost[0].reduction, 0.0);
    assert!(cost[1].reduction > 0.0);
}

#[test]
fn config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(&p, r#"{"n_scenes": 2, "bogus": 1}"#).unwrap();
    assert!(RunConfig::load(&p).unwrap_err().to_string().contains("bogus"));
    fs::write(&p, r#"{"n_scenes": 2}"#).unwrap();
    assert_eq!(RunConfig::load(&p).unwrap().n_scenes, 2);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_adatoken");
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin).arg("--print-default-config").output().unwrap();
    assert!(out.status.success());
    let cfg: RunConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg, RunConfig::default());

    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    let missing = dir.path().join("missing");
    assert_eq!(status(&["analyze", "--dump", missing.to_str().unwrap(), "--out", "x"]), Some(4));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"nope\": 1}").unwrap();
    assert_eq!(status(&["gen", "--config", bad.to_str().unwrap(), "--out", "x"]), Some(2));
    let d = dir.path().join("d");
    assert_eq!(status(&["gen", "--out", d.to_str().unwrap(), "--seed", "3"]), Some(0));
}
