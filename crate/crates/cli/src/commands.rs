//! The six subcommands. Each returns what it wrote so tests can inspect it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use adatoken::costmodel::{compare_strategies, schedule_cost, ModelDims, Workload};
use adatoken::infoflow::{analyze_many, redundancy_report};
use adatoken::numcore::Rng;
use adatoken::pruner::{run_pruned_inference, Strategy};
use adatoken::scheduler::{
    baseline_schedule, fit_schedule, fixed_stage_for_retention, one_shot_for_retention, Bounds, FitProblem,
    RetentionSchedule,
};
use adatoken::tokenstream::{assemble_stream, PlantedTask, TokenStream, TokenType};
use adatoken::toydecoder::{build_decoder, AttentionRecord, Decoder, QueryRows};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dump::{export_dump, ingest_dump, list_dumps, FORMAT_VERSION};
use crate::error::{invalid, CliError, CliResult};
use crate::output::{ensure_dir, read_json, write_csv, write_json};

/// Layer at which the one-shot baseline prunes.
pub const ONE_SHOT_LAYER: usize = 2;
/// Stage count of the fixed-stage baseline.
pub const FIXED_STAGES: usize = 4;
const RANDOM_STREAM: u64 = 1 << 32;

pub fn parse_strategy(name: &str, seed: u64) -> CliResult<Strategy> {
    match name {
        "adatoken" => Ok(Strategy::Adatoken),
        "attention_row" => Ok(Strategy::AttentionRow),
        "random" => Ok(Strategy::Random { seed }),
        other => Err(invalid(format!(
            "strategy: expected adatoken, attention_row or random, found {other:?}"
        ))),
    }
}

pub fn decoder(cfg: &RunConfig) -> CliResult<Decoder> {
    Ok(build_decoder(&cfg.decoder, &cfg.scene, &mut Rng::new(cfg.decoder_seed))?)
}

/// Scene `index` under root seed `seed`.
pub fn scene(cfg: &RunConfig, seed: u64, index: u64) -> CliResult<(PlantedTask, TokenStream)> {
    let mut rng = Rng::new(seed).split(index);
    let task = PlantedTask::sample(&cfg.scene, &mut rng)?;
    let stream = assemble_stream(&cfg.scene, &task, cfg.n_system, cfg.n_prompt, &mut rng)?;
    Ok((task, stream))
}

/// Seed of the random ranking used on scene `index`.
pub fn random_seed(seed: u64, index: u64) -> u64 {
    Rng::new(seed).split(RANDOM_STREAM + index).next_u64()
}

fn strategy_for(name: &str, seed: u64, index: u64) -> CliResult<Strategy> {
    parse_strategy(name, random_seed(seed, index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub scene: usize,
    pub query_key_id: usize,
    pub carrier_indices: Vec<usize>,
    pub target_value_id: usize,
    /// Index of the first spatial token in the sequence.
    pub spatial_start: usize,
    pub unpruned_answer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub format_version: u32,
    pub config_hash: String,
    pub scenes: Vec<SceneTruth>,
}

/// Writes `scene_XXXX.{json,bin}`, `ground_truth.json` and the resolved
/// `run_config.json` into `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> CliResult<GroundTruth> {
    ensure_dir(out)?;
    let hash = cfg.hash();
    let dec = decoder(cfg)?;
    let scenes: Vec<(SceneTruth, Vec<AttentionRecord>)> = (0..cfg.n_scenes)
        .into_par_iter()
        .map(|i| {
            let (task, stream) = scene(cfg, cfg.seed, i as u64)?;
            let fwd = dec.forward(&stream, None, &cfg.query_rows)?;
            Ok((
                SceneTruth {
                    scene: i,
                    query_key_id: task.query_key_id,
                    carrier_indices: task.carrier_indices.clone(),
                    target_value_id: task.target_value_id,
                    spatial_start: stream.spatial_range().start,
                    unpruned_answer: fwd.answer,
                },
                fwd.records,
            ))
        })
        .collect::<CliResult<_>>()?;
    let mut truths = Vec::with_capacity(scenes.len());
    for (truth, records) in scenes {
        export_dump(&out.join(format!("scene_{:04}.json", truth.scene)), &records, &hash)?;
        truths.push(truth);
    }
    let gt = GroundTruth {
        format_version: FORMAT_VERSION,
        config_hash: hash,
        scenes: truths,
    };
    write_json(&out.join("ground_truth.json"), &gt)?;
    write_json(&out.join("run_config.json"), cfg)?;
    Ok(gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub format_version: u32,
    pub config_hash: String,
    pub layer: usize,
    pub s_self: f64,
    pub s_cross: f64,
    pub f_flow: f64,
    pub inf: f64,
    pub i_norm: f64,
    /// Mean over scenes of the fraction of spatial tokens below the threshold.
    pub low_fraction: f64,
    pub n_spatial: usize,
    pub n_scenes: usize,
}

/// Reads every dump in `dump_dir`, writes `stats.json` and `stats.csv`.
pub fn cmd_analyze(cfg: &RunConfig, dump_dir: &Path, out: &Path) -> CliResult<Vec<StatsRow>> {
    let paths = list_dumps(dump_dir)?;
    let scenes: Vec<Vec<AttentionRecord>> = paths
        .par_iter()
        .map(|p| ingest_dump(p).map(|(_, r)| r))
        .collect::<CliResult<_>>()?;
    let first = &scenes[0];
    if scenes.iter().any(|s| s.len() != first.len()) {
        return Err(invalid("dumps disagree on n_layers"));
    }
    let n_spatial = first[0].token_types.iter().filter(|&&t| t == TokenType::Spatial).count();
    let report = analyze_many(&scenes, &cfg.infoflow)?;
    let mut low = vec![0.0; first.len()];
    for records in &scenes {
        let r = redundancy_report(records, cfg.redundancy_threshold)?;
        for (acc, l) in low.iter_mut().zip(&r.layers) {
            *acc += l.low_fraction;
        }
    }
    let hash = cfg.hash();
    let rows: Vec<StatsRow> = report
        .layers
        .iter()
        .zip(&low)
        .map(|(l, lo)| StatsRow {
            format_version: FORMAT_VERSION,
            config_hash: hash.clone(),
            layer: l.layer,
            s_self: l.s_self,
            s_cross: l.s_cross,
            f_flow: l.f_flow,
            inf: l.inf,
            i_norm: l.i_norm,
            low_fraction: lo / scenes.len() as f64,
            n_spatial,
            n_scenes: scenes.len(),
        })
        .collect();
    ensure_dir(out)?;
    write_json(&out.join("stats.json"), &rows)?;
    write_csv(&out.join("stats.csv"), &hash, &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub format_version: u32,
    pub config_hash: String,
    pub target_retention: f64,
    pub lambda_smooth: f64,
    #[serde(flatten)]
    pub schedule: RetentionSchedule,
}

fn bounds_for(cfg: &RunConfig, n_layers: usize) -> Bounds {
    cfg.fit.bounds.unwrap_or_else(|| Bounds::default_for(n_layers))
}

/// Fits against `stats.json` using `cfg.fit`; the schedule is written even
/// when the solver does not converge, which is then reported as an error.
pub fn cmd_fit(cfg: &RunConfig, stats: &Path, out: &Path) -> CliResult<ScheduleFile> {
    let mut rows: Vec<StatsRow> = read_json(stats)?;
    if rows.len() < 2 {
        return Err(invalid(format!("{}: need at least two layers", stats.display())));
    }
    rows.sort_by_key(|r| r.layer);
    if rows.iter().enumerate().any(|(i, r)| r.layer != i) {
        return Err(invalid(format!("{}: layers must be 0..n without gaps", stats.display())));
    }
    let n_spatial = rows[0].n_spatial;
    let i_norm: Vec<f64> = rows.iter().map(|r| r.i_norm).collect();
    let mut problem = FitProblem::new(i_norm, cfg.fit.target_retention, n_spatial);
    problem.lambda_smooth = cfg.fit.lambda_smooth;
    problem.bounds = bounds_for(cfg, rows.len());
    problem.seed = cfg.fit.seed;
    let schedule = fit_schedule(&problem)?;
    let file = ScheduleFile {
        format_version: FORMAT_VERSION,
        config_hash: cfg.hash(),
        target_retention: cfg.fit.target_retention,
        lambda_smooth: cfg.fit.lambda_smooth,
        schedule,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_json(out, &file)?;
    if !file.schedule.converged {
        return Err(CliError::NonConvergence(format!(
            "best iterate has KKT residual {:e}; schedule written to {}",
            file.schedule.kkt_residual.unwrap_or(f64::NAN),
            out.display()
        )));
    }
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOutcome {
    pub scene: usize,
    pub answer: usize,
    pub target_value_id: usize,
    pub correct: bool,
    pub carrier_survived: bool,
    pub final_survivors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub format_version: u32,
    pub config_hash: String,
    pub strategy: String,
    pub schedule: String,
    pub n_scenes: usize,
    pub accuracy: f64,
    pub carrier_survival: f64,
    pub scenes: Vec<SceneOutcome>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    format_version: u32,
    config_hash: &'a str,
    scene: usize,
    strategy: &'a str,
    #[serde(flatten)]
    layer: &'a adatoken::pruner::LayerTrace,
}

pub fn load_schedule(path: &Path) -> CliResult<RetentionSchedule> {
    let file: ScheduleFile = read_json(path)?;
    Ok(file.schedule)
}

/// Runs `cfg.n_scenes` scenes under `schedule_path`; writes one JSON-lines
/// trace per scene under `out/traces` and `out/simulate.json`.
pub fn cmd_simulate(cfg: &RunConfig, schedule_path: &Path, out: &Path) -> CliResult<SimulateSummary> {
    let schedule = load_schedule(schedule_path)?;
    if schedule.n_spatial != cfg.scene.n_spatial() {
        return Err(invalid(format!(
            "{}: schedule is for {} spatial tokens, config has {}",
            schedule_path.display(),
            schedule.n_spatial,
            cfg.scene.n_spatial()
        )));
    }
    let dec = decoder(cfg)?;
    let hash = cfg.hash();
    let runs: Vec<_> = (0..cfg.n_scenes)
        .into_par_iter()
        .map(|i| {
            let (task, stream) = scene(cfg, cfg.seed, i as u64)?;
            let strategy = strategy_for(&cfg.strategy, cfg.seed, i as u64)?;
            let (answer, trace) = run_pruned_inference(&dec, &stream, &schedule, &strategy)?;
            Ok((task, answer, trace))
        })
        .collect::<CliResult<_>>()?;
    let traces = out.join("traces");
    ensure_dir(&traces)?;
    let mut scenes = Vec::with_capacity(runs.len());
    for (i, (task, answer, trace)) in runs.iter().enumerate() {
        let path = traces.join(format!("scene_{i:04}.jsonl"));
        let mut buf = Vec::new();
        for layer in &trace.layers {
            let line = TraceLine {
                format_version: FORMAT_VERSION,
                config_hash: &hash,
                scene: i,
                strategy: &trace.strategy,
                layer,
            };
            serde_json::to_writer(&mut buf, &line).map_err(|e| invalid(e.to_string()))?;
            buf.push(b'\n');
        }
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| CliError::io(&path, e))?;
        scenes.push(SceneOutcome {
            scene: i,
            answer: *answer,
            target_value_id: task.target_value_id,
            correct: *answer == task.target_value_id,
            carrier_survived: task.carrier_indices.iter().all(|&c| trace.survives(c)),
            final_survivors: trace.final_survivors.len(),
        });
    }
    let n = scenes.len().max(1) as f64;
    let summary = SimulateSummary {
        format_version: FORMAT_VERSION,
        config_hash: hash,
        strategy: cfg.strategy.clone(),
        schedule: schedule.label.clone(),
        n_scenes: scenes.len(),
        accuracy: scenes.iter().filter(|s| s.correct).count() as f64 / n,
        carrier_survival: scenes.iter().filter(|s| s.carrier_survived).count() as f64 / n,
        scenes,
    };
    write_json(&out.join("simulate.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub format_version: u32,
    pub config_hash: String,
    pub schedule: String,
    pub ranking: String,
    pub target_retention: f64,
    pub achieved_retention: f64,
    pub n_scenes: usize,
    pub accuracy: f64,
    pub carrier_survival: f64,
    /// Accuracy expected if the carrier survives at random: kept fraction
    /// entering the retrieval layer.
    pub survival_prediction: f64,
    /// Carrier survival expected under random ranking.
    pub final_survival_prediction: f64,
    pub toy_flops_reduction: f64,
    pub reference_flops_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub rows: Vec<BenchRow>,
    pub schedules: Vec<RetentionSchedule>,
    pub i_norm: Vec<f64>,
}

/// Contribution curve measured on `n` calibration scenes.
pub fn calibrate(cfg: &RunConfig, dec: &Decoder, seed: u64, n: usize) -> CliResult<Vec<f64>> {
    let scenes: Vec<Vec<AttentionRecord>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (_, stream) = scene(cfg, seed, i as u64)?;
            Ok(dec.forward(&stream, None, &QueryRows::All)?.records)
        })
        .collect::<CliResult<_>>()?;
    Ok(analyze_many(&scenes, &cfg.infoflow)?.i_norm())
}

pub fn fit_for(cfg: &RunConfig, i_norm: &[f64], g: f64) -> CliResult<RetentionSchedule> {
    let mut problem = FitProblem::new(i_norm.to_vec(), g, cfg.scene.n_spatial());
    problem.lambda_smooth = cfg.fit.lambda_smooth;
    problem.bounds = bounds_for(cfg, i_norm.len());
    problem.seed = cfg.fit.seed;
    Ok(fit_schedule(&problem)?)
}

/// Scene counts `(correct, carrier survived)` for one schedule and ranking.
pub fn evaluate(
    cfg: &RunConfig,
    dec: &Decoder,
    schedule: &RetentionSchedule,
    ranking: &str,
    seed: u64,
    n: usize,
) -> CliResult<(usize, usize)> {
    let per_scene: Vec<(bool, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (task, stream) = scene(cfg, seed, i as u64)?;
            let strategy = strategy_for(ranking, seed, i as u64)?;
            let (answer, trace) = run_pruned_inference(dec, &stream, schedule, &strategy)?;
            Ok((
                answer == task.target_value_id,
                task.carrier_indices.iter().all(|&c| trace.survives(c)),
            ))
        })
        .collect::<CliResult<_>>()?;
    Ok((
        per_scene.iter().filter(|r| r.0).count(),
        per_scene.iter().filter(|r| r.1).count(),
    ))
}

fn reduction(schedule: &RetentionSchedule, n_spatial: usize, n_text: usize, dims: &ModelDims) -> CliResult<f64> {
    let mapped = RetentionSchedule::from_ratios(schedule.label.clone(), schedule.ratios.clone(), n_spatial)?;
    Ok(schedule_cost(&mapped, n_spatial, n_text, dims)?.reduction)
}

/// Accuracy, carrier survival and modeled FLOPs for the vanilla decoder and
/// for each retention under the fitted schedule (all three rankings) and
/// the uniform, fixed-stage and one-shot baselines.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> CliResult<BenchOutput> {
    let dec = decoder(cfg)?;
    let hash = cfg.hash();
    let root = Rng::new(cfg.bench.seed);
    let cal_seed = root.split(0).next_u64();
    let eval_seed = root.split(1).next_u64();
    let n_layers = cfg.decoder.n_layers;
    let n_spatial = cfg.scene.n_spatial();
    let n_text = cfg.n_system + cfg.n_prompt;
    let toy_dims = ModelDims::from_decoder(&cfg.decoder);
    let i_norm = calibrate(cfg, &dec, cal_seed, cfg.bench.calibration_scenes)?;
    let retrieval = cfg.decoder.retrieval_layer - 1;

    let mut plan: Vec<(RetentionSchedule, &str, f64)> = vec![(RetentionSchedule::all_keep(n_layers, n_spatial), "none", 1.0)];
    for &g in &cfg.bench.retentions {
        let fitted = fit_for(cfg, &i_norm, g)?;
        for ranking in ["adatoken", "attention_row", "random"] {
            plan.push((fitted.clone(), ranking, g));
        }
        let mut uniform = baseline_schedule(&adatoken::scheduler::BaselineKind::Uniform { ratio: g }, n_layers, n_spatial)?;
        uniform.label = "uniform".into();
        plan.push((uniform, "adatoken", g));
        let mut staged = baseline_schedule(&fixed_stage_for_retention(g, n_layers, FIXED_STAGES)?, n_layers, n_spatial)?;
        staged.label = "fixed_stage".into();
        plan.push((staged, "adatoken", g));
        let mut shot = baseline_schedule(&one_shot_for_retention(g, n_layers, ONE_SHOT_LAYER)?, n_layers, n_spatial)?;
        shot.label = "one_shot".into();
        plan.push((shot, "adatoken", g));
    }

    let n = cfg.bench.n_scenes;
    let mut rows = Vec::with_capacity(plan.len());
    let mut schedules: Vec<RetentionSchedule> = Vec::new();
    for (schedule, ranking, g) in &plan {
        let (correct, survived) = evaluate(cfg, &dec, schedule, if *ranking == "none" { "adatoken" } else { ranking }, eval_seed, n)?;
        let frac = |k: usize| k as f64 / n_spatial as f64;
        rows.push(BenchRow {
            format_version: FORMAT_VERSION,
            config_hash: hash.clone(),
            schedule: schedule.label.clone(),
            ranking: ranking.to_string(),
            target_retention: *g,
            achieved_retention: schedule.achieved_retention,
            n_scenes: n,
            accuracy: correct as f64 / n.max(1) as f64,
            carrier_survival: survived as f64 / n.max(1) as f64,
            survival_prediction: frac(schedule.keep_counts[retrieval]),
            final_survival_prediction: frac(*schedule.keep_counts.last().expect("layers")),
            toy_flops_reduction: reduction(schedule, n_spatial, n_text, &toy_dims)?,
            reference_flops_reduction: reduction(schedule, cfg.cost.n_spatial, cfg.cost.n_text, &cfg.cost.dims)?,
        });
        if !schedules.contains(schedule) {
            schedules.push(schedule.clone());
        }
    }
    ensure_dir(out)?;
    let result = BenchOutput {
        rows,
        schedules,
        i_norm,
    };
    write_json(&out.join("bench.json"), &result.rows)?;
    write_csv(&out.join("bench.csv"), &hash, &result.rows)?;
    write_json(&out.join("bench_schedules.json"), &result.schedules)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub format_version: u32,
    pub config_hash: String,
    pub strategy: String,
    pub total_flops: f64,
    pub reduction: f64,
    pub ratio_to_vanilla: f64,
    pub utilization: f64,
    pub seconds: Option<f64>,
}

/// Modeled FLOPs of vanilla decoding and of each schedule file under
/// `cfg.cost`; per-layer ratios are rescaled to the workload's spatial count.
pub fn cmd_cost(cfg: &RunConfig, schedules: &[PathBuf], out: &Path) -> CliResult<Vec<CostRow>> {
    let w: &Workload = &cfg.cost;
    let mut list = vec![RetentionSchedule::all_keep(w.dims.n_layers, w.n_spatial)];
    for p in schedules {
        let s = load_schedule(p)?;
        if s.n_layers() != w.dims.n_layers {
            return Err(invalid(format!(
                "{}: schedule has {} layers, cost.dims.n_layers is {}",
                p.display(),
                s.n_layers(),
                w.dims.n_layers
            )));
        }
        list.push(RetentionSchedule::from_ratios(s.label, s.ratios, w.n_spatial)?);
    }
    let hash = cfg.hash();
    let table = compare_strategies(&list, w)?;
    let rows: Vec<CostRow> = table
        .into_iter()
        .map(|r| CostRow {
            format_version: FORMAT_VERSION,
            config_hash: hash.clone(),
            strategy: r.strategy,
            total_flops: r.total_flops,
            reduction: r.reduction,
            ratio_to_vanilla: 1.0 - r.reduction,
            utilization: r.utilization,
            seconds: r.seconds,
        })
        .collect();
    ensure_dir(out)?;
    write_json(&out.join("cost.json"), &rows)?;
    write_csv(&out.join("cost.csv"), &hash, &rows)?;
    Ok(rows)
}
