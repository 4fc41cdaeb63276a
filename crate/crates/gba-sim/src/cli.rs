//! Experiment runner: single runs, strategy comparisons, hardware sweeps,
//! and the record-cleaning pipeline. All outputs are CSV or JSONL files
//! under the chosen output directory.

use crate::cluster::StrategyConfig;
use crate::config::ExperimentConfig;
use crate::costmodel::{calibrate, peak_gathered_rows, per_sample_time};
use crate::datapipe::{clean, parse_records, records_to_jsonl, synth_pairs};
use crate::error::{Result, SimError};
use crate::trainer::{train, MetricsHistory};
use std::fmt::Write as _;
use std::path::Path;

pub const METRICS_HEADER: &str = "step,loss,ag_bytes,ar_bytes,peak_rows,sim_time";
pub const COMPARE_HEADER: &str =
    "strategy,final_loss,ag_bytes,ar_bytes,peak_rows,sim_time,throughput,throughput_ratio_vs_first";
pub const SWEEP_HEADER: &str = "bandwidth,latency,strategy,per_sample_time";
pub const CLEAN_REPORT_HEADER: &str = "total,kept,dropped_short_text,dropped_aspect,rewrite_queue";

/// Reported measurement for the group-size-halving memory claim: peak usage
/// dropped from 50.42GB to 27.46GB when the group halved. Carries fixed
/// overheads the pure row model excludes.
pub const MEASURED_PEAK_RATIO: f64 = 27.46 / 50.42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd)]
pub enum LogLevel {
    Quiet,
    Info,
    Debug,
}

/// Verbosity from the GBA_SIM_LOG environment variable.
pub fn log_level() -> LogLevel {
    match std::env::var("GBA_SIM_LOG").as_deref() {
        Ok("debug") => LogLevel::Debug,
        Ok("info") => LogLevel::Info,
        _ => LogLevel::Quiet,
    }
}

pub fn log_info(msg: &str) {
    if log_level() >= LogLevel::Info {
        eprintln!("[info] {msg}");
    }
}

pub fn log_debug(msg: &str) {
    if log_level() >= LogLevel::Debug {
        eprintln!("[debug] {msg}");
    }
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn metrics_csv(history: &MetricsHistory) -> String {
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for r in &history.records {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.step,
            r.loss,
            r.ledger.bytes_all_gather,
            r.ledger.bytes_all_reduce,
            r.ledger.peak_resident_rows,
            r.ledger.simulated_time
        )
        .expect("string write");
    }
    csv
}

fn run_one(cfg: &ExperimentConfig, strategy: StrategyConfig) -> Result<MetricsHistory> {
    let tc = cfg.train_config(strategy)?;
    let data = synth_pairs(&cfg.task())?;
    train(&tc, &data)
}

/// `run` subcommand: train one configuration and write metrics.csv.
pub fn cmd_run(config_path: &Path, out: &Path, seed_override: Option<u64>) -> Result<()> {
    let cfg = load_config(config_path, seed_override)?;
    let strategy = cfg.single_strategy();
    strategy
        .validate(cfg.world_size)
        .map_err(|e| SimError::Config(e.to_string()))?;
    ensure_out_dir(out)?;
    log_info(&format!(
        "run: strategy {} world {} steps {}",
        strategy.kind.label(),
        cfg.world_size,
        cfg.steps
    ));
    let history = run_one(&cfg, strategy)?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&history))?;
    let r1 = history
        .final_retrieval
        .recalls
        .first()
        .map(|(_, t2i, i2t)| (t2i + i2t) / 2.0)
        .unwrap_or(0.0);
    println!(
        "run complete: final_loss={} R@1={} MR={:.2}",
        history.records.last().map(|r| r.loss).unwrap_or(f64::NAN),
        r1,
        history.final_retrieval.mean_recall
    );
    Ok(())
}

fn strategy_label(s: &StrategyConfig, index: usize) -> String {
    format!(
        "{}_{}_b{}g{}k{}",
        index,
        s.kind.label(),
        s.batch_per_worker,
        s.group_size,
        s.accumulation_steps
    )
}

/// `compare` subcommand: run every listed strategy on identical seeds and
/// data, then emit per-strategy metrics plus compare.csv.
pub fn cmd_compare(config_path: &Path, out: &Path, seed_override: Option<u64>) -> Result<()> {
    let cfg = load_config(config_path, seed_override)?;
    if cfg.strategies.len() < 2 {
        return Err(SimError::Config(
            "key 'strategies': compare needs at least 2 strategies".to_string(),
        ));
    }
    // equal samples involved in the contrastive losses per optimizer step:
    // group_size * batch * accumulation steps
    let effective: Vec<usize> = cfg
        .strategies
        .iter()
        .map(|s| s.group_size * s.batch_per_worker * s.accumulation_steps)
        .collect();
    if effective.iter().any(|&e| e != effective[0]) {
        return Err(SimError::Config(format!(
            "key 'strategies': unequal effective samples per step: {effective:?}"
        )));
    }
    for s in &cfg.strategies {
        s.validate(cfg.world_size)
            .map_err(|e| SimError::Config(e.to_string()))?;
    }
    ensure_out_dir(out)?;

    let mut rows = Vec::new();
    let mut first_throughput = None;
    for (i, strategy) in cfg.strategies.iter().enumerate() {
        let label = strategy_label(strategy, i);
        log_info(&format!("compare: running {label}"));
        let history = run_one(&cfg, *strategy)?;
        std::fs::write(
            out.join(format!("metrics_{label}.csv")),
            metrics_csv(&history),
        )?;
        let final_loss = history.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
        let ag: u64 = history
            .records
            .iter()
            .map(|r| r.ledger.bytes_all_gather)
            .sum();
        let ar: u64 = history
            .records
            .iter()
            .map(|r| r.ledger.bytes_all_reduce)
            .sum();
        let peak = history
            .records
            .iter()
            .map(|r| r.ledger.peak_resident_rows)
            .max()
            .unwrap_or(0);
        let sim_time: f64 = history
            .records
            .iter()
            .map(|r| r.ledger.simulated_time)
            .sum();
        let samples =
            (cfg.steps * cfg.world_size * strategy.batch_per_worker * strategy.accumulation_steps)
                as f64;
        let throughput = samples / sim_time;
        let base = *first_throughput.get_or_insert(throughput);
        rows.push(format!(
            "{label},{final_loss},{ag},{ar},{peak},{sim_time},{throughput},{}",
            throughput / base
        ));
    }

    let mut csv = String::from(COMPARE_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    std::fs::write(out.join("compare.csv"), csv)?;

    // memory-model annotation: halving the group size at fixed per-worker
    // batch halves the gathered rows; the measured reference ratio carries
    // fixed overheads the row model excludes
    let mut halved = cfg.strategies[0];
    halved.group_size = (halved.group_size / 2).max(1);
    println!(
        "peak gathered rows: group {} -> {} rows, group {} -> {} rows; model ratio 0.500 (measured reference 27.46/50.42 = {:.3})",
        cfg.strategies[0].group_size,
        peak_gathered_rows(&cfg.strategies[0]),
        halved.group_size,
        peak_gathered_rows(&halved),
        MEASURED_PEAK_RATIO
    );
    for r in &rows {
        println!("{r}");
    }
    Ok(())
}

/// `sweep` subcommand: per-sample time for every strategy over the
/// bandwidth/latency grid, plus a calibration fit against the reported
/// throughput ratios.
pub fn cmd_sweep(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config_path, None)?;
    if cfg.strategies.is_empty() {
        return Err(SimError::Config(
            "key 'strategies': sweep needs at least 1 strategy".to_string(),
        ));
    }
    ensure_out_dir(out)?;
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for &bw in &cfg.sweep_bandwidths {
        for &lat in &cfg.sweep_latencies {
            let hw = crate::costmodel::HardwareModel::new(bw, lat, cfg.compute_rate)
                .map_err(|e| SimError::Config(e.to_string()))?;
            for (i, s) in cfg.strategies.iter().enumerate() {
                let t = per_sample_time(s, cfg.world_size, &hw, cfg.embed_dim);
                writeln!(csv, "{bw},{lat},{},{t}", strategy_label(s, i)).expect("string write");
            }
        }
    }
    std::fs::write(out.join("sweep.csv"), csv)?;

    if cfg.strategies.len() == 3 {
        let trio = [cfg.strategies[0], cfg.strategies[1], cfg.strategies[2]];
        // reported throughput factors: 1.07x for grouped, a further 1.59x
        // for batch accumulation
        let targets = (1.07, 1.07 * 1.59);
        let (fit, residuals) = calibrate(&trio, cfg.world_size, cfg.embed_dim, targets);
        println!(
            "calibration: bandwidth={:.3e} latency={:.3e} compute_rate={:.3e} residuals=({:+.4}, {:+.4}) vs targets ({}, {:.4})",
            fit.bandwidth, fit.latency, fit.compute_rate, residuals.0, residuals.1, targets.0, targets.1
        );
    }
    Ok(())
}

/// `clean` subcommand: partition a JSONL record file per the cleaning rules.
pub fn cmd_clean(input: &Path, out: &Path, threshold: f64) -> Result<()> {
    let text = std::fs::read_to_string(input)?;
    let records = parse_records(&text)?;
    ensure_out_dir(out)?;
    let report = clean(&records, threshold);
    std::fs::write(out.join("kept.jsonl"), records_to_jsonl(&report.kept))?;
    std::fs::write(
        out.join("rewrite_queue.jsonl"),
        records_to_jsonl(&report.rewrite_queue),
    )?;
    let mut csv = String::from(CLEAN_REPORT_HEADER);
    csv.push('\n');
    writeln!(
        csv,
        "{},{},{},{},{}",
        report.input_size(),
        report.kept.len(),
        report.dropped_short_text,
        report.dropped_aspect,
        report.rewrite_queue.len()
    )
    .expect("string write");
    std::fs::write(out.join("report.csv"), csv)?;
    println!(
        "clean complete: {} records -> {} kept, {} short-text drops, {} aspect drops, {} queued for rewrite (threshold {threshold})",
        report.input_size(),
        report.kept.len(),
        report.dropped_short_text,
        report.dropped_aspect,
        report.rewrite_queue.len()
    );
    Ok(())
}

/// Exit code mapping: configuration errors are 2, runtime failures 1.
pub fn exit_code_for(err: &SimError) -> i32 {
    match err {
        SimError::Config(_) => 2,
        _ => 1,
    }
}
