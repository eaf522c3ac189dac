//! CSV and plot-data renderings of a benchmark report.

use std::io::Write;
use std::path::{Path, PathBuf};

use pipedec_core::Regime;

use crate::harness::{aggregate, MetricReport, RegimeRun};

pub const CSV_HEADER: &str = "regime,delay,group,examples,em_f1,pm_f1,f1_at_5,f1_at_m,rouge_1,\
     rouge_2,rouge_l,mean_steps,speedup_steps,throughput_eps,mean_wall_micros,peak_rss_kb";

/// Columns from `mean_wall_micros` on are wall-clock dependent; everything
/// before them is deterministic for fixed checkpoints, dataset, and seed.
pub const WALL_CLOCK_COLUMNS: usize = 3;

fn write_row<W: Write>(
    w: &mut W,
    report: &MetricReport,
    run: &RegimeRun,
    group_label: &str,
    group: Option<usize>,
) -> std::io::Result<()> {
    let scores: Vec<_> = match group {
        Some(n) => report
            .group_scores(run, n)
            .into_iter()
            .cloned()
            .collect(),
        None => run.scores.clone(),
    };
    let agg = aggregate(&scores);
    let speedup = match run.regime {
        Regime::Sequential => Some(1.0),
        Regime::Pipelined => report.speedup_steps(run, group),
    };
    let speedup = speedup
        .map(|s| format!("{s:.6}"))
        .unwrap_or_else(|| "NA".into());
    writeln!(
        w,
        "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.3},{:.1},{}",
        run.regime,
        run.delay,
        group_label,
        agg.examples,
        agg.em_f1,
        agg.pm_f1,
        agg.f1_at_5,
        agg.f1_at_m,
        agg.rouge_1,
        agg.rouge_2,
        agg.rouge_l,
        agg.mean_steps,
        speedup,
        run.throughput_eps,
        agg.mean_wall_micros,
        run.peak_rss_kb,
    )
}

/// One row per regime x group x delay, plus an `all` row per run.
pub fn write_csv<W: Write>(report: &MetricReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    let groups = report.groups();
    for run in &report.runs {
        write_row(&mut w, report, run, "all", None)?;
        for &n in &groups {
            write_row(&mut w, report, run, &format!("n={n}"), Some(n))?;
        }
    }
    Ok(())
}

pub fn csv_string(report: &MetricReport) -> String {
    let mut buf = Vec::new();
    write_csv(report, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("csv is utf8")
}

/// Strip the wall-clock columns from a rendered CSV, for byte-level
/// determinism comparisons.
pub fn strip_wall_clock_columns(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            let keep = fields.len().saturating_sub(WALL_CLOCK_COLUMNS);
            fields[..keep].join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Plot series: step-count speedup against target subsequence count, one
/// series per pipelined delay; and the delay sweep with quality and
/// throughput.
pub fn write_plot_data(report: &MetricReport, dir: &Path) -> std::io::Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let speedup_path = dir.join("speedup_vs_subseq_count.tsv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&speedup_path)?);
        writeln!(f, "delay\tsubseq_count\tspeedup_steps")?;
        for run in &report.runs {
            if run.regime != Regime::Pipelined {
                continue;
            }
            for n in report.groups() {
                if let Some(s) = report.speedup_steps(run, Some(n)) {
                    writeln!(f, "{}\t{}\t{:.6}", run.delay, n, s)?;
                }
            }
        }
    }
    let sweep_path = dir.join("delay_sweep.tsv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&sweep_path)?);
        writeln!(f, "delay\tem_f1\trouge_l\tmean_steps\tthroughput_eps")?;
        for run in &report.runs {
            if run.regime != Regime::Pipelined {
                continue;
            }
            let agg = aggregate(&run.scores);
            writeln!(
                f,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
                run.delay, agg.em_f1, agg.rouge_l, agg.mean_steps, run.throughput_eps
            )?;
        }
    }
    Ok((speedup_path, sweep_path))
}
