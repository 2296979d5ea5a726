//! Controller-by-scenario-by-seed comparison runs and their reports.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use cross_sim::{MetricReport, Scenario, EPISODE_SECONDS};
use serde::Serialize;

use crate::agent::Agent;
use crate::controllers::{run_episode, ActionMode, Controller, CrossPolicy, FixedTime, MaxPressure, RandomController};
use crate::error::{CoreError, Result};
use crate::parallel::map_ordered;

/// A controller family to compare.
#[derive(Clone, Debug)]
pub enum Method {
    FixedTime,
    MaxPressure,
    Random,
    /// A trained agent, evaluated greedily.
    Cross { label: String, agent: Arc<Agent> },
}

impl Method {
    pub fn label(&self) -> &str {
        match self {
            Method::FixedTime => "fixed-time",
            Method::MaxPressure => "max-pressure",
            Method::Random => "random",
            Method::Cross { label, .. } => label,
        }
    }

    /// Parses `fixed-time`, `max-pressure`, `random`, or `<label>=<checkpoint>`
    /// for learned policies such as `cross=runs/a/checkpoint.json`.
    pub fn parse(spec: &str) -> Result<Self> {
        match spec {
            "fixed-time" => Ok(Method::FixedTime),
            "max-pressure" => Ok(Method::MaxPressure),
            "random" => Ok(Method::Random),
            other => match other.split_once('=') {
                Some((label, path)) if label.starts_with("cross") => Ok(Method::Cross {
                    label: label.to_owned(),
                    agent: Arc::new(Agent::load(Path::new(path))?),
                }),
                _ => Err(CoreError::Config(format!(
                    "unknown method `{other}`; expected fixed-time, max-pressure, random or cross…=<checkpoint>"
                ))),
            },
        }
    }

    pub fn controller(&self, seed: u64) -> Box<dyn Controller> {
        match self {
            Method::FixedTime => Box::new(FixedTime::default()),
            Method::MaxPressure => Box::new(MaxPressure),
            Method::Random => Box::new(RandomController::new(seed)),
            Method::Cross { agent, .. } => Box::new(CrossPolicy::new(agent.clone(), ActionMode::Greedy, seed)),
        }
    }
}

/// One cell of the comparison matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub method: String,
    pub scenario: String,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

/// Runs every method on every scenario for every demand seed.
pub fn compare(methods: &[Method], scenarios: &[Scenario], seeds: &[u64], horizon: u32) -> Result<Vec<CompareRow>> {
    let mut jobs = Vec::new();
    for m in methods {
        for s in scenarios {
            for &seed in seeds {
                jobs.push((m, s, seed));
            }
        }
    }
    map_ordered(&jobs, |(m, s, seed)| {
        let trips = s.demand.with_seed(*seed).generate(&s.network)?;
        let mut ctl = m.controller(*seed);
        let report = run_episode(ctl.as_mut(), s.network.clone(), trips, horizon)?;
        Ok(CompareRow {
            method: m.label().to_owned(),
            scenario: s.name.clone(),
            seed: *seed,
            metrics: report.metrics,
        })
    })
    .into_iter()
    .collect()
}

/// Full-hour comparison.
pub fn compare_episode(methods: &[Method], scenarios: &[Scenario], seeds: &[u64]) -> Result<Vec<CompareRow>> {
    compare(methods, scenarios, seeds, EPISODE_SECONDS)
}

pub fn write_rows(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method", "scenario", "seed"];
    header.extend(MetricReport::FIELDS);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.method.clone(), r.scenario.clone(), r.seed.to_string()];
        rec.extend(r.metrics.values().iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Mean and sample standard deviation of each metric for one method on one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub method: String,
    pub scenario: String,
    pub runs: usize,
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

/// Groups rows by (method, scenario), keeping first-seen order.
pub fn summarize(rows: &[CompareRow]) -> Vec<Summary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.scenario.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, scenario)| {
            let vals: Vec<[f64; 6]> = rows
                .iter()
                .filter(|r| r.method == method && r.scenario == scenario)
                .map(|r| r.metrics.values())
                .collect();
            let n = vals.len() as f64;
            let mut mean = [0.0; 6];
            let mut std = [0.0; 6];
            for i in 0..6 {
                mean[i] = vals.iter().map(|v| v[i]).sum::<f64>() / n;
                if vals.len() > 1 {
                    std[i] = (vals.iter().map(|v| (v[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                }
            }
            Summary {
                method,
                scenario,
                runs: vals.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// One row per method and scenario; each metric cell reads `mean(std)`.
pub fn write_summary(path: &Path, summaries: &[Summary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method", "scenario"];
    header.extend(MetricReport::FIELDS);
    w.write_record(&header)?;
    for s in summaries {
        let mut rec = vec![s.method.clone(), s.scenario.clone()];
        rec.extend((0..6).map(|i| format!("{:.3}({:.3})", s.mean[i], s.std[i])));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Grouped bar chart of mean trip duration: one group per scenario, one bar per method.
pub fn trip_duration_svg(summaries: &[Summary]) -> String {
    let mut scenarios: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for s in summaries {
        if !scenarios.contains(&s.scenario.as_str()) {
            scenarios.push(&s.scenario);
        }
        if !methods.contains(&s.method.as_str()) {
            methods.push(&s.method);
        }
    }
    const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948"];
    let (bar, gap, left, top, height) = (24.0, 28.0, 60.0, 30.0, 240.0);
    let group = bar * methods.len() as f64 + gap;
    let width = left + group * scenarios.len() as f64 + 160.0;
    let idx = 5; // trip_duration_s
    let max = summaries.iter().map(|s| s.mean[idx] + s.std[idx]).fold(1e-9, f64::max);
    let mut svg = String::new();
    let total_h = top + height + 60.0;
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{total_h:.0}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(svg, "<text x=\"{left}\" y=\"18\" font-size=\"13\">Mean trip duration (s)</text>");
    let base = top + height;
    let _ = writeln!(svg, "<line x1=\"{left}\" y1=\"{base}\" x2=\"{:.1}\" y2=\"{base}\" stroke=\"black\"/>", width - 150.0);
    for t in 0..=4 {
        let v = max * t as f64 / 4.0;
        let y = base - height * t as f64 / 4.0;
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.0}</text>", left - 6.0, y + 4.0);
    }
    for (si, sc) in scenarios.iter().enumerate() {
        let x0 = left + gap / 2.0 + group * si as f64;
        for (mi, m) in methods.iter().enumerate() {
            let Some(s) = summaries.iter().find(|s| s.scenario == *sc && s.method == *m) else { continue };
            let h = height * s.mean[idx] / max;
            let x = x0 + bar * mi as f64;
            let _ = writeln!(
                svg,
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"><title>{m}: {:.1} ± {:.1}</title></rect>",
                base - h,
                bar - 2.0,
                PALETTE[mi % PALETTE.len()],
                s.mean[idx],
                s.std[idx]
            );
            let err_top = base - height * (s.mean[idx] + s.std[idx]) / max;
            let err_bot = base - height * (s.mean[idx] - s.std[idx]).max(0.0) / max;
            let cx = x + (bar - 2.0) / 2.0;
            let _ = writeln!(svg, "<line x1=\"{cx:.1}\" y1=\"{err_top:.1}\" x2=\"{cx:.1}\" y2=\"{err_bot:.1}\" stroke=\"black\"/>");
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            x0 + bar * methods.len() as f64 / 2.0,
            base + 16.0,
            escape(sc)
        );
    }
    let lx = width - 140.0;
    for (mi, m) in methods.iter().enumerate() {
        let y = top + 16.0 * mi as f64;
        let _ = writeln!(svg, "<rect x=\"{lx}\" y=\"{y}\" width=\"10\" height=\"10\" fill=\"{}\"/>", PALETTE[mi % PALETTE.len()]);
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">{}</text>", lx + 14.0, y + 9.0, escape(m));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `rows.csv`, `summary.csv` and `trip_duration.svg` into `dir`.
pub fn write_report(dir: &Path, rows: &[CompareRow]) -> Result<Vec<Summary>> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    write_rows(&dir.join("rows.csv"), rows)?;
    let summaries = summarize(rows);
    write_summary(&dir.join("summary.csv"), &summaries)?;
    let svg_path = dir.join("trip_duration.svg");
    std::fs::write(&svg_path, trip_duration_svg(&summaries)).map_err(|e| CoreError::io(&svg_path, e))?;
    Ok(summaries)
}
