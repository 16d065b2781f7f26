//! Aggregate tables over a set of run records.
//!
//! Every file is a pure function of the records: rows are sorted, numbers
//! use a fixed precision, and missing values are written as `NA`. Columns
//! do not depend on which languages or prompts are present.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::runner::{read_json, ExperimentError, RunRecord};
use crate::environment::FeatureGroup;
use crate::fairness::FairnessReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no run records to report on")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Loads every `*.json` record in `dir` (or in `dir/records` when `dir` is a
/// run directory), sorted by cell.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>, ExperimentError> {
    let dir = if dir.join("records").is_dir() { dir.join("records") } else { dir.to_path_buf() };
    let entries = fs::read_dir(&dir).map_err(|source| ExperimentError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut records = paths.iter().map(|p| read_json::<RunRecord>(p)).collect::<Result<Vec<_>, _>>()?;
    records.sort_by(|a, b| {
        (&a.key.language, a.key.prompt_id, a.key.alpha.to_bits(), a.key.run_index).cmp(&(
            &b.key.language,
            b.key.prompt_id,
            b.key.alpha.to_bits(),
            b.key.run_index,
        ))
    });
    Ok(records)
}

/// Mean and standard error (sample standard deviation over √n). The error
/// is undefined below two observations.
pub fn mean_stderr(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (None, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(var.sqrt() / (n as f64).sqrt()))
}

fn num(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Orders alphas numerically; all alphas are non-negative so bit order works.
type AlphaKey = u64;

fn alpha_of(bits: AlphaKey) -> f64 {
    f64::from_bits(bits)
}

struct Writer {
    out_dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), ReportError> {
        let path = self.out_dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        self.files.push(path);
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), ReportError> {
        let path = self.out_dir.join(name);
        fs::write(&path, body).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        self.files.push(path);
        Ok(())
    }
}

/// Rate cell: run counts plus mean/stderr over the completed runs.
struct RateCell {
    runs: usize,
    values: Vec<f64>,
}

impl RateCell {
    fn row_tail(&self) -> Vec<String> {
        let (mean, se) = mean_stderr(&self.values);
        let hits = self.values.iter().filter(|v| **v > 0.5).count();
        vec![
            self.runs.to_string(),
            (self.runs - self.values.len()).to_string(),
            self.values.len().to_string(),
            hits.to_string(),
            num(mean),
            num(se),
        ]
    }
}

fn rate_cells<F>(records: &[&RunRecord], value: F) -> BTreeMap<(String, u32), RateCell>
where
    F: Fn(&FairnessReport) -> bool,
{
    let mut cells: BTreeMap<(String, u32), RateCell> = BTreeMap::new();
    for r in records {
        let cell = cells
            .entry((r.key.language.clone(), r.key.prompt_id))
            .or_insert(RateCell {
                runs: 0,
                values: Vec::new(),
            });
        cell.runs += 1;
        if let Some(f) = &r.fairness {
            cell.values.push(indicator(value(f)));
        }
    }
    cells
}

fn acceptable_markdown(cells: &BTreeMap<(String, u32), RateCell>) -> String {
    let mut prompts: Vec<u32> = cells.keys().map(|k| k.1).collect();
    prompts.sort_unstable();
    prompts.dedup();
    let mut languages: Vec<&String> = cells.keys().map(|k| &k.0).collect();
    languages.dedup();
    let mut out = String::from("| Language |");
    for p in &prompts {
        let _ = write!(out, " Prompt {p} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(prompts.len()));
    out.push('\n');
    for lang in languages {
        let _ = write!(out, "| {lang} |");
        for p in &prompts {
            let text = match cells.get(&(lang.clone(), *p)) {
                None => "".to_string(),
                Some(c) => match mean_stderr(&c.values) {
                    (None, _) => format!("NA ({} failed)", c.runs),
                    (Some(m), Some(se)) => format!("{m:.3} ± {se:.3}"),
                    (Some(m), None) => format!("{m:.3} ± NA"),
                },
            };
            let _ = write!(out, " {text} |");
        }
        out.push('\n');
    }
    out
}

/// Grouped vertical bar chart: one group per category, one bar per series.
fn bar_chart_svg(title: &str, categories: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    const PALETTE: [&str; 6] = ["#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4", "#8c613c"];
    let (w, h, left, bottom, top) = (120.0 + 90.0 * categories.len() as f64, 320.0, 50.0, 40.0, 40.0);
    let plot_h = h - bottom - top;
    let group_w = 90.0;
    let bar_w = (group_w - 20.0) / series.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<text x=\"{left}\" y=\"20\" font-size=\"14\">{title}</text>");
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" x2=\"{}\" y1=\"{y:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>",
            w - 10.0,
            left - 4.0,
            y + 4.0
        );
    }
    for (ci, cat) in categories.iter().enumerate() {
        let gx = left + 10.0 + ci as f64 * group_w;
        for (si, (_, values)) in series.iter().enumerate() {
            if let Some(v) = values.get(ci).copied().flatten() {
                let bh = plot_h * v.clamp(0.0, 1.0);
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar_w:.1}\" height=\"{bh:.1}\" fill=\"{}\"/>",
                    gx + si as f64 * bar_w,
                    top + plot_h - bh,
                    PALETTE[si % PALETTE.len()]
                );
            }
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{cat}</text>",
            gx + (group_w - 20.0) / 2.0,
            h - bottom + 16.0
        );
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let y = h - 8.0;
        let x = left + si as f64 * 100.0;
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{y}\">{}</text>",
            y - 9.0,
            PALETTE[si % PALETTE.len()],
            x + 14.0,
            escape_xml(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn rate_chart(title: &str, cells: &BTreeMap<(String, u32), RateCell>) -> String {
    let mut prompts: Vec<u32> = cells.keys().map(|k| k.1).collect();
    prompts.sort_unstable();
    prompts.dedup();
    let mut languages: Vec<String> = cells.keys().map(|k| k.0.clone()).collect();
    languages.dedup();
    let series = languages
        .iter()
        .map(|l| {
            let values = prompts
                .iter()
                .map(|p| cells.get(&(l.clone(), *p)).and_then(|c| mean_stderr(&c.values).0))
                .collect();
            (l.clone(), values)
        })
        .collect::<Vec<_>>();
    let categories: Vec<String> = prompts.iter().map(|p| format!("Prompt {p}")).collect();
    bar_chart_svg(title, &categories, &series)
}

pub const ACCEPTABLE_HEADER: [&str; 8] = ["language", "prompt_id", "runs", "failed", "completed", "acceptable", "rate", "stderr"];
pub const SUCCESS_HEADER: [&str; 8] = ["language", "prompt_id", "runs", "failed", "completed", "successes", "rate", "stderr"];
pub const SHARE_HEADER: [&str; 7] = ["language", "alpha", "feature", "bucket", "completed", "mean_share", "stderr"];
pub const ABSOLUTE_BY_PROMPT_HEADER: [&str; 7] =
    ["language", "alpha", "prompt_id", "threshold", "completed", "mean_count", "stderr"];
pub const ABSOLUTE_BY_LANGUAGE_HEADER: [&str; 6] = ["language", "alpha", "threshold", "completed", "mean_count", "stderr"];
pub const RELATIVE_BY_LANGUAGE_HEADER: [&str; 6] = ["language", "alpha", "completed", "relative_count", "rate", "stderr"];
pub const RELATIVE_BY_PROMPT_HEADER: [&str; 7] =
    ["language", "alpha", "prompt_id", "completed", "relative_count", "rate", "stderr"];

/// Writes every report file into `out_dir` and returns their paths.
pub fn emit_report(records: &[RunRecord], out_dir: &Path, svg: bool) -> Result<Vec<PathBuf>, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut w = Writer {
        out_dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.key.language, a.key.prompt_id, a.key.alpha.to_bits(), a.key.run_index).cmp(&(
            &b.key.language,
            b.key.prompt_id,
            b.key.alpha.to_bits(),
            b.key.run_index,
        ))
    });

    // Acceptable rates, pooled over alpha.
    let acceptable = rate_cells(&sorted, |f| f.acceptable);
    let rows = acceptable
        .iter()
        .map(|((l, p), c)| [vec![l.clone(), p.to_string()], c.row_tail()].concat())
        .collect();
    w.csv("acceptable_rates.csv", &ACCEPTABLE_HEADER, rows)?;
    w.text("acceptable_rates.md", &acceptable_markdown(&acceptable))?;
    if svg {
        w.text("acceptable_rates.svg", &rate_chart("Acceptable rate", &acceptable))?;
    }

    // Task success per alpha.
    let mut by_alpha: BTreeMap<AlphaKey, Vec<&RunRecord>> = BTreeMap::new();
    for r in &sorted {
        by_alpha.entry(r.key.alpha.to_bits()).or_default().push(r);
    }
    for (bits, recs) in &by_alpha {
        let alpha = alpha_of(*bits);
        let cells = rate_cells(recs, |f| f.success.overall);
        let rows = cells
            .iter()
            .map(|((l, p), c)| [vec![l.clone(), p.to_string()], c.row_tail()].concat())
            .collect();
        w.csv(&format!("success_rates_alpha_{alpha}.csv"), &SUCCESS_HEADER, rows)?;
        if svg {
            w.text(
                &format!("success_rates_alpha_{alpha}.svg"),
                &rate_chart(&format!("Task success, alpha = {alpha}"), &cells),
            )?;
        }
    }

    // Allocation shares per prompt.
    let mut by_prompt: BTreeMap<u32, Vec<&RunRecord>> = BTreeMap::new();
    for r in &sorted {
        by_prompt.entry(r.key.prompt_id).or_default().push(r);
    }
    for (prompt, recs) in &by_prompt {
        let mut shares: BTreeMap<(String, AlphaKey, FeatureGroup, usize), Vec<f64>> = BTreeMap::new();
        for r in recs {
            let Some(f) = &r.fairness else { continue };
            for fr in &f.rates.features {
                for b in &fr.buckets {
                    shares
                        .entry((r.key.language.clone(), r.key.alpha.to_bits(), fr.group, b.bucket))
                        .or_default()
                        .push(b.share);
                }
            }
        }
        let rows = shares
            .iter()
            .map(|((l, a, g, b), xs)| {
                let (mean, se) = mean_stderr(xs);
                vec![
                    l.clone(),
                    alpha_of(*a).to_string(),
                    g.name().to_string(),
                    b.to_string(),
                    xs.len().to_string(),
                    num(mean),
                    num(se),
                ]
            })
            .collect();
        w.csv(&format!("allocation_shares_prompt_{prompt}.csv"), &SHARE_HEADER, rows)?;
    }

    // Unfairness counts.
    let completed: Vec<(&RunRecord, &FairnessReport)> =
        sorted.iter().filter_map(|r| r.fairness.as_ref().map(|f| (*r, f))).collect();
    let mut abs_prompt: BTreeMap<(String, AlphaKey, u32, u64), Vec<f64>> = BTreeMap::new();
    let mut abs_lang: BTreeMap<(String, AlphaKey, u64), Vec<f64>> = BTreeMap::new();
    let mut rel_lang: BTreeMap<(String, AlphaKey), Vec<f64>> = BTreeMap::new();
    let mut rel_prompt: BTreeMap<(String, AlphaKey, u32), Vec<f64>> = BTreeMap::new();
    for (r, f) in &completed {
        let (l, a, p) = (r.key.language.clone(), r.key.alpha.to_bits(), r.key.prompt_id);
        for (t, count) in &f.unfairness.absolute {
            abs_prompt.entry((l.clone(), a, p, t.to_bits())).or_default().push(*count as f64);
            abs_lang.entry((l.clone(), a, t.to_bits())).or_default().push(*count as f64);
        }
        rel_lang.entry((l.clone(), a)).or_default().push(indicator(f.unfairness.relative));
        rel_prompt.entry((l, a, p)).or_default().push(indicator(f.unfairness.relative));
    }
    let stat_cols = |xs: &[f64]| {
        let (mean, se) = mean_stderr(xs);
        vec![xs.len().to_string(), num(mean), num(se)]
    };
    let rel_cols = |xs: &[f64]| {
        let (mean, se) = mean_stderr(xs);
        let hits = xs.iter().filter(|v| **v > 0.5).count();
        vec![xs.len().to_string(), hits.to_string(), num(mean), num(se)]
    };
    let rows = abs_prompt
        .iter()
        .map(|((l, a, p, t), xs)| {
            [
                vec![l.clone(), alpha_of(*a).to_string(), p.to_string(), f64::from_bits(*t).to_string()],
                stat_cols(xs),
            ]
            .concat()
        })
        .collect();
    w.csv("unfairness_absolute_by_prompt.csv", &ABSOLUTE_BY_PROMPT_HEADER, rows)?;
    let rows = abs_lang
        .iter()
        .map(|((l, a, t), xs)| {
            [vec![l.clone(), alpha_of(*a).to_string(), f64::from_bits(*t).to_string()], stat_cols(xs)].concat()
        })
        .collect();
    w.csv("unfairness_absolute_by_language.csv", &ABSOLUTE_BY_LANGUAGE_HEADER, rows)?;
    let rows = rel_lang
        .iter()
        .map(|((l, a), xs)| [vec![l.clone(), alpha_of(*a).to_string()], rel_cols(xs)].concat())
        .collect();
    w.csv("unfairness_relative_by_language.csv", &RELATIVE_BY_LANGUAGE_HEADER, rows)?;
    let rows = rel_prompt
        .iter()
        .map(|((l, a, p), xs)| [vec![l.clone(), alpha_of(*a).to_string(), p.to_string()], rel_cols(xs)].concat())
        .collect();
    w.csv("unfairness_relative_by_prompt.csv", &RELATIVE_BY_PROMPT_HEADER, rows)?;

    Ok(w.files)
}
