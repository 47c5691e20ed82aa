use std::fmt::Write as _;

use super::EvalReport;

pub const CSV_HEADER: &str = "system,task,controller,filter,noise_level,noise_mean,noise_sigma,episodes,\
total_steps,violating_steps,vio_pct,dev,dev_sum,fail_count,failed_episodes,base_seed";

/// 17 significant digits: enough to round-trip any `f64`.
pub fn fmt_full(v: f64) -> String {
    format!("{v:.16e}")
}

fn metric(r: &EvalReport, v: f64) -> String {
    if r.failed() {
        "fail".to_string()
    } else {
        fmt_full(v)
    }
}

/// One row per report, in the given order. Vio% and Dev read `fail` when
/// any episode hit a filter failure; the raw counts stay numeric.
pub fn to_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.system,
            r.task.as_str(),
            r.controller,
            r.filter,
            r.noise_level,
            fmt_full(r.noise_mean),
            fmt_full(r.noise_sigma),
            r.episodes,
            r.total_steps,
            r.violating_steps,
            metric(r, r.vio_pct),
            metric(r, r.dev),
            fmt_full(r.dev_sum),
            r.fail_count,
            r.failed_episodes,
            r.base_seed,
        );
    }
    s
}

/// Filters as rows, noise levels as column pairs of Vio% and Dev, both in
/// order of first appearance.
pub fn to_text(reports: &[EvalReport]) -> String {
    let mut filters: Vec<&str> = Vec::new();
    let mut levels: Vec<f64> = Vec::new();
    for r in reports {
        if !filters.contains(&r.filter.as_str()) {
            filters.push(&r.filter);
        }
        if !levels.contains(&r.noise_level) {
            levels.push(r.noise_level);
        }
    }
    let mut header = vec!["filter".to_string()];
    for n in &levels {
        header.push(format!("n={n} Vio%"));
        header.push(format!("n={n} Dev"));
    }
    let mut rows = vec![header];
    for f in &filters {
        let mut row = vec![f.to_string()];
        for n in &levels {
            match reports.iter().find(|r| r.filter == *f && r.noise_level == *n) {
                Some(r) if r.failed() => row.extend(["fail".to_string(), "fail".to_string()]),
                Some(r) => {
                    row.push(format!("{:.2}", r.vio_pct));
                    row.push(format!("{:.3e}", r.dev));
                }
                None => row.extend(["-".to_string(), "-".to_string()]),
            }
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| {
                if i == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        s.push_str(cells.join("  ").trim_end());
        s.push('\n');
    }
    s
}

/// CSV and aligned text renderings of the same reports.
pub fn emit_table(reports: &[EvalReport]) -> (String, String) {
    (to_csv(reports), to_text(reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Task;

    fn report(filter: &str, n: f64, failed: usize) -> EvalReport {
        EvalReport {
            system: "double_integrator".into(),
            task: Task::Stabilization,
            controller: "lqr".into(),
            noise_level: n,
            noise_mean: 0.0,
            noise_sigma: 0.25 * n,
            filter: filter.into(),
            episodes: 100,
            total_steps: 10_000,
            violating_steps: 12,
            vio_pct: 0.12,
            dev: 1.0 / 3.0,
            dev_sum: 100.0 / 3.0,
            fail_count: failed,
            failed_episodes: failed,
            base_seed: 0,
        }
    }

    #[test]
    fn empty_is_header_only() {
        assert_eq!(to_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn one_report_one_row_with_full_precision() {
        let csv = to_csv(&[report("psf", 0.5, 0)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        let dev = lines[1].split(',').nth(11).unwrap();
        assert_eq!(dev, "3.3333333333333331e-1");
        assert_eq!(dev.parse::<f64>().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn failures_render_literally() {
        let (csv, text) = emit_table(&[report("psf", 2.0, 3)]);
        assert_eq!(
            csv.lines().nth(1).unwrap().split(',').filter(|c| *c == "fail").count(),
            2
        );
        let cells: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
        assert_eq!(cells, ["psf", "fail", "fail"]);
    }

    #[test]
    fn text_layout_is_filters_by_levels() {
        let reports: Vec<EvalReport> = ["passthrough", "psf"]
            .iter()
            .flat_map(|f| [0.0, 0.5, 1.0, 2.0].map(|n| report(f, n, 0)))
            .collect();
        let text = to_text(&reports);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("filter"));
        assert_eq!(lines[0].matches("Vio%").count(), 4);
        assert!(lines[2].starts_with("psf"));
        assert_eq!(to_csv(&reports), to_csv(&reports.clone()));
    }
}
