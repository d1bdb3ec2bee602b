//! Design summaries, comparisons and the `table.csv` format.

use std::fmt::Write as _;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use sw_design::inference::power_report;
use sw_design::model::{treatment_covariance, Sequence};
use sw_design::search::{criterion_value, total_observations};
use sw_design::{Criterion, Design, PowerReport, PowerSpec, VarianceComponents};

/// Everything a results table reports about one design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub design: Design,
    pub cost: f64,
    pub det: f64,
    pub trace_over_q: f64,
    pub max_diag: f64,
    pub power: PowerReport,
    pub covariance: Vec<Vec<f64>>,
}

impl DesignReport {
    pub fn new(design: Design, vc: &VarianceComponents, spec: &PowerSpec) -> Result<Self> {
        let summary = treatment_covariance(&design, vc)?;
        let power = power_report(&summary, spec)?;
        let q = summary.q();
        Ok(DesignReport {
            cost: total_observations(&design),
            det: criterion_value(&summary, Criterion::D)?,
            trace_over_q: criterion_value(&summary, Criterion::A)?,
            max_diag: criterion_value(&summary, Criterion::E)?,
            covariance: (0..q).map(|i| (0..q).map(|j| summary.lambda[(i, j)]).collect()).collect(),
            power,
            design,
        })
    }

    fn rows(&self) -> Vec<(String, f64, Style)> {
        let d = &self.design;
        let mut rows = vec![
            ("C".to_string(), d.clusters() as f64, Style::Integer),
            ("T".to_string(), d.periods() as f64, Style::Integer),
            ("m".to_string(), d.m() as f64, Style::Integer),
        ];
        for (f, p) in self.power.per_hypothesis.iter().enumerate() {
            rows.push((format!("power_H0{}", f + 1), *p, Style::Probability));
        }
        rows.push(("power_combined".into(), self.power.combined, Style::Probability));
        rows.push(("cost".into(), self.cost, Style::Integer));
        rows.push(("det".into(), self.det, Style::Scientific));
        rows.push(("trace_over_q".into(), self.trace_over_q, Style::Scientific));
        rows.push(("max_diag".into(), self.max_diag, Style::Scientific));
        rows
    }
}

#[derive(Clone, Copy)]
enum Style {
    Integer,
    Probability,
    Scientific,
}

fn show(v: f64, style: Style) -> String {
    match style {
        Style::Integer => format!("{v}"),
        Style::Probability => format!("{v:.4}"),
        Style::Scientific => format!("{v:.3e}"),
    }
}

/// Percentage change of `value` relative to `reference`.
pub fn percent_change(value: f64, reference: f64) -> Option<f64> {
    (reference != 0.0 && reference.is_finite()).then(|| 100.0 * (value - reference) / reference)
}

/// Change rounded to one decimal place: `(+12.1%)`, `(-58.3%)`, `(±0%)`.
pub fn format_change(percent: f64) -> String {
    let rounded = (percent * 10.0).round() / 10.0;
    if rounded == 0.0 {
        "(±0%)".to_string()
    } else if rounded > 0.0 {
        format!("(+{rounded:.1}%)")
    } else {
        format!("({rounded:.1}%)")
    }
}

/// `quantity,value,comparator,change_percent`, comparator columns empty without one.
pub fn table_csv(report: &DesignReport, comparator: Option<&DesignReport>) -> String {
    let mut out = String::from("quantity,value,comparator,change_percent\n");
    let theirs = comparator.map(DesignReport::rows);
    for (i, (name, v, _)) in report.rows().into_iter().enumerate() {
        let (c, pct) = match theirs.as_ref().and_then(|t| t.get(i)) {
            Some((_, c, _)) => (
                c.to_string(),
                percent_change(v, *c).map(|p| format!("{:.1}", (p * 10.0).round() / 10.0)).unwrap_or_default(),
            ),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(out, "{name},{v},{c},{pct}");
    }
    out
}

pub fn format_matrix(x: &[Sequence]) -> String {
    x.iter()
        .map(|r| r.iter().map(u8::to_string).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n    ")
}

/// Human-readable summary with percentage changes against the comparator.
pub fn summary(title: &str, report: &DesignReport, comparator: Option<&DesignReport>) -> String {
    let mut out = format!("{title}\n  X:\n    {}\n", format_matrix(report.design.allocation()));
    let theirs = comparator.map(DesignReport::rows);
    for (i, (name, v, style)) in report.rows().into_iter().enumerate() {
        let _ = write!(out, "  {name:<15} {}", show(v, style));
        if let Some((_, c, _)) = theirs.as_ref().and_then(|t| t.get(i)) {
            let change = percent_change(v, *c).map(format_change).unwrap_or_default();
            let _ = write!(out, " {change}  [comparator {}]", show(*c, style));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn change_formatting() {
        assert_eq!(format_change(percent_change(120.0, 288.0).unwrap()), "(-58.3%)");
        assert_eq!(format_change(percent_change(0.9878, 0.8815).unwrap()), "(+12.1%)");
        assert_eq!(format_change(0.04), "(±0%)");
        assert_eq!(format_change(-0.04), "(±0%)");
        assert_eq!(format_change(percent_change(0.9937, 1.0).unwrap()), "(-0.6%)");
        assert_eq!(percent_change(1.0, 0.0), None);
    }

    #[test]
    fn table_has_comparator_columns() {
        let vc = VarianceComponents::cross_sectional(1.0, 0.05).unwrap();
        let spec = PowerSpec::ignore_power(1);
        let a = DesignReport::new(Design::new(4, 2, vec![vec![0, 1, 1], vec![0, 0, 1]]).unwrap(), &vc, &spec).unwrap();
        let b = DesignReport::new(Design::new(2, 2, vec![vec![0, 1, 1], vec![0, 0, 1]]).unwrap(), &vc, &spec).unwrap();
        let t = table_csv(&a, Some(&b));
        assert!(t.starts_with("quantity,value,comparator,change_percent\nC,2,2,0.0\n"));
        assert!(t.contains("\nm,4,2,100.0\n"));
        let t = table_csv(&a, None);
        assert!(t.contains("\ncost,24,,\n"));
    }
}
