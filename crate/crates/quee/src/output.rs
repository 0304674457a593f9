//! Result files: decision traces (newline-delimited JSON) and delimited
//! tables for curves and studies.

use std::io::Write;

use anyhow::Result;
use quee_core::harness::{DegradationRow, EceStudyRow, OperatingPoint};
use quee_core::router::{DecisionTrace, Step};
use serde::Serialize;

#[derive(Serialize)]
struct CandidateOut {
    path: String,
    cost: f64,
    predicted: f64,
    score: f64,
}

#[derive(Serialize)]
struct DecisionOut {
    gate: usize,
    /// `"exit"` or the chosen bit-width.
    step: serde_json::Value,
    candidates: Vec<CandidateOut>,
}

#[derive(Serialize)]
struct TraceOut<'a> {
    id: &'a str,
    final_path: String,
    cost: f64,
    predicted_class: usize,
    label: usize,
    correct: bool,
    decisions: Vec<DecisionOut>,
}

pub fn write_traces(traces: &[DecisionTrace], mut out: impl Write) -> Result<()> {
    for t in traces {
        let line = TraceOut {
            id: &t.id,
            final_path: t.final_path.key(),
            cost: t.cost,
            predicted_class: t.predicted_class,
            label: t.label,
            correct: t.correct,
            decisions: t
                .decisions
                .iter()
                .map(|d| DecisionOut {
                    gate: d.gate,
                    step: match d.step {
                        Step::Exit => "exit".into(),
                        Step::Continue(b) => b.into(),
                    },
                    candidates: d
                        .candidates
                        .iter()
                        .map(|c| CandidateOut {
                            path: c.path.key(),
                            cost: c.cost,
                            predicted: c.predicted,
                            score: c.score,
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

const CURVE_HEADER: [&str; 9] = [
    "mode",
    "label",
    "parameter",
    "accuracy",
    "accuracy_ci",
    "cost",
    "cost_ci",
    "bitops",
    "evaluations",
];

fn curve_fields(p: &OperatingPoint) -> [String; 9] {
    [
        p.mode.clone(),
        p.label.clone(),
        p.parameter.to_string(),
        p.accuracy.to_string(),
        p.accuracy_ci.to_string(),
        p.cost.to_string(),
        p.cost_ci.to_string(),
        p.bitops.to_string(),
        p.evaluations.to_string(),
    ]
}

/// One row per operating point.
pub fn write_curves(points: &[OperatingPoint], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER)?;
    for p in points {
        w.write_record(curve_fields(p))?;
    }
    w.flush()?;
    Ok(())
}

/// Overall and per-path ECE per K.
pub fn write_ece_study(rows: &[EceStudyRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "path", "ece"])?;
    for r in rows {
        w.write_record([r.k.to_string(), "overall".into(), r.ece.overall.to_string()])?;
        for (p, e) in &r.ece.per_path {
            w.write_record([r.k.to_string(), p.key(), e.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ece_curves(rows: &[EceStudyRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k"];
    header.extend(CURVE_HEADER);
    w.write_record(&header)?;
    for r in rows {
        for p in &r.curve {
            let mut rec = vec![r.k.to_string()];
            rec.extend(curve_fields(p));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// RMSE per noise level (gate `0` is the overall value).
pub fn write_degradation_rmse(rows: &[DegradationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sigma", "gate", "rmse"])?;
    for r in rows {
        w.write_record([r.sigma.to_string(), "0".into(), r.rmse.overall.to_string()])?;
        for (g, v) in &r.rmse.per_gate {
            w.write_record([r.sigma.to_string(), g.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_degradation_curves(rows: &[DegradationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sigma"];
    header.extend(CURVE_HEADER);
    w.write_record(&header)?;
    for r in rows {
        for p in &r.curve {
            let mut rec = vec![r.sigma.to_string()];
            rec.extend(curve_fields(p));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A gnuplot script drawing accuracy against cost, one series per mode.
pub fn plot_script(curves_csv: &str, modes: &[&str]) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set key bottom right\nset xlabel 'normalized cost'\nset ylabel 'accuracy'\n");
    let series: Vec<String> = modes
        .iter()
        .map(|m| {
            format!(
                "'{curves_csv}' using (strcol(1) eq '{m}' ? $6 : 1/0):4 with linespoints title '{m}'"
            )
        })
        .collect();
    s.push_str("plot ");
    s.push_str(&series.join(", \\\n     "));
    s.push('\n');
    s
}
