use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::schedule::Phase;

/// One row of the metrics table, emitted every evaluation interval.
///
/// Losses are means over the steps since the previous record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub phase: Option<Phase>,
    pub loss: f64,
    pub task_loss: f64,
    pub kd_loss: f64,
    pub lambda: f64,
    pub trainable_fraction: f64,
    pub overlap: f64,
    pub general_accuracy: f64,
    pub domain_accuracy: BTreeMap<usize, f64>,
}

impl MetricsRecord {
    pub fn csv_header(domains: &[usize]) -> String {
        let mut h = String::from("step,phase,loss,task_loss,kd_loss,lambda,trainable_fraction,overlap,general_acc");
        for d in domains {
            h.push_str(&format!(",acc_d{d}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let phase = self.phase.map_or_else(|| "-".to_string(), |p| p.to_string());
        let mut r = format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            phase,
            self.loss,
            self.task_loss,
            self.kd_loss,
            self.lambda,
            self.trainable_fraction,
            self.overlap,
            self.general_accuracy
        );
        for a in self.domain_accuracy.values() {
            r.push_str(&format!(",{a}"));
        }
        r
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let domains: Vec<usize> = records
        .first()
        .map(|r| r.domain_accuracy.keys().copied().collect())
        .unwrap_or_default();
    let mut out = MetricsRecord::csv_header(&domains);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Parses a table written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Load("empty metrics file".into()))?.split(',').collect();
    if header.len() < 9 || header[0] != "step" {
        return Err(Error::Load("not a metrics table".into()));
    }
    let domains: Vec<usize> = header[9..]
        .iter()
        .map(|h| {
            h.strip_prefix("acc_d")
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| Error::Load(format!("bad column {h}")))
        })
        .collect::<Result<_>>()?;
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Load(format!("bad number {s:?}: {e}")));
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(Error::Load(format!("row has {} fields, header {}", f.len(), header.len())));
        }
        let phase = match f[1] {
            "warmup" => Some(Phase::WarmUp),
            "stabilization" => Some(Phase::Stabilization),
            "consolidation" => Some(Phase::Consolidation),
            _ => None,
        };
        out.push(MetricsRecord {
            step: f[0].parse().map_err(|e| Error::Load(format!("bad step: {e}")))?,
            phase,
            loss: num(f[2])?,
            task_loss: num(f[3])?,
            kd_loss: num(f[4])?,
            lambda: num(f[5])?,
            trainable_fraction: num(f[6])?,
            overlap: num(f[7])?,
            general_accuracy: num(f[8])?,
            domain_accuracy: domains
                .iter()
                .zip(&f[9..])
                .map(|(&d, v)| Ok((d, num(v)?)))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Phase {
        step: usize,
        phase: Phase,
        trainable_parameters: usize,
    },
    Duplication {
        step: usize,
        layer: usize,
        source: usize,
        copy: Option<usize>,
        domain: usize,
    },
    Warning {
        step: usize,
        message: String,
    },
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Phase {
                step,
                phase,
                trainable_parameters,
            } => write!(f, "step={step} event=phase phase={phase} trainable_parameters={trainable_parameters}"),
            Event::Duplication {
                step,
                layer,
                source,
                copy: Some(c),
                domain,
            } => write!(f, "step={step} event=duplicate layer={layer} source={source} copy={c} domain={domain}"),
            Event::Duplication {
                step,
                layer,
                source,
                copy: None,
                domain,
            } => write!(
                f,
                "step={step} event=duplicate_skipped layer={layer} source={source} domain={domain}"
            ),
            Event::Warning { step, message } => write!(f, "step={step} event=warning message={message:?}"),
        }
    }
}

/// Change in held-out scores between two evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    /// `after − before` per held-out suite.
    pub deltas: BTreeMap<String, f64>,
    /// Mean of `after / before` over suites with a nonzero baseline.
    pub retention: f64,
}

pub fn forgetting_report(
    before: &BTreeMap<String, f64>,
    after: &BTreeMap<String, f64>,
    held_out: &[String],
) -> Result<ForgettingReport> {
    if held_out.is_empty() {
        return Err(arg_err!("no held-out suites"));
    }
    let mut deltas = BTreeMap::new();
    let mut ratios = Vec::new();
    for name in held_out {
        let (Some(&b), Some(&a)) = (before.get(name), after.get(name)) else {
            return Err(arg_err!("suite {name:?} missing from one side of the comparison"));
        };
        deltas.insert(name.clone(), a - b);
        if b > 0.0 {
            ratios.push(a / b);
        }
    }
    if ratios.is_empty() {
        return Err(arg_err!("every held-out baseline is zero; retention is undefined"));
    }
    Ok(ForgettingReport {
        deltas,
        retention: ratios.iter().sum::<f64>() / ratios.len() as f64,
    })
}
