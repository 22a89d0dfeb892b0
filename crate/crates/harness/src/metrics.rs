//! Append-only training log. Everything in `metrics.csv` is a pure function
//! of config and seed; wall-clock time goes to a `timing.csv` sidecar.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{HarnessError, Result};

pub const HEADER: &str = "event,epoch,step,lr,loss,train_acc,test_acc,test_loss";
pub const TIMING_HEADER: &str = "epoch,seconds";

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f32,
    },
    Epoch {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
        train_acc: f64,
        test_acc: f64,
        test_loss: f64,
    },
}

impl Event {
    pub fn to_row(&self) -> String {
        match self {
            Event::Step { epoch, step, lr, loss } => format!("step,{epoch},{step},{lr},{loss},,,"),
            Event::Epoch {
                epoch,
                step,
                lr,
                loss,
                train_acc,
                test_acc,
                test_loss,
            } => format!("epoch,{epoch},{step},{lr},{loss},{train_acc},{test_acc},{test_loss}"),
        }
    }
}

/// Streams rows to disk as they happen and keeps them in memory.
pub struct MetricsLog {
    events: Vec<Event>,
    file: Option<std::fs::File>,
    timing: Option<std::fs::File>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self {
            events: Vec::new(),
            file: None,
            timing: None,
        }
    }

    pub fn create(dir: &Path) -> Result<Self> {
        let open = |name: &str, header: &str| -> Result<std::fs::File> {
            let path = dir.join(name);
            let mut f = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
            writeln!(f, "{header}").map_err(|e| HarnessError::io(&path, e))?;
            Ok(f)
        };
        Ok(Self {
            events: Vec::new(),
            file: Some(open("metrics.csv", HEADER)?),
            timing: Some(open("timing.csv", TIMING_HEADER)?),
        })
    }

    pub fn push(&mut self, event: Event) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", event.to_row()).map_err(|e| HarnessError::io(Path::new("metrics.csv"), e))?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn record_time(&mut self, epoch: usize, seconds: f64) -> Result<()> {
        if let Some(f) = &mut self.timing {
            writeln!(f, "{epoch},{seconds:.3}").map_err(|e| HarnessError::io(Path::new("timing.csv"), e))?;
        }
        Ok(())
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for e in &self.events {
            let _ = writeln!(s, "{}", e.to_row());
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsSummary {
    pub steps: usize,
    pub epochs: usize,
    pub first_loss: f32,
    pub last_loss: f32,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    /// 1-based epoch of the first occurrence of the best accuracy.
    pub best_epoch: usize,
}

/// Parses a metrics CSV back into events, checking the schema.
pub fn parse_csv(text: &str) -> Result<Vec<Event>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(HarnessError::Invalid("metrics header mismatch".into()));
    }
    let bad = |i: usize, what: &str| HarnessError::Invalid(format!("metrics line {}: {what}", i + 2));
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(i, "expected 8 fields"));
            }
            let u = |s: &str| s.parse::<usize>().map_err(|_| bad(i, "bad integer"));
            let x = |s: &str| s.parse::<f64>().map_err(|_| bad(i, "bad number"));
            match f[0] {
                "step" => Ok(Event::Step {
                    epoch: u(f[1])?,
                    step: u(f[2])?,
                    lr: x(f[3])?,
                    loss: f[4].parse().map_err(|_| bad(i, "bad loss"))?,
                }),
                "epoch" => Ok(Event::Epoch {
                    epoch: u(f[1])?,
                    step: u(f[2])?,
                    lr: x(f[3])?,
                    loss: x(f[4])?,
                    train_acc: x(f[5])?,
                    test_acc: x(f[6])?,
                    test_loss: x(f[7])?,
                }),
                _ => Err(bad(i, "unknown event")),
            }
        })
        .collect()
}

pub fn summarize(events: &[Event]) -> Result<MetricsSummary> {
    let losses: Vec<f32> = events
        .iter()
        .filter_map(|e| match e {
            Event::Step { loss, .. } => Some(*loss),
            _ => None,
        })
        .collect();
    let accs: Vec<f64> = events
        .iter()
        .filter_map(|e| match e {
            Event::Epoch { test_acc, .. } => Some(*test_acc),
            _ => None,
        })
        .collect();
    if losses.is_empty() || accs.is_empty() {
        return Err(HarnessError::Invalid("metrics contain no completed epoch".into()));
    }
    let (best_epoch, best) = accs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    Ok(MetricsSummary {
        steps: losses.len(),
        epochs: accs.len(),
        first_loss: losses[0],
        last_loss: *losses.last().expect("non-empty"),
        final_test_acc: *accs.last().expect("non-empty"),
        best_test_acc: best,
        best_epoch: best_epoch + 1,
    })
}

pub fn summarize_file(path: &Path) -> Result<MetricsSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    summarize(&parse_csv(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_parse_back() {
        let mut log = MetricsLog::in_memory();
        log.push(Event::Step {
            epoch: 1,
            step: 1,
            lr: 0.05,
            loss: 1.386_294_4,
        })
        .unwrap();
        log.push(Event::Epoch {
            epoch: 1,
            step: 1,
            lr: 0.05,
            loss: 1.25,
            train_acc: 0.5,
            test_acc: 0.375,
            test_loss: 1.3,
        })
        .unwrap();
        let parsed = parse_csv(&log.to_csv()).unwrap();
        assert_eq!(parsed, log.events());
        let s = summarize(&parsed).unwrap();
        assert_eq!((s.steps, s.epochs, s.best_epoch), (1, 1, 1));
        assert_eq!(s.best_test_acc, 0.375);
        assert!(parse_csv("bogus\n").is_err());
    }
}
