use std::fmt::{self, Write as _};

use crate::error::Result;
use crate::svg::{line_chart, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    CodecSwap,
    Upscale,
    KvRetrofit,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::CodecSwap => "codec_swap",
            Experiment::Upscale => "upscale",
            Experiment::KvRetrofit => "kv_retrofit",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One side of a race.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    /// Training loss per step; entry `i` is step `i + 1`.
    pub losses: Vec<f64>,
    /// `(step, probe loss)`; step 0 is before any update.
    pub probes: Vec<(usize, f64)>,
    /// `None` when the threshold was never reached or not applicable.
    pub steps_to_threshold: Option<usize>,
    /// Step-0 divergence from the base model, one entry per probe batch.
    pub divergence: Vec<f64>,
}

impl Arm {
    pub fn probe_at(&self, step: usize) -> Option<f64> {
        self.probes.iter().find(|(s, _)| *s == step).map(|&(_, l)| l)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub arms: Vec<Arm>,
    pub pass: bool,
    pub note: String,
}

impl SeedOutcome {
    pub fn arm(&self, name: &str) -> Option<&Arm> {
        self.arms.iter().find(|a| a.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub detail: String,
    pub seeds: Vec<u64>,
    pub budget: usize,
    pub threshold: Option<f64>,
    /// Base model reference loss (converged training loss or probe loss).
    pub base_loss: Option<f64>,
    /// Pre-registered pass rule.
    pub criterion: String,
    pub outcomes: Vec<SeedOutcome>,
    pub passed: bool,
}

impl ExperimentReport {
    pub fn seeds_passed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.pass).count()
    }

    /// `experiment,seed,arm,step,train_loss,probe_loss`, one row per arm per
    /// step (step 0 carries only the probe loss).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(["experiment", "seed", "arm", "step", "train_loss", "probe_loss"]).map_err(csv_err)?;
        for o in &self.outcomes {
            for arm in &o.arms {
                let probe = |s: usize| arm.probe_at(s).map(|v| v.to_string()).unwrap_or_default();
                let seed = o.seed.to_string();
                w.write_record([self.experiment.as_str(), &seed, &arm.name, "0", "", &probe(0)]).map_err(csv_err)?;
                for (i, loss) in arm.losses.iter().enumerate() {
                    let step = i + 1;
                    w.write_record([self.experiment.as_str(), &seed, &arm.name, &step.to_string(), &loss.to_string(), &probe(step)])
                        .map_err(csv_err)?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment: {} ({})", self.experiment, self.detail);
        let _ = writeln!(s, "budget: {} steps; seeds: {:?}", self.budget, self.seeds);
        if let Some(t) = self.threshold {
            let _ = writeln!(s, "threshold: {t:.6}");
        }
        if let Some(b) = self.base_loss {
            let _ = writeln!(s, "base loss: {b:.6}");
        }
        let _ = writeln!(s, "rule: {} (toy-scale threshold, chosen before running)", self.criterion);
        for o in &self.outcomes {
            let _ = writeln!(s, "  seed {}: {} ({})", o.seed, if o.pass { "pass" } else { "fail" }, o.note);
        }
        let _ = writeln!(
            s,
            "verdict: {} ({} of {} seeds)",
            if self.passed { "PASS" } else { "FAIL" },
            self.seeds_passed(),
            self.outcomes.len()
        );
        s
    }

    /// Loss curves (trailing-window means) for every arm and seed.
    pub fn to_svg(&self, window: usize) -> String {
        let w = window.max(1);
        let series: Vec<Series> = self
            .outcomes
            .iter()
            .flat_map(|o| {
                o.arms.iter().map(move |a| Series {
                    name: format!("{} s{}", a.name, o.seed),
                    points: (w..=a.losses.len())
                        .map(|end| (end as f64, a.losses[end - w..end].iter().sum::<f64>() / w as f64))
                        .collect(),
                })
            })
            .collect();
        line_chart(&format!("{} ({})", self.experiment, self.detail), "step", "loss", &series, true)
    }
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}
