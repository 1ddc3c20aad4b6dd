//! Acceptance checks and the naive oracles they compare against.

pub mod grad;
pub mod oracles;
pub mod overfit;
pub mod suites;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::network::Model;
use overfit::{run_overfit, OverfitConfig, OverfitReport};

/// Outcome of one property.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Grad,
    Oracle,
    Shape,
    Overfit,
    TrackSynth,
    Strategy,
    Metrics,
    Persistence,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Grad,
        Suite::Oracle,
        Suite::Shape,
        Suite::Overfit,
        Suite::TrackSynth,
        Suite::Strategy,
        Suite::Metrics,
        Suite::Persistence,
    ];

    /// Suites named by a command-line selector; `all` expands to every suite.
    pub fn select(name: &str) -> Result<Vec<Suite>> {
        if name == "all" {
            Ok(Self::ALL.to_vec())
        } else {
            Ok(vec![name.parse()?])
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Grad => "grad",
            Self::Oracle => "oracle",
            Self::Shape => "shape",
            Self::Overfit => "overfit",
            Self::TrackSynth => "track-synth",
            Self::Strategy => "strategy",
            Self::Metrics => "metrics",
            Self::Persistence => "persistence",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

/// Time limits of the long-running suites, in seconds.
pub const GRAD_BUDGET: f64 = 120.0;
pub const OVERFIT_BUDGET: f64 = 600.0;

/// Runs suites, training the overfit model at most once and reusing it for
/// the tracking checks.
pub struct Verifier {
    pub seed: u64,
    pub overfit: OverfitConfig,
    /// Distractor sequences compared in the tracking suite.
    pub track_seeds: usize,
    trained: Option<OverfitReport>,
}

impl Verifier {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            overfit: OverfitConfig {
                seed,
                ..Default::default()
            },
            track_seeds: 10,
            trained: None,
        }
    }

    fn trained(&mut self) -> Result<&OverfitReport> {
        if self.trained.is_none() {
            self.trained = Some(run_overfit(&self.overfit, |step, loss| {
                if step % 50 == 0 {
                    log::info!("overfit step {step}: loss {:.4}", loss.total);
                }
            })?);
        }
        Ok(self.trained.as_ref().expect("just trained"))
    }

    /// The overfit-trained model, training it on first use.
    pub fn model(&mut self) -> Result<&Model<f32>> {
        Ok(&self.trained()?.model)
    }

    pub fn run(&mut self, suite: Suite) -> Result<SuiteReport> {
        let t0 = Instant::now();
        let mut checks = match suite {
            Suite::Grad => grad::grad_suite(self.seed)?,
            Suite::Oracle => suites::oracle_suite(self.seed)?,
            Suite::Shape => suites::shape_suite()?,
            Suite::Overfit => suites::overfit_checks(self.trained()?, OVERFIT_BUDGET),
            Suite::TrackSynth => {
                let seeds = self.track_seeds;
                suites::track_synth_checks(self.model()?, seeds)?
            }
            Suite::Strategy => suites::strategy_suite(self.seed)?,
            Suite::Metrics => suites::metrics_suite()?,
            Suite::Persistence => suites::persistence_suite(self.seed)?,
        };
        let seconds = t0.elapsed().as_secs_f64();
        if suite == Suite::Grad {
            checks.push(Check::new(
                "runtime",
                seconds < GRAD_BUDGET,
                format!("{seconds:.0} s (< {GRAD_BUDGET:.0} s)"),
            ));
        }
        Ok(SuiteReport { suite, checks, seconds })
    }
}

/// Plain-text pass/fail table.
pub fn format_table(reports: &[SuiteReport]) -> String {
    let width = reports
        .iter()
        .flat_map(|r| r.checks.iter().map(|c| c.name.len()))
        .max()
        .unwrap_or(0);
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!("[{}] {:.1} s\n", r.suite, r.seconds));
        for c in &r.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!("  {mark}  {:<width$}  {}\n", c.name, c.detail));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert_eq!(Suite::select("all").unwrap().len(), 8);
        assert_eq!(Suite::select("grad").unwrap(), vec![Suite::Grad]);
        assert!(matches!(Suite::select("everything"), Err(Error::Config(_))));
    }

    #[test]
    fn quick_suites_pass() {
        let mut v = Verifier::new(0);
        for s in [Suite::Oracle, Suite::Shape, Suite::Metrics] {
            let r = v.run(s).unwrap();
            assert!(r.passed(), "{}", format_table(&[r]));
        }
    }

    #[test]
    fn table_marks_failures() {
        let r = SuiteReport {
            suite: Suite::Metrics,
            checks: vec![Check::new("a", true, "ok"), Check::new("bb", false, "off by one")],
            seconds: 0.0,
        };
        let t = format_table(&[r]);
        assert!(t.contains("PASS  a ") && t.contains("FAIL  bb  off by one"));
    }
}
