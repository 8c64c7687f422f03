//! Per-epoch weights for adaptive and self distillation.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub alpha_akd_initial: f64,
    pub alpha_skd_initial: f64,
    pub lambda: f64,
    pub warmup_epochs: i64,
    pub total_epochs: i64,
    pub tau: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            alpha_akd_initial: 1.0,
            alpha_skd_initial: 0.8,
            lambda: 0.5,
            warmup_epochs: 2,
            total_epochs: 10,
            tau: 2.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_akd_initial > 0.0 && self.alpha_akd_initial <= 1.0) {
            return Err(Error::config("alpha_akd_initial", "must lie in (0, 1]"));
        }
        if !(self.lambda > 0.0 && self.lambda < self.alpha_akd_initial) {
            return Err(Error::config(
                "lambda",
                format!(
                    "must satisfy 0 < lambda < alpha_akd_initial ({}), got {}",
                    self.alpha_akd_initial, self.lambda
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha_skd_initial) {
            return Err(Error::config("alpha_skd_initial", "must lie in [0, 1]"));
        }
        if self.warmup_epochs < 0 {
            return Err(Error::config("warmup_epochs", "must be >= 0"));
        }
        if self.total_epochs <= self.warmup_epochs {
            return Err(Error::config(
                "total_epochs",
                "must exceed warmup_epochs",
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Phase {
    Akd,
    Skd,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Akd => "AKD",
            Phase::Skd => "SKD",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch: i64,
    pub phase: Phase,
    pub alpha_akd: f64,
    pub alpha_skd: f64,
}

fn check_epoch(e: i64) -> Result<()> {
    if e < 0 {
        return Err(Error::invalid(format!("epoch must be >= 0, got {e}")));
    }
    Ok(())
}

/// Held at the initial value through warm-up, then decays by `1/E_t` per epoch.
pub fn alpha_akd_at(e: i64, cfg: &ScheduleConfig) -> Result<f64> {
    check_epoch(e)?;
    if e < cfg.warmup_epochs {
        return Ok(cfg.alpha_akd_initial);
    }
    let decay = (e - cfg.warmup_epochs) as f64 / cfg.total_epochs as f64;
    Ok((cfg.alpha_akd_initial - decay).max(0.0))
}

/// Grows linearly from zero, reaching the initial value at `e = E_t`.
pub fn alpha_skd_at(e: i64, cfg: &ScheduleConfig) -> Result<f64> {
    check_epoch(e)?;
    Ok((cfg.alpha_skd_initial * e as f64 / cfg.total_epochs as f64).min(1.0))
}

pub fn phase_at(e: i64, cfg: &ScheduleConfig) -> Result<Phase> {
    if e >= cfg.total_epochs {
        return Err(Error::invalid(format!(
            "epoch {e} is past the last epoch {}",
            cfg.total_epochs - 1
        )));
    }
    Ok(if alpha_akd_at(e, cfg)? > cfg.lambda {
        Phase::Akd
    } else {
        Phase::Skd
    })
}

pub fn plan_at(e: i64, cfg: &ScheduleConfig) -> Result<EpochPlan> {
    Ok(EpochPlan {
        epoch: e,
        phase: phase_at(e, cfg)?,
        alpha_akd: alpha_akd_at(e, cfg)?,
        alpha_skd: alpha_skd_at(e, cfg)?,
    })
}

pub fn trajectory(cfg: &ScheduleConfig) -> Result<Vec<EpochPlan>> {
    cfg.validate()?;
    (0..cfg.total_epochs).map(|e| plan_at(e, cfg)).collect()
}

/// Writes `epoch,phase,alpha_akd,alpha_skd` rows.
pub fn write_trajectory_csv<W: Write>(plans: &[EpochPlan], mut out: W) -> Result<()> {
    writeln!(out, "epoch,phase,alpha_akd,alpha_skd")?;
    for p in plans {
        writeln!(out, "{},{},{},{}", p.epoch, p.phase, p.alpha_akd, p.alpha_skd)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_values() {
        let c = ScheduleConfig::default();
        assert_eq!(alpha_akd_at(0, &c).unwrap(), 1.0);
        assert!((alpha_akd_at(7, &c).unwrap() - 0.5).abs() < 1e-12);
        assert!((alpha_akd_at(4, &c).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(alpha_skd_at(0, &c).unwrap(), 0.0);
        assert!((alpha_skd_at(10, &c).unwrap() - 0.8).abs() < 1e-12);
        assert!((alpha_skd_at(8, &c).unwrap() - 0.64).abs() < 1e-12);
        assert_eq!(phase_at(6, &c).unwrap(), Phase::Akd);
        assert_eq!(phase_at(7, &c).unwrap(), Phase::Skd);
        assert_eq!(phase_at(0, &c).unwrap(), Phase::Akd);
        assert!(phase_at(10, &c).is_err());
        assert!(alpha_akd_at(-1, &c).is_err());
        assert!(alpha_skd_at(-1, &c).is_err());
    }

    #[test]
    fn short_run_without_warmup() {
        let c = ScheduleConfig {
            warmup_epochs: 0,
            total_epochs: 2,
            ..Default::default()
        };
        let t = trajectory(&c).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].alpha_akd, 1.0);
        assert_eq!(t[0].phase, Phase::Akd);
        // 1 - (1 - 0)/2 lands exactly on the threshold.
        assert_eq!(t[1].alpha_akd, 0.5);
        assert_eq!(t[1].phase, Phase::Skd);
    }

    #[test]
    fn validation_names_field() {
        let c = ScheduleConfig {
            lambda: 1.0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "lambda"));
        let c = ScheduleConfig {
            warmup_epochs: 10,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ScheduleConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_trajectory_csv(&trajectory(&ScheduleConfig::default()).unwrap(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "epoch,phase,alpha_akd,alpha_skd");
        assert_eq!(lines.len(), 11);
        assert!(lines[1].starts_with("0,AKD,1,"));
        assert!(lines[8].starts_with("7,SKD,"));
    }

    fn configs() -> impl Strategy<Value = ScheduleConfig> {
        (0.05f64..=1.0, 0.0f64..=1.0, 0.01f64..0.99, 0i64..6, 1i64..20).prop_map(
            |(a, s, l, w, extra)| ScheduleConfig {
                alpha_akd_initial: a,
                alpha_skd_initial: s,
                lambda: l * a,
                warmup_epochs: w,
                total_epochs: w + extra,
                tau: 2.0,
            },
        )
    }

    proptest! {
        #[test]
        fn monotone_and_phase_ordered(c in configs()) {
            let t = trajectory(&c).unwrap();
            for w in t.windows(2) {
                prop_assert!(w[1].alpha_akd <= w[0].alpha_akd);
                prop_assert!(w[1].alpha_skd >= w[0].alpha_skd);
                prop_assert!(!(w[0].phase == Phase::Skd && w[1].phase == Phase::Akd));
            }
            for p in &t {
                prop_assert!((0.0..=1.0).contains(&p.alpha_akd));
                prop_assert!((0.0..=1.0).contains(&p.alpha_skd));
                prop_assert_eq!(p.phase == Phase::Akd, p.alpha_akd > c.lambda);
                if p.epoch < c.warmup_epochs {
                    prop_assert_eq!(p.alpha_akd, c.alpha_akd_initial);
                }
            }
            prop_assert_eq!(t[0].alpha_skd, 0.0);
        }
    }
}
