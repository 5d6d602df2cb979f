//! Machine-readable run reports: per-check records with measured values and
//! tolerances, plus the environment and configuration fingerprint every
//! artifact carries.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Reported value without a pass/fail semantic; never gates the run.
    Info,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub status: CheckStatus,
    pub measured: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
    pub runtime_s: f64,
    pub detail: String,
}

impl CheckRecord {
    pub fn passed(&self) -> bool {
        self.status != CheckStatus::Fail
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvironmentInfo {
    pub os: String,
    pub arch: String,
    pub crate_version: String,
}

impl EnvironmentInfo {
    pub fn current() -> Self {
        EnvironmentInfo {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub fingerprint: String,
    pub master_seed: u64,
    pub level: String,
    pub environment: EnvironmentInfo,
    pub checks: Vec<CheckRecord>,
}

impl RunReport {
    pub fn new(fingerprint: &str, master_seed: u64, level: &str) -> Self {
        RunReport {
            schema_version: 1,
            fingerprint: fingerprint.to_string(),
            master_seed,
            level: level.to_string(),
            environment: EnvironmentInfo::current(),
            checks: Vec::new(),
        }
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckRecord::passed)
    }

    /// Fixed-width table view; one row per check, same status wording as the
    /// JSON form.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<34} {:>6} {:>13} {:>13} {:>11} {:>9}\n",
            "check", "status", "measured", "tolerance", "stderr", "time[s]"
        ));
        for c in &self.checks {
            let status = match c.status {
                CheckStatus::Pass => "PASS",
                CheckStatus::Fail => "FAIL",
                CheckStatus::Info => "INFO",
            };
            let tol = c
                .tolerance
                .map(|t| format!("{t:>13.4e}"))
                .unwrap_or_else(|| format!("{:>13}", "-"));
            let se = c
                .stderr
                .map(|s| format!("{s:>11.3e}"))
                .unwrap_or_else(|| format!("{:>11}", "-"));
            out.push_str(&format!(
                "{:<34} {:>6} {:>13.4e} {} {} {:>9.2}\n",
                c.name, status, c.measured, tol, se, c.runtime_s
            ));
        }
        out
    }
}

/// Time a check body and attach the elapsed wall seconds to its record.
pub fn timed<F: FnOnce() -> CheckRecord>(body: F) -> CheckRecord {
    let start = std::time::Instant::now();
    let mut record = body();
    record.runtime_s = start.elapsed().as_secs_f64();
    record
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_and_table_views_agree_on_status() {
        let mut report = RunReport::new("fp", 1, "fast");
        report.checks.push(CheckRecord {
            name: "alpha".into(),
            status: CheckStatus::Pass,
            measured: 1.0,
            tolerance: Some(2.0),
            stderr: None,
            runtime_s: 0.1,
            detail: String::new(),
        });
        report.checks.push(CheckRecord {
            name: "beta".into(),
            status: CheckStatus::Fail,
            measured: 3.0,
            tolerance: Some(2.0),
            stderr: Some(0.5),
            runtime_s: 0.2,
            detail: "over".into(),
        });
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["checks"][0]["status"], "PASS");
        assert_eq!(json["checks"][1]["status"], "FAIL");
        let table = report.table();
        assert!(table.contains("alpha") && table.contains("PASS"));
        assert!(table.contains("beta") && table.contains("FAIL"));
        assert!(!report.all_passed());
    }

    #[test]
    fn info_records_do_not_gate() {
        let mut report = RunReport::new("fp", 1, "full");
        report.checks.push(CheckRecord {
            name: "diag".into(),
            status: CheckStatus::Info,
            measured: 5.0,
            tolerance: None,
            stderr: None,
            runtime_s: 0.0,
            detail: String::new(),
        });
        assert!(report.all_passed());
    }
}
