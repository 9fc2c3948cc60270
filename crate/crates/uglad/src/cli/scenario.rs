//! Benchmark scenario files: a simple `key = value` text format, one pair
//! per line, `#` comments. Lists are comma-separated.
//!
//! ```text
//! # Gaussian sweep
//! methods = uglad-cv, baseline-cv
//! d = 25
//! p = 0.1
//! m = 10, 25, 50
//! dropout = 0
//! n_graphs = 20
//! seed = 42
//! # multitask scenarios add:
//! # tasks = 10
//! # p_min = 0.05
//! # p_max = 0.2
//! ```

use super::CliError;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    UgladDirect,
    UgladCv,
    UgladMissing,
    UgladMultitask,
    BaselineCv,
    BaselineMeanImpute,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::UgladDirect,
        Method::UgladCv,
        Method::UgladMissing,
        Method::UgladMultitask,
        Method::BaselineCv,
        Method::BaselineMeanImpute,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::UgladDirect => "uglad-direct",
            Method::UgladCv => "uglad-cv",
            Method::UgladMissing => "uglad-missing",
            Method::UgladMultitask => "uglad-multitask",
            Method::BaselineCv => "baseline-cv",
            Method::BaselineMeanImpute => "baseline-mean-impute",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| {
                format!(
                    "unknown method '{s}'; expected one of {}",
                    Method::ALL.map(|m| m.name()).join(", ")
                )
            })
    }
}

/// Parsed benchmark grid.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub methods: Vec<Method>,
    pub d: usize,
    /// Edge probability (single-task scenarios).
    pub p: f64,
    pub m_list: Vec<usize>,
    pub dropout_list: Vec<f64>,
    pub n_graphs: usize,
    pub seed: u64,
    /// Task count per replicate; above 1 the scenario is multitask and task
    /// sparsities are drawn uniformly from `p_range`.
    pub tasks: usize,
    pub p_range: (f64, f64),
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::InvalidArgument(msg));
        if self.methods.is_empty() {
            return bad("scenario lists no methods".into());
        }
        if self.d < 2 {
            return bad("d must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p must be in [0, 1], got {}", self.p));
        }
        if self.m_list.is_empty() || self.m_list.iter().any(|&m| m < 4) {
            return bad("m must list sample sizes of at least 4".into());
        }
        if self.dropout_list.is_empty()
            || self.dropout_list.iter().any(|&f| !(0.0..1.0).contains(&f))
        {
            return bad("dropout fractions must be in [0, 1)".into());
        }
        if self.n_graphs == 0 {
            return bad("n_graphs must be at least 1".into());
        }
        if self.tasks == 0 {
            return bad("tasks must be at least 1".into());
        }
        if self.tasks > 1 {
            let (lo, hi) = self.p_range;
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return bad(format!("invalid sparsity range [{lo}, {hi}]"));
            }
        }
        if self.methods.contains(&Method::UgladMultitask) && self.tasks < 2 {
            return bad("uglad-multitask needs tasks >= 2".into());
        }
        Ok(())
    }
}

pub fn parse_scenario_file(path: &Path) -> Result<ScenarioSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path.display().to_string()))?;
    parse_scenario(&text, &path.display().to_string())
}

pub fn parse_scenario(text: &str, path: &str) -> Result<ScenarioSpec, CliError> {
    let mut methods = None;
    let mut d = None;
    let mut p = None;
    let mut m_list = None;
    let mut dropout_list = None;
    let mut n_graphs = None;
    let mut seed = None;
    let mut tasks = 1usize;
    let mut p_min = None;
    let mut p_max = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Parse {
                path: path.to_string(),
                line: line_no,
                message: format!("expected 'key = value', got '{line}'"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        let err = |message: String| CliError::Parse {
            path: path.to_string(),
            line: line_no,
            message,
        };
        match key {
            "methods" => {
                let parsed: Result<Vec<Method>, String> =
                    value.split(',').map(|s| s.trim().parse()).collect();
                methods = Some(parsed.map_err(err)?);
            }
            "d" => d = Some(value.parse::<usize>().map_err(|e| err(e.to_string()))?),
            "p" => p = Some(value.parse::<f64>().map_err(|e| err(e.to_string()))?),
            "m" => {
                let parsed: Result<Vec<usize>, _> =
                    value.split(',').map(|s| s.trim().parse::<usize>()).collect();
                m_list = Some(parsed.map_err(|e| err(e.to_string()))?);
            }
            "dropout" => {
                let parsed: Result<Vec<f64>, _> =
                    value.split(',').map(|s| s.trim().parse::<f64>()).collect();
                dropout_list = Some(parsed.map_err(|e| err(e.to_string()))?);
            }
            "n_graphs" => {
                n_graphs = Some(value.parse::<usize>().map_err(|e| err(e.to_string()))?)
            }
            "seed" => seed = Some(value.parse::<u64>().map_err(|e| err(e.to_string()))?),
            "tasks" => tasks = value.parse::<usize>().map_err(|e| err(e.to_string()))?,
            "p_min" => p_min = Some(value.parse::<f64>().map_err(|e| err(e.to_string()))?),
            "p_max" => p_max = Some(value.parse::<f64>().map_err(|e| err(e.to_string()))?),
            other => {
                return Err(err(format!("unknown key '{other}'")));
            }
        }
    }

    let missing = |name: &str| CliError::InvalidArgument(format!("scenario is missing '{name}'"));
    let spec = ScenarioSpec {
        methods: methods.ok_or_else(|| missing("methods"))?,
        d: d.ok_or_else(|| missing("d"))?,
        p: p.unwrap_or(0.1),
        m_list: m_list.ok_or_else(|| missing("m"))?,
        dropout_list: dropout_list.unwrap_or_else(|| vec![0.0]),
        n_graphs: n_graphs.ok_or_else(|| missing("n_graphs"))?,
        seed: seed.unwrap_or(0),
        tasks,
        p_range: (p_min.unwrap_or(0.05), p_max.unwrap_or(0.2)),
    };
    spec.validate()?;
    Ok(spec)
}
