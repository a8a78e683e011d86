//! Domain types and the experiment plan: treatments, agents, blocks, group
//! labels, and measurement logs.
//!
//! Measurement logs use a line-delimited JSON schema (one [`AgentLog`] per
//! line); plans are flat `key = value` text files. Both formats round-trip
//! byte-identically through this module.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which treatment arm an agent belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Group {
    Control = 0,
    Experimental = 1,
}

impl Group {
    pub fn flipped(self) -> Group {
        match self {
            Group::Control => Group::Experimental,
            Group::Experimental => Group::Control,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Control => write!(f, "control"),
            Group::Experimental => write!(f, "experimental"),
        }
    }
}

/// One scripted step of a treatment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    /// Visit every URL in the list file at `path` (one URL per line).
    VisitUrlList { path: PathBuf },
    /// Set a key on the SUT's settings page, e.g. `gender = female`.
    SetSetting { key: String, value: String },
    /// Remove every listed interest whose name contains `keyword`.
    RemoveInterest { keyword: String },
    /// Opt out of personalization.
    OptOut,
    /// Do nothing; the building block of the null treatment.
    Idle,
}

impl Action {
    /// Parse the flat plan-file syntax: `visit:PATH`, `set:KEY=VALUE`,
    /// `remove_interest:KEYWORD`, `opt_out`, `idle`.
    pub fn parse(text: &str) -> Result<Action, PlanParseError> {
        let text = text.trim();
        if let Some(path) = text.strip_prefix("visit:") {
            return Ok(Action::VisitUrlList {
                path: PathBuf::from(path.trim()),
            });
        }
        if let Some(kv) = text.strip_prefix("set:") {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| PlanParseError::BadAction(text.to_string()))?;
            return Ok(Action::SetSetting {
                key: key.trim().to_string(),
                value: value.trim().to_string(),
            });
        }
        if let Some(kw) = text.strip_prefix("remove_interest:") {
            return Ok(Action::RemoveInterest {
                keyword: kw.trim().to_string(),
            });
        }
        match text {
            "opt_out" => Ok(Action::OptOut),
            "idle" => Ok(Action::Idle),
            _ => Err(PlanParseError::BadAction(text.to_string())),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::VisitUrlList { path } => write!(f, "visit:{}", path.display()),
            Action::SetSetting { key, value } => write!(f, "set:{key}={value}"),
            Action::RemoveInterest { keyword } => write!(f, "remove_interest:{keyword}"),
            Action::OptOut => write!(f, "opt_out"),
            Action::Idle => write!(f, "idle"),
        }
    }
}

/// A named, ordered list of actions applied to one arm of the experiment.
/// An empty action list is the null treatment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Treatment {
    pub name: String,
    pub actions: Vec<Action>,
}

impl Treatment {
    pub fn null(name: impl Into<String>) -> Treatment {
        Treatment {
            name: name.into(),
            actions: Vec::new(),
        }
    }
}

/// The full description of one two-arm block-randomized experiment.
///
/// `treatments[0]` is the control arm, `treatments[1]` the experimental arm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub id: String,
    pub treatments: [Treatment; 2],
    /// Number of blocks, k.
    pub block_count: u32,
    /// Agents per block, m. Must be even; each block gets m/2 per arm.
    pub block_size: u32,
    /// Site the agents collect ads from.
    pub collect_site: String,
    /// Page reloads per agent during collection.
    pub reloads: u32,
    /// Wait between reloads; recorded for real SUTs, ignored by the simulator.
    pub reload_wait_ms: u64,
    pub seed: u64,
    /// Pre-registered keyword list for keyword-count analyses.
    pub keywords: Vec<String>,
}

pub const DEFAULT_BLOCK_SIZE: u32 = 10;
pub const DEFAULT_RELOADS: u32 = 10;
pub const DEFAULT_RELOAD_WAIT_MS: u64 = 5000;

impl ExperimentPlan {
    pub fn control(&self) -> &Treatment {
        &self.treatments[0]
    }

    pub fn experimental(&self) -> &Treatment {
        &self.treatments[1]
    }

    pub fn treatment_for(&self, group: Group) -> &Treatment {
        match group {
            Group::Control => self.control(),
            Group::Experimental => self.experimental(),
        }
    }

    pub fn agents_total(&self) -> u64 {
        self.block_count as u64 * self.block_size as u64
    }
}

/// One validation finding; `field` names the offending plan field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    fn new(field: &str, message: impl Into<String>) -> Diagnostic {
        Diagnostic {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

/// Check every plan invariant. Returns an empty list iff the plan is valid;
/// diagnostics, not failures, so callers can report all problems at once.
pub fn validate_plan(plan: &ExperimentPlan) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if plan.id.is_empty() {
        out.push(Diagnostic::new("id", "id must be nonempty"));
    }
    for (i, t) in plan.treatments.iter().enumerate() {
        if t.name.is_empty() {
            out.push(Diagnostic::new(
                if i == 0 { "control.name" } else { "experimental.name" },
                "treatment name must be nonempty",
            ));
        }
    }
    if !plan.treatments[0].name.is_empty() && plan.treatments[0].name == plan.treatments[1].name {
        out.push(Diagnostic::new(
            "experimental.name",
            format!("treatment names must be unique: {:?}", plan.treatments[0].name),
        ));
    }
    if plan.block_count == 0 {
        out.push(Diagnostic::new("block_count", "block_count must be at least 1"));
    }
    if plan.block_size == 0 {
        out.push(Diagnostic::new("block_size", "block_size must be positive"));
    } else if !plan.block_size.is_multiple_of(2) {
        out.push(Diagnostic::new("block_size", "block_size must be even"));
    }
    if plan.reloads == 0 {
        out.push(Diagnostic::new("reloads", "reloads must be positive"));
    }
    if plan.collect_site.is_empty() {
        out.push(Diagnostic::new("collect_site", "collect_site must be nonempty"));
    }
    for t in &plan.treatments {
        for action in &t.actions {
            if let Action::VisitUrlList { path } = action {
                if fs::metadata(path).map(|m| m.is_file()).unwrap_or(false) {
                    if fs::File::open(path).is_err() {
                        out.push(Diagnostic::new(
                            "actions",
                            format!("file not readable: {}", path.display()),
                        ));
                    }
                } else {
                    out.push(Diagnostic::new(
                        "actions",
                        format!("file not found: {}", path.display()),
                    ));
                }
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum PlanParseError {
    #[error("io error reading plan: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value for {key}: {message}")]
    BadValue {
        line: usize,
        key: String,
        message: String,
    },
    #[error("unparsable action {0:?}")]
    BadAction(String),
    #[error("missing required key {0:?}")]
    MissingKey(&'static str),
}

/// Parse the flat key/value plan format. Lines are `key = value`; `#` starts
/// a comment; `control.action` and `experimental.action` repeat, in order.
pub fn parse_plan(text: &str) -> Result<ExperimentPlan, PlanParseError> {
    let mut id = None;
    let mut block_count = None;
    let mut block_size = None;
    let mut collect_site = None;
    let mut reloads = None;
    let mut reload_wait_ms = None;
    let mut seed = None;
    let mut keywords = Vec::new();
    let mut control_name = None;
    let mut experimental_name = None;
    let mut control_actions = Vec::new();
    let mut experimental_actions = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| PlanParseError::BadLine {
            line: line_no,
            text: line.to_string(),
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |message: String| PlanParseError::BadValue {
            line: line_no,
            key: key.to_string(),
            message,
        };
        match key {
            "id" => id = Some(value.to_string()),
            "block_count" => {
                block_count = Some(value.parse::<u32>().map_err(|e| bad(e.to_string()))?)
            }
            "block_size" => {
                block_size = Some(value.parse::<u32>().map_err(|e| bad(e.to_string()))?)
            }
            "collect_site" => collect_site = Some(value.to_string()),
            "reloads" => reloads = Some(value.parse::<u32>().map_err(|e| bad(e.to_string()))?),
            "reload_wait_ms" => {
                reload_wait_ms = Some(value.parse::<u64>().map_err(|e| bad(e.to_string()))?)
            }
            "seed" => seed = Some(value.parse::<u64>().map_err(|e| bad(e.to_string()))?),
            "keywords" => {
                keywords = value
                    .split(',')
                    .map(|k| k.trim().to_lowercase())
                    .filter(|k| !k.is_empty())
                    .collect();
            }
            "control.name" => control_name = Some(value.to_string()),
            "experimental.name" => experimental_name = Some(value.to_string()),
            "control.action" => {
                control_actions.push(Action::parse(value).map_err(|e| bad(e.to_string()))?)
            }
            "experimental.action" => {
                experimental_actions.push(Action::parse(value).map_err(|e| bad(e.to_string()))?)
            }
            _ => {
                return Err(PlanParseError::UnknownKey {
                    line: line_no,
                    key: key.to_string(),
                })
            }
        }
    }

    Ok(ExperimentPlan {
        id: id.ok_or(PlanParseError::MissingKey("id"))?,
        treatments: [
            Treatment {
                name: control_name.ok_or(PlanParseError::MissingKey("control.name"))?,
                actions: control_actions,
            },
            Treatment {
                name: experimental_name.ok_or(PlanParseError::MissingKey("experimental.name"))?,
                actions: experimental_actions,
            },
        ],
        block_count: block_count.ok_or(PlanParseError::MissingKey("block_count"))?,
        block_size: block_size.unwrap_or(DEFAULT_BLOCK_SIZE),
        collect_site: collect_site.ok_or(PlanParseError::MissingKey("collect_site"))?,
        reloads: reloads.unwrap_or(DEFAULT_RELOADS),
        reload_wait_ms: reload_wait_ms.unwrap_or(DEFAULT_RELOAD_WAIT_MS),
        seed: seed.unwrap_or(0),
        keywords,
    })
}

pub fn load_plan(path: &Path) -> Result<ExperimentPlan, PlanParseError> {
    parse_plan(&fs::read_to_string(path)?)
}

impl fmt::Display for ExperimentPlan {
    /// The normalized plan-file rendering; `parse_plan` round-trips it.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "id = {}", self.id)?;
        writeln!(f, "block_count = {}", self.block_count)?;
        writeln!(f, "block_size = {}", self.block_size)?;
        writeln!(f, "collect_site = {}", self.collect_site)?;
        writeln!(f, "reloads = {}", self.reloads)?;
        writeln!(f, "reload_wait_ms = {}", self.reload_wait_ms)?;
        writeln!(f, "seed = {}", self.seed)?;
        if !self.keywords.is_empty() {
            writeln!(f, "keywords = {}", self.keywords.join(", "))?;
        }
        writeln!(f, "control.name = {}", self.treatments[0].name)?;
        for a in &self.treatments[0].actions {
            writeln!(f, "control.action = {a}")?;
        }
        writeln!(f, "experimental.name = {}", self.treatments[1].name)?;
        for a in &self.treatments[1].actions {
            writeln!(f, "experimental.action = {a}")?;
        }
        Ok(())
    }
}

/// One observed ad: whatever was displayed in the title and URL positions,
/// plus body text and where it appeared. Either of title and url may be
/// empty (some ads show placeholder text in the URL position), but not both.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdRecord {
    pub title: String,
    pub url: String,
    pub text: String,
    /// 0-based reload the ad was seen on.
    pub reload: u32,
    /// 0-based slot position within the reload.
    pub slot: u32,
}

/// All measurements for one agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentLog {
    pub experiment_id: String,
    pub block_id: u32,
    /// 0-based position within the block.
    pub agent_id: u32,
    pub group: Group,
    pub ads: Vec<AdRecord>,
    pub settings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum LogLoadError {
    #[error("io error reading logs: {0}")]
    Io(#[from] std::io::Error),
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("duplicate (block_id, agent_id) = ({block_id}, {agent_id})")]
    DuplicateAgent { block_id: u32, agent_id: u32 },
}

fn check_log_record(log: &AgentLog) -> Result<(), String> {
    for ad in &log.ads {
        if ad.title.is_empty() && ad.url.is_empty() {
            return Err("ad record has both title and url empty".to_string());
        }
    }
    let mut seen = BTreeSet::new();
    for s in &log.settings {
        if !seen.insert(s) {
            return Err(format!("duplicate setting {s:?}"));
        }
    }
    Ok(())
}

/// Parse one JSONL measurement file.
pub fn parse_logs(name: &str, text: &str) -> Result<Vec<AgentLog>, LogLoadError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let log: AgentLog = serde_json::from_str(line).map_err(|e| LogLoadError::Parse {
            file: name.to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        check_log_record(&log).map_err(|message| LogLoadError::Parse {
            file: name.to_string(),
            line: idx + 1,
            message,
        })?;
        out.push(log);
    }
    Ok(out)
}

/// Load every `*.jsonl` file in `directory`, enforce the (block, agent)
/// uniqueness invariant, and return logs in stable (block_id, agent_id)
/// order.
pub fn load_logs(directory: &Path) -> Result<Vec<AgentLog>, LogLoadError> {
    let mut files: Vec<PathBuf> = fs::read_dir(directory)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "jsonl").unwrap_or(false))
        .collect();
    files.sort();

    let mut logs = Vec::new();
    for file in &files {
        let text = fs::read_to_string(file)?;
        logs.extend(parse_logs(&file.display().to_string(), &text)?);
    }

    let mut seen = BTreeSet::new();
    for log in &logs {
        if !seen.insert((log.block_id, log.agent_id)) {
            return Err(LogLoadError::DuplicateAgent {
                block_id: log.block_id,
                agent_id: log.agent_id,
            });
        }
    }
    logs.sort_by_key(|l| (l.block_id, l.agent_id));
    Ok(logs)
}

/// Render logs in the JSONL schema; inverse of [`parse_logs`] up to key
/// ordering normalization.
pub fn serialize_logs(logs: &[AgentLog]) -> String {
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log).expect("AgentLog serializes"));
        out.push('\n');
    }
    out
}
