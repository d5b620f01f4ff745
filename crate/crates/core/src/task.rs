use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Asr,
    At,
    Sv,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Asr, Task::At, Task::Sv];

    pub fn tag(self) -> u8 {
        match self {
            Task::Asr => 0,
            Task::At => 1,
            Task::Sv => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Task::ALL.into_iter().find(|t| t.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Asr => "asr",
            Task::At => "at",
            Task::Sv => "sv",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown task '{s}' (expected asr, at or sv)"))
    }
}

/// Parses a comma-separated task list such as `asr,sv`. Duplicates are dropped;
/// the result is in canonical order.
pub fn parse_task_list(s: &str) -> Result<Vec<Task>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let t: Task = part.parse()?;
        if !out.contains(&t) {
            out.push(t);
        }
    }
    if out.is_empty() {
        return Err("empty task list".into());
    }
    out.sort();
    Ok(out)
}
