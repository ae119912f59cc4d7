use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};

/// How two label sets of the same universe are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatchMode {
    /// Both stacks must carry the universe with equal label sets.
    Exact,
    /// At least one stack carries the universe; if both do, the sets must intersect.
    Compositional,
}

impl MatchMode {
    pub fn wire(self) -> u8 {
        match self {
            MatchMode::Exact => 0,
            MatchMode::Compositional => 1,
        }
    }

    pub fn from_wire(b: u8) -> Option<Self> {
        match b {
            0 => Some(MatchMode::Exact),
            1 => Some(MatchMode::Compositional),
            _ => None,
        }
    }
}

/// A chunnel's compatibility surface within one capability universe.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Capability {
    pub universe: String,
    pub mode: MatchMode,
    pub labels: BTreeSet<String>,
}

impl Capability {
    pub fn new<I, S>(universe: impl Into<String>, mode: MatchMode, labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: BTreeSet<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::CapabilityConfig("empty label set".into()));
        }
        Ok(Capability {
            universe: universe.into(),
            mode,
            labels,
        })
    }

    /// # Panics
    /// If `labels` is empty.
    pub fn exact<I, S>(universe: impl Into<String>, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(universe, MatchMode::Exact, labels).expect("non-empty label set")
    }

    /// # Panics
    /// If `labels` is empty.
    pub fn compositional<I, S>(universe: impl Into<String>, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(universe, MatchMode::Compositional, labels).expect("non-empty label set")
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = match self.mode {
            MatchMode::Exact => "exact",
            MatchMode::Compositional => "comp",
        };
        let labels: Vec<&str> = self.labels.iter().map(String::as_str).collect();
        write!(f, "{}:{}{{{}}}", self.universe, m, labels.join(","))
    }
}

/// Per-universe view of one concrete stack: mode plus the union of its labels.
pub type UniverseMap = BTreeMap<String, (MatchMode, BTreeSet<String>)>;

/// Collapse a stack's capability list by universe. Mixed modes for one
/// universe are a configuration error.
pub fn by_universe(caps: &[Capability]) -> Result<UniverseMap> {
    let mut out: UniverseMap = BTreeMap::new();
    for c in caps {
        match out.get_mut(&c.universe) {
            Some((mode, labels)) => {
                if *mode != c.mode {
                    return Err(Error::CapabilityConfig(format!(
                        "universe {:?} used with both match modes",
                        c.universe
                    )));
                }
                labels.extend(c.labels.iter().cloned());
            }
            None => {
                out.insert(c.universe.clone(), (c.mode, c.labels.clone()));
            }
        }
    }
    Ok(out)
}
