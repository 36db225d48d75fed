use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BranchUniverse, Phase, RateRange, SimError, SimProfile};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}` (built in: dominant, inversion, complementary, uniform, deadweight)")]
    Unknown(String),
    #[error("reading scenario {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario {name}: {source}")]
    Invalid {
        name: String,
        #[source]
        source: SimError,
    },
    #[error("scenario {0}: {1}")]
    Shape(String, String),
}

/// `count` parallel dependency chains of `length` levels each, laid out
/// level-major: branch `first + level * count + chain`. Deeper levels are
/// harder: ease at level `l` is `1 / (1 + hardness * l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub first: u32,
    pub count: u32,
    pub length: u32,
    #[serde(default)]
    pub hardness: f64,
    /// Branch every chain root depends on, if any.
    #[serde(default)]
    pub parent: Option<u32>,
}

impl ChainSpec {
    pub fn branch(&self, level: u32, chain: u32) -> u32 {
        self.first + level * self.count + chain
    }

    pub fn last(&self) -> u32 {
        self.first + self.count * self.length - 1
    }
}

/// A complete simulated environment: target shape plus fuzzer profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub branches: u32,
    #[serde(default)]
    pub chains: Vec<ChainSpec>,
    #[serde(default)]
    pub edges: Vec<[u32; 2]>,
    #[serde(rename = "fuzzer")]
    pub fuzzers: Vec<SimProfile>,
}

pub const LIBRARY: [&str; 5] = [
    "dominant",
    "inversion",
    "complementary",
    "uniform",
    "deadweight",
];

/// Campaign time at which the built-in inversion scenario swaps leaders.
pub const INVERSION_SWAP: f64 = 14_400.0;

fn ranged(name: &str, base: f64, first: u32, last: u32, rate: f64, stream: u64) -> SimProfile {
    let mut p = SimProfile::uniform(name, base, stream);
    p.rates.push(RateRange { first, last, rate });
    p
}

impl Scenario {
    pub fn universe(&self) -> Result<BranchUniverse, ScenarioError> {
        let invalid = |source| ScenarioError::Invalid {
            name: self.name.clone(),
            source,
        };
        let mut u = BranchUniverse::with_edges(self.branches, &self.edges).map_err(invalid)?;
        for c in &self.chains {
            if c.count == 0 || c.length == 0 || c.last() >= self.branches {
                return Err(ScenarioError::Shape(
                    self.name.clone(),
                    format!(
                        "chain block starting at {} does not fit in {} branches",
                        c.first, self.branches
                    ),
                ));
            }
            for level in 0..c.length {
                let ease = 1.0 / (1.0 + c.hardness * f64::from(level));
                for chain in 0..c.count {
                    let b = c.branch(level, chain);
                    u.set_ease(b, ease).map_err(invalid)?;
                    if level > 0 {
                        u.add_edge(c.branch(level - 1, chain), b).map_err(invalid)?;
                    } else if let Some(p) = c.parent {
                        u.add_edge(p, b).map_err(invalid)?;
                    }
                }
            }
        }
        Ok(u)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.fuzzers.is_empty() {
            return Err(ScenarioError::Shape(self.name.clone(), "no fuzzers".into()));
        }
        let mut names: Vec<&str> = self.fuzzers.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(ScenarioError::Shape(
                self.name.clone(),
                "duplicate fuzzer name".into(),
            ));
        }
        for f in &self.fuzzers {
            f.validate().map_err(|source| ScenarioError::Invalid {
                name: self.name.clone(),
                source,
            })?;
        }
        self.universe().map(|_| ())
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// A built-in scenario by name, or else a scenario file.
    pub fn load(name_or_path: &str) -> Result<Self, ScenarioError> {
        if let Some(s) = Self::builtin(name_or_path) {
            return Ok(s);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(ScenarioError::Unknown(name_or_path.to_string()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        Some(match name.to_ascii_lowercase().as_str() {
            "dominant" => Self::dominant(),
            "inversion" => Self::inversion(INVERSION_SWAP),
            "complementary" => Self::complementary(),
            "uniform" => Self::uniform(),
            "deadweight" => Self::deadweight(),
            _ => return None,
        })
    }

    pub fn library() -> Vec<Self> {
        LIBRARY.iter().map(|n| Self::builtin(n).unwrap()).collect()
    }

    /// One fuzzer ten times faster than the rest on every branch.
    pub fn dominant() -> Self {
        Self {
            name: "dominant".into(),
            description: "alpha discovers every branch at 10x the rate of the others".into(),
            branches: 30_000,
            chains: vec![ChainSpec {
                first: 0,
                count: 200,
                length: 150,
                hardness: 1.0,
                parent: None,
            }],
            edges: Vec::new(),
            fuzzers: vec![
                SimProfile::uniform("alpha", 0.05, 1),
                SimProfile::uniform("beta", 0.005, 2),
                SimProfile::uniform("gamma", 0.005, 3),
            ],
        }
    }

    /// Two strong fuzzers on one shared region whose lead swaps at `swap`.
    pub fn inversion(swap: f64) -> Self {
        let slow = |from, to| Phase {
            from,
            to,
            multiplier: 0.1,
        };
        let mut alpha = SimProfile::uniform("alpha", 0.05, 1);
        alpha.phases.push(slow(swap, 1e12));
        let mut beta = SimProfile::uniform("beta", 0.05, 2);
        beta.phases.push(slow(0.0, swap));
        Self {
            name: "inversion".into(),
            description: format!("alpha leads until t={swap}, then beta"),
            branches: 20_000,
            chains: vec![ChainSpec {
                first: 0,
                count: 200,
                length: 100,
                hardness: 1.0,
                parent: None,
            }],
            edges: Vec::new(),
            fuzzers: vec![alpha, beta, SimProfile::uniform("gamma", 0.004, 3)],
        }
    }

    /// Two fuzzers each strong on its own arm of the target, plus a weak
    /// generalist.
    pub fn complementary() -> Self {
        let arm_a = ChainSpec {
            first: 0,
            count: 100,
            length: 100,
            hardness: 1.0,
            parent: None,
        };
        let arm_b = ChainSpec {
            first: 10_000,
            count: 100,
            length: 100,
            hardness: 1.0,
            parent: None,
        };
        Self {
            name: "complementary".into(),
            description: "alpha is strong on arm A, beta on arm B, gamma weak everywhere".into(),
            branches: 20_000,
            fuzzers: vec![
                ranged("alpha", 0.002, arm_a.first, arm_a.last(), 0.05, 1),
                ranged("beta", 0.002, arm_b.first, arm_b.last(), 0.05, 2),
                SimProfile::uniform("gamma", 0.004, 3),
            ],
            chains: vec![arm_a, arm_b],
            edges: Vec::new(),
        }
    }

    /// Identical fuzzers drawing from one random stream.
    pub fn uniform() -> Self {
        Self {
            name: "uniform".into(),
            description: "three identical fuzzers".into(),
            branches: 20_000,
            chains: vec![ChainSpec {
                first: 0,
                count: 200,
                length: 100,
                hardness: 1.0,
                parent: None,
            }],
            edges: Vec::new(),
            fuzzers: ["alpha", "beta", "gamma"]
                .iter()
                .map(|n| SimProfile::uniform(n, 0.02, 7))
                .collect(),
        }
    }

    /// `dominant` plus a fuzzer that never finds anything.
    pub fn deadweight() -> Self {
        let mut s = Self::dominant();
        s.name = "deadweight".into();
        s.description = "dominant plus delta, which never discovers anything".into();
        s.fuzzers.push(SimProfile::uniform("delta", 0.0, 4));
        s
    }
}
