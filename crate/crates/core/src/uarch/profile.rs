use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::isa::UopKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardPrediction {
    NotTaken,
    Taken,
}

/// What a speculative load does when it faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultBehavior {
    /// The load completes with value 0 and the fault is raised at commit.
    ReturnZero,
    /// The load never completes; dependents stall until the load is flushed.
    Stall,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProfileError {
    #[error("unknown profile `{0}`")]
    Unknown(String),
    #[error("profile `{profile}`: {msg}")]
    Invalid { profile: String, msg: String },
    #[error("malformed profile file: {0}")]
    Parse(String),
}

/// Parameters of one simulated microarchitecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroArchProfile {
    pub name: String,
    pub rob_entries: usize,
    /// `None` means the load buffer is not a limiting resource.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_buffer_entries: Option<usize>,
    pub parallel_miss_slots: usize,
    pub static_forward: ForwardPrediction,
    pub gpf_behavior: FaultBehavior,
    pub pf_behavior: FaultBehavior,
    pub has_rdtscp: bool,
    pub fetch_width: usize,
    pub commit_width: usize,
    pub l1_hit_latency: u32,
    pub memory_latency: u32,
    pub flush_base_cost: u32,
    pub flush_per_uop_cost: u32,
    /// Added to the flush cost when the flushed path had reached a `hlt`.
    /// The total is clamped at zero.
    pub flush_quiesced_modifier: i32,
    pub ports: usize,
    /// Micro-op kind name to execution latency in cycles.
    pub latencies: BTreeMap<String, u32>,
    /// Micro-op kind name to the ports that can execute it.
    pub port_map: BTreeMap<String, Vec<usize>>,
}

/// Default latency and port layout shared by the built-in profiles.
fn default_tables() -> (BTreeMap<String, u32>, BTreeMap<String, Vec<usize>>) {
    // ports: 0-1 general ALU, 2-3 load, 4 store, 5 multiply, 6 branch
    const ALU: &[usize] = &[0, 1];
    let mut lat = BTreeMap::new();
    let mut ports = BTreeMap::new();
    for kind in UopKind::ALL {
        let (l, p): (u32, &[usize]) = match kind {
            UopKind::Load => (1, &[2, 3]),
            UopKind::Store => (1, &[4]),
            UopKind::FlushLine => (1, &[4]),
            UopKind::AluMul => (3, &[5]),
            UopKind::BranchCond | UopKind::BranchUncond => (1, &[6]),
            UopKind::Serialize => (10, ALU),
            _ => (1, ALU),
        };
        lat.insert(kind.name().to_string(), l);
        ports.insert(kind.name().to_string(), p.to_vec());
    }
    (lat, ports)
}

impl MicroArchProfile {
    #[allow(clippy::too_many_arguments)]
    fn builtin(
        name: &str,
        rob: usize,
        lb: Option<usize>,
        pl: usize,
        fj: ForwardPrediction,
        gpf: FaultBehavior,
        pf: FaultBehavior,
        rdtscp: bool,
        per_uop: u32,
        quiesced: i32,
    ) -> MicroArchProfile {
        let (latencies, port_map) = default_tables();
        MicroArchProfile {
            name: name.to_string(),
            rob_entries: rob,
            load_buffer_entries: lb,
            parallel_miss_slots: pl,
            static_forward: fj,
            gpf_behavior: gpf,
            pf_behavior: pf,
            has_rdtscp: rdtscp,
            fetch_width: 4,
            commit_width: 4,
            l1_hit_latency: 4,
            memory_latency: 200,
            flush_base_cost: 5,
            flush_per_uop_cost: per_uop,
            flush_quiesced_modifier: quiesced,
            ports: 7,
            latencies,
            port_map,
        }
    }

    pub fn latency(&self, kind: UopKind) -> u32 {
        self.latencies.get(kind.name()).copied().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |msg: String| Err(ProfileError::Invalid { profile: self.name.clone(), msg });
        if self.rob_entries == 0 || self.fetch_width == 0 || self.commit_width == 0 {
            return bad("rob_entries, fetch_width and commit_width must be positive".into());
        }
        if self.parallel_miss_slots == 0 {
            return bad("parallel_miss_slots must be positive".into());
        }
        if let Some(lb) = self.load_buffer_entries {
            if lb < self.parallel_miss_slots {
                return bad(format!("load_buffer_entries {lb} < parallel_miss_slots {}", self.parallel_miss_slots));
            }
        }
        if self.l1_hit_latency == 0 || self.memory_latency == 0 {
            return bad("memory latencies must be at least 1 cycle".into());
        }
        if self.ports == 0 || self.ports > 32 {
            return bad(format!("port count {} out of range 1..=32", self.ports));
        }
        for kind in UopKind::ALL {
            match self.latencies.get(kind.name()) {
                None => return bad(format!("missing latency for `{}`", kind.name())),
                Some(0) => return bad(format!("latency for `{}` must be at least 1", kind.name())),
                Some(_) => {}
            }
            match self.port_map.get(kind.name()) {
                None => return bad(format!("missing ports for `{}`", kind.name())),
                Some(p) if p.is_empty() || p.iter().any(|&p| p >= self.ports) => {
                    return bad(format!("invalid ports for `{}`", kind.name()))
                }
                Some(_) => {}
            }
        }
        for key in self.latencies.keys().chain(self.port_map.keys()) {
            if UopKind::from_name(key).is_none() {
                return bad(format!("unknown micro-op kind `{key}`"));
            }
        }
        Ok(())
    }

    /// Key used for this profile in profile files and on the command line.
    pub fn key(&self) -> String {
        self.name.to_ascii_lowercase().replace([' ', '-'], "")
    }
}

/// The five built-in microarchitectures.
pub fn builtin_profiles() -> Vec<MicroArchProfile> {
    use FaultBehavior::*;
    use ForwardPrediction::*;
    vec![
        MicroArchProfile::builtin("Skylake", 224, Some(72), 40, NotTaken, ReturnZero, Stall, true, 0, 0),
        MicroArchProfile::builtin("Haswell", 192, Some(72), 32, NotTaken, ReturnZero, Stall, true, 1, -16),
        MicroArchProfile::builtin("SandyBridge", 168, Some(64), 32, NotTaken, ReturnZero, Stall, true, 1, 0),
        MicroArchProfile::builtin("Nehalem", 128, Some(48), 11, Taken, ReturnZero, ReturnZero, true, 1, -16),
        MicroArchProfile::builtin("Prescott", 126, None, 19, NotTaken, Stall, Stall, false, 0, 0),
    ]
}

/// Looks up a built-in profile by case-insensitive name (`s-bridge` and
/// `sandy-bridge` are accepted for Sandy Bridge).
pub fn builtin_profile(name: &str) -> Result<MicroArchProfile, ProfileError> {
    let key = name.to_ascii_lowercase().replace([' ', '-', '_'], "");
    let key = if key == "sbridge" { "sandybridge".to_string() } else { key };
    builtin_profiles()
        .into_iter()
        .find(|p| p.key() == key)
        .ok_or_else(|| ProfileError::Unknown(name.to_string()))
}

/// Serializes profiles to the TOML profile-file format, one table per profile.
pub fn profiles_to_toml(profiles: &[MicroArchProfile]) -> String {
    let map: BTreeMap<String, &MicroArchProfile> = profiles.iter().map(|p| (p.key(), p)).collect();
    toml::to_string(&map).expect("profiles serialize to TOML")
}

/// Parses and validates a profile file.
pub fn profiles_from_toml(text: &str) -> Result<Vec<MicroArchProfile>, ProfileError> {
    let map: BTreeMap<String, MicroArchProfile> =
        toml::from_str(text).map_err(|e| ProfileError::Parse(e.to_string()))?;
    let profiles: Vec<_> = map.into_values().collect();
    for p in &profiles {
        p.validate()?;
    }
    Ok(profiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_valid() {
        for p in builtin_profiles() {
            p.validate().unwrap();
        }
    }

    #[test]
    fn lookup_accepts_aliases() {
        assert_eq!(builtin_profile("S-Bridge").unwrap().name, "SandyBridge");
        assert_eq!(builtin_profile("haswell").unwrap().rob_entries, 192);
        assert!(matches!(builtin_profile("zen"), Err(ProfileError::Unknown(_))));
    }

    #[test]
    fn toml_round_trip_is_exact() {
        let text = profiles_to_toml(&builtin_profiles());
        let back = profiles_from_toml(&text).unwrap();
        assert_eq!(profiles_to_toml(&back), text);
        let mut sorted = builtin_profiles();
        sorted.sort_by_key(|p| p.key());
        assert_eq!(back, sorted);
    }

    #[test]
    fn invalid_profile_is_rejected() {
        let mut p = builtin_profile("haswell").unwrap();
        p.load_buffer_entries = Some(8);
        assert!(p.validate().is_err());
        let mut p = builtin_profile("haswell").unwrap();
        p.latencies.insert("alu_mul".into(), 0);
        assert!(p.validate().is_err());
    }
}
