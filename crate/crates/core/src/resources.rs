//! Machines, cliques and the aggregate directory cliques register with.
//!
//! A clique is a manually defined group of machines advertised as one
//! resource. The directory keeps one registration per clique and hides
//! registrations whose time-to-live has lapsed.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize};

use crate::classad::{ClassAd, Expr, Value};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ResourceError {
    #[error("machine `{name}`: {reason}")]
    InvalidMachine { name: String, reason: String },
    #[error("clique `{name}`: {reason}")]
    InvalidClique { name: String, reason: String },
    #[error("registration of `{name}` needs a positive ttl, got {ttl}")]
    InvalidTtl { name: String, ttl: f64 },
    #[error("load on `{machine}` would become negative ({load})")]
    NegativeLoad { machine: String, load: f64 },
    #[error("unknown clique `{0}`")]
    UnknownClique(String),
    #[error("clique `{clique}` has no machine `{machine}`")]
    UnknownMachine { clique: String, machine: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub name: String,
    pub domain: String,
    pub op_sys: String,
    pub cpu_count: u32,
    pub cpu_speed_mhz: f64,
    #[serde(deserialize_with = "deserialize_bytes")]
    pub mem_bytes: u64,
    /// External load average currently on the machine.
    #[serde(default)]
    pub load: f64,
    /// Solver iterations per second on this machine when unloaded.
    pub iter_rate_factor: f64,
}

impl MachineSpec {
    pub fn validate(&self) -> Result<(), ResourceError> {
        let bad = |reason: &str| Err(ResourceError::InvalidMachine { name: self.name.clone(), reason: reason.into() });
        if self.cpu_count < 1 {
            return bad("cpu_count must be at least 1");
        }
        if self.mem_bytes == 0 {
            return bad("mem_bytes must be positive");
        }
        if !(self.cpu_speed_mhz.is_finite() && self.cpu_speed_mhz > 0.0) {
            return bad("cpu_speed_mhz must be positive");
        }
        if !(self.load.is_finite() && self.load >= 0.0) {
            return bad("load must be non-negative");
        }
        if !(self.iter_rate_factor.is_finite() && self.iter_rate_factor > 0.0) {
            return bad("iter_rate_factor must be positive");
        }
        Ok(())
    }

    /// Iterations per second under the current load.
    pub fn effective_rate(&self) -> f64 {
        self.iter_rate_factor / (1.0 + self.load)
    }
}

/// Adds `delta` to the machine's load. `_now` is accepted for symmetry with
/// other scenario actions; load changes take effect on the next derivation.
pub fn apply_load(machine: &MachineSpec, delta: f64, _now: f64) -> Result<MachineSpec, ResourceError> {
    let load = machine.load + delta;
    if !(load >= 0.0 && load.is_finite()) {
        return Err(ResourceError::NegativeLoad { machine: machine.name.clone(), load });
    }
    Ok(MachineSpec { load, ..machine.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clique {
    pub name: String,
    #[serde(rename = "machine")]
    pub members: Vec<MachineSpec>,
    pub link_bandwidth_mbps: f64,
    /// Bandwidth between this clique and the migrator store.
    pub wan_bandwidth_mbps: f64,
}

impl Clique {
    pub fn validate(&self) -> Result<(), ResourceError> {
        let bad = |reason: &str| Err(ResourceError::InvalidClique { name: self.name.clone(), reason: reason.into() });
        if self.name.is_empty() {
            return bad("name must not be empty");
        }
        if self.members.is_empty() {
            return bad("a clique needs at least one machine");
        }
        if !(self.link_bandwidth_mbps.is_finite() && self.link_bandwidth_mbps > 0.0) {
            return bad("link_bandwidth_mbps must be positive");
        }
        if !(self.wan_bandwidth_mbps.is_finite() && self.wan_bandwidth_mbps > 0.0) {
            return bad("wan_bandwidth_mbps must be positive");
        }
        for m in &self.members {
            m.validate()?;
        }
        Ok(())
    }

    pub fn cpu_count(&self) -> u64 {
        self.members.iter().map(|m| m.cpu_count as u64).sum()
    }

    pub fn max_load(&self) -> f64 {
        self.members.iter().map(|m| m.load).fold(0.0, f64::max)
    }

    /// The clique seen as a single machine for the solver: members' rates
    /// add up, and the most loaded member paces the whole lock-step stencil.
    pub fn effective_machine(&self) -> MachineSpec {
        MachineSpec {
            name: self.name.clone(),
            domain: self.members[0].domain.clone(),
            op_sys: self.members[0].op_sys.clone(),
            cpu_count: self.cpu_count().min(u32::MAX as u64) as u32,
            cpu_speed_mhz: self.members.iter().map(|m| m.cpu_speed_mhz).fold(f64::INFINITY, f64::min),
            mem_bytes: self.members.iter().map(|m| m.mem_bytes).min().unwrap_or(0),
            load: self.max_load(),
            iter_rate_factor: self.members.iter().map(|m| m.iter_rate_factor).sum(),
        }
    }

    /// Applies a load change to one member, or to every member when
    /// `machine` is `None`. All-or-nothing.
    pub fn apply_load(&mut self, machine: Option<&str>, delta: f64, now: f64) -> Result<(), ResourceError> {
        let mut updated = self.members.clone();
        let mut hit = false;
        for m in updated.iter_mut() {
            if machine.is_none_or(|n| n == m.name) {
                *m = apply_load(m, delta, now)?;
                hit = true;
            }
        }
        if !hit {
            return Err(ResourceError::UnknownMachine {
                clique: self.name.clone(),
                machine: machine.unwrap_or_default().to_string(),
            });
        }
        self.members = updated;
        Ok(())
    }
}

/// Builds the resource ad the selector matches requests against.
pub fn derive_clique_ad(clique: &Clique, now: f64) -> ClassAd {
    let members = &clique.members;
    let lit = |v: Value| Expr::Literal(v);
    let mut domains: Vec<&str> = Vec::new();
    for m in members {
        if !domains.contains(&m.domain.as_str()) {
            domains.push(&m.domain);
        }
    }
    let first_os = &members[0].op_sys;
    let op_sys = if members.iter().all(|m| m.op_sys.eq_ignore_ascii_case(first_os)) {
        Value::Text(first_os.clone())
    } else {
        Value::Undefined
    };
    let cpu_count = i64::try_from(clique.cpu_count()).unwrap_or(i64::MAX);
    let min_mem = members.iter().map(|m| m.mem_bytes).min().unwrap_or(0);
    let min_speed = members.iter().map(|m| m.cpu_speed_mhz).fold(f64::INFINITY, f64::min);
    let half = (members.len() / 2) as f64;

    let mut ad = ClassAd::new();
    ad.set("Type", Expr::text("resource"));
    ad.set("Name", Expr::text(clique.name.clone()));
    ad.set("CPUCount", lit(Value::Integer(cpu_count)));
    ad.set("MachineCount", lit(Value::Integer(members.len() as i64)));
    ad.set("minMemSize", lit(Value::Integer(i64::try_from(min_mem).unwrap_or(i64::MAX))));
    ad.set("minCPUSpeed", lit(Value::Real(min_speed)));
    ad.set("maxCPULoad", lit(Value::Real(clique.max_load())));
    ad.set("domains", Expr::List(domains.into_iter().map(Expr::text).collect()));
    ad.set("opSys", lit(op_sys));
    ad.set("minLinkBandwidth", lit(Value::Real(clique.link_bandwidth_mbps)));
    ad.set("bisectionBandwidth", lit(Value::Real(clique.link_bandwidth_mbps * half)));
    ad.set("wanBandwidth", lit(Value::Real(clique.wan_bandwidth_mbps)));
    ad.set("lastUpdate", lit(Value::Real(now)));
    ad
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub clique: Clique,
    pub ttl_seconds: f64,
    pub last_refresh: f64,
}

impl Registration {
    pub fn expires_at(&self) -> f64 {
        self.last_refresh + self.ttl_seconds
    }

    pub fn is_stale(&self, now: f64) -> bool {
        now > self.expires_at()
    }
}

/// Aggregate directory of clique registrations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Directory {
    registrations: BTreeMap<String, Registration>,
}

impl Directory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers or re-registers a clique, re-arming its TTL. Returns true
    /// when the clique was not visible just before the call.
    pub fn register(&mut self, clique: Clique, ttl_seconds: f64, now: f64) -> Result<bool, ResourceError> {
        clique.validate()?;
        if !(ttl_seconds.is_finite() && ttl_seconds > 0.0) {
            return Err(ResourceError::InvalidTtl { name: clique.name, ttl: ttl_seconds });
        }
        let was_visible = self.get(&clique.name, now).is_some();
        let name = clique.name.clone();
        self.registrations.insert(name, Registration { clique, ttl_seconds, last_refresh: now });
        Ok(!was_visible)
    }

    /// Re-arms an existing registration without changing its clique.
    pub fn heartbeat(&mut self, name: &str, now: f64) -> Result<(), ResourceError> {
        let reg = self
            .registrations
            .get_mut(name)
            .ok_or_else(|| ResourceError::UnknownClique(name.to_string()))?;
        reg.last_refresh = now;
        Ok(())
    }

    pub fn deregister(&mut self, name: &str) -> Option<Registration> {
        self.registrations.remove(name)
    }

    /// Drops stale registrations and returns their names.
    pub fn refresh(&mut self, now: f64) -> Vec<String> {
        let stale: Vec<String> = self
            .registrations
            .iter()
            .filter(|(_, r)| r.is_stale(now))
            .map(|(n, _)| n.clone())
            .collect();
        for n in &stale {
            self.registrations.remove(n);
        }
        stale
    }

    pub fn get(&self, name: &str, now: f64) -> Option<&Clique> {
        self.registrations.get(name).filter(|r| !r.is_stale(now)).map(|r| &r.clique)
    }

    /// Mutable access for load injection; stale entries are still reachable
    /// so their machines keep their state if re-registered.
    pub fn clique_mut(&mut self, name: &str) -> Option<&mut Clique> {
        self.registrations.get_mut(name).map(|r| &mut r.clique)
    }

    /// Live cliques in name order.
    pub fn live(&self, now: f64) -> impl Iterator<Item = &Clique> {
        self.registrations.values().filter(move |r| !r.is_stale(now)).map(|r| &r.clique)
    }

    pub fn registrations(&self) -> impl Iterator<Item = &Registration> {
        self.registrations.values()
    }

    pub fn is_empty(&self) -> bool {
        self.registrations.is_empty()
    }
}

/// Accepts `8589934592`, `"8G"`, `"512M"` or `"64K"` (binary multiples).
pub fn parse_bytes(text: &str) -> Option<u64> {
    let t = text.trim();
    let (digits, mult) = match t.chars().last()? {
        'K' | 'k' => (&t[..t.len() - 1], 1u64 << 10),
        'M' | 'm' => (&t[..t.len() - 1], 1 << 20),
        'G' | 'g' => (&t[..t.len() - 1], 1 << 30),
        _ => (t, 1),
    };
    digits.trim().parse::<u64>().ok()?.checked_mul(mult)
}

pub(crate) fn deserialize_bytes<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Int(v) => Ok(v),
        Raw::Text(s) => parse_bytes(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid byte size `{s}`"))),
    }
}
