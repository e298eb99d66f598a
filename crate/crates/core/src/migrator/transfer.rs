use std::fmt;

use serde::{Deserialize, Serialize};

/// Each hop lands the checkpoint on disk once and reads it back once.
pub const DISK_TOUCHES_PER_HOP: u32 = 2;

const BYTES_PER_MB: f64 = (1u64 << 20) as f64;

/// A place checkpoint files can live.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    Clique(String),
    /// The migrator's stable store, also used as safe storage.
    Store,
}

pub const STORE_NAME: &str = "store";

impl Site {
    pub fn clique(name: impl Into<String>) -> Self {
        Site::Clique(name.into())
    }

    pub fn name(&self) -> &str {
        match self {
            Site::Clique(n) => n,
            Site::Store => STORE_NAME,
        }
    }

    pub fn parse(name: &str) -> Self {
        if name == STORE_NAME {
            Site::Store
        } else {
            Site::Clique(name.to_string())
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub from: String,
    pub to: String,
    pub mbps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRef {
    pub from: String,
    pub to: String,
}

/// Cost model for moving checkpoints between sites.
///
/// A hop of `size` bytes over a link of `b` MB/s takes
/// `size / 2^20 / b + per_hop_overhead_seconds`. Links not listed explicitly
/// fall back to the clique's WAN bandwidth (for hops to or from the store)
/// or the smaller of the two cliques' WAN bandwidths (direct hops).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferModel {
    pub links: Vec<LinkSpec>,
    pub per_hop_overhead_seconds: f64,
    /// Local disk bandwidth for writing a fresh checkpoint.
    pub checkpoint_write_mbps: f64,
    pub restart_latency_seconds: f64,
    /// Stream the state straight to the target instead of staging through
    /// the store.
    pub direct: bool,
    /// Used when a link has no explicit entry and no clique bandwidth is known.
    pub default_bandwidth_mbps: f64,
    /// Size charged by the cost model instead of the real file size, so a
    /// small test grid can stand in for a production-sized state.
    pub modeled_checkpoint_bytes: Option<u64>,
    /// Links that fail every transfer attempt (fault injection).
    pub down_links: Vec<LinkRef>,
    pub max_retries: u32,
}

impl Default for TransferModel {
    fn default() -> Self {
        Self {
            links: Vec::new(),
            per_hop_overhead_seconds: 2.0,
            checkpoint_write_mbps: 48.0,
            restart_latency_seconds: 2.0,
            direct: false,
            default_bandwidth_mbps: 1.0,
            modeled_checkpoint_bytes: None,
            down_links: Vec::new(),
            max_retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("transfer model: {0}")]
pub struct TransferModelError(pub String);

impl TransferModel {
    pub fn validate(&self) -> Result<(), TransferModelError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.checkpoint_write_mbps) || !positive(self.default_bandwidth_mbps) {
            return Err(TransferModelError("bandwidths must be positive".into()));
        }
        if !(self.per_hop_overhead_seconds >= 0.0 && self.restart_latency_seconds >= 0.0) {
            return Err(TransferModelError("overheads must be non-negative".into()));
        }
        if let Some(l) = self.links.iter().find(|l| !positive(l.mbps)) {
            return Err(TransferModelError(format!("link {} -> {} needs a positive bandwidth", l.from, l.to)));
        }
        Ok(())
    }

    /// Bandwidth of the hop `from -> to`. `wan_of` gives a clique's WAN
    /// bandwidth when known.
    pub fn bandwidth(&self, from: &Site, to: &Site, wan_of: &dyn Fn(&str) -> Option<f64>) -> f64 {
        if let Some(l) = self.links.iter().find(|l| l.from == from.name() && l.to == to.name()) {
            return l.mbps;
        }
        let wan = |s: &Site| match s {
            Site::Clique(c) => wan_of(c),
            Site::Store => None,
        };
        match (wan(from), wan(to)) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => self.default_bandwidth_mbps,
        }
    }

    pub fn is_down(&self, from: &Site, to: &Site) -> bool {
        self.down_links.iter().any(|l| l.from == from.name() && l.to == to.name())
    }

    pub fn charged_bytes(&self, actual: u64) -> u64 {
        self.modeled_checkpoint_bytes.unwrap_or(actual)
    }

    pub fn hop_seconds(&self, bytes: u64, mbps: f64) -> f64 {
        bytes as f64 / BYTES_PER_MB / mbps + self.per_hop_overhead_seconds
    }

    pub fn write_seconds(&self, bytes: u64) -> f64 {
        bytes as f64 / BYTES_PER_MB / self.checkpoint_write_mbps
    }
}

/// Closed-form duration of a migration: optional local checkpoint write,
/// then every hop, then the restart latency.
pub fn modeled_duration(model: &TransferModel, bytes: u64, hop_mbps: &[f64], fresh_local_write: bool) -> f64 {
    let write = if fresh_local_write { model.write_seconds(bytes) } else { 0.0 };
    write + hop_mbps.iter().map(|&b| model.hop_seconds(bytes, b)).sum::<f64>() + model.restart_latency_seconds
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB96: u64 = 96 << 20;

    #[test]
    fn default_calibration_is_about_two_hundred_seconds() {
        let m = TransferModel::default();
        // 96/48 + (96/1 + 2) * 2 + 2
        assert_eq!(modeled_duration(&m, MB96, &[1.0, 1.0], true), 200.0);
    }

    #[test]
    fn zero_size_costs_only_overheads() {
        let m = TransferModel::default();
        assert_eq!(modeled_duration(&m, 0, &[1.0, 1.0], true), 2.0 * 2.0 + 2.0);
    }

    #[test]
    fn bandwidth_resolution() {
        let mut m = TransferModel::default();
        m.links.push(LinkSpec { from: "uc".into(), to: "store".into(), mbps: 7.0 });
        let wan = |c: &str| match c {
            "uc" => Some(3.0),
            "uiuc" => Some(5.0),
            _ => None,
        };
        assert_eq!(m.bandwidth(&Site::clique("uc"), &Site::Store, &wan), 7.0);
        assert_eq!(m.bandwidth(&Site::Store, &Site::clique("uc"), &wan), 3.0);
        assert_eq!(m.bandwidth(&Site::clique("uc"), &Site::clique("uiuc"), &wan), 3.0);
        assert_eq!(m.bandwidth(&Site::clique("x"), &Site::Store, &wan), 1.0);
    }

    #[test]
    fn site_names() {
        assert_eq!(Site::parse("store"), Site::Store);
        assert_eq!(Site::parse("uc").to_string(), "uc");
    }

    #[test]
    fn validation() {
        assert!(TransferModel::default().validate().is_ok());
        let m = TransferModel { checkpoint_write_mbps: 0.0, ..Default::default() };
        assert!(m.validate().is_err());
        let m = TransferModel { per_hop_overhead_seconds: -1.0, ..Default::default() };
        assert!(m.validate().is_err());
    }
}
