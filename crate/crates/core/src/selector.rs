//! Synchronous request/response resource selection over live cliques.

use serde::{Deserialize, Serialize};

use crate::classad::{check_requirements, compute_rank, parse_ad, ClassAd, KEYWORD_REQUIREMENTS};
use crate::resources::{derive_clique_ad, Directory};

pub const NO_MATCH: &str = "no matching resources";

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRequest {
    pub request_ad: ClassAd,
    pub request_id: String,
    /// Clique the caller currently runs on. It is never selected, and when
    /// it is live its rank becomes the bar candidates have to beat.
    pub exclude: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RequestError {
    #[error("request ad: {0}")]
    Parse(#[from] crate::classad::ParseError),
    #[error("request ad has no `requirements` attribute")]
    MissingRequirements,
}

impl SelectionRequest {
    pub fn new(request_ad: ClassAd, request_id: impl Into<String>) -> Result<Self, RequestError> {
        if !request_ad.contains(KEYWORD_REQUIREMENTS) {
            return Err(RequestError::MissingRequirements);
        }
        Ok(Self { request_ad, request_id: request_id.into(), exclude: None })
    }

    pub fn parse(text: &str, request_id: impl Into<String>) -> Result<Self, RequestError> {
        Self::new(parse_ad(text)?, request_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectionResponse {
    Success { clique_name: String, clique_ad: ClassAd, rank: f64 },
    Failure { reason: String },
}

impl SelectionResponse {
    pub fn is_success(&self) -> bool {
        matches!(self, SelectionResponse::Success { .. })
    }

    pub fn clique_name(&self) -> Option<&str> {
        match self {
            SelectionResponse::Success { clique_name, .. } => Some(clique_name),
            SelectionResponse::Failure { .. } => None,
        }
    }

    pub fn record(&self) -> SelectionRecord {
        match self {
            SelectionResponse::Success { clique_name, rank, .. } => SelectionRecord {
                status: "success".into(),
                clique: Some(clique_name.clone()),
                rank: Some(*rank),
                reason: None,
            },
            SelectionResponse::Failure { reason } => SelectionRecord {
                status: "failure".into(),
                clique: None,
                rank: None,
                reason: Some(reason.clone()),
            },
        }
    }
}

/// Wire form of a response: one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub status: String,
    pub clique: Option<String>,
    pub rank: Option<f64>,
    pub reason: Option<String>,
}

/// Marks `current` as the clique in use so only strictly better-ranked
/// alternatives can be selected.
pub fn exclude_current(request: &SelectionRequest, current: &str) -> SelectionRequest {
    SelectionRequest { exclude: Some(current.to_string()), ..request.clone() }
}

/// Matches the request against every live clique and returns the highest
/// rank; ties go to the lexicographically smallest name.
pub fn select(request: &SelectionRequest, directory: &Directory, now: f64) -> SelectionResponse {
    let ad = &request.request_ad;
    if !ad.contains(KEYWORD_REQUIREMENTS) {
        return SelectionResponse::Failure { reason: RequestError::MissingRequirements.to_string() };
    }
    let floor = request
        .exclude
        .as_deref()
        .and_then(|name| directory.get(name, now))
        .map(|current| compute_rank(ad, &derive_clique_ad(current, now)));

    let mut best: Option<(String, ClassAd, f64)> = None;
    // `live` iterates in name order, so a strict `>` keeps the smallest name on ties.
    for clique in directory.live(now) {
        if request.exclude.as_deref() == Some(clique.name.as_str()) {
            continue;
        }
        let resource = derive_clique_ad(clique, now);
        if !matches!(check_requirements(ad, &resource), Ok(true)) {
            continue;
        }
        let rank = compute_rank(ad, &resource);
        if floor.is_some_and(|f| rank <= f) {
            continue;
        }
        if best.as_ref().is_none_or(|(_, _, r)| rank > *r) {
            best = Some((clique.name.clone(), resource, rank));
        }
    }
    match best {
        Some((clique_name, clique_ad, rank)) => SelectionResponse::Success { clique_name, clique_ad, rank },
        None => SelectionResponse::Failure { reason: NO_MATCH.into() },
    }
}

/// Parses a request from text and selects; parse problems become failures.
pub fn select_text(text: &str, request_id: &str, directory: &Directory, now: f64) -> SelectionResponse {
    match SelectionRequest::parse(text, request_id) {
        Ok(req) => select(&req, directory, now),
        Err(e) => SelectionResponse::Failure { reason: e.to_string() },
    }
}

/// Request ad the worm sends: the sample request with its rank expression.
pub const DEFAULT_REQUEST_AD: &str = r#"[
  Type="request";
  Owner="dangulo";
  RequiredDomains={"cs.uiuc.edu", "ucsd.edu"};
  requirements= "other.opSys=='LINUX' &
                other.minMemSize> (100G/other.CPUCount) &&
                Include(other.domains, RequiredDomains)
  ";
  Rank= other.minCPUSpeed * other.CPUCount / (other.maxCPULoad+1);
]"#;
