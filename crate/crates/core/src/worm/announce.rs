use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnnounceError {
    #[error("information service unreachable")]
    Unreachable,
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("gave up after {attempts} attempts")]
    GaveUp { attempts: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub run_id: String,
    pub location: String,
    /// The service already had this run at this location.
    pub duplicate: bool,
}

/// Where a restarted run reports its new location.
pub trait InformationService {
    fn announce(&mut self, run_id: &str, location: &str, at: f64) -> Result<Ack, AnnounceError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_seconds: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, initial_backoff_seconds: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Announced {
    pub ack: Ack,
    pub attempts: u32,
    /// Simulated time spent backing off before the successful attempt.
    pub waited_seconds: f64,
}

/// Announces a restarted run, retrying unreachable services with doubling
/// backoff. An unknown run id is rejected without retrying.
pub fn announce(
    service: &mut dyn InformationService,
    run_id: &str,
    location: &str,
    now: f64,
    policy: RetryPolicy,
) -> Result<Announced, AnnounceError> {
    let mut waited = 0.0;
    let mut backoff = policy.initial_backoff_seconds;
    for attempt in 1..=policy.max_attempts.max(1) {
        match service.announce(run_id, location, now + waited) {
            Ok(ack) => return Ok(Announced { ack, attempts: attempt, waited_seconds: waited }),
            Err(AnnounceError::Unreachable) => {
                waited += backoff;
                backoff *= 2.0;
            }
            Err(e) => return Err(e),
        }
    }
    Err(AnnounceError::GaveUp { attempts: policy.max_attempts.max(1) })
}
