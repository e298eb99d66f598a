//! Performance contract: per-quantum iteration rate checked against the
//! running average of all non-violating quanta.
//!
//! A quantum violates the contract when its rate falls more than
//! `degradation_threshold` (a fraction) below that average. Violating quanta
//! are left out of the average. After `consecutive_required` violations in a
//! row the contract triggers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractParams {
    pub quantum_seconds: f64,
    pub degradation_threshold: f64,
    pub consecutive_required: u32,
}

impl Default for ContractParams {
    fn default() -> Self {
        Self { quantum_seconds: 10.0, degradation_threshold: 0.10, consecutive_required: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ContractError {
    #[error("quantum_seconds must be positive, got {0}")]
    Quantum(f64),
    #[error("degradation_threshold must lie in (0, 1), got {0}")]
    Threshold(f64),
    #[error("consecutive_required must be at least 1")]
    Consecutive,
    #[error("rate must be positive, got {0}")]
    Rate(f64),
    #[error("elapsed time must be positive, got {0}")]
    Elapsed(f64),
}

impl ContractParams {
    pub fn validate(&self) -> Result<(), ContractError> {
        if !(self.quantum_seconds.is_finite() && self.quantum_seconds > 0.0) {
            return Err(ContractError::Quantum(self.quantum_seconds));
        }
        if !(self.degradation_threshold > 0.0 && self.degradation_threshold < 1.0) {
            return Err(ContractError::Threshold(self.degradation_threshold));
        }
        if self.consecutive_required < 1 {
            return Err(ContractError::Consecutive);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantumVerdict {
    /// 1-based quantum index within this contract.
    pub index: u64,
    pub rate: f64,
    /// Average of non-violating quanta *before* this one was folded in.
    pub average: f64,
    pub degradation: f64,
    pub violation: bool,
    pub trigger: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractState {
    params: ContractParams,
    rate_sum: f64,
    rate_count: u64,
    consecutive: u32,
    /// Set once a streak has triggered; cleared by a good quantum or `rearm`.
    fired: bool,
    history: Vec<QuantumVerdict>,
}

pub fn degradation(average: f64, rate: f64) -> f64 {
    if average > 0.0 {
        ((average - rate) / average).max(0.0)
    } else {
        0.0
    }
}

impl ContractState {
    /// Starts a contract from the first quantum's measured rate; that quantum
    /// is compared with itself and can never violate.
    pub fn init(first_rate: f64, params: ContractParams) -> Result<Self, ContractError> {
        params.validate()?;
        if !(first_rate.is_finite() && first_rate > 0.0) {
            return Err(ContractError::Rate(first_rate));
        }
        let first = QuantumVerdict {
            index: 1,
            rate: first_rate,
            average: first_rate,
            degradation: 0.0,
            violation: false,
            trigger: false,
        };
        Ok(Self {
            params,
            rate_sum: first_rate,
            rate_count: 1,
            consecutive: 0,
            fired: false,
            history: vec![first],
        })
    }

    pub fn observe(&mut self, iterations: u64, elapsed: f64) -> Result<QuantumVerdict, ContractError> {
        if !(elapsed.is_finite() && elapsed > 0.0) {
            return Err(ContractError::Elapsed(elapsed));
        }
        Ok(self.observe_rate(iterations as f64 / elapsed))
    }

    pub fn observe_rate(&mut self, rate: f64) -> QuantumVerdict {
        let average = self.average();
        let degradation = degradation(average, rate);
        let violation = degradation > self.params.degradation_threshold;
        let mut trigger = false;
        if violation {
            self.consecutive += 1;
            if !self.fired && self.consecutive >= self.params.consecutive_required {
                trigger = true;
                self.fired = true;
            }
        } else {
            self.consecutive = 0;
            self.fired = false;
            self.rate_sum += rate;
            self.rate_count += 1;
        }
        let verdict = QuantumVerdict {
            index: self.history.len() as u64 + 1,
            rate,
            average,
            degradation,
            violation,
            trigger,
        };
        self.history.push(verdict);
        verdict
    }

    /// New parameters apply from the next observation; counters are kept.
    pub fn set_params(&mut self, params: ContractParams) -> Result<(), ContractError> {
        params.validate()?;
        self.params = params;
        Ok(())
    }

    /// Resets the violation streak after a trigger that led to no action,
    /// so another full streak is needed to trigger again.
    pub fn rearm(&mut self) {
        self.consecutive = 0;
        self.fired = false;
    }

    pub fn params(&self) -> &ContractParams {
        &self.params
    }

    pub fn average(&self) -> f64 {
        self.rate_sum / self.rate_count as f64
    }

    pub fn consecutive_violations(&self) -> u32 {
        self.consecutive
    }

    pub fn quantum_index(&self) -> u64 {
        self.history.len() as u64
    }

    pub fn history(&self) -> &[QuantumVerdict] {
        &self.history
    }
}
