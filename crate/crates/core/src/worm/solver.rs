use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::resources::MachineSpec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("every dimension must be positive, got {0:?}")]
    Dims([usize; 3]),
    #[error("field has {actual} values but dims {dims:?} need {expected}")]
    FieldLength { dims: [usize; 3], expected: usize, actual: usize },
    #[error("field contains a non-finite value at {0}")]
    NonFinite(usize),
    #[error("alpha must be finite and non-negative, got {0}")]
    Alpha(f64),
}

/// Explicit heat-equation solver on a 3-D grid with fixed boundary values.
///
/// `field` is row-major over `dims`: the last axis varies fastest, so the
/// value at `(i, j, k)` lives at `(i * dims[1] + j) * dims[2] + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub dims: [usize; 3],
    pub field: Vec<f64>,
    pub iteration: u64,
    pub alpha: f64,
    pub run_id: String,
}

impl SolverState {
    pub fn new(dims: [usize; 3], field: Vec<f64>, alpha: f64, run_id: impl Into<String>) -> Result<Self, SolverError> {
        let s = Self { dims, field, iteration: 0, alpha, run_id: run_id.into() };
        s.validate()?;
        Ok(s)
    }

    /// Uniform random initial field in [0, 1) from a ChaCha8 stream.
    pub fn seeded(dims: [usize; 3], alpha: f64, seed: u64, run_id: impl Into<String>) -> Result<Self, SolverError> {
        if dims.contains(&0) {
            return Err(SolverError::Dims(dims));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = (0..dims.iter().product::<usize>()).map(|_| rng.gen::<f64>()).collect();
        Self::new(dims, field, alpha, run_id)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.dims.contains(&0) {
            return Err(SolverError::Dims(self.dims));
        }
        let expected = self.dims.iter().product();
        if self.field.len() != expected {
            return Err(SolverError::FieldLength { dims: self.dims, expected, actual: self.field.len() });
        }
        if let Some(i) = self.field.iter().position(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite(i));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(SolverError::Alpha(self.alpha));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.field.len()
    }

    pub fn is_empty(&self) -> bool {
        self.field.is_empty()
    }

    /// One Jacobi sweep of the 7-point stencil. Boundary cells keep their
    /// values; neighbour differences are summed in a fixed order.
    pub fn step(&mut self) {
        let [n0, n1, n2] = self.dims;
        let u = &self.field;
        let mut next = u.clone();
        if n0 >= 3 && n1 >= 3 && n2 >= 3 {
            let s1 = n2;
            let s0 = n1 * n2;
            for i in 1..n0 - 1 {
                for j in 1..n1 - 1 {
                    for k in 1..n2 - 1 {
                        let c = i * s0 + j * s1 + k;
                        let v = u[c];
                        let lap = (u[c - s0] - v)
                            + (u[c + s0] - v)
                            + (u[c - s1] - v)
                            + (u[c + s1] - v)
                            + (u[c - 1] - v)
                            + (u[c + 1] - v);
                        next[c] = v + self.alpha * lap;
                    }
                }
            }
        }
        self.field = next;
        self.iteration += 1;
    }

    pub fn advance(&mut self, steps: u64) {
        for _ in 0..steps {
            self.step();
        }
    }
}

/// Functional form of [`SolverState::step`].
pub fn step(mut state: SolverState) -> SolverState {
    state.step();
    state
}

/// Whole iterations the machine completes in one quantum:
/// `floor(quantum * iter_rate_factor / (1 + load))`.
pub fn iterations_in_quantum(machine: &MachineSpec, quantum_seconds: f64) -> u64 {
    (quantum_seconds * machine.iter_rate_factor / (1.0 + machine.load)).floor() as u64
}

/// Steps the solver for one simulated quantum on `machine`.
pub fn run_quantum(state: &mut SolverState, machine: &MachineSpec, quantum_seconds: f64) -> u64 {
    let n = iterations_in_quantum(machine, quantum_seconds);
    state.advance(n);
    n
}

/// What the migrator is told about a run so it can pick a new host.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceProfile {
    pub memory_bytes_required: u64,
    pub flops_per_iteration: u64,
    pub checkpoint_size_bytes: u64,
    pub io_pattern: String,
}

/// Flops per interior point per sweep: six differences, five additions,
/// one multiply and one add.
const FLOPS_PER_POINT: u64 = 13;

pub fn resource_profile(state: &SolverState) -> ResourceProfile {
    let interior: u64 = state.dims.iter().map(|&d| d.saturating_sub(2) as u64).product();
    ResourceProfile {
        // Two buffers: the current field and the sweep target.
        memory_bytes_required: 2 * 8 * state.len() as u64,
        flops_per_iteration: FLOPS_PER_POINT * interior,
        checkpoint_size_bytes: super::checkpoint::encoded_len(state) as u64,
        io_pattern: "periodic-checkpoint".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn machine(factor: f64, load: f64) -> MachineSpec {
        MachineSpec {
            name: "m".into(),
            domain: "d".into(),
            op_sys: "LINUX".into(),
            cpu_count: 1,
            cpu_speed_mhz: 1.0,
            mem_bytes: 1,
            load,
            iter_rate_factor: factor,
        }
    }

    #[test]
    fn uniform_field_is_steady() {
        let mut s = SolverState::new([5, 6, 7], vec![0.3; 210], 0.15, "r").unwrap();
        let before = s.field.clone();
        s.advance(5);
        assert_eq!(s.field, before);
        assert_eq!(s.iteration, 5);
    }

    #[test]
    fn zero_alpha_is_identity() {
        let mut s = SolverState::seeded([6, 6, 6], 0.0, 3, "r").unwrap();
        let before = s.field.clone();
        s.step();
        assert_eq!(s.field, before);
    }

    #[test]
    fn heat_spreads_from_a_point() {
        let mut field = vec![0.0; 125];
        field[62] = 1.0; // centre of 5x5x5
        let mut s = SolverState::new([5, 5, 5], field, 0.1, "r").unwrap();
        s.step();
        assert!((s.field[62] - 0.4).abs() < 1e-15);
        assert!((s.field[62 + 1] - 0.1).abs() < 1e-15);
        assert!((s.field[62 - 25] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn tiny_grids_have_no_interior() {
        let mut s = SolverState::seeded([2, 9, 9], 0.1, 1, "r").unwrap();
        let before = s.field.clone();
        s.step();
        assert_eq!(s.field, before);
    }

    #[test]
    fn validation() {
        assert!(matches!(SolverState::new([0, 1, 1], vec![], 0.1, "r"), Err(SolverError::Dims(_))));
        assert!(matches!(SolverState::new([2, 2, 2], vec![0.0; 7], 0.1, "r"), Err(SolverError::FieldLength { .. })));
        assert!(matches!(SolverState::new([1, 1, 1], vec![f64::NAN], 0.1, "r"), Err(SolverError::NonFinite(0))));
        assert!(matches!(SolverState::new([1, 1, 1], vec![0.0], -1.0, "r"), Err(SolverError::Alpha(_))));
    }

    #[test]
    fn quantum_rate_formula() {
        assert_eq!(iterations_in_quantum(&machine(10.0, 0.0), 1.0), 10);
        assert_eq!(iterations_in_quantum(&machine(10.0, 1.0), 1.0), 5);
        assert_eq!(iterations_in_quantum(&machine(10.0, 0.25), 10.0), 80);
        let mut s = SolverState::seeded([3, 3, 3], 0.1, 0, "r").unwrap();
        assert_eq!(run_quantum(&mut s, &machine(7.0, 0.0), 1.5), 10);
        assert_eq!(s.iteration, 10);
    }

    #[test]
    fn profile_numbers() {
        let s = SolverState::seeded([8, 8, 8], 0.1, 0, "run").unwrap();
        let p = resource_profile(&s);
        assert_eq!(p.memory_bytes_required, 8192);
        assert!(p.memory_bytes_required >= 8 * 512);
        assert_eq!(p.flops_per_iteration, 13 * 216);
    }
}
