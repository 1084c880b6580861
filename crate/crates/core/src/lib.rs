pub mod config;
pub mod error;
pub mod kinetic;
pub mod lindblad;
pub mod operator;
pub mod petz;
pub mod phase_space;
pub mod scenario;
pub mod semiclassical;
pub mod symbols;
