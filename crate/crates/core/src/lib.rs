pub mod network;
pub mod powerflow;
pub mod measurements;
pub mod impedance;
pub mod estimation;
pub mod synth;
pub mod validation;
