//! Least-squares distribution factors (LSDF): a data-fitted linear model of
//! branch active-power flows, fitted from AC power flow samples and compared
//! against classical DC power transfer distribution factors (PTDF).

pub mod acpf;
pub mod case;
mod compensated;
pub mod evaluation;
pub mod lsdf;
pub mod ptdf;
pub mod sampling;
