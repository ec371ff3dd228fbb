//! Simulation and analysis of delay differential equations with distributed
//! delays through Erlang mixture kernels and the linear chain trick.

pub mod approx;
pub mod ddesolve;
pub mod integrate;
pub mod kernels;
pub mod lct;
pub mod linalg;
pub mod models;
pub mod quadrature;
pub mod special;
pub mod stability;
pub mod studies;
