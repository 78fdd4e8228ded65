//! Distributed constrained optimal coordination of uncertain high-order
//! agents: a projected primal-dual signal generator per agent, tracked by an
//! adaptive RBF controller with an internal model for disturbance rejection.

pub mod controller;
pub mod convex;
pub mod exosystem;
pub mod generator;
pub mod graph;
pub mod linalg;
pub mod ode;
pub mod oracle;
pub mod plant;
pub mod scenario;
pub mod sim;
pub mod cli;
