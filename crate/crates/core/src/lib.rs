//! Decentralized stochastic bilevel optimization over gossip networks.
//!
//! Nodes hold private upper- and lower-level losses and cooperate through a
//! doubly-stochastic mixing matrix. Each iteration takes one local step on the
//! upper variable, the lower variable and an auxiliary variable approximating
//! the inverse-Hessian-vector product, using either sampled Hessian-vector
//! products or central differences of sampled gradients, followed by one
//! gossip round.
//!
//! ```
//! use dsoba::engine::{run, HyperParams, RunOptions};
//! use dsoba::problem::{make_quadratic, QuadraticSpec};
//! use dsoba::topology::{build_topology, TopologyKind};
//!
//! let spec = QuadraticSpec { n_nodes: 4, dim_x: 2, dim_y: 3, conditioning: 3.0, heterogeneity: 0.5, noise: 0.1 };
//! let problem = make_quadratic(7, &spec);
//! let w = build_topology(&TopologyKind::uniform_ring(), 4).unwrap();
//! let record = run(&problem, &w, &HyperParams::default(), &RunOptions::new(200, 50, 1)).unwrap();
//! assert_eq!(record.probes.len(), 5);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod oracles;
pub mod problem;
pub mod topology;

pub use error::{Error, Result};
