pub mod attack;
pub mod backend;
pub mod data;
pub mod features;
pub mod metrics;
pub mod pipeline;
pub mod perturb;
pub mod rng;
pub mod shallow;
pub mod signals;
pub mod synthetic;
