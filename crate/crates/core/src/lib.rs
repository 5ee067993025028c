pub mod baselines;
pub mod datasets;
pub mod features;
pub mod gpcore;
pub mod metrics;
pub mod numcore;
pub mod rng;
pub mod selfcheck;
pub mod training;
