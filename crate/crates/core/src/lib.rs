//! Free-knot Kolmogorov-Arnold networks: B-spline layers with learnable
//! knot shifts, a scalar reverse-mode tape to train them, empirical knot
//! counting, and the datasets and training loops used by the experiments.

pub mod autodiff;
pub mod knots;
pub mod layers;
pub mod spline;
pub mod tasks;
pub mod training;
