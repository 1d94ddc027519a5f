pub mod autodiff;
pub mod kinetics;
pub mod models;
pub mod pipeline;
pub mod plot;
pub mod scheme;
pub mod solver;
