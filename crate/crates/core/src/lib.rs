pub mod graph;
pub mod io;
pub mod model;
pub mod montecarlo;
pub mod moments;
pub mod perf;
pub mod cli;
pub mod schedule;
