//! Reinforcement learning environments for the RoboCup 3D simulation league.

pub mod config;
pub mod envcore;
pub mod mockserver;
pub mod nao;
pub mod protocol;
pub mod sexpr;
pub mod tasks;
pub mod trace;
pub mod trainer;
pub mod vecenv;
pub mod wire;
