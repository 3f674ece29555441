//! Universal policy-decoupling transformer agents for cooperative
//! multi-agent Q-learning, together with the pieces needed to train them:
//! a small autodiff engine, value mixers, a micro-battle simulator and a
//! DRQN-style trainer.

pub mod battlesim;
pub mod entity;
pub mod mixer;
pub mod model;
pub mod numerics;
pub mod trainer;
