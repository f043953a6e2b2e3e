//! Landing-page navigation laboratory.
//!
//! Three learned components decide which page a user lands on at each app
//! entry:
//!
//! * [`isp`]: a multi-branch multi-treatment uplift model trained on daily
//!   randomized-trial data, producing static preference scores `δ`.
//! * [`iit`]: conservative Q-learning over hourly session transitions with a
//!   traffic-dependent conservative coefficient, producing interest scores `p`.
//! * [`am`]: a mixture-of-experts network producing per-page blend weights `γ`
//!   that fuse `δ` and `p` into the final navigation score.
//!
//! Everything is trained and evaluated against [`sim`], a synthetic multi-page
//! user world whose treatment effects are known in closed form.

pub mod am;
pub mod dataset;
pub mod error;
pub mod iit;
pub mod isp;
pub mod nn;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};
