//! Closed-loop and open-loop evaluation harnesses.

pub mod closed;
pub mod collision;
pub mod metrics;

pub use closed::{generate_scenarios, run_episode, run_suite, summarize, Driver, EpisodeResult, Scenario, ScenarioKind};
pub use collision::{boxes_overlap, separation, Obb};
pub use metrics::{constant_velocity, open_loop, OpenLoopMetrics, HORIZONS};
