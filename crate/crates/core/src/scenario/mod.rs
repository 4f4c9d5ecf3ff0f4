//! Scenario configuration, the builtin benchmarks and the simulation loop.

pub mod builtin;
pub mod config;
pub mod profile;
pub mod runner;

pub use builtin::{builtin, builtin_cycle1, builtin_cycle2, builtin_merge_join, CATALOG};
pub use config::{
    load_config, load_config_file, load_config_str, BackgroundSpec, DrivingTask, EventAction,
    EventTrigger, HumanVehicleSpec, PlatoonSpec, ProfileSource, ScenarioConfig, SimParams,
    SingleCavSpec, TriggerCondition,
};
pub use profile::{shipped_stop_and_go, SpeedProfile};
pub use runner::{run, run_with, run_with_bus, RunOutput};
