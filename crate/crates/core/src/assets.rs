//! Built-in simulation spec and rule file, embedded so the toolchain runs
//! out of the box without any external configuration.

pub const DEFAULT_SIM_SPEC: &str = include_str!("../assets/default_sim.toml");
pub const EXAMPLE_RULES: &str = include_str!("../assets/example_rules.nsr");
