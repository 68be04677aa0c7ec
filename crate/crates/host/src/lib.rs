//! Host side of the keyhand simulator: configuration, the lockstep
//! simulation driver, session replay, the command line and the
//! WebSocket bridge for teleoperation clients.

pub mod cli;
pub mod config;
pub mod script;
pub mod serve;
pub mod sim;
pub mod ui;

/// Wall-clock stamp for log headers, seconds since the Unix epoch.
pub fn wall_clock_now() -> String {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap_or_default();
    format!("unix:{}.{:03}", now.as_secs(), now.subsec_millis())
}
