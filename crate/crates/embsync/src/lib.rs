//! Host side of embsync: WebSocket server and client transport, scenario
//! files, audit logs and reports.

pub mod audit;
pub mod clock;
pub mod ids;
pub mod report;
pub mod runner;
pub mod scenario;
pub mod ws;
