//! Core of the embodied synchronization runtime.
//!
//! Everything in this crate is allocation-only and free of IO: the message
//! schema, the operation status machine, the numerical primitives, the
//! perception engine, the dual-loop controller, and sans-IO state machines for
//! both ends of the session. The `embsync` crate supplies clocks, sockets,
//! files and the command line.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod control;
pub mod lifecycle;
pub mod message;
pub mod rk4;
pub mod backend;
pub mod constraint;
pub mod perception;
pub mod controller;
pub mod client;
pub mod loopback;
pub mod server;
pub mod session;
