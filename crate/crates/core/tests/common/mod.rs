//! Modules shared between integration test targets. This directory is not
//! itself a test target; each target pulls it in with `mod common`, so an
//! item used by one target can look dead while compiling another.
#![allow(dead_code)]

pub mod fd;
