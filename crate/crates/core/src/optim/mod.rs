//! Losses, optimiser, schedules and the training loop.

pub mod adam;
pub mod losses;
pub mod objective;
pub mod schedule;
pub mod train;
