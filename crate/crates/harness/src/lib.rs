//! Audits, augmentation and toy training for monomial weight-space symmetries.

pub mod audit;
pub mod report;
pub mod stack;
pub mod train;
