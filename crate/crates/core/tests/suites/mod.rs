//! Check bodies shared by the unit-style test targets and the acceptance
//! run. Each target uses only part of this.
#![allow(dead_code)]

pub mod features;
pub mod gradients;
pub mod lob;
