// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

pub mod fixtures;
pub mod gradcheck;
