#![allow(dead_code)]

pub mod mps;
