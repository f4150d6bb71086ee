#![allow(dead_code)]

pub mod ap;
pub mod grad;
pub mod lab;
