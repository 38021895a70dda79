#![allow(dead_code)]

pub mod fd;
pub mod kalman;
pub mod loss;
