#![allow(dead_code)]

pub mod gen;
pub mod lp;
pub mod qp;
