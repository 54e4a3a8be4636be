#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod control;
pub mod hjb;
pub mod oracle;
pub mod poly;
pub mod sdp;
pub mod sim;
pub mod sos;
