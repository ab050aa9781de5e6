#![allow(dead_code, clippy::needless_range_loop)]

pub mod attention_oracle;
pub mod metric_oracle;
pub mod oracle;
