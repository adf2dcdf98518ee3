pub mod ad_demo;
pub mod bench;
