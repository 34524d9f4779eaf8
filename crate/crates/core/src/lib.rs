pub mod body_model;
pub mod direct_predict;
pub mod fitting;
pub mod labelgen;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod review;
pub mod so3;
pub mod synth;
pub mod util;
