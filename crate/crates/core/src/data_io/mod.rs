//! File formats, synthetic data and visualization.

mod color;
mod files;
mod synth;

pub use color::{color_wheel, flow_to_color};
pub use files::{read_flo, read_kitti_png, read_rgb_png, write_flo, write_kitti_png, write_rgb_png};
pub use synth::{
    dataset_sample, generate, sample_bilinear, sample_from_flow, sample_seed, sequence, texture, FlowSample, Pattern, SyntheticSpec, Warp,
};
