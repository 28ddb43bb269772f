mod conv;
mod cosine;
mod elementwise;
mod pool;
mod softmax;

pub use conv::{conv2d, routed_conv2d, routed_conv2d_reference};
pub use cosine::{cosine_similarity, group_max_cosine, GroupMaxCosine, COSINE_EPS};
pub use elementwise::{add, dot_const, mean, mul, relu, scale, sum};
pub use pool::{avg_downsample, concat_channels, max_pool2d, nearest_upsample, upsample_plane_data};
pub use softmax::{
    cross_entropy_map, log_softmax, log_softmax_channel, softmax, softmax_channel, CeTarget, TARGET_SUM_TOL,
};
