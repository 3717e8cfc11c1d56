mod dataset;
pub mod io;
mod partition;

pub use dataset::{synth_blobs, Dataset};
pub use partition::{
    even_sizes, iid_partition, label_skew_partition, quantity_skew_partition, vertical_partition, Assignment,
    PartitionPlan, Scheme,
};
