//! Lookup-subnet spatial graph convolutional networks for transductive node
//! classification, on top of a small reverse-mode autodiff core.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod graph;
pub mod gradcheck;
pub mod layer;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use autodiff::{OpKind, Tape, Var};
pub use dataset::{load_dataset, save_dataset, Dataset, DatasetError, Split, Splits};
pub use graph::{plan_epoch, BatchPlan, Graph, GraphError, NeighborCap, Neighborhood, NeighborhoodCache};
pub use gradcheck::grad_check;
pub use tensor::{Tensor, TensorError};
pub use trainer::{evaluate, train, TrainConfig, TrainError, TrainHistory};
