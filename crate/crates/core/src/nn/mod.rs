//! Tiny convolutional network with hand-derived gradients and its training loops.

pub mod layers;
pub mod net;
pub mod train;

pub use layers::{Conv2d, Linear};
pub use net::{
    binary_cross_entropy, cross_entropy, sgd_step, sigmoid, softmax_rows, CawLayer, ForwardCache,
    Gradients, Inference, NetConfig, NetError, TinyNet, PARAM_NAMES,
};
pub use train::{
    align_once, concept_samples, init_main_net, pretrain_concept_net, recalibrate_whitening,
    resume, train, warm_start, ConceptDataset, ConceptTrainConfig, LabeledImages, LogRow,
    TrainConfig, TrainError, TrainState, TrainedModel,
};
