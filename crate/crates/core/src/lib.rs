//! Fixed-point SqueezeNet v1.1 inference with a functional model of a
//! streaming MAC-16 convolution accelerator.

pub mod bench;
pub mod clock;
pub mod config;
pub mod error;
pub mod fixed;
pub mod fmap;
pub mod graph;
pub mod preprocess;
pub mod quantizer;
pub mod reference;
pub mod service;
pub mod sqj;

pub use error::{Error, Result};
pub use fixed::QFormat;
pub use fmap::{Fmap, QTensor};
pub use graph::forward::{forward, ExecPlan, Mode, NetInput};
pub use graph::top_k;
pub use graph::topology::{squeezenet_v1_1, NetworkDef};
pub use graph::weights::{load_weights, save_weights, WeightStore};
pub use preprocess::{PreprocessConfig, RgbImage};
pub use quantizer::{LayerQSpec, QuantConvParams};
pub use service::{Classifier, InferenceEngine};
pub use sqj::{SqjConfig, SqjEngine};
