//! One-shot TCP recognition service: raw 227x227 RGB in, top-5 classes out.

pub mod client;
pub mod server;
pub mod wire;

use crate::error::{Error, Result};
use crate::graph::forward::{forward, ExecPlan, Mode, NetInput};
use crate::graph::top_k;
use crate::graph::topology::NetworkDef;
use crate::graph::weights::WeightStore;
use crate::preprocess::{normalize, normalize_quantize, PreprocessConfig, RgbImage};
use crate::sqj::SqjConfig;

pub use client::{client_classify, Classification, Client, ClientError, ClientTiming};
pub use server::{serve, ServerConfig, ServerHandle};
pub use wire::{RecognitionRequest, RecognitionResponse, Status, WireError};

/// Anything that can rank classes for an image of the network geometry.
pub trait Classifier {
    /// The [`wire::TOP_K`] best `(class, probability)` pairs, descending.
    fn classify(&self, image: &RgbImage) -> Result<Vec<(usize, f64)>>;
}

/// The loaded network: preprocessing tail, forward pass and top-k.
#[derive(Debug, Clone)]
pub struct InferenceEngine {
    net: NetworkDef,
    store: WeightStore,
    plan: ExecPlan,
    preprocess: PreprocessConfig,
}

impl InferenceEngine {
    pub fn new(net: NetworkDef, store: WeightStore, mode: Mode, preprocess: PreprocessConfig) -> Result<Self> {
        Self::with_sqj_config(net, store, mode, preprocess, SqjConfig::default())
    }

    pub fn with_sqj_config(
        net: NetworkDef,
        store: WeightStore,
        mode: Mode,
        preprocess: PreprocessConfig,
        cfg: SqjConfig,
    ) -> Result<Self> {
        store.check_against(&net)?;
        preprocess.validate()?;
        let input = net.input();
        if (input.width, input.height) != (preprocess.target_width, preprocess.target_height) {
            return Err(Error::Config(format!(
                "preprocessing targets {}x{} but the network takes {input}",
                preprocess.target_width, preprocess.target_height
            )));
        }
        let usable = match mode {
            Mode::Float => store.has_float(),
            Mode::QuantNaive | Mode::QuantSqj => store.has_quant(),
        };
        if !usable {
            return Err(Error::Weights(format!("the weight store cannot run in {mode} mode")));
        }
        let plan = ExecPlan::with_config(&net, mode, cfg);
        Ok(Self { net, store, plan, preprocess })
    }

    pub fn network(&self) -> &NetworkDef {
        &self.net
    }

    pub fn mode(&self) -> Mode {
        self.plan.mode()
    }

    /// Softmax output for an image already at the network geometry.
    pub fn probabilities(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let out = match self.plan.mode() {
            Mode::Float => {
                let x = normalize(image, &self.preprocess)?;
                forward(&self.net, &self.store, &self.plan, NetInput::Float(&x), None)?
            }
            Mode::QuantNaive | Mode::QuantSqj => {
                let fmt = self
                    .store
                    .input_format()
                    .ok_or_else(|| Error::Weights("quantized store has no input format".into()))?;
                let x = normalize_quantize(image, &self.preprocess, fmt)?;
                forward(&self.net, &self.store, &self.plan, NetInput::Quant(&x, fmt), None)?
            }
        };
        Ok(out.probs)
    }
}

impl Classifier for InferenceEngine {
    fn classify(&self, image: &RgbImage) -> Result<Vec<(usize, f64)>> {
        top_k(&self.probabilities(image)?, wire::TOP_K)
    }
}

/// Response for an already parsed image. Classifier failures and panics
/// become `Internal` error frames.
pub fn respond(classifier: &dyn Classifier, image: &RgbImage) -> RecognitionResponse {
    let run = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| classifier.classify(image)));
    match run {
        Ok(Ok(entries)) if entries.len() == wire::TOP_K && entries.iter().all(|&(c, _)| c <= u16::MAX as usize) => {
            RecognitionResponse::Ok(entries.into_iter().map(|(c, p)| (c as u16, p as f32)).collect())
        }
        Ok(Ok(entries)) => RecognitionResponse::error(WireError::new(
            Status::Internal,
            format!("classifier returned {} entries", entries.len()),
        )),
        Ok(Err(e)) => RecognitionResponse::error(WireError::new(Status::Internal, e.to_string())),
        Err(_) => RecognitionResponse::error(WireError::new(Status::Internal, "classifier panicked")),
    }
}

/// Request bytes to response bytes, with no connection state.
pub fn handle_request(bytes: &[u8], classifier: &dyn Classifier) -> Vec<u8> {
    match wire::parse_request(bytes) {
        Ok(req) => respond(classifier, &req.image()),
        Err(e) => RecognitionResponse::error(e),
    }
    .encode()
}
