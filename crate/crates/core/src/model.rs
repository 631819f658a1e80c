//! The full detector: encoder, coarse head, coherence stage and decoder.

use iceg_tensor::{Element, ParamStore, Tensor};

use crate::cfc::{Cfc, CfcOutput};
use crate::config::ModelConfig;
use crate::encoder::{CoarseHead, Encoder, FeaturePyramid};
use crate::error::Result;
use crate::esd::{Decoder, DecoderFlags, DecoderOutputs};
use crate::nn::Mode;

/// Everything a forward pass produces, kept for losses and inspection.
#[derive(Clone)]
pub struct DetectorOutput<T: Element> {
    pub pyramid: FeaturePyramid<T>,
    pub cfc: CfcOutput<T>,
    pub f5s: Tensor<T>,
    pub decoder: DecoderOutputs<T>,
}

impl<T: Element> DetectorOutput<T> {
    pub fn final_logits(&self) -> &Tensor<T> {
        &self.decoder.final_logits
    }

    pub fn fl4(&self) -> &Tensor<T> {
        &self.cfc.fl[3]
    }
}

pub struct Detector<T: Element> {
    store: ParamStore<T>,
    encoder: Encoder<T>,
    head: CoarseHead<T>,
    cfc: Cfc<T>,
    decoder: Decoder<T>,
    cfg: ModelConfig,
}

impl<T: Element> Detector<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let store = ParamStore::new(seed);
        let root = store.root();
        let encoder = Encoder::new(&root.sub("encoder"), &cfg.encoder);
        let ch = encoder.channels();
        let w = cfg.width;
        let head = CoarseHead::new(&root.sub("head"), ch[4], w, &cfg.aspp_dilations);
        let cfc = Cfc::new(&root.sub("cfc"), &ch[1..], w, cfg.attention_reduction);
        let flags = DecoderFlags {
            sigmoid_before_resample: cfg.sigmoid_before_resample,
            background_mask: cfg.background_mask,
        };
        let decoder = Decoder::new(&root.sub("decoder"), w, w, cfg.attention_reduction, flags);
        Detector {
            store,
            encoder,
            head,
            cfc,
            decoder,
            cfg: cfg.clone(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn decoder(&self) -> &Decoder<T> {
        &self.decoder
    }

    pub fn forward(&self, images: &Tensor<T>, mode: Mode) -> Result<DetectorOutput<T>> {
        let (_, _, h, w) = images.dims4()?;
        let pyramid = self.encoder.extract(images, mode)?;
        let (f5s, p5s) = self.head.forward(pyramid.deepest(), mode)?;
        let cfc = self.cfc.forward(&pyramid.levels[1..], mode)?;
        let decoder = self.decoder.forward(&cfc.fl, &f5s, &p5s, (h, w), mode)?;
        Ok(DetectorOutput {
            pyramid,
            cfc,
            f5s,
            decoder,
        })
    }

    /// Sigmoided final prediction at input resolution in inference mode.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let was_frozen = self.store.is_frozen();
        self.store.set_frozen(true);
        let out = self.forward(&images.detach(), Mode::Eval);
        self.store.set_frozen(was_frozen);
        Ok(out?.decoder.final_prediction())
    }
}
