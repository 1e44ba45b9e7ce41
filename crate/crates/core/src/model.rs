//! The full trainable network: detector, ICR head, domain classifiers and
//! the injected pair of extra alignment terms, sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{ImageDomainClassifier, InstanceDomainClassifier};
use crate::dataset::{Domain, Image};
use crate::detector::{BackboneFeatures, Detection, Detector, DetectorConfig};
use crate::icr::{IcrHead, ImageLevelPrediction};
use crate::nn::ParamStore;
use crate::trainer::injected::{FocalGlobalAlignment, LeastSquaresLocalAlignment};

/// Hidden width of the image-level domain classifier.
pub const IMAGE_DC_HIDDEN: usize = 16;
/// Hidden width of the instance-level domain classifier.
pub const INSTANCE_DC_HIDDEN: usize = 32;

#[derive(Clone, Debug)]
pub struct Model {
    pub detector: Detector,
    pub icr: IcrHead,
    pub image_dc: ImageDomainClassifier,
    pub instance_dc: InstanceDomainClassifier,
    pub sw_global: FocalGlobalAlignment,
    pub sw_local: LeastSquaresLocalAlignment,
    pub params: ParamStore,
}

impl Model {
    /// Every head is created in a fixed order regardless of which ones a
    /// training mode uses, so equal seeds give equal initial weights.
    pub fn new(config: DetectorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x1417);
        let mut params = ParamStore::new();
        let d = config.feature_dim();
        let mid = config.channels[1];
        let roi_dim = config.roi_feature_dim();
        let c = config.num_classes;
        let detector = Detector::new(config, &mut params, &mut rng);
        let icr = IcrHead::new(&mut params, &mut rng, d, c);
        let image_dc = ImageDomainClassifier::new(&mut params, &mut rng, d, IMAGE_DC_HIDDEN);
        let instance_dc = InstanceDomainClassifier::new(&mut params, &mut rng, roi_dim, INSTANCE_DC_HIDDEN);
        let sw_global = FocalGlobalAlignment::new(&mut params, &mut rng, d);
        let sw_local = LeastSquaresLocalAlignment::new(&mut params, &mut rng, mid);
        Self {
            detector,
            icr,
            image_dc,
            instance_dc,
            sw_global,
            sw_local,
            params,
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.detector.config
    }

    pub fn num_classes(&self) -> usize {
        self.detector.config.num_classes
    }

    pub fn detect(&self, image: &Image) -> Vec<Detection> {
        self.detector.detect(&self.params, image)
    }

    pub fn backbone_features(&self, image: &Image) -> BackboneFeatures {
        self.detector.backbone_forward(&self.params, image)
    }

    pub fn image_prediction(&self, image: &Image, domain: Domain) -> ImageLevelPrediction {
        self.icr
            .icr_forward(&self.params, &self.backbone_features(image), domain)
    }
}
