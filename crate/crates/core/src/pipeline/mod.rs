//! The collaborative detector, its training, and the residual autoencoder.

pub mod autoencoder;
pub mod detector;
pub mod optim;
pub mod proposals;
pub mod train;

pub use autoencoder::{Autoencoder, AutoencoderArch, AUTOENCODER_KIND};
pub use detector::{bind_params, DecodedTensors, Detector, DetectorArch, FeatureMap, FusedFeature, DETECTOR_KIND};
pub use optim::{Adam, GradAccumulator, LrSchedule};
pub use proposals::{Proposal, ProposalSet};
pub use train::{
    assign_anchors, detection_loss, evaluate_detection_loss, mean_recon_loss, train_autoencoder, train_detector,
    AnchorTargets, DetectorHyper, TrainHyper, TrainReport, TrainingSample,
};
