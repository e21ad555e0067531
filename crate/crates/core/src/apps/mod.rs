//! Adversarial input detection, targeted pruning and selective protection
//! built on slices.

mod attack;
mod cart;
mod detect;
mod protect;
mod prune;

pub use attack::{fgsm, pgd};
pub use cart::{cart_fit, cart_predict, CartConfig, FeatureRow, Node, Tree};
pub use detect::{
    detect, detect_batch, detector_from_bytes, detector_to_bytes, load_detector, predicted_row, save_detector,
    slice_vector, train_detector, verdict, Detection, Detector, DetectorTraining, Verdict,
};
pub use protect::{attacker_start, select_protected, simulate_extraction, Extraction, ExtractionConfig, ProtectionSet};
pub use prune::{fine_tune, prune, PruneConfig, Pruned, SelectionMode};
