//! Manifests, splits, augmentation and normalization.

mod augment;
mod manifest;
mod normalize;
mod splits;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::{
    augment_image, augment_train, augment_view, center_crop, default_iqa_replicas, inference_image_views,
    inference_views, random_resized_crop, resize_center_crop, resize_shortest_side,
    AugmentationPolicy, CROP_SIZE, IQA_INFERENCE_CROPS,
};
pub use manifest::{load_manifest, load_rgb, write_manifest, Dataset, Label, Sample, SplitTag};
pub use normalize::{images_to_unit_tensor, Normalizer};
pub use splits::{make_splits, Split, SplitFractions, SplitPlan};

pub(crate) const STREAM_SPLIT: u64 = 1;
pub(crate) const STREAM_TRAIN: u64 = 2;
pub(crate) const STREAM_EVAL: u64 = 3;
pub(crate) const STREAM_SHUFFLE: u64 = 4;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, purpose, index)`, so per-sample work
/// gives the same result whatever order or thread it runs on.
pub fn substream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(purpose)));
    rng.set_stream(index);
    rng
}

/// Generator for sample `index` during `epoch` of training.
pub fn train_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    substream(seed, STREAM_TRAIN ^ ((epoch as u64) << 8), index as u64)
}

/// Generator for the inference views of sample `index`.
pub fn eval_rng(seed: u64, index: usize) -> ChaCha8Rng {
    substream(seed, STREAM_EVAL, index as u64)
}

pub(crate) fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    substream(seed, STREAM_SHUFFLE, epoch as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_differ_and_repeat() {
        let a: u64 = substream(1, 2, 3).random();
        assert_eq!(a, substream(1, 2, 3).random::<u64>());
        assert_ne!(a, substream(1, 2, 4).random::<u64>());
        assert_ne!(a, substream(1, 3, 3).random::<u64>());
        assert_ne!(train_rng(0, 1, 0).random::<u64>(), train_rng(0, 2, 0).random::<u64>());
    }
}
