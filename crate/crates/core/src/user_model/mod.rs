//! Contrastive user embeddings and similar-user retrieval.

mod augment;
mod encoder;
mod index;
mod loss;
mod train;

pub use augment::{
    apply, augment_crop, augment_mask, augment_reorder, ratio_len, sample_views, Augmentation,
    AugmentationConfig, AugmentedView,
};
pub use encoder::{EncoderConfig, UserEncoder};
pub use index::UserIndex;
pub use loss::infonce_loss;
pub use train::{train_user_encoder, UserTrainConfig, UserTrainTrace};
