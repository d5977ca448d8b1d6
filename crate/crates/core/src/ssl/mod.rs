//! Self-distillation, masked-patch and spreading objectives with the
//! teacher-side machinery (centering, EMA).

mod head;
mod loss;
mod mask;

pub use head::{HeadConfig, ProjectionHead};
pub use loss::{
    dino_loss, ema_update, ibot_loss, koleo_loss, masked_cross_entropy, teacher_probs, update_center, MaskStatus,
    Temperatures, KOLEO_EPS,
};
pub use mask::{mask_patches, MaskPlan};
