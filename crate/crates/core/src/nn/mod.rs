//! Neural network components: the action classifier, the perturbation
//! elimination GAN pair, losses and optimizers.

mod checkpoint;
mod loss;
mod models;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, ArchKind, Checkpoint};
pub use loss::{bce_fake, bce_real, mse_loss, per_clip_cross_entropy, softmax_rows};
pub use models::{
    classify, classify_clip, predict, AttackTarget, ClassifierF, ConvLayer, DiscriminatorD,
    GenThenClassify, GeneratorG, TapeBinding,
};
pub use optim::{OptimKind, Optimizer, PlateauScheduler};
