"""Speaker- and style-conditioned StarGAN: networks, losses and training."""
from .losses import (
    LossBreakdown,
    LossWeights,
    adv_loss_d,
    adv_loss_g,
    cycle_loss,
    dom_loss_c,
    dom_loss_g,
    identity_loss,
    total_losses,
)
from .networks import (
    Classifier,
    ConditionMerge,
    Discriminator,
    GANConfig,
    Generator,
    ModelBundle,
    condition_merge,
    product_pool_sigmoid,
    product_pool_softmax,
)
from .training import (
    SegmentBatch,
    TargetBatch,
    TrainConfig,
    TrainingSet,
    Utterance,
    classifier_accuracy,
    load_bundle,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)
