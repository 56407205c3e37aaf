from .autoencoder import (
    PoseEncoder,
    ToyAutoencoder,
    decode,
    encode,
    encode_pose,
)
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_denoiser,
    save_checkpoint,
)
from .denoiser import (
    ConditioningBundle,
    DenoiserConfig,
    EncodedConditions,
    ToyDenoiser,
    ldm_loss,
    make_conditioning,
)
from .schedule import (
    NoiseSchedule,
    ScheduleConfig,
    ddim_sample,
    forward_noising,
    initial_noise,
)
from .train import (
    TrainConfig,
    TrainingDataGenerator,
    TrainingResult,
    train,
    train_two_stage,
)
