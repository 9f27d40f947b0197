"""Instance-adaptive denormalization for diverse semantic image synthesis.

The package models per-class modulation parameters of conditional
normalization layers as learnable distributions, samples them per
instance from a shared noise bank, and supports reference-guided noise
remapping, adversarial training, and an instance/semantic diversity
metric suite on a synthetic shapes benchmark.
"""

from .core import (
    INADE,
    DistributionParams,
    LayerTransform,
    NoiseBank,
    inade_layer_forward,
    modulate_instances,
    sample_noise_bank,
    scatter_igs,
    transform_noise,
)
from .data import Sample, ShapesConfig, ShapesDataset, collate, generate_shapes
from .engine import (
    TrainConfig,
    TrainState,
    init_state,
    load_checkpoint,
    lr_at_epoch,
    resample_instance,
    sample_mixed,
    sample_prior,
    sample_reference,
    save_checkpoint,
    train_loop,
    train_step,
)
from .labels import (
    InstanceMap,
    LabelPair,
    OneHotMask,
    SemanticMask,
    boundary_map,
    degenerate_instances,
    instance_region,
    resize_nearest,
    to_one_hot,
    validate_pair,
)
from .losses import (
    ConvPyramidExtractor,
    LossWeights,
    feature_matching_loss,
    hinge_d_loss,
    hinge_g_loss,
    perceptual_loss,
    total_generator_objective,
)
from .metrics import (
    DiversityReport,
    MeanAbsoluteDistance,
    PooledConvEmbedder,
    class_diversity,
    evaluate_model,
    fid,
    instance_diversity,
    miou_accu,
    overall_diversity,
)
from .networks import (
    Generator,
    INADEResBlock,
    ModelConfig,
    MultiScaleDiscriminator,
    build_default_models,
    discriminator_forward,
    generator_forward,
)
from .remap import (
    PerturbationMaps,
    PerturbationSet,
    RemappingEncoder,
    build_perturbation_set,
    encode_reference,
    instance_average_pool,
    instance_masked_resample,
    instance_partial_conv,
    kl_loss,
    remap_noise,
)

__version__ = "0.1.0"
