"""synctseg: cross-modality knowledge transfer for segmentation, desk scale.

Train an unpaired MR-to-CT translator whose cycle-consistency term is a
structural-similarity loss, carry the MR segmentation masks onto the
synthesized CT volumes, train a 2.5D residual U-Net on those synthetic
images, and evaluate with Dice on held-out CT-like phantoms.
"""

from .augment import AugmentPolicy, apply_policy, flip, random_ratio_crop, rotate
from .config import ConfigError, ExperimentConfig, load_config, parse_config_text, save_config
from .harness import context_sweep, kfold_split, run_pipeline
from .losses import (
    SsimConfig,
    bce_loss,
    dice_score,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    ssim_loss,
    ssim_map,
)
from .phantom import GenerationError, ModalityStyle, PhantomSpec, generate_phantom
from .report import compare_runs, emit_report
from .segment import (
    ContextConfig,
    ResUNetConfig,
    SegSample,
    assemble_stack,
    build_res_unet,
    predict_mask,
    train_segmenter,
)
from .stats import significance_test
from .translate import (
    CycleLossWeights,
    CycleMode,
    DiscriminatorConfig,
    GeneratorConfig,
    TranslatorState,
    build_translator,
    cycle_train_step,
    reconstruct_volume,
    synthesize_volume,
)
from .volumes import (
    MaskVolume,
    Modality,
    Units,
    UnitsError,
    Volume,
    VolumeFormatError,
    central_crop,
    normalize,
    read_mask,
    read_volume,
    window_clip,
    write_mask,
    write_volume,
)

__version__ = "0.1.0"
