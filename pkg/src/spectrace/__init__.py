"""Image-splicing analysis from self-supervised spectral signatures.

Overlapping patches are embedded through a small convolutional encoder
trained contrastively on half-spectrum features (patches from the same
image form positive pairs). At inference, all patch embeddings of an image
are compared pairwise by cosine; meanshift over the rows of that
consistency matrix yields a consensus pattern, and disagreement with it,
bilinearly upsampled, becomes a per-pixel response map that drives
detection scores and localization masks.
"""

from .config import PipelineConfig, load_config, save_config
from .consistency import (
    ConsistencyMatrix,
    MeanShiftConfig,
    ResponseMap,
    aggregate_response,
    meanshift_mode,
    pairwise_consistency,
    upsample_response,
)
from .decision import (
    BinaryMask,
    DetectionResult,
    Thresholds,
    localize,
    maybe_invert,
    score_response,
)
from .encoder import (
    Embedding,
    EncoderConfig,
    ModelState,
    build_encoder,
    embed,
    embed_batch,
    embed_patches,
    load_model,
    save_model,
)
from .errors import (
    ConfigError,
    DataError,
    DegenerateEmbeddingError,
    FormatError,
    NumericalError,
    SpectraceError,
)
from .imagedata import (
    DatasetManifest,
    ImageRecord,
    Patch,
    PatchGrid,
    SignatureParams,
    extract_grid_patches,
    generate_synthetic_splice,
    load_image,
    load_manifest,
    sample_training_patches,
)
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    average_precision,
    evaluate_dataset,
    f1_iou,
    mcc,
)
from .pipeline import compute_response
from .spectral import SpectralFeature, normalize_spectrum, rfft_features
from .trainer import (
    PairBatch,
    TrainConfig,
    build_pair_batch,
    build_patch_pool,
    contrastive_loss,
    cosine_similarity,
    gradient_check,
    lr_at,
    train,
)

__version__ = "0.1.0"
