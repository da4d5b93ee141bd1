"""confex: conformal calibration of sufficient explanation masks.

Post-processes feature-attribution explanations of an image classifier into
minimal pixel (or super-pixel) subsets that reproduce the model's prediction
with a user-chosen confidence, calibrated on held-out data.
"""

__version__ = "0.1.0"

from .conformal import (
    CalibrationArtifact,
    ExplanationMask,
    calibrate_threshold,
    explain,
    nested_masks,
)
from .conformity import (
    ConformityKind,
    ConformityScore,
    ThresholdGrid,
    ThresholdGridSpec,
    make_threshold_grid,
    score_instance,
    score_pixelwise,
    score_summed,
    score_superpixel,
    selection_at_threshold,
    standardize_scores,
)
from .errors import (
    ConfexError,
    DataIntegrityError,
    ManifestError,
    PredictorTransportError,
    TensorFormatError,
)
from .evaluation import (
    CoverageTrialConfig,
    EvalReport,
    confidence_sweep,
    coverage_bound,
    evaluate,
    run_coverage_trial,
)
from .predictor import (
    ConstantPredictor,
    LinearPredictor,
    RegionWitnessPredictor,
    SubprocessPredictor,
    apply_baseline_mask,
    predict_batch,
)
from .segmentation import (
    SegmentationMap,
    SlicParams,
    enforce_connectivity,
    grid_segmentation,
    slic_segment,
    slic_segment_with_energy,
)
from .tensor_io import (
    AttributionMap,
    DatasetManifest,
    ImageTensor,
    PredictionVector,
    load_manifest,
    read_tensor,
    write_tensor,
)

__all__ = [name for name in dir() if not name.startswith("_")]
