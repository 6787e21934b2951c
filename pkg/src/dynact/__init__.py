"""dynact: desk-scale decoder-only transformer inference with dynamic FFN
activation sparsity (dense / TT / Griffin-style top-k / TDA), CETT threshold
calibration, activation-inertia analyses and a benchmarking harness."""

from .errors import (
    CacheOverflowError,
    ContractViolation,
    DegenerateCalibrationError,
    DivergenceError,
    DynactError,
    LoadError,
    UndefinedCettError,
)
from .model import (
    GenerationRequest,
    GenerationResult,
    KvCache,
    ModelConfig,
    ModelWeights,
    PrefillTrace,
    Sampling,
    dense_ffn,
    decode_step,
    gated_hidden,
    generate,
    prefill,
)
from .sparsity import (
    DenseStrategy,
    FfnStrategy,
    GriffinStrategy,
    LayerMaskSet,
    TdaStrategy,
    ThresholdProfile,
    TtStrategy,
    build_griffin_masks,
    build_tda_masks,
    cett,
    make_strategy,
    neuron_magnitudes,
    profile_for_active_fraction,
    search_threshold,
    sparsity_report,
    tda_ffn_forward,
    tt_ffn_forward,
)
from .tokenizer import BOS_ID, detokenize, tokenize
from .weights_io import load_weights, make_toy_model, random_weights

__version__ = "0.1.0"
