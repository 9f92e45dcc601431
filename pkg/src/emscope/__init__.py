"""EM side-channel instruction disassembly pipeline.

Synthesizes (or ingests) instruction-level EM traces, segments them by
trigger pulses, extracts FFT band-magnitude features, classifies
instructions with from-scratch ensemble learners, and reproduces the
standard evaluation procedures: cross-validated confusion matrices,
random-search hyperparameter tuning, grid leakage mapping, and
whole-program code recognition.
"""

from .errors import (
    CalibrationError,
    ConfigError,
    DataError,
    EmscopeError,
    TraceFormatError,
)
from .evaluate import (
    ConfusionMatrix,
    LeakageMap,
    SearchSpace,
    code_recognition,
    grid_leakage_scan,
    kfold_cv,
    random_search,
)
from .features import (
    BandSpec,
    FeatureVector,
    Spectrum,
    band_features,
    default_band_spec,
    fft_magnitude,
    interval_features,
    select_bands,
)
from .forest import (
    ForestModel,
    ForestParams,
    TreeNode,
    knn_predict,
    load_model,
    predict,
    save_model,
    train_forest,
    train_tree,
    train_tsf,
)
from .segment import TriggerSpec, detect_triggers, extract_windows
from .simulate import (
    InstructionProfile,
    ProgramSpec,
    SimConfig,
    calibrate_noise,
    default_profiles,
    oracle_accuracy,
    synth_instruction,
    synth_program_trace,
)
from .trace import (
    InstructionWindow,
    LabeledDataset,
    Trace,
    read_trace,
    split_dataset,
    write_trace,
)

__version__ = "0.1.0"
