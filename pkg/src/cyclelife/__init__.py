"""cyclelife: battery cycle-life prediction from early degradation-test data.

The package covers the full pipeline at desk scale: standardized battery
files and cleaning (ingest), label derivation and battery arithmetic (core),
fixed-shape model inputs (preprocess), a reverse-mode kernel with Adam
(diffkernel), cycle-token models and baselines (models), training and
analysis protocols (evaluation), a seeded synthetic fleet generator with
exact ground truth (synth), and a command-line front end (cli).
"""

from .core import (
    AgingCondition,
    BatteryFormat,
    BatteryRecord,
    Cycle,
    LabelResult,
    LabelStatus,
    Q0Mode,
    SohTrajectory,
    TimePoint,
    compute_soh,
    derive_life_label,
    integrate_capacity,
    soh_trajectory,
)
from .errors import (
    ConfigError,
    CycleLifeError,
    DataError,
    InsufficientDataError,
    NumericalError,
    ParseError,
    ShapeError,
    ValidationError,
)
from .evaluation import (
    DatasetSplits,
    EvalReport,
    OptimConfig,
    RunMetrics,
    TransferMode,
    alpha_accuracy,
    evaluate_model,
    mape,
    mmd_squared,
    partition,
    run_experiment,
    seen_unseen_report,
    split_dataset,
    sweep_usable_cycles,
    train_model,
    transfer_run,
)
from .ingest import (
    CleaningReport,
    DatasetTag,
    FleetManifest,
    ManifestEntry,
    clean_battery,
    filter_outlier_cycles,
    load_battery,
    load_manifest,
    save_battery,
    save_manifest,
)
from .models import (
    CyclePatchConfig,
    CyclePatchModel,
    DummyModel,
    MlpBaselineConfig,
    MlpBaselineModel,
    MlpStackEncoder,
    ModelOutput,
    dummy_fit_predict,
    load_model,
    save_model,
    segment,
)
from .preprocess import (
    ResampledCycle,
    SampleTensor,
    build_sample,
    load_sample_cache,
    make_dataset,
    normalize_cycle,
    resample_cycle,
    samples_from_record,
    save_sample_cache,
)
from .synth import SynthConfig, generate_fleet, save_fleet, soh_model

__version__ = "0.1.0"
