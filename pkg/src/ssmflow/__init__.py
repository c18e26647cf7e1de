"""Causal probabilistic prediction of traffic surrogate safety sequences."""

from .data import (
    CHANNELS,
    DEFAULT_TTC_CAP,
    DT,
    OBSERVED_LEN,
    SEQ_LEN,
    ChannelStats,
    DatasetSplit,
    InteractionWindow,
    TrajectoryRecord,
    compute_ttc,
    destandardize,
    differentiate_speed,
    filter_min_ttc,
    split_dataset,
    standardize,
    window_interactions,
    window_stream,
)
from .encoder import EncoderConfig, MaskedObservation, SequenceEncoder, mask_observation
from .errors import (
    ConfigError,
    DataError,
    InfeasibleConstraintError,
    NumericFault,
    UnstableDenominatorError,
)
from .flow import AffineMaskedFlow, FlowConfig, ForcedDimension, MadeMasks, build_masks, path_counts
from .model import ModelConfig, SafetyDensityModel
from .probability import (
    ActionTaxonomy,
    DEFAULT_TAXONOMY,
    EventBox,
    ProbabilityEngine,
    ProbabilityEstimate,
    X_ALL,
    conditional_action_probability,
    conditional_crash_probability,
    crash_probability,
    mc_integrate,
)
from .counterfactual import (
    CounterfactualSpec,
    EffectivenessSeries,
    classify_context,
    effectiveness,
    forced_rollout,
)
from .simulate import (
    OracleEstimate,
    ScenarioConfig,
    SimulationTrace,
    oracle_crash_probability,
    simulate_interaction,
)
from .training import (
    Checkpoint,
    TrainConfig,
    crps_from_samples,
    evaluate_crps,
    evaluate_mse,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
