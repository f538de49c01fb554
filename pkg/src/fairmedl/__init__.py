"""Mixed-effects deep learning with adversarial debiasing, built on a small numpy autodiff."""

from .architecture import VARIANTS, ModelStack, StackConfig, assemble
from .data import (
    DatasetSchema,
    ProbeSpec,
    SynthConfig,
    encode_and_standardize,
    inject_probes,
    kfold_split,
    load_csv,
    partition_seen_unseen,
    synth_clustered,
)
from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    DivergenceError,
    FairMEDLError,
    IngestionError,
)
from .losses import LossWeights
from .training import TrainPlan, fit, random_search, repeated_runs, summarize, train

__version__ = "0.1.0"

__all__ = [
    "VARIANTS", "ModelStack", "StackConfig", "assemble", "DatasetSchema", "ProbeSpec",
    "SynthConfig", "encode_and_standardize", "inject_probes", "kfold_split", "load_csv",
    "partition_seen_unseen", "synth_clustered", "ConfigurationError", "ContractError",
    "DegenerateInputError", "DimensionError", "DivergenceError", "FairMEDLError",
    "IngestionError", "LossWeights", "TrainPlan", "fit", "random_search", "repeated_runs",
    "summarize", "train", "__version__",
]
