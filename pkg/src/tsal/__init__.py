"""tsal: transfer-sampling active learning for rare-object retrieval.

Sample selection for annotation under domain shift: an optimal-transport
coupling carries SVM-margin ranks from labeled source candidates onto target
candidates, a window optimizer crops the next annotation query around the
best-ranked anchor, and a simulated or interactive loop accumulates labels.
"""

__version__ = "0.1.0"

from .alloop import (
    ActiveLearningRun,
    LoopConfig,
    MetricRow,
    OracleResponse,
    PendingQuery,
    RunResult,
    run_simulation,
    simulated_oracle,
)
from .candidates import (
    Candidate,
    CandidateSet,
    DatasetSplit,
    GroundTruthPoint,
    ImageMeta,
    load_candidate_set,
    nms,
    save_candidate_set,
    split_dataset,
    threshold_candidates,
)
from .synth import (
    DatasetScale,
    ShiftConfig,
    SyntheticDataset,
    generate,
    load_dataset,
    save_dataset,
)

__all__ = [
    "ActiveLearningRun",
    "Candidate",
    "CandidateSet",
    "DatasetScale",
    "DatasetSplit",
    "GroundTruthPoint",
    "ImageMeta",
    "LoopConfig",
    "MetricRow",
    "OracleResponse",
    "PendingQuery",
    "RunResult",
    "ShiftConfig",
    "SyntheticDataset",
    "generate",
    "load_candidate_set",
    "load_dataset",
    "nms",
    "run_simulation",
    "save_candidate_set",
    "save_dataset",
    "simulated_oracle",
    "split_dataset",
    "threshold_candidates",
    "__version__",
]
