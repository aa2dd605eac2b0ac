from .permutation import Permutation
from .serialization import (
    DatasetLoadResult,
    LoadIssue,
    RunManifest,
    load_dataset,
    load_manifest,
    load_plan,
    save_plan,
    verify_manifest,
    write_manifest,
)
from .types import (
    CandidateImage,
    DescriptionRecord,
    JudgeVerdict,
    MultimodalGoal,
    Plan,
    PlanStep,
)

__all__ = [
    "CandidateImage",
    "DatasetLoadResult",
    "DescriptionRecord",
    "JudgeVerdict",
    "LoadIssue",
    "MultimodalGoal",
    "Permutation",
    "Plan",
    "PlanStep",
    "RunManifest",
    "load_dataset",
    "load_manifest",
    "load_plan",
    "save_plan",
    "verify_manifest",
    "write_manifest",
]
