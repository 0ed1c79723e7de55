from typing import TypedDict, Optional, List, Dict, Any, Tuple


class GradCheckReport(TypedDict):
    max_rel_error: float
    passed: bool
    worst_index: Tuple[int, ...]
    nonfinite: List[Tuple[int, ...]]


class ReceptiveField(TypedDict):
    rf: int
    jump: int


class LayerSummary(TypedDict):
    name: str
    output_shape: List[int]
    params: int


class HistoryRow(TypedDict):
    iter: int
    epoch: int
    lr: float
    loss: float
    reg: float


class MetricRow(TypedDict):
    image_id: str
    metric_name: str
    value: float


class BoundaryReport(TypedDict):
    mae: List[float]
    missing: List[Tuple[int, int]]


class TrainResult(TypedDict):
    store: Any
    optimizer: Any
    history: List[HistoryRow]
    iteration: int
    finished: bool


class EvalTable(TypedDict):
    rows: List[MetricRow]
    aggregate: Dict[str, Dict[str, float]]
    pooled_auc: Optional[float]


class CheckpointMeta(TypedDict):
    version: int
    iteration: int
    epoch: int
    rng: Dict[str, Any]
    config_hash: str
    sha256: str


class ConfusionCounts(TypedDict):
    tp: int
    tn: int
    fp: int
    fn: int


class SenAcc(TypedDict):
    sen: float
    acc: float


class Sample(TypedDict):
    id: str
    image: Any  # [3, H, W] float in [0, 1]
    mask: Any  # [H, W] uint8 class indices, 255 = ignore
