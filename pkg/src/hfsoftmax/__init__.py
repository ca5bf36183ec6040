"""Selective softmax training with hashing-forest class selection."""

from .allocation import AllocationSchedule, AllocationState, begin_phase, schedule_at
from .data import DatasetSpec, SyntheticDataset, generate_dataset
from .diagnostics import MetricsRecord, cp_k, min_m_for_threshold, ncg_k, overlap_with_optimal
from .hashing_forest import HashForest, HashTree, build_forest, build_tree, query_forest, query_tree
from .param_store import ParamStore
from .selectors import ActiveSet, SelectorConfig, batch_select
from .softmax_core import backward_selective, forward_full, forward_selective
from .trainer import RunResult, TrainConfig, evaluate, train

__version__ = "0.1.0"
