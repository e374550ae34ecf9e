"""Classification-by-retrieval toolkit for encrypted network traffic.

Flows in, verdicts out: parse captures into bidirectional flows, extract a
fixed 183-slot statistical feature vector per flow, index labeled vectors in
an exact nearest-neighbor store, and classify by majority vote with
distance-based rejection and few-shot registration of new classes. A
from-scratch random forest serves as the comparison baseline and as the
second stage of the combined pipeline.
"""

from .cbr import (ClassRegistry, Thresholds, Verdict, VerdictKind,
                  add_labeled_sample, calibrate_thresholds, classify, vote)
from .features import (SCHEMA, FeatureSchema, Normalizer, extract_features,
                       extract_matrix, fit_normalizer)
from .flows import (Direction, Flow, FlowKey, FlowPacket, PacketRecord,
                    Protocol, TcpFlags, assemble_flows, load_flows_csv,
                    parse_pcap, save_flows_csv, truncate_flow)
from .forest import (EnsembleVerdict, ForestConfig, RandomForest,
                     ensemble_classify, train_forest)
from .harness import (Metrics, PipelineConfig, SplitSpec, compute_metrics,
                      find_plateau, new_class_protocol, packet_sweep,
                      run_ann_benchmark, run_eval, stratified_split)
from .index import (IndexConfig, IndexEntry, Neighbor, NNIndex,
                    benchmark_backend, row_distances)
from .selection import (FeatureScore, SelectionMask, apply_mask,
                        compose_masks, score_features, select_minimal)
from .synth import ClassTemplate, default_templates, sweep_templates, synth_generate

__version__ = "0.1.0"

__all__ = [
    "SCHEMA",
    "ClassRegistry",
    "ClassTemplate",
    "Direction",
    "EnsembleVerdict",
    "FeatureSchema",
    "FeatureScore",
    "Flow",
    "FlowKey",
    "FlowPacket",
    "ForestConfig",
    "IndexConfig",
    "IndexEntry",
    "Metrics",
    "NNIndex",
    "Neighbor",
    "Normalizer",
    "PacketRecord",
    "PipelineConfig",
    "Protocol",
    "RandomForest",
    "SelectionMask",
    "SplitSpec",
    "TcpFlags",
    "Thresholds",
    "Verdict",
    "VerdictKind",
    "add_labeled_sample",
    "apply_mask",
    "assemble_flows",
    "benchmark_backend",
    "calibrate_thresholds",
    "classify",
    "compose_masks",
    "compute_metrics",
    "default_templates",
    "ensemble_classify",
    "extract_features",
    "extract_matrix",
    "find_plateau",
    "fit_normalizer",
    "load_flows_csv",
    "new_class_protocol",
    "packet_sweep",
    "parse_pcap",
    "row_distances",
    "run_ann_benchmark",
    "run_eval",
    "save_flows_csv",
    "score_features",
    "select_minimal",
    "stratified_split",
    "sweep_templates",
    "synth_generate",
    "train_forest",
    "truncate_flow",
    "vote",
]
