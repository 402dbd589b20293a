"""Hierarchical aggregation testing with false split rate control."""

from importlib.metadata import PackageNotFoundError, version

from .hat import HatConfig, RejectionTree, ThresholdFamily, run_hat
from .metrics import (Partition, barriers_to_partition, fdp_tpp_barrier, fsp_tpp_groups,
                      partition_to_barriers, rejection_to_partition, split_counts_from_rejection)
from .pvalues import (LeafObservations, PValueAssignment, anova_pvalues, read_pvalues_csv,
                      simes_pvalues)
from .regression import RegressionConfig, RegressionData, node_pvalues_regression
from .sim import Scenario, run_monte_carlo
from .tree import Tree, parse_tree, read_tree, regular_tree

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source checkout
    __version__ = "0.1.0"

__all__ = [
    "HatConfig", "LeafObservations", "PValueAssignment", "Partition", "RegressionConfig",
    "RegressionData", "RejectionTree", "Scenario", "ThresholdFamily", "Tree", "anova_pvalues",
    "barriers_to_partition", "fdp_tpp_barrier", "fsp_tpp_groups", "node_pvalues_regression",
    "parse_tree", "partition_to_barriers", "read_pvalues_csv", "read_tree", "regular_tree",
    "rejection_to_partition", "run_hat", "run_monte_carlo", "simes_pvalues",
    "split_counts_from_rejection",
]
