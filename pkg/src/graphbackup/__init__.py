"""Graph Backup: value targets computed over the transition graph of replayed data."""

from .analysis import (
    RadialLayout,
    compute_radial_layout,
    crossover_probability,
    export_dot,
    graph_stats,
    pearson_correlation,
    stability_report,
)
from .backup import (
    OPERATORS,
    BackupConfig,
    ExpansionList,
    categorical_projection,
    distributional_graph_backup,
    expand_local_graph,
    graph_backup_target,
    mixed_graph_backup_target,
    n_step_q_target,
    naive_recursive_target,
    one_step_target,
    tree_backup_target,
)
from .envs import (
    ChainMDP,
    CrossoverMDP,
    DoorKeyGrid,
    EmptyGrid,
    LoopMDP,
    SlipperyGrid,
    StateKey,
    TransitionRecord,
    make_env,
    optimal_q_oracle,
    parse_env,
)
from .estimators import BackupQLearner, BackupTargets
from .graph import Edge, TransitionGraph, weighted_sample
from .learner import LearnerConfig, RunMetrics, collect_random_walk, offline_training, run_training
from .values import CategoricalQTable, ScalarQTable, TargetSnapshot

__version__ = "0.1.0"
