"""Analytic federated learning: closed-form clients, one-shot exact aggregation."""

from .aggregation import (AggregateState, ClientUpdate, aggregate_pair,
                          aggregate_sum_form, fold, joint_oracle, local_train,
                          local_train_exact, predict, read_update, restore,
                          train_client, tree_fold, write_update)
from .baseline import FedAvgConfig, fedavg_train
from .data import (EmbeddingDataset, Partition, PartitionSpec, gen_dummy, one_hot,
                   partition, read_embeddings, subset, write_embeddings)
from .errors import (AFLError, ConfigError, ContractError, FormatError,
                     NumericalError, RankError)
from .harness import (ExperimentConfig, RunReport, accuracy, delta_w,
                      run_experiment, run_table_a1)
from .linalg import block_pinv, gram, pinv, spd_solve

__version__ = "0.1.0"
