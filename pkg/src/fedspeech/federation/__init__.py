from .aggregate import (AggregationError, ClientUpdate, apply_unit_permutation, fedavg_aggregate, fedma_aggregate,
                        fedma_aggregate_detailed, fedma_match_layer)
from .assignment import AssignmentError, solve_assignment
from .partition import (ClientShard, PartitionError, RoundConfig, dirichlet_proportions, partition_dataset,
                        partition_subjects)
from .server import (FederatedResult, FederationError, LoopbackTransport, RoundRecord, local_train,
                     run_federated_training, write_history)
