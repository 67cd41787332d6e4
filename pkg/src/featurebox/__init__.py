"""Single-node feature-extraction pipeline with fused device execution.

Columnar views come in; cleaned, joined, extracted, and merged feature
signs go out as fixed-size training mini-batches.  The staged and
pipelined execution modes produce bit-identical batches, which is the
package's central invariant.
"""

from .columnstore import (
    ChecksumError,
    Column,
    ColumnBatch,
    FormatError,
    Kind,
    ViewFile,
    ViewSchema,
    open_view,
    read_columns,
    schema_of,
    unwrap_u64,
    wrap_u64,
    write_view,
)
from .corpus import gen_corpus
from .device import (
    DEFAULT_LAUNCH_OVERHEAD_US,
    ExecContext,
    LaunchCostModel,
    calibrate_launch_overhead,
    host_worker_count,
)
from .featureops import (
    DictTable,
    FeatureSign,
    FunctionRef,
    OperatorSpec,
    fnv1a64,
    hash_combine,
    load_dict_table,
    split_string,
)
from .mempool import ArenaPool, GroupGrant, GroupRequest, PoolExhausted, create_pool
from .opgraph import (
    LayerPlan,
    OperatorDag,
    PlacementBudget,
    expand_call_graph,
    layer_schedule,
    place_operators,
    plan_report,
)
from .pipeline import (
    ConfigError,
    MiniBatch,
    PipelineConfig,
    RunReport,
    StageError,
    TrainingSink,
    load_config,
    parse_report_block,
    run_pipeline,
    run_pipelined,
    run_staged,
)

__version__ = "0.1.0"

__all__ = [
    "ArenaPool",
    "ChecksumError",
    "Column",
    "ColumnBatch",
    "ConfigError",
    "DEFAULT_LAUNCH_OVERHEAD_US",
    "DictTable",
    "ExecContext",
    "FeatureSign",
    "FormatError",
    "FunctionRef",
    "GroupGrant",
    "GroupRequest",
    "Kind",
    "LaunchCostModel",
    "LayerPlan",
    "MiniBatch",
    "OperatorDag",
    "OperatorSpec",
    "PipelineConfig",
    "PlacementBudget",
    "PoolExhausted",
    "RunReport",
    "StageError",
    "TrainingSink",
    "ViewFile",
    "ViewSchema",
    "calibrate_launch_overhead",
    "create_pool",
    "expand_call_graph",
    "fnv1a64",
    "gen_corpus",
    "hash_combine",
    "host_worker_count",
    "layer_schedule",
    "load_config",
    "load_dict_table",
    "open_view",
    "parse_report_block",
    "place_operators",
    "plan_report",
    "read_columns",
    "run_pipeline",
    "run_pipelined",
    "run_staged",
    "schema_of",
    "split_string",
    "unwrap_u64",
    "wrap_u64",
    "write_view",
]
