"""Matrix-relational queries on a simulated block-partitioned cluster."""
from .block import BlockId, Format, MatrixBlock
from .cost import ClusterConfig, CostEstimate, Scheme, assign_schemes
from .dist import Cluster, DimProjection, DistMatrix, DistTensor, ShuffleLedger, partition
from .errors import (DimMismatch, DivisionByZero, EmptyProjection, IllegalJoin, IllegalScheme,
                     IndexOutOfRange, MatRelError, NonSquareDiagonal, ParseError, ResourceLimit,
                     RewriteBudgetExceeded, UndefinedMerge, UnknownMatrix)
from .executor import Executor, execute, stats
from .join import exec_join
from .merge import MergeFn, Tri, detect_sparsity_inducing, parse_merge
from .plan import infer_meta, parse_gamma, show
from .predicate import parse_predicate
from .rewriter import optimize, replay

__all__ = [
    "BlockId", "Format", "MatrixBlock", "ClusterConfig", "CostEstimate", "Scheme",
    "assign_schemes", "Cluster", "DimProjection", "DistMatrix", "DistTensor", "ShuffleLedger",
    "partition", "DimMismatch", "DivisionByZero", "EmptyProjection", "IllegalJoin",
    "IllegalScheme", "IndexOutOfRange", "MatRelError", "NonSquareDiagonal", "ParseError",
    "ResourceLimit", "RewriteBudgetExceeded", "UndefinedMerge", "UnknownMatrix", "Executor",
    "execute", "stats", "exec_join", "MergeFn", "Tri", "detect_sparsity_inducing",
    "parse_merge", "infer_meta", "parse_gamma", "show", "parse_predicate", "optimize", "replay",
]
