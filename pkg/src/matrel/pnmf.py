"""Poisson non-negative matrix factorization built from engine plans.

Each multiplicative update is a logical plan run through the optimizer and
executor, so the relational rewrites and the sparsity-aware masked products
apply to it like to any other query.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .cost import Scheme
from .dist import Cluster, DistMatrix
from .executor import Executor
from .plan import (Aggregate, Const, EWise, Leaf, MatMul, ScalarOp, Transpose, Unary,
                   infer_meta)
from .rewriter import optimize


def w_update_plan(m: int, n: int):
    """W * ((A / (W x H)) x t(H)) / (ones(m, n) x t(H))"""
    A, W, H = Leaf("A"), Leaf("W"), Leaf("H")
    ratio = EWise("/", A, MatMul(W, H))
    num = EWise("*", W, MatMul(ratio, Transpose(H)))
    return EWise("/", num, MatMul(Const(m, n, 1.0), Transpose(H)))


def h_update_plan(m: int, n: int):
    """H * (t(W) x (A / (W x H))) / (t(W) x ones(m, n))"""
    A, W, H = Leaf("A"), Leaf("W"), Leaf("H")
    ratio = EWise("/", A, MatMul(W, H))
    num = EWise("*", H, MatMul(Transpose(W), ratio))
    return EWise("/", num, MatMul(Transpose(W), Const(m, n, 1.0)))


def objective_plan():
    """sum(W x H) - sum(A * log(W x H)): the Poisson negative log-likelihood
    up to terms constant in W and H."""
    A, W, H = Leaf("A"), Leaf("W"), Leaf("H")
    wh = MatMul(W, H)
    fit = Aggregate("sum", "a", EWise("*", A, Unary("log", wh)))
    return EWise("+", Aggregate("sum", "a", wh), ScalarOp("*", fit, -1.0))


class PoissonNMF(TransformerMixin, BaseEstimator):
    """Factor a non-negative matrix A (m x n) as W (m x k) times H (k x n).

    Parameters
    ----------
    n_components : int
        Rank k.
    max_iter : int
        Number of multiplicative update rounds.
    n_workers, block_size : int
        Simulated cluster used for every plan.
    optimize : bool
        Run plans through the rewrite optimizer and the masked-product path.
        With False every W x H is materialized densely.
    random_state : int
        Seed of the uniform(0.5, 1.5) initial factors.
    compute_objective : bool
        Record the objective after every round in ``objective_``.
    """

    def __init__(self, n_components=10, max_iter=10, n_workers=4, block_size=1000,
                 optimize=True, random_state=0, compute_objective=False):
        self.n_components = n_components
        self.max_iter = max_iter
        self.n_workers = n_workers
        self.block_size = block_size
        self.optimize = optimize
        self.random_state = random_state
        self.compute_objective = compute_objective

    def _cluster(self):
        return Cluster(self.n_workers, self.block_size, seed=self.random_state,
                       masked_products=self.optimize)

    def _dist(self, x, sparse):
        return DistMatrix.from_array(x, self.block_size, self.n_workers, sparse=sparse,
                                     scheme=Scheme.ROW)

    def _prepare(self, plan, env):
        catalog = {k: v.meta_info() for k, v in env.items()}
        if self.optimize:
            return optimize(plan, catalog=catalog)
        return infer_meta(plan, catalog), None

    def _step(self, plan, env, cluster):
        p, trace = self._prepare(plan, env)
        if trace is not None:
            self.rewrite_traces_.append(trace)
        return Executor(env, cluster).run(p).to_dense()

    def fit(self, X, y=None):
        A = sp.csr_matrix(X, dtype=np.float64)
        if A.nnz and A.data.min() < 0:
            raise ValueError("PoissonNMF needs a non-negative input")
        m, n = A.shape
        rng = np.random.default_rng(self.random_state)
        W = rng.uniform(0.5, 1.5, size=(m, self.n_components))
        H = rng.uniform(0.5, 1.5, size=(self.n_components, n))
        cluster = self._cluster()
        self.rewrite_traces_ = []
        self.objective_ = []
        A_d = self._dist(A, True)
        wplan, hplan = w_update_plan(m, n), h_update_plan(m, n)
        try:
            for _ in range(self.max_iter):
                env = {"A": A_d, "W": self._dist(W, False), "H": self._dist(H, False)}
                W = self._step(wplan, env, cluster)
                env["W"] = self._dist(W, False)
                H = self._step(hplan, env, cluster)
                if self.compute_objective:
                    env["H"] = self._dist(H, False)
                    self.objective_.append(
                        float(self._step(objective_plan(), env, cluster)[0, 0]))
        finally:
            cluster.close()
        self.ledger_ = cluster.ledger
        self.W_ = W
        self.components_ = H
        self.n_iter_ = self.max_iter
        return self

    def transform(self, X):
        """Fit W for new rows of X with H held fixed."""
        check_is_fitted(self, "components_")
        A = sp.csr_matrix(X, dtype=np.float64)
        m, n = A.shape
        if n != self.components_.shape[1]:
            raise ValueError(f"X has {n} columns, expected {self.components_.shape[1]}")
        rng = np.random.default_rng(self.random_state)
        W = rng.uniform(0.5, 1.5, size=(m, self.n_components))
        cluster = self._cluster()
        plan = w_update_plan(m, n)
        try:
            H_d = self._dist(self.components_, False)
            A_d = self._dist(A, True)
            for _ in range(self.max_iter):
                env = {"A": A_d, "W": self._dist(W, False), "H": H_d}
                W = self._step(plan, env, cluster)
        finally:
            cluster.close()
        return W

    def fit_transform(self, X, y=None, **params):
        return self.fit(X).W_
