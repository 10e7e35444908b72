"""Prediction heads: next mark, gap density, and goal, from history vectors.

The time head is gated by the duration cluster of the current action: the
history vector is multiplied elementwise with that cluster's trainable
embedding before two linear readouts produce the lognormal location and a
raw scale, the latter mapped through softplus plus a small floor so the
variance stays positive. The fused model variant offsets the history vector
by a scaled order-free prefix summary before any head runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    NumericError,
    ParamStore,
    Tensor,
    add,
    matmul,
    mul,
    relu,
    softplus,
    take_rows,
)

SIGMA_FLOOR = 1e-4


@dataclass
class MarkDist:
    """Probabilities over all marks, terminal mark included."""

    probs: np.ndarray

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


@dataclass
class TimeDensity:
    """Lognormal parameters for the gap to the next action."""

    mu: float
    sigma2: float


@dataclass
class GoalDist:
    """Probabilities over all goals."""

    probs: np.ndarray

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


def init_head_params(store: ParamStore, d: int, m: int, n_marks: int,
                     n_goals: int, rng: np.random.Generator) -> None:
    """Create all head parameters; m is the duration-cluster count."""
    bound = 1.0 / math.sqrt(d)

    def uniform(shape):
        return rng.uniform(-bound, bound, size=shape)

    store.add("mark.w", uniform((d, n_marks)))
    store.add("mark.bias", np.zeros(n_marks))
    store.add("goal.w_hidden", uniform((d, d)))
    store.add("goal.b_hidden", np.zeros(d))
    store.add("goal.w_out", uniform((d, n_goals)))
    store.add("goal.b_out", np.zeros(n_goals))
    store.add("time.clusters", uniform((m, d)))
    store.add("time.w_mu", uniform((d, 1)))
    store.add("time.b_mu", np.zeros(1))
    store.add("time.w_var", uniform((d, 1)))
    store.add("time.b_var", np.zeros(1))


def fuse(s: Tensor, x: Tensor | None, alpha: float) -> Tensor:
    """History vectors offset by the scaled order-free summary.

    With alpha == 0 (or no summary present) the history passes through
    untouched, so the fused variant collapses to the base computation
    bit for bit.
    """
    if x is None or alpha == 0.0:
        return s
    return add(s, mul(x, alpha))


def mark_logits(store: ParamStore, s: Tensor) -> Tensor:
    return add(matmul(s, store["mark.w"]), store["mark.bias"])


def goal_logits(store: ParamStore, s: Tensor) -> Tensor:
    hidden = relu(add(matmul(s, store["goal.w_hidden"]), store["goal.b_hidden"]))
    return add(matmul(hidden, store["goal.w_out"]), store["goal.b_out"])


def time_params(store: ParamStore, s: Tensor, cluster_ids) -> tuple[Tensor, Tensor]:
    """Per-index lognormal (mu, sigma^2) columns, gated by duration cluster.

    cluster_ids[i] selects the cluster embedding multiplied into row i; only
    that row's parameters depend on it, so embeddings of inactive clusters
    leave the output untouched.
    """
    cluster_ids = np.asarray(cluster_ids, dtype=np.intp)
    m = store["time.clusters"].data.shape[0]
    if cluster_ids.size and (cluster_ids.min() < 0 or cluster_ids.max() >= m):
        raise NumericError(f"cluster id outside [0, {m})")
    z = take_rows(store["time.clusters"], cluster_ids)
    e = mul(s, z)
    mu = add(matmul(e, store["time.w_mu"]), store["time.b_mu"])
    raw = add(matmul(e, store["time.w_var"]), store["time.b_var"])
    sigma2 = add(softplus(raw), SIGMA_FLOOR)
    return mu, sigma2


# ---------------------------------------------------------------------------
# single-index conveniences (forward only)
# ---------------------------------------------------------------------------

def _softmax_row(row: np.ndarray) -> np.ndarray:
    e = np.exp(row - row.max())
    return e / e.sum()


def mark_head(store: ParamStore, s: np.ndarray, x: np.ndarray | None = None,
              alpha: float = 0.0) -> MarkDist:
    """Next-mark distribution for one history vector."""
    v = s if x is None or alpha == 0.0 else s + alpha * x
    logits = v @ store["mark.w"].data + store["mark.bias"].data
    return MarkDist(probs=_softmax_row(logits))


def goal_head(store: ParamStore, s: np.ndarray, x: np.ndarray | None = None,
              alpha: float = 0.0) -> GoalDist:
    """Goal distribution for one history vector."""
    v = s if x is None or alpha == 0.0 else s + alpha * x
    hidden = np.maximum(v @ store["goal.w_hidden"].data + store["goal.b_hidden"].data, 0.0)
    logits = hidden @ store["goal.w_out"].data + store["goal.b_out"].data
    return GoalDist(probs=_softmax_row(logits))


def time_head(store: ParamStore, s: np.ndarray, cluster: int,
              x: np.ndarray | None = None, alpha: float = 0.0) -> TimeDensity:
    """Gap density for one history vector, gated by the given cluster."""
    m = store["time.clusters"].data.shape[0]
    if not 0 <= cluster < m:
        raise NumericError(f"cluster id {cluster} outside [0, {m})")
    v = s if x is None or alpha == 0.0 else s + alpha * x
    e = v * store["time.clusters"].data[cluster]
    mu = float(e @ store["time.w_mu"].data[:, 0] + store["time.b_mu"].data[0])
    raw = float(e @ store["time.w_var"].data[:, 0] + store["time.b_var"].data[0])
    sigma2 = float(np.logaddexp(0.0, raw) + SIGMA_FLOOR)
    return TimeDensity(mu=mu, sigma2=sigma2)


# ---------------------------------------------------------------------------
# lognormal gap density
# ---------------------------------------------------------------------------

def log_density(td: TimeDensity, delta: float) -> float:
    """Closed-form lognormal log-density of a positive gap."""
    if delta <= 0.0:
        raise NumericError(f"gap must be positive, got {delta}")
    lg = math.log(delta)
    return (-lg
            - 0.5 * math.log(2.0 * math.pi * td.sigma2)
            - (lg - td.mu) ** 2 / (2.0 * td.sigma2))


def sample_time(td: TimeDensity, rng: np.random.Generator) -> float:
    """Draw a gap: exp(mu + sigma * eps) with standard normal eps."""
    return float(np.exp(td.mu + math.sqrt(td.sigma2) * rng.standard_normal()))


def point_time(td: TimeDensity) -> float:
    """Median gap e^mu, the point prediction used for time error metrics."""
    return float(np.exp(td.mu))
