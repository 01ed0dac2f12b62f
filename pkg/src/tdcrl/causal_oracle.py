"""Exact-table check of the backdoor-adjustment identity
P(Y | do(f)) = P(Y | f_cls) on finite joint distributions P(f_cls, z, Y),
and the gap left by moving the dictionary average inside the softmax."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import softmax


class SingularConditionalError(ZeroDivisionError):
    pass


@dataclass
class DiscreteSCM:
    joint: np.ndarray  # P(f_cls = c, z = n, Y = y), shape (K, N, |Y|)
    independent: bool = False

    def __post_init__(self):
        self.joint = np.asarray(self.joint, dtype=np.float64)
        if self.joint.ndim != 3:
            raise ValueError("joint table must be K x N x |Y|")
        if np.any(self.joint < 0) or np.any(self.joint > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(self.joint.sum() - 1.0) > 1e-12:
            raise ValueError(f"joint mass {self.joint.sum()!r} != 1")
        if self.independent:
            pcz = self.joint.sum(axis=2)
            prod = np.outer(pcz.sum(axis=1), pcz.sum(axis=0))
            if np.max(np.abs(pcz - prod)) > 1e-12:
                raise ValueError("P(f_cls, z) does not factorize")

    @property
    def shape(self):
        return self.joint.shape

    def p_class(self) -> np.ndarray:
        return self.joint.sum(axis=(1, 2))

    def p_style(self) -> np.ndarray:
        return self.joint.sum(axis=(0, 2))


def random_scm(K: int, N: int, Y: int, independent: bool, rng: np.random.Generator) -> DiscreteSCM:
    if min(K, N, Y) < 1:
        raise ValueError("all table sizes must be >= 1")
    if independent:
        pc = rng.dirichlet(np.ones(K))
        pz = rng.dirichlet(np.ones(N))
        py = rng.dirichlet(np.ones(Y), size=(K, N))
        joint = pc[:, None, None] * pz[None, :, None] * py
    else:
        joint = rng.dirichlet(np.ones(K * N * Y)).reshape(K, N, Y)
    # absorb the last ulp so the mass check is exact to 1e-12
    joint = joint / joint.sum()
    return DiscreteSCM(joint, independent)


def do_adjusted(scm: DiscreteSCM, c: int) -> np.ndarray:
    """sum_n P(Y | c, z_n) P(z_n)."""
    pz = scm.p_style()
    cell = scm.joint[c]  # (N, |Y|)
    pcz = cell.sum(axis=1)
    needed = pz > 0
    if np.any(pcz[needed] <= 0):
        n = int(np.flatnonzero(needed & (pcz <= 0))[0])
        raise SingularConditionalError(f"P(f_cls={c}, z={n}) = 0 but P(z={n}) > 0")
    out = np.zeros(scm.shape[2])
    for n in np.flatnonzero(needed):
        out += cell[n] / pcz[n] * pz[n]
    return out


def direct_conditional(scm: DiscreteSCM, c: int) -> np.ndarray:
    """P(Y, c) / P(c) with P(Y, c) = sum_n P(Y, c, z_n)."""
    pc = scm.p_class()[c]
    if pc <= 0:
        raise SingularConditionalError(f"P(f_cls={c}) = 0")
    return scm.joint[c].sum(axis=0) / pc


def verify_identity(scm: DiscreteSCM) -> float:
    """Largest |do_adjusted - direct_conditional| over all class values and labels."""
    worst = 0.0
    for c in range(scm.shape[0]):
        worst = max(worst, float(np.max(np.abs(do_adjusted(scm, c) - direct_conditional(scm, c)))))
    return worst


def run_trials(trials: int, max_size: int, seed: int, independent: bool = True) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        K, N, Y = rng.integers(1, max_size + 1, size=3)
        worst = max(worst, verify_identity(random_scm(int(K), int(N), int(Y), independent, rng)))
    return worst


def nwgm_gap(W, b, g_outputs) -> float:
    """|| mean_n softmax(W g_n + b) - softmax(W mean_n g_n + b) ||_inf"""
    G = np.asarray(g_outputs, dtype=np.float64)
    return float(nwgm_gap_batch(W, b, G[None])[0])


def nwgm_gap_batch(W, b, G: np.ndarray) -> np.ndarray:
    """Per-sample NWGM gap for intervened outputs G of shape (B, N, ES)."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    # W mean(g) + b = mean(W g + b); shifted means are exact for constant rows.
    # einsum rather than BLAS: same reduction order for every row, so equal
    # rows give equal logits
    logits = np.einsum("bnd,kd->bnk", G, W) + b
    mean_of_softmax = _shifted_mean(softmax(logits))
    softmax_of_mean = softmax(_shifted_mean(logits))
    return np.max(np.abs(mean_of_softmax - softmax_of_mean), axis=-1)


def _shifted_mean(X: np.ndarray) -> np.ndarray:
    """Mean over axis 1 computed as x_0 + mean(x - x_0)."""
    first = X[:, 0]
    return first + (X - first[:, None]).mean(axis=1)
