"""Mixture of experts with a feature-sharing local gate.

The gate of client ``s`` averages the experts' penultimate features with
weights ``softmax(pi_logits)`` and maps the result linearly to expert logits:
``p(z | x, s) = softmax(A.T @ sum_k pi_k h_k(x) + b)``.

A bank may be *partial* (pruned experts set to ``None``); the gate then averages
over the experts that are present, with ``pi`` renormalized over them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    MlpSpec,
    ParamVector,
    StructureError,
    backward_batch,
    forward_batch,
    init_mlp,
    log_softmax,
)

LOG_FLOOR = float(np.log(1e-12))
SIMPLEX_TOL = 1e-9


@dataclass
class ExpertBank:
    spec: MlpSpec
    experts: list  # ParamVector or None (not transmitted)

    def __post_init__(self):
        if len(self.experts) < 1:
            raise StructureError("an expert bank needs at least one expert")
        layout = self.spec.layout()
        for e in self.experts:
            if e is not None and e.layout != layout:
                raise StructureError("expert layout does not match the bank spec")

    @classmethod
    def init(cls, spec: MlpSpec, K: int, rngs) -> "ExpertBank":
        """``rngs[k]`` seeds expert ``k``."""
        return cls(spec, [init_mlp(spec, rngs[k]) for k in range(K)])

    @property
    def K(self) -> int:
        return len(self.experts)

    def available(self) -> list[int]:
        return [k for k, e in enumerate(self.experts) if e is not None]

    def copy(self) -> "ExpertBank":
        return ExpertBank(self.spec, [None if e is None else e.copy() for e in self.experts])

    def restrict(self, keep) -> "ExpertBank":
        keep = set(keep)
        return ExpertBank(
            self.spec, [e.copy() if (k in keep and e is not None) else None for k, e in enumerate(self.experts)]
        )


class LocalGate:
    """Per-client gate parameters ``(pi_logits, A, b)`` stored as one ParamVector."""

    def __init__(self, params: ParamVector):
        self.params = params

    @classmethod
    def zeros(cls, K: int, H: int) -> "LocalGate":
        return cls(
            ParamVector.from_blocks([("pi", np.zeros(K)), ("A", np.zeros((H, K))), ("b", np.zeros(K))])
        )

    @property
    def pi_logits(self) -> np.ndarray:
        return self.params["pi"]

    @property
    def A(self) -> np.ndarray:
        return self.params["A"]

    @property
    def b(self) -> np.ndarray:
        return self.params["b"]

    @property
    def K(self) -> int:
        return self.params["b"].shape[0]

    def copy(self) -> "LocalGate":
        return LocalGate(self.params.copy())

    def __eq__(self, other):
        return isinstance(other, LocalGate) and self.params == other.params


@dataclass
class MoEForward:
    """Everything one batched MoE forward pass produces, reused for gradients."""

    X: np.ndarray
    avail: list
    logits: dict  # k -> (n, C)
    caches: dict
    pens: dict  # k -> (n, H)
    pi_avail: np.ndarray  # renormalized mixing weights over avail
    h: np.ndarray  # (n, H) averaged features
    log_pz: np.ndarray  # (n, K)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def log_py_all(self) -> dict:
        return {k: log_softmax(v) for k, v in self.logits.items()}


def _gate_weights(gate: LocalGate, avail) -> np.ndarray:
    z = gate.pi_logits[avail]
    e = np.exp(z - z.max())
    return e / e.sum()


def moe_forward(bank: ExpertBank, gate: LocalGate, X: np.ndarray) -> MoEForward:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if gate.K != bank.K:
        raise StructureError(f"gate has {gate.K} outputs, bank has {bank.K} experts")
    if gate.A.shape[0] != bank.spec.penultimate_dim:
        raise StructureError("gate feature dimension does not match expert penultimate width")
    avail = bank.available()
    if not avail:
        raise StructureError("no experts available")
    logits, caches, pens = {}, {}, {}
    for k in avail:
        logits[k], caches[k], pens[k] = forward_batch(bank.spec, bank.experts[k], X)
    pi = _gate_weights(gate, avail)
    h = np.zeros_like(pens[avail[0]])
    for j, k in enumerate(avail):
        h += pi[j] * pens[k]
    u = h @ gate.A + gate.b
    return MoEForward(X, avail, logits, caches, pens, pi, h, log_softmax(u))


def gate_probs_batch(bank: ExpertBank, gate: LocalGate, X: np.ndarray) -> np.ndarray:
    return np.exp(moe_forward(bank, gate, X).log_pz)


def gate_probs(bank: ExpertBank, gate: LocalGate, x: np.ndarray):
    """Gate distribution over experts for one input; returns (p_z, forward state)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != bank.spec.n_in:
        raise StructureError(f"input of shape {x.shape} does not match input width {bank.spec.n_in}")
    fw = moe_forward(bank, gate, x[None, :])
    return np.exp(fw.log_pz[0]), fw


def mixture_from_forward(fw: MoEForward) -> np.ndarray:
    """p(y|x,s) = sum_z p(y|x,z) p(z|x,s), gate renormalized over present experts."""
    pz = np.exp(fw.log_pz[:, fw.avail])
    pz /= pz.sum(axis=1, keepdims=True)
    out = np.zeros_like(fw.logits[fw.avail[0]])
    for j, k in enumerate(fw.avail):
        out += pz[:, j : j + 1] * np.exp(log_softmax(fw.logits[k]))
    return out


def mixture_predict_batch(bank: ExpertBank, gate: LocalGate, X: np.ndarray) -> np.ndarray:
    return mixture_from_forward(moe_forward(bank, gate, X))


def mixture_predict(bank: ExpertBank, gate: LocalGate, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != bank.spec.n_in:
        raise StructureError(f"input of shape {x.shape} does not match input width {bank.spec.n_in}")
    return mixture_predict_batch(bank, gate, x[None, :])[0]


def log_joint(fw: MoEForward, y: np.ndarray) -> np.ndarray:
    """log p(y_i, z=k | x_i, s) for present experts; absent columns are -inf."""
    y = np.asarray(y)
    n = fw.n
    out = np.full((n, fw.log_pz.shape[1]), -np.inf)
    rows = np.arange(n)
    for k in fw.avail:
        out[:, k] = log_softmax(fw.logits[k])[rows, y] + fw.log_pz[:, k]
    return out


def _check_rows(q: np.ndarray, n: int, K: int, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (n, K):
        raise StructureError(f"{name} has shape {q.shape}, expected {(n, K)}")
    if np.any(q < -SIMPLEX_TOL) or np.any(np.abs(q.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ValueError(f"{name} rows must lie on the probability simplex")
    return q


def bound_and_grads(
    bank: ExpertBank,
    gate: LocalGate,
    fw: MoEForward,
    y: np.ndarray,
    q_lik: np.ndarray,
    q_gate: np.ndarray | None = None,
    gate_grad_to_features: bool = False,
    check_simplex: bool = True,
):
    """Mean over the batch of E_q[log p(y|x,z)] + E_q'[log p(z|x,s)] and its gradients.

    ``q_lik`` weights the expert likelihoods and ``q_gate`` the gate
    log-probabilities (they coincide unless experts are pruned). Gate
    log-probabilities are floored at log(1e-12). Returns
    ``(bound, expert_grads, gate_grad)``; the gradients point uphill.
    """
    n, K = fw.n, bank.K
    y = np.asarray(y)
    if q_gate is None:
        q_gate = q_lik
    if check_simplex:
        q_lik = _check_rows(q_lik, n, K, "q_lik")
        q_gate = _check_rows(q_gate, n, K, "q_gate")
    rows = np.arange(n)
    inv_n = 1.0 / n

    total = 0.0
    grad_logits = {}
    for k in fw.avail:
        lsm = log_softmax(fw.logits[k])
        w = q_lik[:, k]
        total += float(np.dot(w, lsm[rows, y]))
        # d/dlogits of w * log softmax(logits)[y] = w * (onehot - softmax)
        g = -np.exp(lsm)
        g[rows, y] += 1.0
        grad_logits[k] = g * (w * inv_n)[:, None]

    floored = np.maximum(fw.log_pz, LOG_FLOOR)
    total += float(np.sum(q_gate * floored))
    bound = total * inv_n

    # gate: d bound / d log_pz, zero where the floor is active
    g_lp = q_gate * inv_n * (fw.log_pz >= LOG_FLOOR)
    pz = np.exp(fw.log_pz)
    g_u = g_lp - pz * g_lp.sum(axis=1, keepdims=True)
    g_A = fw.h.T @ g_u
    g_b = g_u.sum(axis=0)
    g_h = g_u @ gate.A.T
    g_pi_avail = np.array([np.sum(g_h * fw.pens[k]) for k in fw.avail])
    pi = fw.pi_avail
    g_pi_logits = np.zeros(K)
    g_pi_logits[fw.avail] = pi * (g_pi_avail - np.dot(pi, g_pi_avail))
    gate_grad = ParamVector(gate.params.layout)
    gate_grad["pi"][...] = g_pi_logits
    gate_grad["A"][...] = g_A
    gate_grad["b"][...] = g_b

    expert_grads = [None] * K
    for j, k in enumerate(fw.avail):
        g_pen = pi[j] * g_h if gate_grad_to_features else None
        expert_grads[k] = backward_batch(bank.spec, bank.experts[k], fw.caches[k], grad_logits[k], g_pen)
    return bound, expert_grads, gate_grad


def lower_bound_batch(
    bank: ExpertBank,
    gate: LocalGate,
    phi_rows: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    gate_grad_to_features: bool = False,
):
    """Client bound for one batch with per-example posterior rows ``phi_rows`` (n, K).

    The entropy of q does not depend on the experts or the gate, so it is left out.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    fw = moe_forward(bank, gate, X)
    return bound_and_grads(bank, gate, fw, y, phi_rows, gate_grad_to_features=gate_grad_to_features)
