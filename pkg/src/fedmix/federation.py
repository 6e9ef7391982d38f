"""Client and server steps for FedMix (with optional expert pruning) and the baselines.

Sign convention: a client *maximizes* its bound, so expert and gate steps are
``sgd_step(params, grad_of_bound, -lr)``; baselines minimize cross-entropy with
``sgd_step(params, grad_of_loss, lr)``. The server treats ``old - new`` as a
gradient and descends it with Adam.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ShardDataset
from .metrics import gradient_divergence, payload_bytes
from .moe import (
    ExpertBank,
    LocalGate,
    bound_and_grads,
    log_joint,
    mixture_from_forward,
    moe_forward,
)
from .numerics import (
    AdamState,
    MlpSpec,
    ParamVector,
    adam_step,
    backward_batch,
    forward_batch,
    log_softmax,
    sgd_step,
    softmax,
)
from .posterior import (
    ConfigError,
    PosteriorTable,
    closed_form_phi,
    dampen,
    marginal_entropy_grad,
    marginal_q_z_given_s,
    project_rows,
    side_counts,
)
from .rng import stream

log = logging.getLogger(__name__)

ALGORITHMS = ("fedmix", "fedavg", "biased_fedavg", "local_global")
SIDE_MODES = ("label", "transform")
SERVER_PRUNE_SLACK = 0.9


class DivergenceError(RuntimeError):
    def __init__(self, message: str, round_: int | None = None, shard_id: int | None = None):
        super().__init__(message)
        self.round = round_
        self.shard_id = shard_id


@dataclass(frozen=True)
class RoundConfig:
    K: int = 4
    beta_entropy: float = 0.8
    gamma: float = 0.99
    eta: float = 0.0
    clients_per_round: int = 10
    E: int = 1
    B: int = 64
    lr_client: float = 0.05
    lr_server: float = 0.01
    algorithm: str = "fedmix"
    side_info_mode: str = "label"
    seed: int = 0
    entropy_reg: bool = True
    gate_grad_to_features: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.E < 0 or self.B < 1:
            raise ConfigError("need E >= 0 and B >= 1")
        if not self.beta_entropy > 0:
            raise ConfigError("beta_entropy must be > 0")
        if self.clients_per_round < 1:
            raise ConfigError("clients_per_round must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if self.side_info_mode not in SIDE_MODES:
            raise ConfigError(f"side_info_mode must be one of {SIDE_MODES}")


@dataclass
class ModelSnapshot:
    """A client's model as last sent to the server: experts (K=1 for baselines) plus its gate."""

    bank: ExpertBank
    gate: LocalGate | None = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.gate is None:
            logits, _, _ = forward_batch(self.bank.spec, self.bank.experts[0], X)
            return softmax(logits)
        return mixture_from_forward(moe_forward(self.bank, self.gate, X))


@dataclass
class ClientState:
    shard_id: int
    gate: LocalGate | None = None
    local_bias: np.ndarray | None = None
    local_layers: ParamVector | None = None
    last_communicated: ModelSnapshot | None = None


@dataclass
class ClientReport:
    shard_id: int
    updated_bank: ExpertBank
    updated_phi: PosteriorTable | None
    q_z_given_s: np.ndarray
    n_examples: int
    bytes_up: int
    bytes_down: int = 0


@dataclass
class ServerState:
    bank: ExpertBank
    phi: PosteriorTable | None
    adam_bank: list
    adam_phi: AdamState | None
    stored_qzs: dict = field(default_factory=dict)
    round: int = 0
    info: dict = field(default_factory=dict)

    @classmethod
    def init(cls, spec: MlpSpec, K: int, C_side: int | None, seed: int) -> "ServerState":
        bank = ExpertBank.init(spec, K, [stream(seed, "init", k) for k in range(K)])
        phi = PosteriorTable.uniform(C_side, K) if C_side is not None else None
        adam_phi = AdamState.fresh(_phi_pv(phi.phi)) if phi is not None else None
        return cls(bank, phi, [AdamState.fresh(e) for e in bank.experts], adam_phi)

    def stored_q(self, shard_id: int) -> np.ndarray:
        K = self.bank.K
        return self.stored_qzs.get(shard_id, np.full(K, 1.0 / K))


def _phi_pv(phi: np.ndarray) -> ParamVector:
    return ParamVector.from_blocks([("phi", phi)])


def categories(cfg: RoundConfig, y: np.ndarray, side: np.ndarray) -> np.ndarray:
    return y if cfg.side_info_mode == "label" else side


def n_categories(cfg: RoundConfig, n_classes: int, n_transforms: int = 8) -> int:
    return n_classes if cfg.side_info_mode == "label" else n_transforms


def minibatches(n: int, B: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + B] for i in range(0, n, B)]


def prune_filter(q_z_given_s, eta: float, K: int, server_side: bool = False) -> list[int]:
    """Experts kept for a client: q >= eta/K locally, q >= 0.9*eta/K on the server."""
    q = np.asarray(q_z_given_s, dtype=np.float64)
    thr = eta / K * (SERVER_PRUNE_SLACK if server_side else 1.0)
    return [k for k in range(K) if q[k] >= thr]


# ---------------------------------------------------------------- FedMix client


def _fedmix_local(
    bank: ExpertBank,
    phi: PosteriorTable,
    gate: LocalGate,
    shard: ShardDataset,
    cfg: RoundConfig,
    rng: np.random.Generator,
    epochs: int,
    train_experts: bool = True,
    train_gate: bool = True,
    update_phi: bool = True,
    round_: int | None = None,
):
    """Local optimization of the bound; returns updated (bank, phi, gate)."""
    X_all, y_all, side_all = shard.part("train")
    cats_all = categories(cfg, y_all, side_all)
    counts = side_counts(cats_all, phi.C_side)
    K = bank.K
    avail = bank.available()
    pruning = cfg.eta > 0
    lr = cfg.lr_client
    for _ in range(epochs):
        for idx in minibatches(len(y_all), cfg.B, rng):
            X, y, c = X_all[idx], y_all[idx], cats_all[idx]
            fw = moe_forward(bank, gate, X)
            if pruning:
                q_s = marginal_q_z_given_s(phi, counts)
                active = [k for k in avail if q_s[k] >= cfg.eta / K]
            else:
                active = avail
            full = len(active) == K
            lj = log_joint(fw, y)
            if update_phi and active:
                if full:
                    phi = dampen(phi, closed_form_phi(lj, c, cfg.beta_entropy), cfg.gamma)
                else:
                    rows = closed_form_phi(lj, c, cfg.beta_entropy, columns=active)
                    for cat in rows:
                        rows[cat] = rows[cat] * phi.phi[cat, active].sum()
                    phi = dampen(phi, rows, cfg.gamma, columns=active)
            if full:
                q_lik = phi.phi[c]
                q_gate = q_lik
                keep = slice(None)
            else:
                q_gate = phi.phi[c]
                mass = q_gate[:, active].sum(axis=1) if active else np.zeros(len(c))
                ok = mass > 1e-12
                if not ok.all():
                    warnings.warn(
                        f"shard {shard.shard_id}: no active expert mass for some categories; skipping examples",
                        stacklevel=2,
                    )
                if not ok.any():
                    continue
                q_lik = np.zeros_like(q_gate)
                q_lik[:, active] = q_gate[:, active] / np.where(ok, mass, 1.0)[:, None]
                keep = np.flatnonzero(ok)
                if len(keep) < len(c):
                    fw = moe_forward(bank, gate, X[keep])
                q_lik, q_gate, y = q_lik[keep], q_gate[keep], y[keep]
            bound, g_experts, g_gate = bound_and_grads(
                bank, gate, fw, y, q_lik, q_gate, cfg.gate_grad_to_features, check_simplex=False
            )
            if not np.isfinite(bound):
                raise DivergenceError(
                    f"non-finite bound on shard {shard.shard_id}", round_=round_, shard_id=shard.shard_id
                )
            # ascent on the bound
            if train_experts:
                experts = list(bank.experts)
                for k in active:
                    experts[k] = sgd_step(experts[k], g_experts[k], -lr)
                bank = ExpertBank(bank.spec, experts)
            if train_gate:
                gate = LocalGate(sgd_step(gate.params, g_gate, -lr))
    return bank, phi, gate


def _bank_values(bank: ExpertBank) -> int:
    return sum(len(e) for e in bank.experts if e is not None)


def client_update(
    client: ClientState,
    shard: ShardDataset,
    bank: ExpertBank,
    phi: PosteriorTable,
    cfg: RoundConfig,
    round_: int = 0,
) -> ClientReport | None:
    """One FedMix client round. ``bank`` may be partial (pruned experts are None).

    Mutates ``client`` (gate, last communicated snapshot); returns None for an
    empty shard.
    """
    if shard.n("train") == 0:
        return None
    K = bank.K
    gate = client.gate.copy() if client.gate is not None else LocalGate.zeros(K, bank.spec.penultimate_dim)
    rng = stream(cfg.seed, "batching", round_, shard.shard_id)
    bank_l, phi_l, gate = _fedmix_local(bank.copy(), phi.copy(), gate, shard, cfg, rng, cfg.E, round_=round_)
    _, y, side = shard.part("train")
    q_s = marginal_q_z_given_s(phi_l, side_counts(categories(cfg, y, side), phi_l.C_side))
    send = [k for k in bank_l.available() if cfg.eta == 0 or q_s[k] >= cfg.eta / K]
    sent = bank_l.restrict(send)
    client.gate = gate
    client.last_communicated = ModelSnapshot(sent, gate.copy())
    up = payload_bytes(_bank_values(sent) + phi_l.phi.size + K)
    down = payload_bytes(_bank_values(bank) + phi.phi.size)
    return ClientReport(shard.shard_id, sent, phi_l, q_s, shard.n("train"), up, down)


def client_update_pruned(client, shard, partial_bank, phi, cfg, round_: int = 0):
    """Pruning variant; same routine, the active set follows ``cfg.eta``."""
    return client_update(client, shard, partial_bank, phi, cfg, round_)


def server_round(server: ServerState, reports: list, cfg: RoundConfig) -> ServerState:
    """Expert-weighted aggregation followed by Adam on experts and on phi."""
    reports = sorted((r for r in reports if r is not None), key=lambda r: r.shard_id)
    if not reports:
        raise ValueError("server_round needs at least one report")
    K = server.bank.K
    N = np.array([r.n_examples for r in reports], dtype=np.float64)
    p_s = N / N.sum()
    Q = np.stack([np.asarray(r.q_z_given_s, dtype=np.float64) for r in reports])

    experts = list(server.bank.experts)
    adams = list(server.adam_bank)
    weights, gds = {}, {}
    for k in range(K):
        senders = [i for i, r in enumerate(reports) if r.updated_bank.experts[k] is not None]
        w = Q[senders, k] * p_s[senders] if senders else np.zeros(0)
        if not senders or w.sum() <= 0:
            continue  # nobody trained expert k: no delta, Adam moments untouched
        w = w / w.sum()
        deltas = [server.bank.experts[k] - reports[i].updated_bank.experts[k] for i in senders]
        delta = server.bank.experts[k].zeros_like()
        for wi, d in zip(w, deltas):
            delta = delta + wi * d
        experts[k], adams[k] = adam_step(adams[k], server.bank.experts[k], delta, cfg.lr_server)
        weights[k] = dict(zip([reports[i].shard_id for i in senders], w.tolist()))
        if len(senders) >= 2:
            gds[k] = gradient_divergence(deltas, w)

    phi = server.phi.phi
    d_phi = np.zeros_like(phi)
    for pi, r in zip(p_s, reports):
        d_phi += pi * (phi - r.updated_phi.phi)
    if cfg.entropy_reg:
        p_y = np.full(server.phi.C_side, 1.0 / server.phi.C_side)
        g_h = marginal_entropy_grad(server.phi, p_y)
        # only the within-row (tangent) part moves phi on the simplex; the
        # row-constant part would otherwise dominate Adam's normalized step
        d_phi -= g_h - g_h.mean(axis=1, keepdims=True)
    new_phi, adam_phi = adam_step(server.adam_phi, _phi_pv(phi), _phi_pv(d_phi), cfg.lr_server)
    table = project_rows(PosteriorTable(new_phi["phi"].copy()))

    stored = dict(server.stored_qzs)
    for r in reports:
        stored[r.shard_id] = np.asarray(r.q_z_given_s, dtype=np.float64).copy()
    info = {"weights": weights, "gd": gds, "n_reports": len(reports)}
    return ServerState(ExpertBank(server.bank.spec, experts), table, adams, adam_phi, stored, server.round + 1, info)


def server_transmission(server: ServerState, shard_id: int, cfg: RoundConfig) -> ExpertBank:
    """The (possibly partial) bank the server sends to a client."""
    if cfg.eta <= 0:
        return server.bank
    keep = prune_filter(server.stored_q(shard_id), cfg.eta, server.bank.K, server_side=True)
    return server.bank.restrict(keep)


# ---------------------------------------------------------------- baselines


def local_block_names(spec: MlpSpec, algorithm: str) -> list[str]:
    """Blocks that stay on the client for a baseline."""
    if algorithm == "biased_fedavg":
        return [spec.output_bias()]
    if algorithm == "local_global":
        return ["W0", "b0"]
    return []


def ce_grad_logits(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d mean CE / d logits."""
    n = len(y)
    g = np.exp(log_softmax(logits))
    g[np.arange(n), y] -= 1.0
    return g * (1.0 / n)


def sgd_cross_entropy(spec: MlpSpec, params: ParamVector, X_all, y_all, B, lr, epochs, rng):
    for _ in range(epochs):
        for idx in minibatches(len(y_all), B, rng):
            logits, cache, _ = forward_batch(spec, params, X_all[idx])
            grad = backward_batch(spec, params, cache, ce_grad_logits(logits, y_all[idx]))
            params = sgd_step(params, grad, lr)
    return params


def _personal_model(client: ClientState, model: ParamVector, spec: MlpSpec, algorithm: str) -> ParamVector:
    params = model.copy()
    if algorithm == "biased_fedavg" and client.local_bias is not None:
        params[spec.output_bias()][...] = client.local_bias
    if algorithm == "local_global" and client.local_layers is not None:
        for name in ("W0", "b0"):
            params[name][...] = client.local_layers[name]
    return params


def fedavg_client(
    client: ClientState,
    shard: ShardDataset,
    model: ParamVector,
    spec: MlpSpec,
    cfg: RoundConfig,
    round_: int = 0,
) -> ClientReport | None:
    """FedAvg-family client: E epochs of SGD on cross-entropy.

    ``biased_fedavg`` keeps the output bias local and ``local_global`` keeps
    the first layer local; those blocks are neither sent nor counted.
    """
    if shard.n("train") == 0:
        return None
    algorithm = cfg.algorithm
    rng = stream(cfg.seed, "batching", round_, shard.shard_id)
    X, y, _ = shard.part("train")
    params = _personal_model(client, model, spec, algorithm)
    params = sgd_cross_entropy(spec, params, X, y, cfg.B, cfg.lr_client, cfg.E, rng)
    if not np.all(np.isfinite(params.flat)):
        raise DivergenceError(f"non-finite parameters on shard {shard.shard_id}", round_, shard.shard_id)
    local = local_block_names(spec, algorithm)
    if algorithm == "biased_fedavg":
        client.local_bias = params[spec.output_bias()].copy()
    if algorithm == "local_global":
        client.local_layers = params.select(["W0", "b0"])
    client.last_communicated = ModelSnapshot(ExpertBank(spec, [params.copy()]))
    n_global = len(params) - sum(params[n].size for n in local)
    return ClientReport(
        shard.shard_id,
        ExpertBank(spec, [params]),
        None,
        np.ones(1),
        shard.n("train"),
        payload_bytes(n_global),
        payload_bytes(n_global),
    )


biased_fedavg_client = fedavg_client
local_global_client = fedavg_client


def fedavg_server(server: ServerState, reports: list, cfg: RoundConfig) -> ServerState:
    """Generalized FedAvg: Adam on the size-weighted mean of ``old - new`` over shared blocks."""
    reports = sorted((r for r in reports if r is not None), key=lambda r: r.shard_id)
    if not reports:
        raise ValueError("fedavg_server needs at least one report")
    spec = server.bank.spec
    old = server.bank.experts[0]
    N = np.array([r.n_examples for r in reports], dtype=np.float64)
    p_s = N / N.sum()
    local = local_block_names(spec, cfg.algorithm)
    deltas = []
    for r in reports:
        d = old - r.updated_bank.experts[0]
        for name in local:
            d[name][...] = 0.0
        deltas.append(d)
    delta = old.zeros_like()
    for wi, d in zip(p_s, deltas):
        delta = delta + wi * d
    new, adam = adam_step(server.adam_bank[0], old, delta, cfg.lr_server)
    gds = {}
    if len(reports) >= 2:
        shared = [n for n in old.names if n not in local]
        gds[0] = gradient_divergence([d.select(shared) for d in deltas], p_s)
    info = {"weights": {0: dict(zip([r.shard_id for r in reports], p_s.tolist()))}, "gd": gds,
            "n_reports": len(reports)}
    return replace(server, bank=ExpertBank(spec, [new]), adam_bank=[adam], round=server.round + 1, info=info)


# ---------------------------------------------------------------- personalization & inference


def finetune(
    client: ClientState,
    shard: ShardDataset,
    bank: ExpertBank,
    phi: PosteriorTable | None,
    cfg: RoundConfig,
    epochs: int = 1,
    rng: np.random.Generator | None = None,
):
    """Local passes over the client objective from the server model; server state is not touched.

    Returns ``(snapshot, phi)``; ``phi`` is the personalized posterior (None for baselines).
    """
    if shard.n("train") == 0:
        raise ValueError("finetuning needs a training split")
    rng = rng or stream(cfg.seed, "eval", 1, shard.shard_id)
    if cfg.algorithm == "fedmix":
        gate = client.gate.copy() if client.gate is not None else LocalGate.zeros(bank.K, bank.spec.penultimate_dim)
        b, p, g = _fedmix_local(bank.copy(), phi.copy(), gate, shard, cfg, rng, epochs)
        return ModelSnapshot(b, g), p
    spec = bank.spec
    params = _personal_model(client, bank.experts[0], spec, cfg.algorithm)
    X, y, _ = shard.part("train")
    params = sgd_cross_entropy(spec, params, X, y, cfg.B, cfg.lr_client, epochs, rng)
    return ModelSnapshot(ExpertBank(spec, [params])), None


def fit_new_client_gate(
    shard: ShardDataset,
    bank: ExpertBank,
    phi: PosteriorTable,
    cfg: RoundConfig,
    epochs: int = 20,
    rng: np.random.Generator | None = None,
) -> LocalGate:
    """Train a fresh gate on a new client's labelled data with the experts frozen.

    The posterior is refined on a private copy by the usual closed-form
    update; the caller's table is left unchanged.
    """
    if shard.n("train") == 0:
        raise ValueError("a new client needs labelled training data")
    rng = rng or stream(cfg.seed, "eval", 2, shard.shard_id)
    gate = LocalGate.zeros(bank.K, bank.spec.penultimate_dim)
    _, _, gate = _fedmix_local(bank, phi.copy(), gate, shard, cfg, rng, epochs, train_experts=False)
    return gate


def ensemble_gate_predict(X: np.ndarray, gates: list, p_s, bank: ExpertBank):
    """p(z|x) = sum_s p(s) p(z|x,s) over stored gates, and the resulting class predictive."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if not gates:
        raise ValueError("need at least one stored gate")
    p_s = np.asarray(p_s, dtype=np.float64)
    avail = bank.available()
    fw = moe_forward(bank, gates[0], X)
    p_z = np.zeros((X.shape[0], bank.K))
    for w, gate in zip(p_s, gates):
        pi = np.exp(gate.pi_logits[avail] - gate.pi_logits[avail].max())
        pi /= pi.sum()
        h = np.zeros_like(fw.pens[avail[0]])
        for j, k in enumerate(avail):
            h += pi[j] * fw.pens[k]
        p_z += w * softmax(h @ gate.A + gate.b)
    p_y = np.zeros_like(fw.logits[avail[0]])
    for k in avail:
        p_y += p_z[:, k : k + 1] * softmax(fw.logits[k])
    return p_z, p_y


def local_global_ensemble_predict(X: np.ndarray, extractors: list, model: ParamVector, spec: MlpSpec):
    """Average the first-layer features of all stored local extractors, then run the shared layers."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    feats = np.zeros((X.shape[0], spec.layer_widths[1]))
    for ex in extractors:
        z = X @ ex["W0"] + ex["b0"]
        feats += np.maximum(z, 0.0) if spec.n_layers > 1 else z
    feats /= len(extractors)
    if spec.n_layers == 1:
        return softmax(feats)
    rest = MlpSpec(spec.layer_widths[1:])
    sub = ParamVector.from_blocks(
        [(f"{n[0]}{int(n[1:]) - 1}", model[n]) for n in model.names if n not in ("W0", "b0")]
    )
    logits, _, _ = forward_batch(rest, sub, feats)
    return softmax(logits)
