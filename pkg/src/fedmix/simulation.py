"""Round loop, evaluation, checkpoints and the privacy audit for one experiment."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as fd
from .config import ExperimentConfig
from .federation import (
    ClientState,
    DivergenceError,
    ModelSnapshot,
    ServerState,
    client_update,
    ensemble_gate_predict,
    fedavg_client,
    fedavg_server,
    finetune,
    fit_new_client_gate,
    local_global_ensemble_predict,
    server_round,
    server_transmission,
    sgd_cross_entropy,
)
from .metrics import RoundMetrics, Window, accuracy, clustering_score, evaluate_accuracy, privacy_reconstruct
from .moe import ExpertBank, LocalGate
from .numerics import AdamState, ParamVector, StructureError, deserialize, serialize, softmax, forward_batch
from .posterior import from_csv, mean_row_entropy, snapshot_rows, to_csv
from .rng import stream


def build_shards(cfg: ExperimentConfig):
    """Dataset and partition from the config; returns ``(shards, ground_truth or None)``."""
    ds = fd.make_blobs(cfg.C, cfg.d, cfg.n, cfg.spread, cfg.seed, cfg.radius)
    if cfg.scheme == "dirichlet_label":
        return fd.dirichlet_label_partition(ds, cfg.S, cfg.alpha, cfg.seed), None
    if cfg.scheme == "transform_skew":
        return fd.transform_partition(ds, cfg.S, cfg.alpha, cfg.seed, cfg.label_alpha, cfg.transform_count), None
    shards, truth, _ = fd.permutation_partition(ds, cfg.S, cfg.n_permutations, cfg.seed)
    return shards, truth


def sample_cohort(seed: int, round_: int, S: int, m: int) -> list[int]:
    """Without replacement inside a round, independently across rounds."""
    pick = stream(seed, "sampling", round_).choice(S, size=m, replace=False)
    return sorted(int(s) for s in pick)


def _client_task(args):
    client, shard, bank, phi, spec, rcfg, round_ = args
    if rcfg.algorithm == "fedmix":
        report = client_update(client, shard, bank, phi, rcfg, round_)
    else:
        report = fedavg_client(client, shard, bank.experts[0], spec, rcfg, round_)
    return report, client


@dataclass
class Simulation:
    cfg: ExperimentConfig
    shards: list = None
    truth: dict | None = None
    server: ServerState = None
    clients: dict = field(default_factory=dict)
    bytes_up: int = 0
    bytes_down: int = 0
    gd_window: Window = field(default_factory=Window)
    gd_history: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    phi_snapshots: list = field(default_factory=list)

    def __post_init__(self):
        self.rcfg = self.cfg.round_config()
        self.spec = self.cfg.mlp_spec()
        if self.shards is None:
            self.shards, self.truth = build_shards(self.cfg)
        if self.server is None:
            C_side = self.cfg.n_side() if self.rcfg.algorithm == "fedmix" else None
            self.server = ServerState.init(self.spec, self.rcfg.K, C_side, self.cfg.seed)
        if not self.clients:
            self.clients = {sh.shard_id: ClientState(sh.shard_id) for sh in self.shards}

    @property
    def is_fedmix(self) -> bool:
        return self.rcfg.algorithm == "fedmix"

    # ------------------------------------------------------------ rounds

    def run_round(self, pool: ProcessPoolExecutor | None = None) -> dict:
        t = self.server.round + 1
        cohort = sample_cohort(self.cfg.seed, t, len(self.shards), self.rcfg.clients_per_round)
        tasks = []
        for s in cohort:
            bank = server_transmission(self.server, s, self.rcfg) if self.is_fedmix else self.server.bank
            tasks.append((self.clients[s], self.shards[s], bank, self.server.phi, self.spec, self.rcfg, t))
        if pool is not None and len(tasks) > 1:
            results = list(pool.map(_client_task, tasks))
        else:
            results = [_client_task(a) for a in tasks]
        reports = []
        for report, client in results:
            self.clients[client.shard_id] = client
            if report is not None:
                reports.append(report)
        if not reports:
            self.server.round = t
            return {"round": t, "reports": []}
        step = server_round if self.is_fedmix else fedavg_server
        self.server = step(self.server, reports, self.rcfg)
        self.bytes_up += sum(r.bytes_up for r in reports)
        self.bytes_down += sum(r.bytes_down for r in reports)
        gds = list(self.server.info.get("gd", {}).values())
        gd = float(np.mean(gds)) if gds else None
        self.gd_history.append(gd)
        if gd is not None:
            self.gd_window.push(gd)
        return {"round": t, "reports": reports, "gd": gd}

    def run(self, jobs: int = 1, progress=None) -> list:
        pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
        try:
            while self.server.round < self.cfg.rounds:
                self._step(pool, progress)
        finally:
            if pool is not None:
                pool.shutdown()
        return self.metrics

    def _step(self, pool, progress) -> None:
        info = self.run_round(pool)
        t = info["round"]
        if self.is_fedmix and (t % self.cfg.phi_snapshot_every == 0 or t == self.cfg.rounds):
            self.phi_snapshots += list(snapshot_rows(t, self.server.phi))
        if t % self.cfg.eval_every == 0 or t == self.cfg.rounds:
            self.metrics.append(self.round_metrics(info))
            if progress:
                progress(self.metrics[-1])

    # ------------------------------------------------------------ evaluation

    def local_predictors(self) -> dict:
        return {
            s: c.last_communicated.predict for s, c in self.clients.items() if c.last_communicated is not None
        }

    def global_predictor(self):
        algo = self.rcfg.algorithm
        bank = self.server.bank
        if algo == "fedmix":
            gated = [(s, c.gate) for s, c in sorted(self.clients.items()) if c.gate is not None]
            if not gated:
                return None
            N = np.array([self.shards[s].n("train") for s, _ in gated], dtype=np.float64)
            gates = [g for _, g in gated]
            return lambda X: ensemble_gate_predict(X, gates, N / N.sum(), bank)[1]
        if algo == "local_global":
            ex = [c.local_layers for _, c in sorted(self.clients.items()) if c.local_layers is not None]
            if not ex:
                ex = [bank.experts[0].select(["W0", "b0"])]
            return lambda X: local_global_ensemble_predict(X, ex, bank.experts[0], self.spec)
        return lambda X: softmax(forward_batch(self.spec, bank.experts[0], X)[0])

    def accuracies(self) -> tuple:
        local, _ = evaluate_accuracy(self.local_predictors(), self.shards, "local_last_communicated")
        g = self.global_predictor()
        glob = evaluate_accuracy(g, self.shards, "global_gate_ensemble")[0] if g is not None else None
        local = None if np.isnan(local) else local
        return local, glob

    def clustering(self) -> float | None:
        if not self.is_fedmix or self.truth is None:
            return None
        q = {s: self.server.stored_q(s) for s in self.truth}
        return clustering_score(q, self.truth, self.rcfg.K)

    def round_metrics(self, info: dict) -> RoundMetrics:
        local, glob = self.accuracies()
        reports = info.get("reports", [])
        active = None
        if self.is_fedmix and reports:
            active = float(np.mean([len(r.updated_bank.available()) for r in reports]))
        return RoundMetrics(
            round=info["round"],
            algo=self.rcfg.algorithm,
            K=self.rcfg.K,
            local_acc=local,
            global_acc=glob,
            bytes_up=self.bytes_up,
            bytes_down=self.bytes_down,
            gd=info.get("gd"),
            gd_window=self.gd_window.mean(),
            phi_entropy=mean_row_entropy(self.server.phi) if self.is_fedmix else None,
            active_experts_mean=active,
            clustering_score=self.clustering(),
        )

    def finetuned_local_accuracy(self, epochs: int) -> tuple[float, list]:
        """Local accuracy after ``epochs`` passes from the final server model (0: last communicated)."""
        if epochs == 0:
            return evaluate_accuracy(self.local_predictors(), self.shards, "local_last_communicated")
        preds = {}
        for sh in self.shards:
            if sh.n("train") == 0:
                continue
            snap, _ = finetune(self.clients[sh.shard_id], sh, self.server.bank, self.server.phi, self.rcfg, epochs)
            preds[sh.shard_id] = snap.predict
        return evaluate_accuracy(preds, self.shards, "local_last_communicated")

    def new_client_accuracy(self, shard, epochs: int = 20) -> float:
        """Accuracy on a held-out shard's test split after fitting a fresh gate on its train split."""
        if not self.is_fedmix:
            raise ValueError("new-client gates exist only for fedmix")
        gate = fit_new_client_gate(shard, self.server.bank, self.server.phi, self.rcfg, epochs)
        X, y, _ = shard.part("test")
        return accuracy(ModelSnapshot(self.server.bank, gate).predict(X), y)

    # ------------------------------------------------------------ checkpoints

    def save_checkpoint(self, directory) -> None:
        d = Path(directory)
        (d / "experts").mkdir(parents=True, exist_ok=True)
        (d / "adam").mkdir(exist_ok=True)
        (d / "clients").mkdir(exist_ok=True)
        srv = self.server
        for k, (e, a) in enumerate(zip(srv.bank.experts, srv.adam_bank)):
            (d / "experts" / f"expert_{k}.fmx").write_bytes(serialize(e))
            (d / "adam" / f"expert_{k}_m.fmx").write_bytes(serialize(a.m))
            (d / "adam" / f"expert_{k}_v.fmx").write_bytes(serialize(a.v))
        if srv.phi is not None:
            (d / "phi.csv").write_text(to_csv(srv.phi))
            (d / "adam" / "phi_m.fmx").write_bytes(serialize(srv.adam_phi.m))
            (d / "adam" / "phi_v.fmx").write_bytes(serialize(srv.adam_phi.v))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["shard", "expert", "prob"])
        for s in sorted(srv.stored_qzs):
            for k, v in enumerate(srv.stored_qzs[s]):
                w.writerow([s, k, repr(float(v))])
        (d / "stored_qzs.csv").write_text(buf.getvalue())
        for s, c in sorted(self.clients.items()):
            blocks = _client_blocks(c)
            if blocks:
                (d / "clients" / f"client_{s}.fmx").write_bytes(serialize(ParamVector.from_blocks(blocks)))
        (d / "config.ini").write_text(self.cfg.to_text())
        manifest = {
            "round": srv.round,
            "config_sha256": self.cfg.digest(),
            "algorithm": self.rcfg.algorithm,
            "K": self.rcfg.K,
            "adam_t": [a.t for a in srv.adam_bank],
            "adam_phi_t": srv.adam_phi.t if srv.adam_phi is not None else None,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_checkpoint(cls, directory, cfg: ExperimentConfig | None = None) -> "Simulation":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        if cfg is None:
            cfg = ExperimentConfig.from_text((d / "config.ini").read_text())
        sim = cls(cfg)
        if manifest["K"] != sim.rcfg.K or manifest["algorithm"] != sim.rcfg.algorithm:
            raise StructureError("checkpoint does not match the configured algorithm or K")
        layout = sim.spec.layout()
        experts, adams = [], []
        for k in range(manifest["K"]):
            e = deserialize((d / "experts" / f"expert_{k}.fmx").read_bytes())
            if e.layout != layout:
                raise StructureError(f"expert {k} has layout {e.layout.shapes}, config expects {layout.shapes}")
            m = deserialize((d / "adam" / f"expert_{k}_m.fmx").read_bytes())
            v = deserialize((d / "adam" / f"expert_{k}_v.fmx").read_bytes())
            experts.append(e)
            adams.append(AdamState(m, v, manifest["adam_t"][k]))
        phi = adam_phi = None
        if (d / "phi.csv").exists():
            phi = from_csv((d / "phi.csv").read_text())
            if phi.phi.shape != (cfg.n_side(), manifest["K"]):
                raise StructureError("posterior table shape does not match the config")
            adam_phi = AdamState(
                deserialize((d / "adam" / "phi_m.fmx").read_bytes()),
                deserialize((d / "adam" / "phi_v.fmx").read_bytes()),
                manifest["adam_phi_t"],
            )
        stored = {}
        for row in csv.DictReader(io.StringIO((d / "stored_qzs.csv").read_text())):
            stored.setdefault(int(row["shard"]), {})[int(row["expert"])] = float(row["prob"])
        stored = {s: np.array([v[k] for k in sorted(v)]) for s, v in stored.items()}
        sim.server = ServerState(ExpertBank(sim.spec, experts), phi, adams, adam_phi, stored, manifest["round"])
        for s in sim.clients:
            p = d / "clients" / f"client_{s}.fmx"
            if p.exists():
                sim.clients[s] = _client_from_blocks(s, deserialize(p.read_bytes()), sim.spec, manifest["K"])
        sim.bytes_up = manifest["bytes_up"]
        sim.bytes_down = manifest["bytes_down"]
        return sim


def _client_blocks(c: ClientState) -> list:
    blocks = []
    if c.gate is not None:
        blocks += [(f"gate/{n}", v) for n, v in c.gate.params.blocks()]
    if c.local_bias is not None:
        blocks.append(("local_bias", c.local_bias))
    if c.local_layers is not None:
        blocks += [(f"local/{n}", v) for n, v in c.local_layers.blocks()]
    snap = c.last_communicated
    if snap is not None:
        for k, e in enumerate(snap.bank.experts):
            if e is not None:
                blocks += [(f"snap/{k}/{n}", v) for n, v in e.blocks()]
        if snap.gate is not None:
            blocks += [(f"snapgate/{n}", v) for n, v in snap.gate.params.blocks()]
    return blocks


def _client_from_blocks(s: int, pv: ParamVector, spec, K: int) -> ClientState:
    def group(prefix: str):
        items = [(n[len(prefix) :], pv[n].copy()) for n in pv.names if n.startswith(prefix)]
        return ParamVector.from_blocks(items) if items else None

    c = ClientState(s)
    g = group("gate/")
    c.gate = LocalGate(g) if g is not None else None
    if "local_bias" in pv:
        c.local_bias = pv["local_bias"].copy()
    c.local_layers = group("local/")
    snap_experts = [group(f"snap/{k}/") for k in range(K)]
    if any(e is not None for e in snap_experts):
        sg = group("snapgate/")
        c.last_communicated = ModelSnapshot(ExpertBank(spec, snap_experts), LocalGate(sg) if sg is not None else None)
    return c


# ---------------------------------------------------------------- privacy audit

AUDIT_HEADER = ["shard", "class", "true_p", "recon_p", "mode", "l1"]


def privacy_audit(cfg: ExperimentConfig, shards=None) -> tuple[list, dict]:
    """Reconstruct each shard's label marginal from its output-bias update.

    The model starts from the seeded initialization with the output layer
    zeroed, so its predictions are uniform. ``single_full_batch`` takes one
    gradient step on the whole training split; ``multi_step`` runs E epochs
    of size-B minibatch SGD. Returns the CSV rows and the mean L1 per mode.
    """
    spec = cfg.mlp_spec()
    if shards is None:
        shards, _ = build_shards(cfg)
    base = ServerState.init(spec, 1, None, cfg.seed).bank.experts[0]
    last = spec.n_layers - 1
    base[f"W{last}"][...] = 0.0
    base[f"b{last}"][...] = 0.0
    bname = spec.output_bias()
    lr = cfg.lr_client
    rows, l1s = [], {"single_full_batch": [], "multi_step": []}
    for sh in shards:
        X, y, _ = sh.part("train")
        if len(y) == 0:
            continue
        true_p = np.bincount(y, minlength=cfg.C) / len(y)
        rng = stream(cfg.seed, "eval", 3, sh.shard_id)
        runs = {
            "single_full_batch": sgd_cross_entropy(spec, base.copy(), X, y, len(y), lr, 1, rng),
            "multi_step": sgd_cross_entropy(spec, base.copy(), X, y, cfg.B, lr, max(cfg.E, 1), rng),
        }
        for mode, params in runs.items():
            recon = privacy_reconstruct(base[bname], params[bname], lr, cfg.C, mode)
            l1 = float(np.abs(recon - true_p).sum())
            l1s[mode].append(l1)
            for c in range(cfg.C):
                rows.append([sh.shard_id, c, repr(float(true_p[c])), repr(float(recon[c])), mode, repr(l1)])
    means = {m: float(np.mean(v)) if v else float("nan") for m, v in l1s.items()}
    return rows, means


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


__all__ = [
    "AUDIT_HEADER",
    "DivergenceError",
    "Simulation",
    "build_shards",
    "privacy_audit",
    "sample_cohort",
    "write_csv",
]
