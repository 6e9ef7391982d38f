"""Experiment configuration in INI form.

Sections and keys (case-sensitive)::

    [experiment]  config_version, seed, rounds, algorithm, output_dir
    [dataset]     C, d, n, spread, radius
    [partition]   scheme, S, alpha, label_alpha, n_permutations, transform_count
    [training]    K, hidden, beta_entropy, gamma, eta, clients_per_round, E, B,
                  lr_client, lr_server, side_info_mode, entropy_reg, gate_grad_to_features
    [eval]        eval_every, phi_snapshot_every, finetune_epochs

``config_version`` must be present and equal to ``CONFIG_VERSION``. Missing
keys other than it take the defaults below; ``to_text`` writes every key so a
parsed file round-trips exactly.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields

from .federation import ALGORITHMS, SIDE_MODES, RoundConfig
from .numerics import MlpSpec
from .posterior import ConfigError as _BaseConfigError

CONFIG_VERSION = 1
SCHEMES = ("dirichlet_label", "transform_skew", "label_permutation")


class ConfigError(_BaseConfigError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _f(section: str, default, required: bool = False):
    return field(default=default, metadata={"section": section, "required": required})


@dataclass
class ExperimentConfig:
    config_version: int = _f("experiment", CONFIG_VERSION, required=True)
    seed: int = _f("experiment", 0)
    rounds: int = _f("experiment", 10)
    algorithm: str = _f("experiment", "fedmix")
    output_dir: str = _f("experiment", "out")

    C: int = _f("dataset", 4)
    d: int = _f("dataset", 16)
    n: int = _f("dataset", 4000)
    spread: float = _f("dataset", 0.5)
    radius: float = _f("dataset", 1.0)

    scheme: str = _f("partition", "dirichlet_label")
    S: int = _f("partition", 20)
    alpha: float = _f("partition", 1.0)
    label_alpha: float | None = _f("partition", None)
    n_permutations: int = _f("partition", 4)
    transform_count: int = _f("partition", 8)

    K: int = _f("training", 4)
    hidden: tuple = _f("training", (32,))
    beta_entropy: float = _f("training", 0.8)
    gamma: float = _f("training", 0.99)
    eta: float = _f("training", 0.0)
    clients_per_round: int = _f("training", 10)
    E: int = _f("training", 1)
    B: int = _f("training", 64)
    lr_client: float = _f("training", 0.05)
    lr_server: float = _f("training", 0.01)
    side_info_mode: str = _f("training", "label")
    entropy_reg: bool = _f("training", True)
    gate_grad_to_features: bool = _f("training", False)

    eval_every: int = _f("eval", 1)
    phi_snapshot_every: int = _f("eval", 10)
    finetune_epochs: int = _f("eval", 0)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(ok: bool, name: str, msg: str):
            if not ok:
                raise ConfigError(name, msg)

        need(self.config_version == CONFIG_VERSION, "config_version", f"unsupported version {self.config_version}")
        need(self.rounds >= 1, "rounds", "must be >= 1")
        need(self.algorithm in ALGORITHMS, "algorithm", f"must be one of {', '.join(ALGORITHMS)}")
        need(self.C >= 2, "C", "must be >= 2")
        need(self.d >= 2, "d", "must be >= 2")
        need(self.n >= self.C, "n", "must be >= C")
        need(self.spread >= 0, "spread", "must be >= 0")
        need(self.scheme in SCHEMES, "scheme", f"must be one of {', '.join(SCHEMES)}")
        need(self.S >= 1, "S", "must be >= 1")
        need(self.alpha > 0, "alpha", "must be > 0")
        need(self.label_alpha is None or self.label_alpha > 0, "label_alpha", "must be > 0")
        need(self.n_permutations >= 1, "n_permutations", "must be >= 1")
        need(self.transform_count >= 1, "transform_count", "must be >= 1")
        need(self.K >= 1, "K", "must be >= 1")
        need(all(h >= 1 for h in self.hidden), "hidden", "widths must be >= 1")
        need(self.beta_entropy > 0, "beta_entropy", "must be > 0")
        need(0.0 <= self.gamma <= 1.0, "gamma", "must lie in [0, 1]")
        need(0.0 <= self.eta <= 1.0, "eta", "must lie in [0, 1]")
        need(1 <= self.clients_per_round <= self.S, "clients_per_round", "must lie in [1, S]")
        need(self.E >= 0, "E", "must be >= 0")
        need(self.B >= 1, "B", "must be >= 1")
        need(self.lr_client >= 0, "lr_client", "must be >= 0")
        need(self.lr_server >= 0, "lr_server", "must be >= 0")
        need(self.side_info_mode in SIDE_MODES, "side_info_mode", f"must be one of {', '.join(SIDE_MODES)}")
        need(self.eval_every >= 1, "eval_every", "must be >= 1")
        need(self.phi_snapshot_every >= 1, "phi_snapshot_every", "must be >= 1")
        need(self.finetune_epochs >= 0, "finetune_epochs", "must be >= 0")

    def round_config(self) -> RoundConfig:
        return RoundConfig(
            K=1 if self.algorithm != "fedmix" else self.K,
            beta_entropy=self.beta_entropy,
            gamma=self.gamma,
            eta=self.eta,
            clients_per_round=self.clients_per_round,
            E=self.E,
            B=self.B,
            lr_client=self.lr_client,
            lr_server=self.lr_server,
            algorithm=self.algorithm,
            side_info_mode=self.side_info_mode,
            seed=self.seed,
            entropy_reg=self.entropy_reg,
            gate_grad_to_features=self.gate_grad_to_features,
        )

    def mlp_spec(self) -> MlpSpec:
        return MlpSpec((self.d, *self.hidden, self.C))

    def n_side(self) -> int:
        return self.C if self.side_info_mode == "label" else self.transform_count

    # ------------------------------------------------------------ text form

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for f in fields(self):
            sec = f.metadata["section"]
            if not parser.has_section(sec):
                parser.add_section(sec)
            parser.set(sec, f.name, _dump(getattr(self, f.name)))
        lines = []
        for sec in parser.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in parser.items(sec)]
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError("<file>", f"unparseable: {exc}") from None
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for sec in parser.sections():
            for key, raw in parser.items(sec):
                f = known.get(key)
                if f is None or f.metadata["section"] != sec:
                    raise ConfigError(key, f"unknown key in section [{sec}]")
                kwargs[key] = _load(f, raw)
        for name, f in known.items():
            if f.metadata["required"] and name not in kwargs:
                raise ConfigError(name, "required field missing")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_text(fh.read())
        except OSError as exc:
            raise ConfigError("--config", str(exc)) from None


def _dump(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _load(f, raw: str):
    raw = raw.strip()
    default = f.default
    try:
        if f.name == "hidden":
            return tuple(int(x) for x in raw.split(",") if x.strip()) if raw else ()
        if f.name == "label_alpha":
            return None if raw.lower() in ("", "none") else float(raw)
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f.name, f"cannot parse {raw!r}") from None
