"""Flat key-value experiment configuration.

Config files are plain text, one `dotted.key = value` per line, `#` starts
a comment. Every key can also be overridden on the command line with
`--set key=value`. Unknown keys and malformed values are configuration
errors, so typos fail fast.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError
from .gating import GateConfig
from .memtier import POLICIES, CostModel
from .model import ModelSpec
from .substitution import (
    FALLBACK_DROP,
    FALLBACK_PREFETCH,
    PsiParams,
    SubstitutionConfig,
)

_NONE_WORDS = ("none", "disabled", "off")
_UNLIMITED_WORDS = ("unlimited",) + _NONE_WORDS

METHODS = ("original", "random", "buddy")


def _parse_int(s: str) -> int:
    return int(s, 0)


def _parse_float(s: str) -> float:
    return float(s)


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_opt_float(s: str):
    if s.strip().lower() in _NONE_WORDS:
        return None
    return float(s)


def _parse_opt_int(s: str):
    if s.strip().lower() in _UNLIMITED_WORDS:
        return None
    return int(s, 0)


def _parse_str(s: str) -> str:
    return s.strip()


# key -> (parser, default)
SCHEMA: dict = {
    "model.layers": (_parse_int, 24),
    "model.experts": (_parse_int, 64),
    "model.top_k": (_parse_int, 6),
    "model.hidden_dim": (_parse_int, 32),
    "model.ffn_dim": (_parse_int, 64),
    "model.seed": (_parse_int, 7),
    "model.skew": (_parse_float, 0.8),
    "model.clusters": (_parse_int, 8),
    "model.cluster_spread": (_parse_float, 0.1),
    "stream.seed": (_parse_int, 1),
    "stream.num_tokens": (_parse_int, 10000),
    "stream.warmup_steps": (_parse_int, 256),
    "stream.batch": (_parse_int, 16),
    "profile.laplace_eps": (_parse_float, 1e-3),
    "profile.warmup_weight": (_parse_float, 0.0),
    "cache.rate": (_parse_float, 0.75),
    "cache.policy": (_parse_str, "lru"),
    "cost.expert_load_ms": (_parse_float, 9.5),
    "cost.hit_ms": (_parse_float, 0.0),
    "cost.expert_compute_ms": (_parse_float, 0.5),
    "cost.pcie_bw_bytes_per_s": (_parse_float, 4.0e6),
    "builder.alpha": (_parse_str, "0.95"),
    "builder.k_max": (_parse_int, 16),
    "builder.mode": (_parse_str, "binary"),
    "gate.tau": (_parse_opt_float, None),
    "gate.tau_percentile": (_parse_opt_float, 15.0),
    "gate.margin_gamma": (_parse_opt_float, None),
    "gate.temperature": (_parse_float, 1.0),
    "gate.beta": (_parse_float, 1.0),
    "gate.pcie_budget_bytes": (_parse_opt_float, None),
    "sub.h": (_parse_int, 16),
    "sub.rho": (_parse_opt_int, None),
    "sub.fallback": (_parse_str, FALLBACK_PREFETCH),
    "sub.eta": (_parse_float, 0.0),
    "sub.kappa": (_parse_float, 0.0),
    "sub.diversity_factor": (_parse_float, 0.5),
    "sub.use_local_logit": (_parse_bool, True),
    "topology.partitions": (_parse_int, 1),
    "topology.hop": (_parse_float, 1.0),
    "prefetch.enabled": (_parse_bool, True),
    "method": (_parse_str, "buddy"),
    "run.seed": (_parse_int, 0),
    "fidelity.readout_classes": (_parse_int, 16),
    "io.profile_dir": (_parse_str, "out/profile"),
    "io.build_dir": (_parse_str, "out/build"),
    "io.run_dir": (_parse_str, "out/run"),
}


@dataclass
class ExperimentConfig:
    """Resolved configuration; values keyed exactly as in the schema."""

    values: dict
    explicit: set

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown config key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            self.values[key] = parser(raw)
        except (ValueError, TypeError) as e:
            raise ConfigurationError(f"bad value for {key}: {raw!r} ({e})") from None
        self.explicit.add(key)

    # ----- domain object builders -------------------------------------

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            num_layers=self["model.layers"],
            experts_per_layer=self["model.experts"],
            top_k=self["model.top_k"],
            hidden_dim=self["model.hidden_dim"],
            ffn_dim=self["model.ffn_dim"],
            seed=self["model.seed"],
            skew=self["model.skew"],
            num_clusters=self["model.clusters"],
            cluster_spread=self["model.cluster_spread"],
        ).validate()

    def cost_model(self, expert_bytes: int) -> CostModel:
        return CostModel(
            expert_load_ms=self["cost.expert_load_ms"],
            hit_ms=self["cost.hit_ms"],
            expert_compute_ms=self["cost.expert_compute_ms"],
            pcie_bw_bytes_per_s=self["cost.pcie_bw_bytes_per_s"],
            expert_bytes=expert_bytes,
        ).validate()

    def gate_config(self, expert_bytes: float = 0.0) -> GateConfig:
        tau = self["gate.tau"]
        pct = self["gate.tau_percentile"]
        # an explicit fixed tau supersedes the default percentile; setting
        # both explicitly is contradictory
        if "gate.tau" in self.explicit and "gate.tau_percentile" in self.explicit:
            if tau is not None and pct is not None:
                raise ConfigurationError("set gate.tau or gate.tau_percentile, not both")
        if tau is not None and "gate.tau_percentile" not in self.explicit:
            pct = None
        if tau is None and pct is None:
            raise ConfigurationError("one of gate.tau / gate.tau_percentile must be set")
        return GateConfig(
            tau=tau,
            tau_percentile=pct,
            margin_gamma=self["gate.margin_gamma"],
            temperature=self["gate.temperature"],
            beta=self["gate.beta"],
            pcie_budget_bytes=self["gate.pcie_budget_bytes"],
            expert_bytes=expert_bytes,
        ).validate()

    def sub_config(self) -> SubstitutionConfig:
        fb = self["sub.fallback"]
        if fb not in (FALLBACK_PREFETCH, FALLBACK_DROP):
            raise ConfigurationError(f"unknown sub.fallback {fb!r}")
        return SubstitutionConfig(
            search_rank_h=self["sub.h"],
            rho=self["sub.rho"],
            fallback=fb,
        ).validate()

    def psi_params(self) -> PsiParams:
        return PsiParams(
            eta=self["sub.eta"],
            kappa=self["sub.kappa"],
            diversity_factor=self["sub.diversity_factor"],
            use_local_logit=self["sub.use_local_logit"],
        ).validate()

    def alphas(self, num_layers: int) -> list[float]:
        """builder.alpha accepts one value or a comma list, one per layer."""
        parts = [p.strip() for p in str(self["builder.alpha"]).split(",") if p.strip()]
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ConfigurationError(f"bad builder.alpha {self['builder.alpha']!r}") from None
        if len(vals) == 1:
            vals = vals * num_layers
        if len(vals) != num_layers:
            raise ConfigurationError(
                f"builder.alpha needs 1 or {num_layers} values, got {len(vals)}"
            )
        for v in vals:
            if not (0.0 < v <= 1.0):
                raise ConfigurationError("builder.alpha values must be in (0, 1]")
        return vals

    def validate_run(self) -> None:
        if self["method"] not in METHODS:
            raise ConfigurationError(f"unknown method {self['method']!r}")
        if self["cache.policy"] not in POLICIES:
            raise ConfigurationError(f"unknown cache.policy {self['cache.policy']!r}")
        if not (0.0 < self["cache.rate"] <= 1.0):
            raise ConfigurationError("cache.rate must be in (0, 1]")
        if self["builder.mode"] not in ("binary", "weighted"):
            raise ConfigurationError(f"unknown builder.mode {self['builder.mode']!r}")
        if self["stream.batch"] < 1:
            raise ConfigurationError("stream.batch must be >= 1")
        if self["stream.num_tokens"] < 1:
            raise ConfigurationError("stream.num_tokens must be >= 1")
        if self["topology.partitions"] < 1:
            raise ConfigurationError("topology.partitions must be >= 1")
        if self["sub.h"] > self["builder.k_max"]:
            raise ConfigurationError("sub.h must not exceed builder.k_max")


def default_config() -> ExperimentConfig:
    return ExperimentConfig(values={k: d for k, (_, d) in SCHEMA.items()}, explicit=set())


def parse_config_text(text: str, cfg: ExperimentConfig | None = None,
                      source: str = "<config>") -> ExperimentConfig:
    cfg = cfg or default_config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg


def load_config(path: str | None, sets=(), seed: int | None = None) -> ExperimentConfig:
    """Config file (optional) + --set overrides + --seed shorthand."""
    cfg = default_config()
    if path is not None:
        with open(path) as f:
            text = f.read()
        parse_config_text(text, cfg, source=str(path))
    for item in sets:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    if seed is not None:
        cfg.set("run.seed", str(seed))
    return cfg
