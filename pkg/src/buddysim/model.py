"""Deterministic toy-scale mixture-of-experts substrate.

Experts are synthetic two-layer FFNs generated in correlated clusters, so
functional redundancy between cluster mates is controllable via a single
perturbation scale. The router is a training-free linear gate whose rows
follow the cluster directions and whose per-expert bias has a Zipf-like
profile, which yields heavy-tailed, input-dependent activation patterns.
Every weight regenerates bit-identically from integer seeds, so nothing
needs to be stored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError, InternalError

# rng domain tags keep the independent draw streams from colliding
_TAG_CLUSTER_DIR = 11
_TAG_GATE_JITTER = 12
_TAG_BIAS_RANK = 13
_TAG_EXPERT_BASE = 14
_TAG_EXPERT_DELTA = 15
_TAG_STREAM = 16
_TAG_READOUT = 17

# fixed texture constants for the synthetic substrate (not config surface);
# jitter and noise are expected vector norms relative to the unit cluster
# direction, hence the 1/sqrt(dim) scaling at the draw sites
_GATE_GAIN = 1.5
_GATE_JITTER = 0.25
_STREAM_NOISE = 0.6
_RESIDUAL_SCALE = 0.5
_MIXTURE_EXPONENT = 2.25  # stream cluster popularity ~ rank^-(this * skew)


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


@dataclass(frozen=True)
class ModelSpec:
    """Shape and seeding of the synthetic model."""

    num_layers: int = 24
    experts_per_layer: int = 64
    top_k: int = 6
    hidden_dim: int = 32
    ffn_dim: int = 64
    seed: int = 7
    skew: float = 0.8
    num_clusters: int = 8
    cluster_spread: float = 0.1

    def validate(self) -> "ModelSpec":
        if self.num_layers < 1:
            raise ConfigurationError("num_layers must be >= 1")
        if self.experts_per_layer < 1:
            raise ConfigurationError("experts_per_layer must be >= 1")
        if self.top_k < 1:
            raise ConfigurationError("top_k must be >= 1")
        if self.top_k > self.experts_per_layer:
            raise ConfigurationError(
                f"top_k={self.top_k} exceeds experts_per_layer={self.experts_per_layer}"
            )
        if self.hidden_dim < 1 or self.ffn_dim < 1:
            raise ConfigurationError("hidden_dim and ffn_dim must be >= 1")
        if not (1 <= self.num_clusters <= self.experts_per_layer):
            raise ConfigurationError("num_clusters must be in [1, experts_per_layer]")
        if self.skew < 0:
            raise ConfigurationError("skew must be nonnegative")
        if self.cluster_spread < 0:
            raise ConfigurationError("cluster_spread must be nonnegative")
        if not (0 <= self.seed < 2**63):
            raise ConfigurationError("seed must be a nonnegative 64-bit integer")
        return self


@dataclass(frozen=True)
class Expert:
    """One expert FFN: y = tanh(x @ w_in) @ w_out."""

    layer: int
    id: int
    w_in: np.ndarray   # (hidden_dim, ffn_dim)
    w_out: np.ndarray  # (ffn_dim, hidden_dim)

    @property
    def size_bytes(self) -> int:
        return self.w_in.nbytes + self.w_out.nbytes

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w_in) @ self.w_out


@dataclass(frozen=True)
class RouterDecision:
    """Routing outcome for one token at one layer.

    topk holds the selected expert ids in descending-probability order
    (ties broken toward the lower index); probs_renorm are the softmax
    probabilities renormalized over that selected set and sum to 1.
    """

    token: int
    layer: int
    logits: np.ndarray        # (E,)
    topk: np.ndarray          # (k,) int
    probs_renorm: np.ndarray  # (k,) float, sums to 1
    temperature: float = 1.0


class Model:
    """Immutable once built; expert weight stacks materialize lazily."""

    def __init__(self, spec: ModelSpec):
        spec.validate()
        self.spec = spec
        E, d, C = spec.experts_per_layer, spec.hidden_dim, spec.num_clusters
        L = spec.num_layers

        # contiguous cluster blocks; shared directions keep routing
        # cluster-consistent across depth
        self.cluster_of = (np.arange(E) * C) // E
        self.cluster_dirs = _unit_rows(
            _rng(spec.seed, _TAG_CLUSTER_DIR).standard_normal((C, d))
        )
        self.cluster_dirs.setflags(write=False)

        # Zipf-like bias assigned cluster-major: popular experts concentrate
        # inside popular clusters, so skew reinforces the cluster structure
        # instead of fighting it. Shared across depth; jitter varies per layer.
        _, expert_rank = _cluster_popularity(spec)
        bias = spec.skew * np.log(E / expert_rank)

        gate_w = np.empty((L, E, d))
        gate_b = np.empty((L, E))
        for layer in range(L):
            jitter = _rng(spec.seed, _TAG_GATE_JITTER, layer).standard_normal((E, d))
            rows = self.cluster_dirs[self.cluster_of] + _GATE_JITTER * jitter / np.sqrt(d)
            gate_w[layer] = _GATE_GAIN * _unit_rows(rows)
            gate_b[layer] = bias
        gate_w.setflags(write=False)
        gate_b.setflags(write=False)
        self.gate_w = gate_w
        self.gate_b = gate_b
        self._stacks: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def expert_bytes(self) -> int:
        """Weight bytes per expert; identical for every expert of the model."""
        s = self.spec
        return 2 * s.hidden_dim * s.ffn_dim * 8

    def _expert_weights(self, layer: int, expert_id: int) -> tuple[np.ndarray, np.ndarray]:
        s = self.spec
        d, f = s.hidden_dim, s.ffn_dim
        c = int(self.cluster_of[expert_id])
        base = _rng(s.seed, _TAG_EXPERT_BASE, layer, c)
        w_in = base.standard_normal((d, f)) / np.sqrt(d)
        w_out = base.standard_normal((f, d)) / np.sqrt(f)
        delta = _rng(s.seed, _TAG_EXPERT_DELTA, layer, expert_id)
        w_in = w_in + s.cluster_spread * delta.standard_normal((d, f)) / np.sqrt(d)
        w_out = w_out + s.cluster_spread * delta.standard_normal((f, d)) / np.sqrt(f)
        return w_in, w_out

    def layer_stack(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """All expert weights of one layer as (E,d,f) and (E,f,d) stacks."""
        self._check_layer(layer)
        if layer not in self._stacks:
            s = self.spec
            E = s.experts_per_layer
            w_in = np.empty((E, s.hidden_dim, s.ffn_dim))
            w_out = np.empty((E, s.ffn_dim, s.hidden_dim))
            for e in range(E):
                w_in[e], w_out[e] = self._expert_weights(layer, e)
            w_in.setflags(write=False)
            w_out.setflags(write=False)
            self._stacks[layer] = (w_in, w_out)
        return self._stacks[layer]

    def expert(self, layer: int, expert_id: int) -> Expert:
        self._check_layer(layer)
        if not (0 <= expert_id < self.spec.experts_per_layer):
            raise InputError(f"expert id {expert_id} out of range")
        w_in, w_out = self.layer_stack(layer)
        return Expert(layer=layer, id=expert_id, w_in=w_in[expert_id], w_out=w_out[expert_id])

    def _check_layer(self, layer: int) -> None:
        if not (0 <= layer < self.spec.num_layers):
            raise InputError(f"layer {layer} out of range")


def build_model(spec: ModelSpec) -> Model:
    """Validate the spec and construct the deterministic model."""
    return Model(spec)


def _cluster_popularity(spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Seeded popularity layout shared by the router bias and the stream.

    Returns (cluster_order, expert_rank). cluster_order[p] is the cluster at
    popularity position p (0 = most popular). expert_rank[i] is expert i's
    1-based global rank, assigned cluster-major along that order.
    """
    E, C = spec.experts_per_layer, spec.num_clusters
    g = _rng(spec.seed, _TAG_BIAS_RANK)
    cluster_of = (np.arange(E) * C) // E
    cluster_order = g.permutation(C)
    expert_rank = np.empty(E, dtype=np.int64)
    nxt = 1
    for c in cluster_order:
        members = g.permutation(np.flatnonzero(cluster_of == c))
        expert_rank[members] = np.arange(nxt, nxt + members.size)
        nxt += members.size
    return cluster_order, expert_rank


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def route_batch(
    model: Model,
    x: np.ndarray,
    layer: int,
    temperature: float = 1.0,
    tokens=None,
) -> list[RouterDecision]:
    """Route a batch of embeddings at one layer.

    Args:
        x: (B, hidden_dim) embeddings; must be finite.
        temperature: softmax temperature, > 0. Selection is temperature
            independent; only the renormalized probabilities change.
        tokens: optional per-row token ids recorded on the decisions.

    Returns:
        One RouterDecision per row.
    """
    model._check_layer(layer)
    if temperature <= 0:
        raise InputError("temperature must be > 0")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.spec.hidden_dim:
        raise InputError(f"embedding dim {x.shape[1]} != hidden_dim {model.spec.hidden_dim}")
    if not np.isfinite(x).all():
        raise InputError("non-finite embedding")
    k = model.spec.top_k
    z = x @ model.gate_w[layer].T + model.gate_b[layer]
    p = _softmax(z / temperature)
    # stable sort on -z: descending probability, ties toward lower index
    order = np.argsort(-z, axis=1, kind="stable")[:, :k]
    p_sel = np.take_along_axis(p, order, axis=1)
    p_sel = p_sel / p_sel.sum(axis=1, keepdims=True)
    if tokens is None:
        tokens = range(x.shape[0])
    out = []
    for row, tok in zip(range(x.shape[0]), tokens):
        zr = z[row].copy()
        zr.setflags(write=False)
        out.append(
            RouterDecision(
                token=int(tok),
                layer=layer,
                logits=zr,
                topk=order[row].copy(),
                probs_renorm=p_sel[row].copy(),
                temperature=float(temperature),
            )
        )
    return out


def route(
    model: Model,
    x: np.ndarray,
    layer: int,
    temperature: float = 1.0,
    token: int = 0,
) -> RouterDecision:
    """Single-token convenience wrapper around route_batch."""
    return route_batch(model, np.asarray(x)[None, :], layer, temperature, tokens=[token])[0]


def _plan_arrays(decision: RouterDecision, plan) -> tuple[np.ndarray, np.ndarray]:
    """Executed ids and active mask for one decision under an optional plan."""
    k = len(decision.topk)
    if plan is None:
        return decision.topk.astype(np.int64), np.ones(k, dtype=bool)
    ids = np.empty(k, dtype=np.int64)
    active = np.ones(k, dtype=bool)
    for i, slot in enumerate(plan.slots):
        ids[i] = slot.executed
        if slot.kind == "dropped":
            active[i] = False
    return ids, active


def forward_layer(model: Model, x: np.ndarray, decision: RouterDecision, plan=None) -> np.ndarray:
    """MoE output for one token: sum over slots of p̃[slot] * Expert(x).

    The aggregation weights are always the decision's renormalized
    probabilities, regardless of which expert a plan put in each slot;
    dropped slots contribute nothing.
    """
    return forward_batch(model, np.asarray(x)[None, :], [decision], None if plan is None else [plan])[0]


def forward_batch(model: Model, x: np.ndarray, decisions, plans=None) -> np.ndarray:
    """Vectorized forward over one layer for a batch of decisions."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    if len(decisions) != n:
        raise InputError("decisions/batch size mismatch")
    layer = decisions[0].layer
    E = model.spec.experts_per_layer
    k = len(decisions[0].topk)
    ids = np.empty((n, k), dtype=np.int64)
    active = np.ones((n, k), dtype=bool)
    weights = np.empty((n, k))
    for i, d in enumerate(decisions):
        if d.layer != layer:
            raise InputError("mixed layers in one forward batch")
        ids[i], active[i] = _plan_arrays(d, None if plans is None else plans[i])
        weights[i] = d.probs_renorm
    if ids.min() < 0 or ids.max() >= E:
        raise InternalError("plan references expert outside the layer")
    w_in, w_out = model.layer_stack(layer)
    h = np.tanh(np.einsum("bd,bkdf->bkf", x, w_in[ids]))
    y = np.einsum("bkf,bkfd->bkd", h, w_out[ids])
    return (y * (weights * active)[..., None]).sum(axis=1)


def layer_update(h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Residual accumulation with RMS normalization; keeps depth stable."""
    h = h + _RESIDUAL_SCALE * y
    rms = np.sqrt(np.mean(np.square(h), axis=-1, keepdims=True))
    return h / np.maximum(rms, 1e-12)


def token_stream(spec: ModelSpec, seed: int, num_tokens: int) -> np.ndarray:
    """Seeded synthetic embedding stream.

    Tokens are drawn from a Gaussian mixture with one component per expert
    cluster, rows RMS-normalized, so routing is input dependent and
    cluster-mates co-activate.
    """
    if num_tokens < 1:
        raise ConfigurationError("num_tokens must be >= 1")
    if not (0 <= seed < 2**63):
        raise ConfigurationError("stream seed must be a nonnegative 64-bit integer")
    spec.validate()
    dirs = _unit_rows(_rng(spec.seed, _TAG_CLUSTER_DIR).standard_normal((spec.num_clusters, spec.hidden_dim)))
    # cluster draw follows the same popularity order as the router bias;
    # skew = 0 degenerates to a uniform mixture
    order, _ = _cluster_popularity(spec)
    pos = np.arange(1, spec.num_clusters + 1, dtype=np.float64)
    weights = pos ** (-_MIXTURE_EXPONENT * spec.skew)
    probs = np.empty(spec.num_clusters)
    probs[order] = weights / weights.sum()
    g = _rng(seed, _TAG_STREAM)
    comp = g.choice(spec.num_clusters, size=num_tokens, p=probs)
    noise = g.standard_normal((num_tokens, spec.hidden_dim)) / np.sqrt(spec.hidden_dim)
    x = dirs[comp] + _STREAM_NOISE * noise
    rms = np.sqrt(np.mean(np.square(x), axis=1, keepdims=True))
    return x / np.maximum(rms, 1e-12)


def readout_head(spec: ModelSpec, num_classes: int = 16) -> np.ndarray:
    """Fixed random readout used for argmax-agreement fidelity."""
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    return _rng(spec.seed, _TAG_READOUT).standard_normal((num_classes, spec.hidden_dim))
