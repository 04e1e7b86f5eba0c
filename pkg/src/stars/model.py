"""IE-STGCN backbone with multi-level spatial-temporal anchors.

Layer ``l`` (1-based) maps ``H^(l-1)`` to ``H^(l)`` through adjacency index
``l - 1``. Anchors are added to the *input* of the anchor layers, noise is
concatenated to the input of the noise layer, and every layer is followed by
batch norm, ReLU (except the last) and an optional residual.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractViolation, ParameterError, UnsupportedVariantError
from .frequency import build_dct_basis, pad_history, to_frequency, to_time
from .graph import FactorizedAdjacency, Skeleton, chain_skeleton

VARIANTS = ("stochastic", "deterministic_short", "deterministic_long")
DEFAULT_CHANNELS = (3, 128, 64, 128, 64, 128, 64, 128, 3)


@dataclass
class ModelConfig:
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    M: int = 20
    T_h: int = 25
    T_p: int = 100
    V: int = 17
    K_s: int = 5
    K_t: int = 10
    noise_dim: int = 64
    anchor_layers: tuple[int, ...] = (4, 6)
    noise_layer: int | None = 5
    variant: str = "stochastic"
    # adjacency indices; None picks the variant default
    prune_map: tuple[int, ...] | None = None
    temporal_prune_map: tuple[int, ...] | None = None
    share_map: tuple[tuple[int, ...], ...] = ((4, 6), (5, 7))
    residuals: tuple[tuple[int, int], ...] = ((1, 3), (3, 5), (5, 7))
    anchor_init_std: float = 0.01

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.anchor_layers = tuple(int(x) for x in self.anchor_layers)
        self.share_map = tuple(tuple(int(i) for i in g) for g in self.share_map)
        self.residuals = tuple((int(a), int(b)) for a, b in self.residuals)
        if self.prune_map is not None:
            self.prune_map = tuple(int(i) for i in self.prune_map)
        if self.temporal_prune_map is not None:
            self.temporal_prune_map = tuple(int(i) for i in self.temporal_prune_map)
        self.validate()

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelConfig":
        base: dict = {"variant": variant}
        if variant == "deterministic_short":
            base.update(M=20, K_s=1, K_t=1, noise_dim=0, anchor_layers=(), noise_layer=None)
        elif variant == "deterministic_long":
            base.update(M=35, K_s=1, K_t=1, noise_dim=0, anchor_layers=(), noise_layer=None)
        base.update(overrides)
        return cls(**base)

    @property
    def n_layers(self) -> int:
        return len(self.channels) - 1

    @property
    def K(self) -> int:
        return self.K_s * self.K_t

    @property
    def stochastic(self) -> bool:
        return self.variant == "stochastic"

    @property
    def uses_anchors(self) -> bool:
        return self.stochastic and bool(self.anchor_layers)

    def resolved_prune_map(self) -> tuple[int, ...]:
        if self.prune_map is not None:
            return self.prune_map
        if self.stochastic:
            return tuple(range(0, self.n_layers - 1, 2))
        return tuple(range(1, self.n_layers - 1))

    def resolved_temporal_prune_map(self) -> tuple[int, ...]:
        if self.temporal_prune_map is not None:
            return self.temporal_prune_map
        if self.variant == "deterministic_long":
            return tuple(range(1, self.n_layers - 1))
        return ()

    def weight_in(self, layer: int) -> int:
        c = self.channels[layer - 1]
        if self.noise_layer == layer and self.noise_dim > 0:
            c += self.noise_dim
        return c

    def validate(self):
        L = self.n_layers
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if L < 1 or self.channels[0] != 3 or self.channels[-1] != 3:
            raise ConfigError(f"channels must start and end with 3, got {self.channels}")
        if not (1 <= self.M <= self.T_h + self.T_p):
            raise ConfigError(f"M={self.M} must lie in [1, T_h + T_p = {self.T_h + self.T_p}]")
        if self.T_h < 1 or self.T_p < 1 or self.V < 1:
            raise ConfigError("T_h, T_p and V must be positive")
        if self.K_s < 1 or self.K_t < 1 or self.noise_dim < 0:
            raise ConfigError("anchor counts must be >= 1 and noise_dim >= 0")
        if not self.stochastic and (self.K_s != 1 or self.K_t != 1 or self.noise_dim != 0):
            raise ConfigError(
                f"variant {self.variant} requires K_s = K_t = 1 and noise_dim = 0 "
                f"(got K_s={self.K_s}, K_t={self.K_t}, noise_dim={self.noise_dim})")
        if len(self.anchor_layers) > 2:
            raise ConfigError("at most two anchor levels are supported")
        for l in self.anchor_layers:
            if not (1 <= l <= L):
                raise ConfigError(f"anchor layer {l} outside 1..{L}")
        if self.noise_layer is not None and not (1 <= self.noise_layer <= L):
            raise ConfigError(f"noise layer {self.noise_layer} outside 1..{L}")
        for a, b in self.residuals:
            if not (1 <= a < b <= L) or self.channels[a] != self.channels[b]:
                raise ConfigError(f"residual ({a}, {b}) needs 1 <= a < b <= {L} with equal widths")
        seen = set()
        for g in self.share_map:
            for i in g:
                if not (0 <= i < L) or i in seen:
                    raise ConfigError(f"share map entry {i} invalid or repeated")
                seen.add(i)
        for i in self.resolved_prune_map() + self.resolved_temporal_prune_map():
            if not (0 <= i < L):
                raise ConfigError(f"prune map entry {i} outside 0..{L - 1}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("channels", "anchor_layers"):
            if k in d:
                d[k] = tuple(d[k])
        for k in ("prune_map", "temporal_prune_map"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        if "share_map" in d:
            d["share_map"] = tuple(tuple(g) for g in d["share_map"])
        if "residuals" in d:
            d["residuals"] = tuple(tuple(r) for r in d["residuals"])
        return cls(**d)


@dataclass
class AnchorLevel:
    spatial: T.Tensor   # (K_s, V, C)
    temporal: T.Tensor  # (K_t, M, C)


@dataclass
class AnchorSet:
    levels: list[AnchorLevel]

    @property
    def K_s(self) -> int:
        return self.levels[0].spatial.shape[0]

    @property
    def K_t(self) -> int:
        return self.levels[0].temporal.shape[0]


def compose_anchor(anchors: AnchorSet, level: int, i: int, j: int) -> np.ndarray:
    """Compositional anchor ``a_i^s + a_j^t`` laid out as (M, V, C)."""
    lv = _level(anchors, level)
    if not (0 <= i < lv.spatial.shape[0]) or not (0 <= j < lv.temporal.shape[0]):
        raise ParameterError(f"anchor index ({i}, {j}) outside ({lv.spatial.shape[0]}, {lv.temporal.shape[0]})")
    return lv.spatial.data[i][None, :, :] + lv.temporal.data[j][:, None, :]


def interpolate_anchor(anchors: AnchorSet, level: int, axis: str, a: int, b: int, alpha: float) -> np.ndarray:
    """``(1 - alpha) * param[a] + alpha * param[b]`` for one anchor bank."""
    if not (0.0 <= alpha <= 1.0):
        raise ParameterError(f"interpolation coefficient must lie in [0, 1], got {alpha}")
    lv = _level(anchors, level)
    bank = {"spatial": lv.spatial, "temporal": lv.temporal}.get(axis)
    if bank is None:
        raise ParameterError(f"axis must be 'spatial' or 'temporal', got {axis!r}")
    n = bank.shape[0]
    if not (0 <= a < n and 0 <= b < n):
        raise ParameterError(f"{axis} anchor indices ({a}, {b}) outside [0, {n})")
    if alpha == 0.0:
        return bank.data[a].copy()
    if alpha == 1.0:
        return bank.data[b].copy()
    return (1.0 - alpha) * bank.data[a] + alpha * bank.data[b]


def _level(anchors: AnchorSet, level: int) -> AnchorLevel:
    if not (0 <= level < len(anchors.levels)):
        raise ParameterError(f"anchor level {level} outside [0, {len(anchors.levels)})")
    return anchors.levels[level]


@dataclass
class PredictionSet:
    predictions: np.ndarray          # (K, T_p, V, 3)
    recovered_histories: np.ndarray  # (K, T_h, V, 3)
    provenance: list[dict] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.predictions.shape[0]


@dataclass
class Layer:
    weight: T.Tensor
    adj: FactorizedAdjacency
    gamma: T.Tensor
    beta: T.Tensor
    bn: T.BatchNormState


class StarsModel:
    def __init__(self, config: ModelConfig, skeleton: Skeleton | None = None, rng: np.random.Generator | None = None):
        cfg = config
        if skeleton is None:
            skeleton = chain_skeleton(cfg.V)
        if skeleton.V != cfg.V:
            raise ConfigError(f"skeleton has {skeleton.V} joints, config expects V={cfg.V}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = cfg
        self.skeleton = skeleton
        self.basis = build_dct_basis(cfg.M, cfg.T_h + cfg.T_p)
        n = cfg.M * cfg.V
        prune = set(cfg.resolved_prune_map())
        tprune = set(cfg.resolved_temporal_prune_map())
        group_of = {i: g for g, members in enumerate(cfg.share_map) for i in members}
        shared: dict[int, T.Tensor] = {}
        self.layers: list[Layer] = []
        for l in range(1, cfg.n_layers + 1):
            a = l - 1
            c_in, c_out = cfg.weight_in(l), cfg.channels[l]
            bound = 1.0 / np.sqrt(c_in)
            w = T.Tensor(rng.uniform(-bound, bound, (c_in, c_out)), requires_grad=True, name=f"layer{l}.weight")
            g = group_of.get(a)
            adj = FactorizedAdjacency.create(skeleton, cfg.M, rng, prune_spatial=a in prune,
                                             prune_temporal=a in tprune, spatial=shared.get(g),
                                             share_group=g, name=f"adj{a}")
            if g is not None:
                shared.setdefault(g, adj.spatial)
            gamma = T.Tensor(np.ones((n, c_out)), requires_grad=True, name=f"layer{l}.bn_scale")
            beta = T.Tensor(np.zeros((n, c_out)), requires_grad=True, name=f"layer{l}.bn_shift")
            self.layers.append(Layer(w, adj, gamma, beta, T.BatchNormState.fresh((n, c_out))))
        levels = []
        if cfg.uses_anchors:
            for lvl, l in enumerate(cfg.anchor_layers):
                c = cfg.channels[l - 1]
                levels.append(AnchorLevel(
                    T.Tensor(rng.normal(0.0, cfg.anchor_init_std, (cfg.K_s, cfg.V, c)), requires_grad=True,
                             name=f"anchor{lvl}.spatial"),
                    T.Tensor(rng.normal(0.0, cfg.anchor_init_std, (cfg.K_t, cfg.M, c)), requires_grad=True,
                             name=f"anchor{lvl}.temporal")))
        self.anchors = AnchorSet(levels)

    # ------------------------------------------------------------ parameters
    def named_parameters(self) -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        seen: set[int] = set()

        def put(name, t):
            if id(t) not in seen:
                seen.add(id(t))
                out[name] = t

        for l, layer in enumerate(self.layers, 1):
            put(f"layer{l}.weight", layer.weight)
            put(f"adj{l - 1}.spatial", layer.adj.spatial)
            put(f"adj{l - 1}.frequency", layer.adj.frequency)
            put(f"layer{l}.bn_scale", layer.gamma)
            put(f"layer{l}.bn_shift", layer.beta)
        for lvl, a in enumerate(self.anchors.levels):
            put(f"anchor{lvl}.spatial", a.spatial)
            put(f"anchor{lvl}.temporal", a.temporal)
        return out

    def parameters(self) -> list[T.Tensor]:
        return list(self.named_parameters().values())

    def anchor_parameters(self) -> list[T.Tensor]:
        return [t for a in self.anchors.levels for t in (a.spatial, a.temporal)]

    def backbone_parameters(self) -> list[T.Tensor]:
        ids = {id(t) for t in self.anchor_parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_parameters().items()}
        for l, layer in enumerate(self.layers, 1):
            state[f"layer{l}.bn_running_mean"] = layer.bn.running_mean.copy()
            state[f"layer{l}.bn_running_var"] = layer.bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        expected = set(params) | {f"layer{l}.bn_running_{s}" for l in range(1, len(self.layers) + 1)
                                  for s in ("mean", "var")}
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ContractViolation(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ContractViolation(f"{k}: stored shape {state[k].shape} vs model shape {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)
        for l, layer in enumerate(self.layers, 1):
            layer.bn.running_mean = np.array(state[f"layer{l}.bn_running_mean"], dtype=np.float64)
            layer.bn.running_var = np.array(state[f"layer{l}.bn_running_var"], dtype=np.float64)

    def zero_(self):
        for p in self.parameters():
            p.data = np.zeros_like(p.data)

    # ------------------------------------------------------------ forward
    def forward(self, X, pairs=None, z=None, training: bool = False, anchor_override=None,
                update_stats: bool = True):
        """Run the network on a batch of histories.

        X: (B, T_h, V, 3). ``pairs`` lists the (spatial, temporal) anchor index
        of each of the K outputs; ``z`` is (B, K, noise_dim). ``anchor_override``
        maps ``(level, "spatial"|"temporal")`` to a (K, V|M, C) array that
        replaces the gathered anchor component. Returns Tensors
        ``(future (B, K, T_p, V, 3), history (B, K, T_h, V, 3))``.
        """
        cfg = self.config
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4 or X.shape[1:] != (cfg.T_h, cfg.V, 3):
            raise ContractViolation(f"history batch shape {X.shape} vs expected (B, {cfg.T_h}, {cfg.V}, 3)")
        B = X.shape[0]
        if pairs is None:
            pairs = [(0, 0)]
        K = len(pairs)
        if cfg.uses_anchors:
            for i, j in pairs:
                if not (0 <= i < cfg.K_s and 0 <= j < cfg.K_t):
                    raise ParameterError(f"anchor index ({i}, {j}) outside ({cfg.K_s}, {cfg.K_t})")
        elif K != 1:
            raise UnsupportedVariantError(f"variant {cfg.variant} produces a single output")
        nd = cfg.noise_dim if cfg.noise_layer is not None else 0
        if nd > 0:
            if z is None:
                raise ContractViolation("stochastic forward needs a noise batch z")
            z = np.asarray(z, dtype=np.float64)
            if z.shape != (B, K, nd):
                raise ContractViolation(f"noise shape {z.shape} vs expected ({B}, {K}, {nd})")

        n = cfg.M * cfg.V
        coeffs = to_frequency(self.basis, pad_history(X, cfg.T_p))
        H = T.Tensor(coeffs.reshape(B, n, 3))
        outputs = {0: H}
        expanded = False
        offsets = self._anchor_offsets(pairs, anchor_override) if cfg.uses_anchors else {}
        residual_src = {a for a, _ in cfg.residuals}

        def expand(h):
            c = h.shape[-1]
            h = T.add(T.reshape(h, (B, 1, n, c)), np.zeros((1, K, 1, 1)))
            return T.reshape(h, (B * K, n, c))

        for l, layer in enumerate(self.layers, 1):
            needs_k = l in offsets or (l == cfg.noise_layer and nd > 0)
            if needs_k and not expanded:
                H = expand(H)
                outputs = {k: expand(v) for k, v in outputs.items() if k in residual_src}
                expanded = True
            if l in offsets:
                c = H.shape[-1]
                H = T.reshape(T.add(T.reshape(H, (B, K, n, c)), offsets[l]), (B * K, n, c))
            if l == cfg.noise_layer and nd > 0:
                zb = np.broadcast_to(z.reshape(B * K, 1, nd), (B * K, n, nd))
                H = T.concat_last_axis(H, zb)
            Z = T.matmul(layer.adj.dense(), T.matmul(H, layer.weight))
            Z = T.batch_norm(Z, layer.gamma, layer.beta, layer.bn, training=training, update_stats=update_stats)
            if l < cfg.n_layers:
                Z = T.relu(Z)
            for src, dst in cfg.residuals:
                if dst == l:
                    Z = T.add(Z, outputs[src])
            H = Z
            outputs[l] = H
        Kout = K if expanded else 1
        Y = T.reshape(H, (B, Kout, cfg.M, cfg.V, 3))
        hist, fut = to_time(self.basis, Y, cfg.T_h, cfg.T_p)
        return fut, hist

    def _anchor_offsets(self, pairs, override):
        cfg = self.config
        i_idx = [p[0] for p in pairs]
        j_idx = [p[1] for p in pairs]
        K = len(pairs)
        override = override or {}
        out = {}
        for lvl, l in enumerate(cfg.anchor_layers):
            a = self.anchors.levels[lvl]
            c = a.spatial.shape[-1]
            s = override.get((lvl, "spatial"))
            s = T.Tensor(s) if s is not None else T.take(a.spatial, i_idx, axis=0)
            t = override.get((lvl, "temporal"))
            t = T.Tensor(t) if t is not None else T.take(a.temporal, j_idx, axis=0)
            off = T.add(T.reshape(s, (K, 1, cfg.V, c)), T.reshape(t, (K, cfg.M, 1, c)))
            out[l] = T.reshape(off, (K, cfg.M * cfg.V, c))
        return out

    # ------------------------------------------------------------ inference helpers
    def forward_one(self, X, i: int = 0, j: int = 0, z=None, anchor_override=None):
        cfg = self.config
        zb = None if z is None else np.asarray(z, dtype=np.float64).reshape(1, 1, -1)
        if cfg.stochastic and cfg.noise_dim > 0 and zb is not None and zb.shape[-1] != cfg.noise_dim:
            raise ContractViolation(f"noise vector has {zb.shape[-1]} entries, expected {cfg.noise_dim}")
        if anchor_override:
            anchor_override = {k: np.asarray(v)[None] for k, v in anchor_override.items()}
        fut, hist = self.forward(np.asarray(X)[None], [(i, j)], zb, training=False, anchor_override=anchor_override)
        return fut.data[0, 0], hist.data[0, 0]

    def all_pairs(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.config.K_s) for j in range(self.config.K_t)]

    def sample_batch(self, X, rng: np.random.Generator):
        """All K anchor pairs with fresh noise for each history in the batch (eval mode)."""
        cfg = self.config
        if not cfg.stochastic:
            raise UnsupportedVariantError(f"sampling requires the stochastic variant, got {cfg.variant}")
        pairs = self.all_pairs()
        X = np.asarray(X, dtype=np.float64)
        z = rng.standard_normal((X.shape[0], len(pairs), cfg.noise_dim)) if cfg.noise_dim else None
        fut, hist = self.forward(X, pairs, z, training=False)
        return fut.data, hist.data, pairs

    def sample_set(self, X, seed=None, rng: np.random.Generator | None = None) -> PredictionSet:
        if rng is None:
            rng = np.random.default_rng(seed)
        fut, hist, pairs = self.sample_batch(np.asarray(X)[None], rng)
        prov = [{"spatial": i, "temporal": j, "noise_draw": k, "seed": seed} for k, (i, j) in enumerate(pairs)]
        return PredictionSet(fut[0], hist[0], prov)

    def deterministic_forward(self, X):
        if self.config.stochastic:
            raise UnsupportedVariantError("deterministic_forward requires a deterministic variant")
        fut, hist = self.forward(np.asarray(X)[None], None, None, training=False)
        return fut.data[0, 0], hist.data[0, 0]
