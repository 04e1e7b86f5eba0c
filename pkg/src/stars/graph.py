"""Skeletons, pruning masks and factorised spatial/frequency adjacency.

Graph nodes are (frequency, joint) pairs flattened as ``i = f * V + v``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractViolation, ParseError, ValidationError


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple[str, ...]
    bone_edges: tuple[tuple[int, int], ...]
    mirror_pairs: tuple[tuple[int, int], ...] = ()
    name: str = "skeleton"

    def __post_init__(self):
        V = len(self.joint_names)
        if len(set(self.joint_names)) != V:
            raise ValidationError("duplicate joint names")
        for kind, pairs in (("bone", self.bone_edges), ("mirror", self.mirror_pairs)):
            seen = set()
            for a, b in pairs:
                if not (0 <= a < V and 0 <= b < V):
                    raise ValidationError(f"{kind} pair ({a}, {b}) outside [0, {V})")
                if a == b:
                    raise ValidationError(f"{kind} pair ({a}, {b}) is a self-pair")
                key = frozenset((a, b))
                if key in seen:
                    raise ValidationError(f"duplicate {kind} pair ({a}, {b})")
                seen.add(key)

    @property
    def V(self) -> int:
        return len(self.joint_names)

    def to_text(self) -> str:
        n = self.joint_names
        lines = [f"# skeleton {self.name}", "JOINTS", *n, "BONES"]
        lines += [f"{n[a]} {n[b]}" for a, b in self.bone_edges]
        lines.append("MIRRORS")
        lines += [f"{n[a]} {n[b]}" for a, b in self.mirror_pairs]
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, name: str = "skeleton") -> "Skeleton":
        sections: dict[str, list[tuple[int, str]]] = {}
        current = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line in ("JOINTS", "BONES", "MIRRORS"):
                if line in sections:
                    raise ParseError(f"line {lineno}: section {line} repeated")
                current = line
                sections[current] = []
                continue
            if current is None:
                raise ParseError(f"line {lineno}: entry before any section header")
            sections[current].append((lineno, line))
        if "JOINTS" not in sections:
            raise ParseError("missing JOINTS section")
        names = []
        for lineno, line in sections["JOINTS"]:
            if len(line.split()) != 1:
                raise ParseError(f"line {lineno}: joint names must be single tokens")
            names.append(line)
        index = {n: i for i, n in enumerate(names)}

        def pairs(sec):
            out = []
            for lineno, line in sections.get(sec, []):
                parts = line.split()
                if len(parts) != 2:
                    raise ParseError(f"line {lineno}: expected two joint names")
                try:
                    out.append((index[parts[0]], index[parts[1]]))
                except KeyError as e:
                    raise ParseError(f"line {lineno}: unknown joint {e.args[0]!r}") from None
            return tuple(out)

        return cls(tuple(names), pairs("BONES"), pairs("MIRRORS"), name=name)

    @classmethod
    def load(cls, path) -> "Skeleton":
        path = Path(path)
        return cls.from_text(path.read_text(), name=path.stem)


def chain_skeleton(V: int) -> Skeleton:
    return Skeleton(tuple(f"j{i}" for i in range(V)), tuple((i, i + 1) for i in range(V - 1)), name=f"chain{V}")


def _node_grid(M: int, V: int):
    f = np.repeat(np.arange(M), V)
    v = np.tile(np.arange(V), M)
    return f, v


def build_spatial_mask(skeleton: Skeleton, M: int) -> np.ndarray:
    """Same-frequency links between bone-connected, mirrored or identical joints."""
    V = skeleton.V
    joint = np.eye(V)
    for a, b in skeleton.bone_edges + skeleton.mirror_pairs:
        joint[a, b] = joint[b, a] = 1.0
    return np.kron(np.eye(M), joint)


def build_temporal_mask(M: int, V: int) -> np.ndarray:
    """Same-joint links between adjacent frequency components."""
    band = np.zeros((M, M))
    idx = np.arange(M - 1)
    band[idx, idx + 1] = band[idx + 1, idx] = 1.0
    return np.kron(band, np.eye(V))


def same_frequency_structure(M: int, V: int) -> np.ndarray:
    return np.kron(np.eye(M), np.ones((V, V)))


def same_joint_structure(M: int, V: int) -> np.ndarray:
    return np.kron(np.ones((M, M)), np.eye(V))


@dataclass
class FactorizedAdjacency:
    """One layer's adjacency ``(mask_s * Adj_s) @ (mask_f * Adj_f)``.

    ``spatial`` may be the same Tensor object as in another layer (sharing).
    The stored masks already include the structural same-frequency /
    same-joint zeros, so effective factors never leave their support.
    """

    spatial: T.Tensor
    frequency: T.Tensor
    spatial_mask: np.ndarray
    frequency_mask: np.ndarray
    pruned_spatial: bool = False
    pruned_temporal: bool = False
    share_group: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def create(cls, skeleton: Skeleton, M: int, rng: np.random.Generator, *,
               prune_spatial=False, prune_temporal=False, spatial: T.Tensor | None = None,
               share_group=None, name="adj"):
        V = skeleton.V
        n = M * V
        s_struct = same_frequency_structure(M, V)
        f_struct = same_joint_structure(M, V)
        scale = 1.0 / np.sqrt(n)
        if spatial is None:
            spatial = T.Tensor(rng.uniform(-scale, scale, (n, n)) * s_struct, requires_grad=True,
                               name=f"{name}.spatial")
        freq = T.Tensor(rng.uniform(-scale, scale, (n, n)) * f_struct, requires_grad=True,
                        name=f"{name}.frequency")
        s_mask = s_struct * build_spatial_mask(skeleton, M) if prune_spatial else s_struct
        f_mask = f_struct * build_temporal_mask(M, V) if prune_temporal else f_struct
        return cls(spatial, freq, s_mask, f_mask, prune_spatial, prune_temporal, share_group)

    def effective(self) -> tuple[T.Tensor, T.Tensor]:
        return T.mul(self.spatial, self.spatial_mask), T.mul(self.frequency, self.frequency_mask)

    def dense(self) -> T.Tensor:
        s, f = self.effective()
        return T.matmul(s, f)


def factorized_propagate(adj: FactorizedAdjacency, H, W, activation: bool = True) -> T.Tensor:
    """``relu(Adj_s @ Adj_f @ H @ W)`` for H of shape (..., MV, C_in)."""
    H, W = T.as_tensor(H), T.as_tensor(W)
    n = adj.spatial.shape[0]
    if H.shape[-2] != n or H.shape[-1] != W.shape[0]:
        raise ContractViolation(
            f"factorized_propagate: H {H.shape} vs adjacency ({n}, {n}) and W {W.shape}")
    out = T.matmul(adj.dense(), T.matmul(H, W))
    return T.relu(out) if activation else out
