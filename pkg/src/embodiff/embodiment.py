"""Unified action space: functional windows, embodiment registry, zero-padding.

Every embodiment shares one fixed-width action vector. The vector is split
into contiguous functional windows (base, wrist, finger groups); an
embodiment uses the leading `active_dims[w]` slots of window `w` and the
trailing slots are padded with exact zeros.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EmbodimentError(ValueError):
    """Raised on layout/spec invariant violations."""


@dataclass(frozen=True)
class UnifiedActionLayout:
    """Partition of the unified action vector into functional windows.

    `windows` holds (start, stop) half-open index ranges, ordered from the
    robot base out to the end-effector; together they cover [0, total_dim).
    """

    total_dim: int
    windows: tuple[tuple[int, int], ...]
    window_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.total_dim < 1:
            raise EmbodimentError(f"total_dim must be positive, got {self.total_dim}")
        if not self.windows:
            raise EmbodimentError("layout needs at least one window")
        cursor = 0
        for i, (start, stop) in enumerate(self.windows):
            if start != cursor or stop <= start:
                raise EmbodimentError(
                    f"window {i} = ({start}, {stop}) breaks contiguous coverage at {cursor}"
                )
            cursor = stop
        if cursor != self.total_dim:
            raise EmbodimentError(
                f"windows cover [0, {cursor}) but total_dim is {self.total_dim}"
            )
        if self.window_names and len(self.window_names) != len(self.windows):
            raise EmbodimentError("window_names length must match windows")

    @property
    def window_count(self) -> int:
        return len(self.windows)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(stop - start for start, stop in self.windows)

    def window_of(self, dim: int) -> int:
        """Index of the window containing dimension `dim`."""
        for j, (start, stop) in enumerate(self.windows):
            if start <= dim < stop:
                return j
        raise EmbodimentError(f"dimension {dim} outside [0, {self.total_dim})")

    def to_dict(self) -> dict:
        return {
            "total_dim": self.total_dim,
            "windows": [list(w) for w in self.windows],
            "window_names": list(self.window_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UnifiedActionLayout":
        return cls(
            total_dim=int(d["total_dim"]),
            windows=tuple((int(a), int(b)) for a, b in d["windows"]),
            window_names=tuple(d.get("window_names", ())),
        )

    @classmethod
    def from_widths(cls, widths, names=()) -> "UnifiedActionLayout":
        windows = []
        cursor = 0
        for w in widths:
            windows.append((cursor, cursor + int(w)))
            cursor += int(w)
        return cls(total_dim=cursor, windows=tuple(windows), window_names=tuple(names))


@dataclass(frozen=True)
class EmbodimentSpec:
    """One robot morphology inside the unified space.

    active_dims[w] counts the used leading dimensions of window w; sigma_e
    scales this embodiment's diffusion noise; reach_radius is the arm's
    maximum tip distance from the base pivot (world units).
    """

    id: int
    name: str
    active_dims: tuple[int, ...]
    sigma_e: float
    reach_radius: float = 1.3

    def validate(self, layout: UnifiedActionLayout) -> None:
        if len(self.active_dims) != layout.window_count:
            raise EmbodimentError(
                f"spec '{self.name}': active_dims has {len(self.active_dims)} entries, "
                f"layout has {layout.window_count} windows"
            )
        for w, (count, width) in enumerate(zip(self.active_dims, layout.widths)):
            if not 0 <= count <= width:
                raise EmbodimentError(
                    f"spec '{self.name}': window {w} uses {count} dims, width is {width}"
                )
        if sum(self.active_dims) < 1:
            raise EmbodimentError(f"spec '{self.name}': no active dimensions")
        if not self.sigma_e > 0:
            raise EmbodimentError(f"spec '{self.name}': sigma_e must be > 0")
        if not self.reach_radius > 0:
            raise EmbodimentError(f"spec '{self.name}': reach_radius must be > 0")

    @property
    def native_dim(self) -> int:
        return int(sum(self.active_dims))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "active_dims": list(self.active_dims),
            "sigma_e": self.sigma_e,
            "reach_radius": self.reach_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmbodimentSpec":
        return cls(
            id=int(d["id"]),
            name=str(d["name"]),
            active_dims=tuple(int(a) for a in d["active_dims"]),
            sigma_e=float(d["sigma_e"]),
            reach_radius=float(d.get("reach_radius", 1.3)),
        )


@dataclass
class EmbodimentRegistry:
    """Immutable-after-construction id -> spec table for one layout."""

    layout: UnifiedActionLayout
    _specs: dict = field(default_factory=dict)

    def register(self, spec: EmbodimentSpec) -> int:
        spec.validate(self.layout)
        if spec.id in self._specs:
            raise EmbodimentError(f"duplicate embodiment id {spec.id}")
        self._specs[spec.id] = spec
        return spec.id

    def get(self, emb_id: int) -> EmbodimentSpec:
        try:
            return self._specs[emb_id]
        except KeyError:
            raise EmbodimentError(f"unknown embodiment id {emb_id}") from None

    def ids(self) -> list[int]:
        return sorted(self._specs)

    def specs(self) -> list[EmbodimentSpec]:
        return [self._specs[i] for i in self.ids()]

    def __len__(self) -> int:
        return len(self._specs)

    def __contains__(self, emb_id: int) -> bool:
        return emb_id in self._specs


def padding_mask(spec: EmbodimentSpec, layout: UnifiedActionLayout) -> np.ndarray:
    """Boolean length-D mask, True on the embodiment's active dimensions."""
    mask = np.zeros(layout.total_dim, dtype=bool)
    for (start, _stop), count in zip(layout.windows, spec.active_dims):
        mask[start : start + count] = True
    return mask


def pad_to_unified(
    raw: np.ndarray, spec: EmbodimentSpec, layout: UnifiedActionLayout
) -> np.ndarray:
    """Scatter a native action vector into the unified space, zeros elsewhere.

    Accepts a (native_dim,) vector or a (..., native_dim) stack.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != spec.native_dim:
        raise EmbodimentError(
            f"native vector has length {raw.shape[-1]}, expected {spec.native_dim}"
        )
    if not np.all(np.isfinite(raw)):
        raise EmbodimentError("native action contains non-finite entries")
    out = np.zeros(raw.shape[:-1] + (layout.total_dim,), dtype=np.float64)
    out[..., padding_mask(spec, layout)] = raw
    return out


def project_to_native(
    unified: np.ndarray, spec: EmbodimentSpec, layout: UnifiedActionLayout
) -> np.ndarray:
    """Gather the active dimensions back out of a unified vector."""
    unified = np.asarray(unified, dtype=np.float64)
    if unified.shape[-1] != layout.total_dim:
        raise EmbodimentError(
            f"unified vector has length {unified.shape[-1]}, expected {layout.total_dim}"
        )
    return unified[..., padding_mask(spec, layout)].copy()


def default_layout() -> UnifiedActionLayout:
    """Reference 12-dim layout: base(4), wrist(2), proximal fingers(3), distal fingers(3)."""
    return UnifiedActionLayout.from_widths(
        [4, 2, 3, 3], names=("base", "wrist", "fingers_proximal", "fingers_distal")
    )


def default_embodiments() -> list[EmbodimentSpec]:
    """Built-in morphologies: parallel gripper and two dexterous hands."""
    return [
        EmbodimentSpec(id=0, name="gripper", active_dims=(4, 2, 1, 0), sigma_e=1.0),
        EmbodimentSpec(id=1, name="hand4", active_dims=(4, 2, 3, 1), sigma_e=0.9),
        EmbodimentSpec(id=2, name="hand5", active_dims=(4, 2, 3, 2), sigma_e=0.8),
    ]


def default_registry() -> EmbodimentRegistry:
    reg = EmbodimentRegistry(layout=default_layout())
    for spec in default_embodiments():
        reg.register(spec)
    return reg
