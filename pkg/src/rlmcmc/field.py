"""Channel states, the action lattice and rasterization to permeability."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, InfeasibleActionError, StateValidityError
from .mesh import GridHierarchy

DEFAULT_CONTRAST = 1000.0
DEFAULT_BACKGROUND = 1.0


class ChannelRect(NamedTuple):
    """Axis-aligned channel in fine-cell units: lower-left corner and size."""

    x: int
    y: int
    w: int
    d: int

    def is_valid(self, fine_n: int) -> bool:
        return (
            self.w >= 1
            and self.d >= 1
            and self.x >= 0
            and self.y >= 0
            and self.x + self.w <= fine_n
            and self.y + self.d <= fine_n
        )


# A global state is the ordered tuple of every agent's channel.
GlobalState = tuple[ChannelRect, ...]


class ActionId(IntEnum):
    SHIFT_LEFT = 0
    SHIFT_RIGHT = 1
    SHIFT_DOWN = 2
    SHIFT_UP = 3
    SQUEEZE_H = 4
    STRETCH_H = 5
    SQUEEZE_V = 6
    STRETCH_V = 7


ALL_ACTIONS: tuple[ActionId, ...] = tuple(ActionId)
N_ACTIONS = len(ALL_ACTIONS)

# (dx, dy, dw, dd) per action, in units of one fine cell
_DELTAS = np.array(
    [
        (-1, 0, 0, 0),
        (1, 0, 0, 0),
        (0, -1, 0, 0),
        (0, 1, 0, 0),
        (0, 0, -1, 0),
        (0, 0, 1, 0),
        (0, 0, 0, -1),
        (0, 0, 0, 1),
    ]
)


def inverse_action(a: ActionId) -> ActionId:
    # pairs are laid out as (2k, 2k + 1)
    return ActionId(int(a) ^ 1)


def apply_action(c: ChannelRect, a: ActionId, fine_n: int, step: int = 1) -> ChannelRect:
    dx, dy, dw, dd = (int(v) * step for v in _DELTAS[int(a)])
    out = ChannelRect(c.x + dx, c.y + dy, c.w + dw, c.d + dd)
    if not out.is_valid(fine_n):
        raise InfeasibleActionError(f"{ActionId(a).name} on {tuple(c)} leaves the lattice (n={fine_n})")
    return out


def feasible_mask(
    c: ChannelRect, fine_n: int, actions: Sequence[ActionId] = ALL_ACTIONS, step: int = 1
) -> np.ndarray:
    """Boolean mask over ``actions`` marking those that keep ``c`` valid."""
    base = np.array(c)
    cand = base[None, :] + _DELTAS[[int(a) for a in actions]] * step
    x, y, w, d = cand.T
    return (w >= 1) & (d >= 1) & (x >= 0) & (y >= 0) & (x + w <= fine_n) & (y + d <= fine_n)


def find_action(
    c: ChannelRect, c_next: ChannelRect, step: int = 1
) -> ActionId | None:
    """Recover the action mapping ``c`` to ``c_next``; None if there is none."""
    diff = np.array(c_next) - np.array(c)
    for a in ALL_ACTIONS:
        if np.array_equal(diff, _DELTAS[int(a)] * step):
            return a
    return None


def replace_channel(state: GlobalState, agent: int, c: ChannelRect) -> GlobalState:
    return state[:agent] + (c,) + state[agent + 1 :]


def validate_state(state: GlobalState, fine_n: int) -> None:
    for i, c in enumerate(state):
        if not ChannelRect(*c).is_valid(fine_n):
            raise StateValidityError(
                f"agent {i}: channel {tuple(c)} is outside the {fine_n}x{fine_n} domain "
                "or has non-positive size",
                agent=i,
            )


@dataclass(frozen=True)
class PermeabilityField:
    """Per-fine-cell coefficient, flattened in cell index order."""

    kappa: np.ndarray
    contrast: float = DEFAULT_CONTRAST
    background: float = DEFAULT_BACKGROUND

    def as_grid(self) -> np.ndarray:
        n = int(round(np.sqrt(self.kappa.size)))
        return self.kappa.reshape(n, n)

    def digest(self) -> bytes:
        return self.kappa.tobytes()


def channel_mask(state: Sequence[ChannelRect], fine_n: int) -> np.ndarray:
    mask = np.zeros((fine_n, fine_n), dtype=bool)
    for c in state:
        mask[c.y : c.y + c.d, c.x : c.x + c.w] = True
    return mask


def rasterize(
    state: Sequence[ChannelRect],
    g: GridHierarchy,
    contrast: float = DEFAULT_CONTRAST,
    background: float = DEFAULT_BACKGROUND,
) -> PermeabilityField:
    state = tuple(ChannelRect(*c) for c in state)
    validate_state(state, g.fine_n)
    mask = channel_mask(state, g.fine_n)
    kappa = np.where(mask, float(contrast), float(background)).ravel()
    return PermeabilityField(kappa=kappa, contrast=float(contrast), background=float(background))


class Segment(NamedTuple):
    """Rotated rectangle: axis from (x0, y0) to (x1, y1), physical coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float
    half_width: float


def rasterize_diagonal_target(
    segments: Sequence[Segment],
    g: GridHierarchy,
    contrast: float = DEFAULT_CONTRAST,
    background: float = DEFAULT_BACKGROUND,
) -> PermeabilityField:
    centers = g.cell_centers()
    mask = np.zeros(g.n_fine_cells, dtype=bool)
    for seg in segments:
        seg = Segment(*seg)
        p0 = np.array([seg.x0, seg.y0])
        axis = np.array([seg.x1, seg.y1]) - p0
        length = float(np.hypot(*axis))
        if length == 0.0:
            raise ConfigurationError(f"degenerate segment {tuple(seg)}")
        for p in (p0, p0 + axis):
            if not (0.0 <= p[0] <= 1.0 and 0.0 <= p[1] <= 1.0):
                raise ConfigurationError(f"segment endpoint {tuple(p)} outside the unit square")
        u = axis / length
        rel = centers - p0
        along = rel @ u
        across = np.abs(rel[:, 0] * u[1] - rel[:, 1] * u[0])
        eps = 1e-12
        mask |= (along >= -eps) & (along <= length + eps) & (across <= seg.half_width + eps)
    kappa = np.where(mask, float(contrast), float(background))
    return PermeabilityField(kappa=kappa, contrast=float(contrast), background=float(background))


def normalize_channel(c: ChannelRect, fine_n: int) -> np.ndarray:
    return np.asarray(c, dtype=float) / fine_n
