"""Trajectory anchor vocabulary.

Anchors are representative expert trajectories chosen by farthest point
sampling over flattened waypoint vectors.  They serve two roles: intent
conditioning (an anchor is a coarse plan hypothesis) and constraint
guidance (the feasibility-screened anchor used for velocity correction
and flow-state truncation).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import read_blocks, write_blocks
from .errors import ConfigError, DataFormatError
from .scenario import (ConstraintScore, Scene, Trajectory, constraint_eval,
                       ep_reward)

THETA_FEAS = 0.5
FEAS_QUANTUM = 1e-3


@dataclass(eq=False)
class AnchorVocab:
    """Anchor set in selection order; anchors: (N, T, 2)."""

    anchors: np.ndarray
    dt: float

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        if self.anchors.ndim != 3 or self.anchors.shape[2] != 2:
            raise ConfigError("anchors must be (N, T, 2), got %s"
                              % (self.anchors.shape,))

    def __len__(self) -> int:
        return self.anchors.shape[0]

    def flat(self) -> np.ndarray:
        n = self.anchors.shape[0]
        return self.anchors.reshape(n, -1)

    def trajectory(self, index: int) -> Trajectory:
        return Trajectory(self.anchors[index].copy(), dt=self.dt)


@dataclass(eq=False)
class ConstraintAnchor:
    """The anchor chosen for guidance on one scene.

    ``feasible`` is False when even the best anchor exceeds the
    feasibility threshold; callers should then disable anchor-based
    velocity correction and truncation.
    """

    index: int
    trajectory: Trajectory
    score: ConstraintScore
    ep: float
    feasible: bool
    source: str = "vocab"


def fps_build(trajectories, n_anchors: int, dt: float | None = None
              ) -> AnchorVocab:
    """Farthest point sampling under flattened L2.

    The first pick is the candidate closest to the candidate mean; each
    later pick maximizes the distance to the selected set.  All ties
    break toward the lower candidate index.  Anchors keep selection
    order, so prefixes of a larger vocabulary are valid vocabularies.
    """
    if isinstance(trajectories, np.ndarray):
        stack = np.asarray(trajectories, dtype=np.float64)
        if dt is None:
            raise ConfigError("dt required when passing a raw array")
    else:
        trajs = list(trajectories)
        if not trajs:
            raise ConfigError("cannot build a vocabulary from 0 candidates")
        stack = np.stack([t.waypoints for t in trajs])
        dt = trajs[0].dt
    m = stack.shape[0]
    if not 0 < n_anchors <= m:
        raise ConfigError("need 1 <= n_anchors <= %d candidates, got %d"
                          % (m, n_anchors))
    flat = stack.reshape(m, -1)
    mean = flat.mean(axis=0)
    first = int(((flat - mean) ** 2).sum(1).argmin())
    chosen = [first]
    d2 = ((flat - flat[first]) ** 2).sum(1)
    for _ in range(n_anchors - 1):
        nxt = int(d2.argmax())
        chosen.append(nxt)
        d2 = np.minimum(d2, ((flat - flat[nxt]) ** 2).sum(1))
    return AnchorVocab(stack[chosen].copy(), dt=float(dt))


def nearest_anchor(vocab: AnchorVocab, traj: Trajectory
                   ) -> tuple[int, Trajectory]:
    """Closest anchor under flattened L2; exact ties go to the lower
    index (numpy argmin returns the first minimum)."""
    diff = vocab.flat() - traj.waypoints.reshape(1, -1)
    d2 = (diff * diff).sum(1)
    i = int(d2.argmin())
    return i, vocab.trajectory(i)


def goal_from_anchor(anchor) -> np.ndarray:
    """Final waypoint of an anchor trajectory, as a 2-vector goal."""
    wp = anchor.waypoints if isinstance(anchor, Trajectory) \
        else np.asarray(anchor, dtype=np.float64)
    return wp[-1].copy()


def select_constraint_anchor(vocab: AnchorVocab, scene: Scene,
                             theta_feas: float = THETA_FEAS
                             ) -> ConstraintAnchor:
    """Feasibility-screened anchor for guidance on ``scene``.

    Anchors with total penalty below ``theta_feas`` are feasible; among
    them the choice minimizes total penalty (totals under 1e-3 are
    treated as exactly zero so progress can split near-ties) with higher
    progress reward, then lower index, as tie-breaks.  When no anchor is
    feasible the least-violating one is returned flagged infeasible, and
    callers are expected to disable anchor guidance.
    """
    if len(vocab) == 0:
        raise ConfigError("empty anchor vocabulary")
    best_key = None
    best = None
    for i in range(len(vocab)):
        traj = vocab.trajectory(i)
        score = constraint_eval(traj, scene)
        ep = ep_reward(traj, scene)
        quant = 0.0 if score.total < FEAS_QUANTUM else score.total
        key = (quant, -ep, i)
        if best_key is None or key < best_key:
            best_key = key
            best = (i, traj, score, ep)
    index, traj, score, ep = best
    return ConstraintAnchor(index=index, trajectory=traj, score=score,
                            ep=ep, feasible=score.total < theta_feas)


def save_vocab(path, vocab: AnchorVocab) -> None:
    meta = np.array([[float(vocab.anchors.shape[1]), vocab.dt]])
    write_blocks(path, {"anchors": vocab.flat(), "meta": meta})


def load_vocab(path) -> AnchorVocab:
    blocks = read_blocks(path)
    if "anchors" not in blocks or "meta" not in blocks:
        raise DataFormatError("%s: not a vocabulary file" % (Path(path),))
    t_steps = int(blocks["meta"][0, 0])
    dt = float(blocks["meta"][0, 1])
    flat = blocks["anchors"]
    return AnchorVocab(flat.reshape(flat.shape[0], t_steps, 2), dt=dt)
