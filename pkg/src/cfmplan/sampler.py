"""Trajectory generation: flow transport, guidance, and refinement.

The chain integrates the learned velocity field with Euler steps from
Gaussian noise to a plan, optionally applying three safety modules:

* velocity correction: damp (or amplify) the velocity component along
  the direction toward a feasibility-screened anchor,
* truncation: restart the chain state from that anchor midway,
* refinement: extra steps past t = 1 that descend the self-consistency
  energy with a backtracking step size (never increasing the energy),
  or, in the optional noisy mode, run overdamped Langevin dynamics whose
  stationary law is the Boltzmann distribution exp(-E/eps_max)/Z.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataFormatError, GenerationError
from .flownet import ConditionSet, VelocityModel, intent_condition
from .scenario import Scene, Trajectory, scene_tokens
from .seeding import derive, rng_from
from .vocab import AnchorVocab, ConstraintAnchor, goal_from_anchor

CVF_MODES = ("damp", "attract")
ZERO_REF_NORM = 1e-9


@dataclass(eq=False)
class SamplerConfig:
    """Every inference-time knob in one place."""

    steps: int = 100            # transport grid size K
    truncate_step: int = 50     # restart index k_c
    lam: float = 0.1            # correction strength
    gamma: float = 1.5          # guidance scale
    refine_steps: int = 20      # budget R past t = 1
    eta_scale: float = 1.0
    cvf_enabled: bool = False
    cf_enabled: bool = False
    rfe_enabled: bool = False
    cvf_sign: str = "damp"
    seed: int = 0

    def validate(self) -> None:
        if self.steps <= 0:
            raise ConfigError("steps must be positive")
        if not 0 < self.truncate_step < self.steps:
            raise ConfigError("truncate_step must satisfy 0 < k_c < K, "
                              "got k_c=%d K=%d"
                              % (self.truncate_step, self.steps))
        if not 0.0 <= self.lam < 1.0:
            raise ConfigError("lam must lie in [0, 1)")
        if self.gamma < 0.0:
            raise ConfigError("gamma must be >= 0")
        if self.refine_steps < 0:
            raise ConfigError("refine_steps must be >= 0")
        if self.cvf_sign not in CVF_MODES:
            raise ConfigError("cvf_sign must be one of %s" % (CVF_MODES,))


@dataclass(eq=False)
class FlowPath:
    """Recorded chain: states[k] is the flow state after k updates.

    Length is K + R_eff + 1 where R_eff is the refinement budget when
    refinement is enabled, else 0.  ``truncation`` records (index,
    anchor array) when the chain was restarted from an anchor.
    """

    states: list[np.ndarray]
    times: list[float]
    steps: int = 0              # transport grid size K behind ``times``
    truncation: tuple[int, np.ndarray] | None = None
    cvf_skips: int = 0
    energies: list[float] = field(default_factory=list)


def epsilon_schedule(t: float, tau_star: float, eps_max: float) -> float:
    """Refinement weight: 0 before tau_star, linear ramp to eps_max at
    t = 1, constant after.  Continuous and nondecreasing."""
    if not 0.0 <= tau_star < 1.0:
        raise ConfigError("tau_star must lie in [0, 1)")
    if eps_max <= 0.0:
        raise ConfigError("eps_max must be positive")
    if t < tau_star:
        return 0.0
    if t >= 1.0:
        return eps_max
    return eps_max * (t - tau_star) / (1.0 - tau_star)


def cvf_reference(x0: np.ndarray, anchor) -> np.ndarray:
    """Constant reference velocity pointing from the chain's start noise
    to the anchor: (x1_c - x0)/(1 - 0)."""
    target = anchor.trajectory.waypoints if isinstance(anchor,
                                                       ConstraintAnchor) \
        else getattr(anchor, "waypoints", anchor)
    return np.asarray(target, dtype=np.float64) - x0


def cvf_correct(v: np.ndarray, v_c: np.ndarray, lam: float,
                sign: str = "damp") -> tuple[np.ndarray, bool]:
    """Project-and-scale correction of v along the reference direction.

    ``damp``: v* = v - 2*lam*(<v, v_c>/|v_c|^2)*v_c, which scales the
    component of v along v_c by (1 - 2*lam) and leaves the orthogonal
    part untouched.  ``attract`` flips the sign, amplifying the aligned
    component instead.  Returns (v*, applied); a reference below 1e-9
    in norm skips the correction.
    """
    if sign not in CVF_MODES:
        raise ConfigError("cvf_sign must be one of %s" % (CVF_MODES,))
    nc2 = float((v_c * v_c).sum())
    if nc2 < ZERO_REF_NORM * ZERO_REF_NORM:
        return v, False
    inner = float((v * v_c).sum())
    coef = 2.0 * lam * inner / nc2
    if sign == "damp":
        return v - coef * v_c, True
    return v + coef * v_c, True


def _require_anchor(cfg: SamplerConfig, anchor) -> None:
    if anchor is None:
        raise ConfigError("cvf/cf enabled but no anchor provided")
    if isinstance(anchor, ConstraintAnchor) and not anchor.feasible:
        raise ConfigError("cvf/cf enabled with an infeasible-best anchor; "
                          "disable anchor guidance for this scene")


def _anchor_waypoints(anchor) -> np.ndarray:
    if isinstance(anchor, ConstraintAnchor):
        return anchor.trajectory.waypoints
    if hasattr(anchor, "waypoints"):
        return anchor.waypoints
    return np.asarray(anchor, dtype=np.float64)


def _check_finite(x: np.ndarray, k: int) -> None:
    if not np.isfinite(x).all():
        finite = x[np.isfinite(x)]
        peak = float(np.abs(finite).max()) if finite.size else float("nan")
        raise GenerationError(
            "non-finite state at step %d (max finite magnitude %.3g)"
            % (k, peak))


def sample(model: VelocityModel, scene: Scene, conditions: ConditionSet,
           cfg: SamplerConfig, anchor: ConstraintAnchor | None = None
           ) -> tuple[Trajectory, FlowPath]:
    """Run one guided sampling chain; deterministic in cfg.seed.

    Transport: K Euler steps of the guided velocity, with optional
    velocity correction every step and an optional state replacement by
    the anchor just before update k_c.  Refinement (when enabled): R
    more steps combining the velocity update with a backtracking descent
    on the energy gradient taken at the pre-update state.
    """
    cfg.validate()
    if cfg.cvf_enabled or cfg.cf_enabled:
        _require_anchor(cfg, anchor)
    agent_tokens, map_tokens = scene_tokens(scene)
    rng = rng_from(cfg.seed, "chain")
    x = rng.standard_normal((model.t_steps, 2))
    dt_flow = 1.0 / cfg.steps
    eff_r = cfg.refine_steps if cfg.rfe_enabled else 0
    total = cfg.steps + eff_r
    v_ref = cvf_reference(x, anchor) if cfg.cvf_enabled else None
    anchor_wp = _anchor_waypoints(anchor) if cfg.cf_enabled else None

    states: list[np.ndarray] = []
    times: list[float] = []
    energies: list[float] = []
    truncation = None
    cvf_skips = 0

    for k in range(total + 1):
        if cfg.cf_enabled and k == cfg.truncate_step:
            x = anchor_wp.copy()
            truncation = (k, anchor_wp.copy())
        states.append(x.copy())
        times.append(k * dt_flow)
        if k == total:
            break
        t = k * dt_flow
        v = model.cfg_velocity_value(x, t, agent_tokens, map_tokens,
                                     conditions, cfg.gamma)
        if cfg.cvf_enabled and k < cfg.steps:
            v, applied = cvf_correct(v, v_ref, cfg.lam, cfg.cvf_sign)
            if not applied:
                cvf_skips += 1
        if k >= cfg.steps:
            e_here, g = model.energy_grad(x, scene, agent_tokens,
                                          map_tokens, conditions, dt_flow)
            energies.append(e_here)
            x_half = x + v * dt_flow
            eta = cfg.eta_scale * dt_flow * epsilon_schedule(
                t, model.tau_star, model.eps_max)

            def energy_at(y):
                return model.energy_value(y, scene, agent_tokens,
                                          map_tokens, conditions, dt_flow)
            x_new = _descend_once(x_half, g, eta, energy_at)
        else:
            x_new = x + v * dt_flow
        _check_finite(x_new, k)
        x = x_new

    return Trajectory(states[-1].copy(), dt=model.dt), FlowPath(
        states=states, times=times, steps=cfg.steps, truncation=truncation,
        cvf_skips=cvf_skips, energies=energies)


def _descend_once(x_half: np.ndarray, g: np.ndarray, eta: float,
                  energy_at, max_backtrack: int = 8) -> np.ndarray:
    """One energy substep from the post-transport state, halving the
    step until the energy does not increase."""
    e_base = energy_at(x_half)
    step = eta
    for _ in range(max_backtrack):
        cand = x_half - step * g
        if energy_at(cand) <= e_base + 1e-12:
            return cand
        step *= 0.5
    return x_half


def refine_only(model: VelocityModel | None, start, scene: Scene | None,
                r_steps: int, cfg: SamplerConfig, *, conditions=None,
                energy_fn=None, langevin: bool = False
                ) -> tuple[Trajectory | np.ndarray, list[float]]:
    """Energy-only refinement from a provided start state.

    Default mode is deterministic descent with backtracking (energy is
    non-increasing along the chain).  With ``langevin=True`` each step
    adds Gaussian noise of std sqrt(2*eta*eps_max); that chain targets
    the Boltzmann law exp(-E/eps_max)/Z instead of a minimum.

    ``energy_fn`` is a test hook replacing the model energy: it takes a
    (B, D) state block and returns (E (B,), grad (B, D)).  With the hook
    ``start`` may be a (B, D) array of B independent chains.  Returns
    (refined state in the input's form, per-step mean energies).
    """
    if r_steps < 1:
        raise ConfigError("refinement needs at least 1 step")
    as_traj = isinstance(start, Trajectory)
    if energy_fn is None:
        if model is None or scene is None:
            raise ConfigError("refine_only needs a model and scene when no "
                              "energy_fn hook is given")
        wp = start.waypoints if as_traj else np.asarray(start,
                                                        dtype=np.float64)
        agent_tokens, map_tokens = scene_tokens(scene)
        cond = conditions if conditions is not None \
            else ConditionSet(intent_mask=True, reward_mask=True)
        shape = wp.shape

        def energy_fn(block):
            e, g = model.energy_grad(block.reshape(shape), scene,
                                     agent_tokens, map_tokens, cond,
                                     1.0 / cfg.steps)
            return np.array([e]), g.reshape(1, -1)
        x = wp.reshape(1, -1).copy()
        eps_max = model.eps_max
    else:
        x = np.asarray(start, dtype=np.float64).copy()
        if x.ndim == 1:
            x = x[None, :]
        eps_max = 0.5 if model is None else model.eps_max

    dt_flow = 1.0 / cfg.steps
    eta = cfg.eta_scale * dt_flow * eps_max  # epsilon_schedule(t>=1)
    rng = rng_from(cfg.seed, "refine") if langevin else None
    trace: list[float] = []

    for r in range(r_steps):
        e, g = energy_fn(x)
        trace.append(float(np.mean(e)))
        if langevin:
            noise = rng.standard_normal(x.shape)
            x = x - eta * g + np.sqrt(2.0 * eta * eps_max) * noise
        else:
            x = _descend_batch(x, e, g, eta, energy_fn)
        if not np.isfinite(x).all():
            raise GenerationError("non-finite state at refinement step %d"
                                  % r)

    if as_traj:
        t = start.waypoints.shape[0]
        return Trajectory(x.reshape(t, 2), dt=start.dt), trace
    return x, trace


def _descend_batch(x: np.ndarray, e: np.ndarray, g: np.ndarray, eta: float,
                   energy_fn, max_backtrack: int = 8) -> np.ndarray:
    step = np.full(x.shape[0], eta)
    cand = x - step[:, None] * g
    for _ in range(max_backtrack):
        e_new, _ = energy_fn(cand)
        worse = e_new > e + 1e-12
        if not worse.any():
            return cand
        step[worse] *= 0.5
        cand[worse] = x[worse] - step[worse, None] * g[worse]
    e_new, _ = energy_fn(cand)
    worse = e_new > e + 1e-12
    cand[worse] = x[worse]
    return cand


PATH_FORMAT = "cfmplan-path"
PATH_VERSION = 1


def save_flow_path(fp: FlowPath, path) -> None:
    """JSON-lines dump of a chain: a header line, then one state line
    per step with full-precision floats."""
    header = {"format": PATH_FORMAT, "version": PATH_VERSION,
              "steps": int(fp.steps), "t_steps": int(fp.states[0].shape[0]),
              "refine": len(fp.states) - 1 - int(fp.steps),
              "truncate_step": None if fp.truncation is None
              else int(fp.truncation[0])}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for k, (x, t) in enumerate(zip(fp.states, fp.times)):
            row = {"step": k, "t": t, "state": x.tolist()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_flow_path(path) -> FlowPath:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError("%s: empty flow path file" % path)

    def fail(lineno: int, why: str):
        raise DataFormatError("%s: line %d: %s" % (path, lineno, why))

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        fail(1, "invalid JSON (%s)" % exc)
    if not isinstance(header, dict) or header.get("format") != PATH_FORMAT:
        fail(1, "not a flow path header")
    if header.get("version") != PATH_VERSION:
        fail(1, "unsupported version %r" % header.get("version"))
    states: list[np.ndarray] = []
    times: list[float] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            fail(lineno, "invalid JSON (%s)" % exc)
        try:
            x = np.asarray(row["state"], dtype=np.float64)
            t = float(row["t"])
        except (KeyError, TypeError, ValueError) as exc:
            fail(lineno, "bad state row (%s)" % exc)
        if x.ndim != 2 or x.shape[1] != 2:
            fail(lineno, "state must be (T, 2), got %s" % (x.shape,))
        states.append(x)
        times.append(t)
    if not states:
        raise DataFormatError("%s: header only, no states" % path)
    trunc = None
    if header.get("truncate_step") is not None:
        k = int(header["truncate_step"])
        if not 0 <= k < len(states):
            fail(1, "truncate_step %d out of range" % k)
        trunc = (k, states[k].copy())
    return FlowPath(states=states, times=times,
                    steps=int(header.get("steps", len(states) - 1)),
                    truncation=trunc)


def anchor_condition(model: VelocityModel, anchor_traj: Trajectory,
                     reward: float | None = None) -> ConditionSet:
    """Condition set expressing "follow this anchor" through whichever
    intent channel the model was trained with."""
    if model.condition == "anchor":
        return intent_condition("anchor", anchor_traj, reward=reward,
                                reward_mask=reward is None)
    if model.condition == "goal":
        return intent_condition("goal", goal_from_anchor(anchor_traj),
                                reward=reward, reward_mask=reward is None)
    end = anchor_traj.waypoints[-1]
    command = 0 if end[1] > 2.0 else (2 if end[1] < -2.0 else 1)
    return intent_condition("command", command, reward=reward,
                            reward_mask=reward is None)


def sample_multimodal(model: VelocityModel, scene: Scene,
                      vocab: AnchorVocab, cfg: SamplerConfig,
                      indices=None) -> list[tuple[Trajectory, int]]:
    """One sample per vocabulary anchor, each conditioned on that anchor
    through the model's intent channel, with per-anchor derived seeds.
    ``indices`` restricts the sweep to a subset of anchor indices."""
    if len(vocab) == 0:
        raise ConfigError("empty anchor vocabulary")
    out = []
    for i in (range(len(vocab)) if indices is None else indices):
        anchor_traj = vocab.trajectory(int(i))
        cond = anchor_condition(model, anchor_traj)
        cfg_i = replace(cfg, seed=derive(cfg.seed, "multi", int(i)))
        guide = anchor_traj if (cfg.cvf_enabled or cfg.cf_enabled) else None
        traj, _ = sample(model, scene, cond, cfg_i, anchor=guide)
        out.append((traj, int(i)))
    return out
