"""Conditioned velocity-field network and its training losses.

The network maps (flow state, time, scene, conditions) to a velocity
over waypoints.  Architecture: per-waypoint state tokens (projection +
learned positional rows + sinusoidal time features), sequential
cross-attention over agent tokens then map tokens, one more
cross-attention over condition tokens (intent and reward, each
replaceable by a learned null embedding for classifier-free guidance;
a plan-anchor intent contributes one token per anchor waypoint), and a
zero-initialized decoder so the untrained field is exactly zero.

Losses: the flow-matching regression ``rf_loss`` and the energy-based
refinement loss ``rfe_loss``, built on a self-consistency energy: how
much the penalty vector of a state changes under one Euler self-step of
the model's own velocity field at t=1.  Feasible, self-consistent
states have low energy.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .diffcore import (ParamStore, Tape, TimeEmbedding, Var, cross_attention,
                       dense, init_attention, init_dense, read_blocks,
                       sinusoidal_embed, write_blocks)
from .errors import ConfigError, DataFormatError, ShapeError
from .scenario import Scene, penalty_terms
from .seeding import rng_from

CONDITION_KINDS = ("anchor", "goal", "command")

MODEL_FORMAT_VERSION = 1.0
_META_BLOCK = "__model_meta__"


@dataclass(eq=False)
class ConditionSet:
    """Guidance inputs for one sample.

    The three intent channels overlap semantically, so at most one of
    ``plan_anchor`` (a trajectory), ``goal`` (a 2D point), or
    ``command`` (index into left/straight/right) may be set, and it must
    match the model's condition kind.  ``reward`` is a progress target
    in [0, 1].  A mask flag (or leaving a group unset) replaces that
    group's token with its learned null embedding, so a fully masked set
    realizes the unconditional model.
    """

    plan_anchor: object = None
    goal: object = None
    command: int | None = None
    reward: float | None = None
    intent_mask: bool = False
    reward_mask: bool = False

    def active_intent(self) -> tuple[str, object] | None:
        active = [(kind, value) for kind, value in
                  (("anchor", self.plan_anchor), ("goal", self.goal),
                   ("command", self.command)) if value is not None]
        if len(active) > 1:
            raise ConfigError("at most one intent channel may be set, got "
                              + ", ".join(k for k, _ in active))
        return active[0] if active else None

    def masked(self) -> "ConditionSet":
        return ConditionSet(intent_mask=True, reward_mask=True)

    @property
    def fully_masked(self) -> bool:
        return (self.intent_mask or self.active_intent() is None) and \
            (self.reward_mask or self.reward is None)


def intent_condition(kind: str, value, reward: float | None = None,
                     **masks) -> ConditionSet:
    """Build a ConditionSet with the given intent channel populated."""
    if kind == "anchor":
        return ConditionSet(plan_anchor=value, reward=reward, **masks)
    if kind == "goal":
        return ConditionSet(goal=value, reward=reward, **masks)
    if kind == "command":
        return ConditionSet(command=value, reward=reward, **masks)
    raise ConfigError("unknown condition kind %r" % kind)


@dataclass(eq=False)
class FlowState:
    """A point on the transport path: waypoint array plus flow time."""

    x: np.ndarray
    t: float


def sample_masks(rng: np.random.Generator, p: float = 0.2
                 ) -> tuple[bool, bool]:
    """Independent Bernoulli(p) mask draws for (intent, reward)."""
    return bool(rng.uniform() < p), bool(rng.uniform() < p)


@dataclass(eq=False)
class VelocityModel:
    params: ParamStore
    embed_dim: int
    t_steps: int
    dt: float
    condition: str
    tau_star: float = 0.8
    eps_max: float = 0.5
    time_base: float = 10000.0
    input_scale: float = 20.0

    # ---- construction ----------------------------------------------------

    @classmethod
    def build(cls, seed: int, embed_dim: int = 64, t_steps: int = 8,
              dt: float = 0.5, condition: str = "anchor",
              tau_star: float = 0.8, eps_max: float = 0.5) -> "VelocityModel":
        if condition not in CONDITION_KINDS:
            raise ConfigError("unknown condition kind %r (choose from %s)"
                              % (condition, CONDITION_KINDS))
        if embed_dim <= 0 or embed_dim % 2:
            raise ConfigError("embed_dim must be even and positive")
        if not 0.0 <= tau_star < 1.0:
            raise ConfigError("tau_star must lie in [0, 1)")
        rng = rng_from(seed, "model-init")
        p = ParamStore()
        # one token per waypoint so each can attend its own map context
        init_dense(p, rng, "enc.proj", 2, embed_dim)
        p.add("enc.pos", rng.normal(0.0, 0.2, (t_steps, embed_dim)))
        init_dense(p, rng, "enc.l2", embed_dim, embed_dim)
        init_dense(p, rng, "temb", embed_dim, embed_dim)
        init_dense(p, rng, "agents.proj", 8, embed_dim)
        init_dense(p, rng, "map.proj", 8, embed_dim)
        init_attention(p, rng, "attn_agent", embed_dim)
        init_attention(p, rng, "attn_map", embed_dim)
        init_dense(p, rng, "cond.anchor", 2, embed_dim)
        init_dense(p, rng, "cond.goal", 2, embed_dim)
        init_dense(p, rng, "cond.command", 3, embed_dim)
        init_dense(p, rng, "cond.reward", 1, embed_dim)
        p.add("cond.null_intent", rng.normal(0.0, 0.2, (1, embed_dim)))
        p.add("cond.null_reward", rng.normal(0.0, 0.2, (1, embed_dim)))
        init_attention(p, rng, "attn_cond", embed_dim)
        init_dense(p, rng, "dec.l1", embed_dim, embed_dim)
        init_dense(p, rng, "dec.l2", embed_dim, 2, zero=True)
        return cls(params=p, embed_dim=embed_dim, t_steps=t_steps, dt=dt,
                   condition=condition, tau_star=tau_star, eps_max=eps_max)

    # ---- forward pieces ----------------------------------------------------

    def _state_var(self, tape: Tape, x) -> Var:
        if isinstance(x, Var):
            var = x
        else:
            arr = np.asarray(x, dtype=np.float64)
            if arr.shape != (self.t_steps, 2):
                raise ShapeError("flow state must be (%d, 2), got %s"
                                 % (self.t_steps, arr.shape))
            var = tape.leaf(arr)
        return var

    def encode_state(self, tape: Tape, x, t: float) -> Var:
        """Waypoint tokens (T, D) for a flow state at time t.

        Each waypoint becomes its own token (projection + a learned
        positional row); the flow time enters as a sinusoidal embedding
        projected and broadcast over tokens.
        """
        var = self._state_var(tape, x)
        scaled = tape.scale(var, 1.0 / self.input_scale)
        h = dense(tape, scaled, self.params, "enc.proj")
        h = tape.add(h, tape.param(self.params, "enc.pos"))
        emb = TimeEmbedding(self.embed_dim, self.time_base)
        te = tape.leaf(sinusoidal_embed(t, emb))
        h = tape.add(h, dense(tape, te, self.params, "temb"))
        return dense(tape, h, self.params, "enc.l2", "gelu")

    def _scaled_tokens(self, tokens: np.ndarray) -> np.ndarray:
        out = np.asarray(tokens, dtype=np.float64).copy()
        out[:, 0:5] /= self.input_scale
        return out

    def fuse_scene(self, tape: Tape, h: Var, agent_tokens: np.ndarray,
                   map_tokens: np.ndarray) -> Var:
        """Sequential cross-attention: agents first, then map."""
        a = dense(tape, tape.leaf(self._scaled_tokens(agent_tokens)),
                  self.params, "agents.proj")
        h, _ = cross_attention(tape, h, a, self.params, "attn_agent")
        m = dense(tape, tape.leaf(self._scaled_tokens(map_tokens)),
                  self.params, "map.proj")
        h, _ = cross_attention(tape, h, m, self.params, "attn_map")
        return h

    def _intent_token(self, tape: Tape, cond: ConditionSet) -> Var:
        active = cond.active_intent()
        if cond.intent_mask or active is None:
            return tape.param(self.params, "cond.null_intent")
        kind, value = active
        if kind != self.condition:
            raise ConfigError("model conditions on %r but ConditionSet "
                              "carries %r" % (self.condition, kind))
        if kind == "anchor":
            arr = np.asarray(getattr(value, "waypoints", value),
                             dtype=np.float64)
            if arr.shape != (self.t_steps, 2):
                raise ShapeError("anchor intent must be (%d, 2), got %s"
                                 % (self.t_steps, arr.shape))
            feat = tape.leaf(arr / self.input_scale)
            h = dense(tape, feat, self.params, "cond.anchor")
            # positional rows are shared with the state encoder so the
            # attention can align waypoint i with anchor waypoint i
            return tape.add(h, tape.param(self.params, "enc.pos"))
        if kind == "goal":
            arr = np.asarray(value, dtype=np.float64).reshape(1, 2)
            feat = tape.leaf(arr / self.input_scale)
            return dense(tape, feat, self.params, "cond.goal")
        onehot = np.zeros((1, 3))
        onehot[0, int(value)] = 1.0
        return dense(tape, tape.leaf(onehot), self.params, "cond.command")

    def _reward_token(self, tape: Tape, cond: ConditionSet) -> Var:
        if cond.reward_mask or cond.reward is None:
            return tape.param(self.params, "cond.null_reward")
        feat = tape.leaf(np.array([[float(cond.reward)]]))
        return dense(tape, feat, self.params, "cond.reward")

    def condition_fuse(self, tape: Tape, h: Var, cond: ConditionSet) -> Var:
        """Attend over the two condition tokens (intent, reward)."""
        kv = tape.concat_rows([self._intent_token(tape, cond),
                               self._reward_token(tape, cond)])
        h, _ = cross_attention(tape, h, kv, self.params, "attn_cond")
        return h

    def velocity(self, tape: Tape, x, t: float, agent_tokens, map_tokens,
                 cond: ConditionSet) -> Var:
        """Velocity over waypoints, shape (T, 2)."""
        h = self.encode_state(tape, x, t)
        h = self.fuse_scene(tape, h, agent_tokens, map_tokens)
        h = self.condition_fuse(tape, h, cond)
        d = dense(tape, h, self.params, "dec.l1", "gelu")
        return dense(tape, d, self.params, "dec.l2")

    def velocity_value(self, x, t, agent_tokens, map_tokens,
                       cond: ConditionSet) -> np.ndarray:
        tape = Tape(record=False)
        return self.velocity(tape, x, t, agent_tokens, map_tokens,
                             cond).value

    def cfg_velocity(self, tape: Tape, x, t, agent_tokens, map_tokens,
                     cond: ConditionSet, gamma: float) -> Var:
        """Classifier-free guided velocity (1-g)*uncond + g*cond.

        A fully masked condition set short-circuits to one unconditional
        pass, so guidance weight has no effect there by construction.
        """
        if cond.fully_masked:
            return self.velocity(tape, x, t, agent_tokens, map_tokens,
                                 cond.masked())
        v_c = self.velocity(tape, x, t, agent_tokens, map_tokens, cond)
        v_u = self.velocity(tape, x, t, agent_tokens, map_tokens,
                            cond.masked())
        return tape.add(tape.scale(v_u, 1.0 - gamma),
                        tape.scale(v_c, gamma))

    def cfg_velocity_value(self, x, t, agent_tokens, map_tokens,
                           cond: ConditionSet, gamma: float) -> np.ndarray:
        tape = Tape(record=False)
        return self.cfg_velocity(tape, x, t, agent_tokens, map_tokens,
                                 cond, gamma).value

    # ---- losses ----------------------------------------------------------

    def rf_loss(self, tape: Tape, x0: np.ndarray, x1: np.ndarray, t: float,
                agent_tokens, map_tokens, cond: ConditionSet) -> Var:
        """Flow-matching residual: mean squared error between the
        predicted velocity at the interpolated state and (x1 - x0)."""
        x0 = np.asarray(x0, dtype=np.float64)
        x1 = np.asarray(x1, dtype=np.float64)
        xt = (1.0 - t) * x0 + t * x1
        v = self.velocity(tape, xt, t, agent_tokens, map_tokens, cond)
        diff = tape.sub(v, tape.leaf(x1 - x0))
        return tape.mean_all(tape.square(diff))

    def penalty_vec(self, tape: Tape, x_var: Var, scene: Scene) -> Var:
        """Constraint penalty terms (1, 3) as a differentiable node."""
        want = tape.record and x_var.requires_grad
        terms, grad = penalty_terms(x_var.value, scene, want_grad=want)

        def vjp(g):
            if x_var.requires_grad:
                x_var._accum(np.einsum("k,kij->ij", g[0], grad))
        return tape.custom(terms.reshape(1, 3), (x_var,), vjp)

    def energy(self, tape: Tape, x, scene: Scene, agent_tokens, map_tokens,
               cond: ConditionSet, dt_ref: float = 0.01
               ) -> tuple[Var, Var]:
        """Self-consistency energy of a terminal state.

        One Euler self-step f(x) = x + v(x, t=1, c) * dt_ref; the energy
        is the squared norm of the penalty-vector change between f(x)
        and x.  Returns (energy (1,1), state leaf) so callers can read
        d(energy)/d(state) after backward.
        """
        x_var = x if isinstance(x, Var) else tape.leaf(
            np.asarray(x, dtype=np.float64), requires_grad=True)
        v = self.velocity(tape, x_var, 1.0, agent_tokens, map_tokens, cond)
        f = tape.add(x_var, tape.scale(v, dt_ref))
        jf = self.penalty_vec(tape, f, scene)
        jx = self.penalty_vec(tape, x_var, scene)
        diff = tape.sub(jf, jx)
        return tape.sum_all(tape.square(diff)), x_var

    def energy_value(self, x, scene, agent_tokens, map_tokens, cond,
                     dt_ref: float = 0.01) -> float:
        tape = Tape(record=False)
        e, _ = self.energy(tape, x, scene, agent_tokens, map_tokens, cond,
                           dt_ref)
        return float(e.value[0, 0])

    def energy_grad(self, x, scene, agent_tokens, map_tokens, cond,
                    dt_ref: float = 0.01) -> tuple[float, np.ndarray]:
        """Energy and its gradient with respect to the state only."""
        tape = Tape(record=True, train=False)
        e, x_var = self.energy(tape, x, scene, agent_tokens, map_tokens,
                               cond, dt_ref)
        tape.backward(e)
        g = x_var.grad if x_var.grad is not None \
            else np.zeros((self.t_steps, 2))
        return float(e.value[0, 0]), g

    def rfe_loss(self, tape: Tape, x_end: np.ndarray, x_gt: np.ndarray,
                 scene: Scene, agent_tokens, map_tokens,
                 cond: ConditionSet, dt_ref: float = 0.01) -> Var:
        """Refinement loss: energy of a generated endpoint minus energy
        of the expert endpoint (drives generated energy below expert's)."""
        e_end, _ = self.energy(tape, np.asarray(x_end, dtype=np.float64),
                               scene, agent_tokens, map_tokens, cond, dt_ref)
        e_gt, _ = self.energy(tape, np.asarray(x_gt, dtype=np.float64),
                              scene, agent_tokens, map_tokens, cond, dt_ref)
        return tape.sub(e_end, e_gt)

    # ---- persistence -------------------------------------------------------

    def save(self, path) -> None:
        blocks = dict(self.params.blocks)
        blocks[_META_BLOCK] = np.array([[
            MODEL_FORMAT_VERSION, float(self.embed_dim),
            float(self.t_steps), self.dt,
            float(CONDITION_KINDS.index(self.condition)), self.tau_star,
            self.eps_max, self.time_base, self.input_scale]])
        write_blocks(path, blocks)

    @classmethod
    def load(cls, path) -> "VelocityModel":
        blocks = read_blocks(path)
        meta = blocks.pop(_META_BLOCK, None)
        if meta is None or meta.shape != (1, 9):
            raise DataFormatError("%s: not a velocity model checkpoint"
                                  % (Path(path),))
        if meta[0, 0] != MODEL_FORMAT_VERSION:
            raise DataFormatError("%s: unsupported model version %r"
                                  % (Path(path), meta[0, 0]))
        params = ParamStore()
        for name in sorted(blocks):
            params.add(name, blocks[name])
        return cls(params=params, embed_dim=int(meta[0, 1]),
                   t_steps=int(meta[0, 2]), dt=float(meta[0, 3]),
                   condition=CONDITION_KINDS[int(meta[0, 4])],
                   tau_star=float(meta[0, 5]), eps_max=float(meta[0, 6]),
                   time_base=float(meta[0, 7]),
                   input_scale=float(meta[0, 8]))

    def clone(self) -> "VelocityModel":
        return replace(self, params=self.params.clone())
