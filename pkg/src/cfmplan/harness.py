"""Training loops, evaluation metrics, baselines, and the ablation suite.

The composite score here is a desk-scale aggregate (geometric mean of
collision avoidance, road compliance, and progress); its magnitudes are
not comparable to any external driving benchmark.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .diffcore import (ParamStore, Tape, adam_step, cross_attention, dense,
                       init_attention, init_dense, read_blocks, write_blocks)
from .errors import ConfigError, DataFormatError
from .flownet import VelocityModel, intent_condition, sample_masks
from .jsonio import dumps_canonical
from .sampler import SamplerConfig, anchor_condition, sample, \
    sample_multimodal
from .scenario import (DT, T_STEPS, Record, Scene, Trajectory,
                       collision_free, ep_reward, expert_trajectories,
                       on_road, scene_tokens)
from .seeding import derive, rng_from
from .vocab import AnchorVocab, nearest_anchor, select_constraint_anchor

# horizon name -> waypoint prefix length at dt = 0.5
HORIZONS = (("1s", 2), ("2s", 4), ("3s", 6))
COLLAPSE_FREQ = 0.05

CSV_COLUMNS = ("name", "cvf", "cf", "rfe", "ras", "lam", "k_c", "steps",
               "collision_1s", "collision_2s", "collision_3s",
               "collision_avg", "road_compliance", "ep_mean", "composite")


def _worker_count(threads: int | None = None) -> int:
    if threads:
        return max(1, int(threads))
    env = os.environ.get("CFMPLAN_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def _map_ordered(fn, items, threads: int | None = None) -> list:
    """Apply fn over items, possibly in a thread pool; results keep the
    input order so reductions are independent of scheduling."""
    workers = _worker_count(threads)
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# configs and metrics


@dataclass(eq=False)
class TrainConfig:
    epochs: int = 30
    batch: int = 32
    lr: float = 2e-4
    mask_p: float = 0.2
    w_rfe: float = 0.1
    rfe_enabled: bool = False
    rfe_warmup: float = 0.5   # fraction of epochs before the energy term joins
    rfe_k: int = 8            # coarse transport steps for generated endpoints
    condition: str = "anchor"
    embed_dim: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.epochs <= 0 or self.batch <= 0:
            raise ConfigError("epochs and batch must be positive")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.mask_p <= 1.0:
            raise ConfigError("mask_p must lie in [0, 1]")
        if not 0.0 <= self.rfe_warmup <= 1.0:
            raise ConfigError("rfe_warmup must lie in [0, 1]")
        if self.rfe_k <= 0:
            raise ConfigError("rfe_k must be positive")


@dataclass(eq=False)
class ExperimentSpec:
    """Everything that determines one run; hashed into result filenames."""

    name: str
    data_counts: dict
    data_seed: int
    train: TrainConfig
    sampler: SamplerConfig
    ras_reward: float | None = None
    seed: int = 0

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "data_counts": {str(k): int(v)
                            for k, v in self.data_counts.items()},
            "data_seed": int(self.data_seed),
            "train": dataclasses.asdict(self.train),
            "sampler": dataclasses.asdict(self.sampler),
            "ras_reward": self.ras_reward,
            "seed": int(self.seed),
        }

    def spec_hash(self) -> str:
        text = dumps_canonical(self.as_dict())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


@dataclass(eq=False)
class Metrics:
    collision_rate: dict      # {"1s","2s","3s","avg"} -> rate
    road_compliance_rate: float
    mode_coverage: dict       # mode index (str) -> frequency, sums to 1
    ep_mean: float
    composite: float

    def validate(self) -> None:
        vals = list(self.collision_rate.values()) + \
            [self.road_compliance_rate, self.ep_mean, self.composite]
        for v in vals:
            if not 0.0 <= v <= 1.0 + 1e-12:
                raise ConfigError("metric rate %r outside [0, 1]" % v)
        if self.mode_coverage:
            total = sum(self.mode_coverage.values())
            if abs(total - 1.0) > 1e-9:
                raise ConfigError("mode frequencies sum to %r, not 1" % total)

    def as_dict(self) -> dict:
        return {
            "collision_rate": dict(self.collision_rate),
            "road_compliance_rate": self.road_compliance_rate,
            "mode_coverage": dict(self.mode_coverage),
            "ep_mean": self.ep_mean,
            "composite": self.composite,
        }


def collision_horizons(traj: Trajectory, scene: Scene) -> dict:
    """Hard-collision flag per horizon prefix (True = collides)."""
    return {name: not collision_free(traj, scene, upto=steps)
            for name, steps in HORIZONS}


def composite_score(collision_avg: float, road_rate: float,
                    ep: float) -> float:
    """Geometric mean of collision avoidance, compliance, and progress.

    Monotone in each input, so lowering any sample's collision count can
    only raise it.
    """
    vals = [min(1.0, max(0.0, v))
            for v in (1.0 - collision_avg, road_rate, ep)]
    return float(np.cbrt(vals[0] * vals[1] * vals[2]))


# ---------------------------------------------------------------------------
# imitation baseline


_IMI_META = "__imi_meta__"


@dataclass(eq=False)
class ImitationBaseline:
    """Deterministic regressor: same scene-attention trunk as the flow
    model, a learned query token, and a direct T x 2 head trained with
    plain mean squared error to the expert plan."""

    params: ParamStore
    embed_dim: int
    t_steps: int
    dt: float
    input_scale: float = 20.0

    @classmethod
    def build(cls, seed: int, embed_dim: int = 64, t_steps: int = T_STEPS,
              dt: float = DT) -> "ImitationBaseline":
        if embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        rng = rng_from(seed, "imitation-init")
        p = ParamStore()
        # learned query per output waypoint, mirroring the flow trunk
        p.add("imi.query", rng.normal(0.0, 0.2, (t_steps, embed_dim)))
        init_dense(p, rng, "agents.proj", 8, embed_dim)
        init_dense(p, rng, "map.proj", 8, embed_dim)
        init_attention(p, rng, "attn_agent", embed_dim)
        init_attention(p, rng, "attn_map", embed_dim)
        init_dense(p, rng, "dec.l1", embed_dim, embed_dim)
        init_dense(p, rng, "dec.l2", embed_dim, 2, zero=True)
        return cls(params=p, embed_dim=embed_dim, t_steps=t_steps, dt=dt)

    def _scaled(self, tokens: np.ndarray) -> np.ndarray:
        out = np.array(tokens, dtype=np.float64)
        out[:, 0:5] = out[:, 0:5] / self.input_scale
        return out

    def forward(self, tape: Tape, agent_tokens, map_tokens):
        h = tape.param(self.params, "imi.query")
        a = dense(tape, tape.leaf(self._scaled(agent_tokens)),
                  self.params, "agents.proj")
        h, _ = cross_attention(tape, h, a, self.params, "attn_agent")
        m = dense(tape, tape.leaf(self._scaled(map_tokens)),
                  self.params, "map.proj")
        h, _ = cross_attention(tape, h, m, self.params, "attn_map")
        d = dense(tape, h, self.params, "dec.l1", "gelu")
        out = dense(tape, d, self.params, "dec.l2")
        return tape.scale(out, self.input_scale)

    def predict(self, scene: Scene) -> Trajectory:
        agent_tokens, map_tokens = scene_tokens(scene)
        tape = Tape(record=False)
        wp = self.forward(tape, agent_tokens, map_tokens).value
        return Trajectory(wp.copy(), dt=self.dt)

    def loss(self, tape: Tape, agent_tokens, map_tokens, target):
        pred = self.forward(tape, agent_tokens, map_tokens)
        diff = tape.sub(pred, tape.leaf(np.asarray(target,
                                                   dtype=np.float64)))
        return tape.mean_all(tape.square(diff))

    def save(self, path) -> None:
        blocks = dict(self.params.blocks)
        blocks[_IMI_META] = np.array([[1.0, float(self.embed_dim),
                                       float(self.t_steps), self.dt,
                                       self.input_scale]])
        write_blocks(path, blocks)

    @classmethod
    def load(cls, path) -> "ImitationBaseline":
        blocks = read_blocks(path)
        if _IMI_META not in blocks:
            raise DataFormatError("not a baseline checkpoint: missing meta")
        meta = blocks.pop(_IMI_META)[0]
        p = ParamStore()
        for name in sorted(blocks):
            p.add(name, blocks[name])
        return cls(params=p, embed_dim=int(meta[1]), t_steps=int(meta[2]),
                   dt=float(meta[3]), input_scale=float(meta[4]))


# ---------------------------------------------------------------------------
# training


def _prepare_examples(records, condition: str,
                      vocab: AnchorVocab | None) -> list:
    if not records:
        raise ConfigError("empty training set")
    if condition == "anchor" and (vocab is None or len(vocab) == 0):
        raise ConfigError("anchor conditioning needs a vocabulary")
    out = []
    for rec in records:
        scene = rec.scene()
        agent_tokens, map_tokens = scene_tokens(scene)
        x1 = rec.trajectory.waypoints
        if condition == "anchor":
            _, anchor_traj = nearest_anchor(vocab, rec.trajectory)
            cond = intent_condition("anchor", anchor_traj, reward=rec.ep)
        elif condition == "goal":
            cond = intent_condition("goal", x1[-1].copy(), reward=rec.ep)
        else:
            cond = intent_condition("command", rec.command, reward=rec.ep)
        out.append((scene, agent_tokens, map_tokens, x1, cond))
    return out


def _coarse_endpoint(model: VelocityModel, x0: np.ndarray, agent_tokens,
                     map_tokens, cond, k_steps: int) -> np.ndarray:
    """Cheap generated endpoint: a few conditional Euler steps, no tape."""
    x = x0.copy()
    dt = 1.0 / k_steps
    for j in range(k_steps):
        v = model.velocity_value(x, j * dt, agent_tokens, map_tokens, cond)
        x = x + v * dt
    return x


def train_model(records, cfg: TrainConfig, vocab: AnchorVocab | None = None
                ) -> tuple[VelocityModel, dict]:
    """Flow-matching training with condition masking; optionally adds the
    endpoint-energy term after a warmup.  Deterministic in cfg.seed."""
    cfg.validate()
    if not records:
        raise ConfigError("empty training set")
    t_steps = records[0].trajectory.t_steps
    dt = records[0].trajectory.dt
    model = VelocityModel.build(cfg.seed, embed_dim=cfg.embed_dim,
                                t_steps=t_steps, dt=dt,
                                condition=cfg.condition)
    examples = _prepare_examples(records, cfg.condition, vocab)
    rng = rng_from(cfg.seed, "train")
    n = len(examples)
    log: dict = {"rf": [], "rfe": []}
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        rfe_active = cfg.rfe_enabled and \
            epoch >= cfg.rfe_warmup * cfg.epochs
        rf_sum = 0.0
        rfe_sum = 0.0
        for start in range(0, n, cfg.batch):
            chunk = order[start:start + cfg.batch]
            for idx in chunk:
                scene, agent_tokens, map_tokens, x1, cond = examples[idx]
                x0 = rng.standard_normal(x1.shape)
                t = float(rng.uniform())
                im, rm = sample_masks(rng, cfg.mask_p)
                cond_m = replace(cond, intent_mask=im, reward_mask=rm)
                tape = Tape()
                loss = model.rf_loss(tape, x0, x1, t, agent_tokens,
                                     map_tokens, cond_m)
                rf_sum += float(loss.value[0, 0])
                if rfe_active:
                    x_start = rng.standard_normal(x1.shape)
                    x_end = _coarse_endpoint(model, x_start, agent_tokens,
                                             map_tokens, cond, cfg.rfe_k)
                    rterm = model.rfe_loss(tape, x_end, x1, scene,
                                           agent_tokens, map_tokens, cond)
                    rfe_sum += float(rterm.value[0, 0])
                    loss = tape.add(loss, tape.scale(rterm, cfg.w_rfe))
                tape.backward(tape.scale(loss, 1.0 / len(chunk)))
            adam_step(model.params, lr=cfg.lr)
        log["rf"].append(rf_sum / n)
        log["rfe"].append(rfe_sum / n if rfe_active else 0.0)
    return model, log


def train_imitation(records, cfg: TrainConfig) -> tuple[ImitationBaseline,
                                                        dict]:
    """MSE regression to each record's expert plan on the shared trunk."""
    cfg.validate()
    if not records:
        raise ConfigError("empty training set")
    t_steps = records[0].trajectory.t_steps
    dt = records[0].trajectory.dt
    baseline = ImitationBaseline.build(cfg.seed, embed_dim=cfg.embed_dim,
                                       t_steps=t_steps, dt=dt)
    cache = []
    for rec in records:
        agent_tokens, map_tokens = scene_tokens(rec.scene())
        cache.append((agent_tokens, map_tokens, rec.trajectory.waypoints))
    rng = rng_from(cfg.seed, "train-imitation")
    n = len(cache)
    log: dict = {"mse": []}
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch):
            chunk = order[start:start + cfg.batch]
            for idx in chunk:
                agent_tokens, map_tokens, target = cache[idx]
                tape = Tape()
                loss = baseline.loss(tape, agent_tokens, map_tokens, target)
                total += float(loss.value[0, 0])
                tape.backward(tape.scale(loss, 1.0 / len(chunk)))
            adam_step(baseline.params, lr=cfg.lr)
        log["mse"].append(total / n)
    return baseline, log


# ---------------------------------------------------------------------------
# evaluation


def _unique_scenes(records) -> list:
    seen = set()
    out = []
    for rec in records:
        key = (rec.kind, rec.seed)
        if key not in seen:
            seen.add(key)
            out.append(rec)
    return out


def _nearest_mode(traj: Trajectory, experts) -> tuple[int, float]:
    flat = traj.waypoints.reshape(-1)
    best, best_d = 0, float("inf")
    for m, plan in enumerate(experts):
        d = float(np.linalg.norm(flat - plan.trajectory.waypoints
                                 .reshape(-1)))
        if d < best_d:
            best, best_d = m, d
    return best, best_d


def _generative_cfg(cfg: SamplerConfig, *parts) -> SamplerConfig:
    # coverage sampling is unconstrained by definition: diversity must
    # come from the noise seed, not from guidance or refinement
    return replace(cfg, cvf_enabled=False, cf_enabled=False,
                   rfe_enabled=False, seed=derive(cfg.seed, *parts))


def _intent_sample(model: VelocityModel, vocab: AnchorVocab, scene: Scene,
                   cfg: SamplerConfig) -> Trajectory:
    # one diverse proposal: noise start plus an intent drawn from the
    # anchor vocabulary; constraint guidance stays out of the picture
    rng = rng_from(cfg.seed, "intent")
    plan = vocab.trajectory(int(rng.integers(len(vocab))))
    cond = anchor_condition(model, plan)
    traj, _ = sample(model, scene, cond, cfg)
    return traj


def _coverage_frequencies(model: VelocityModel, vocab: AnchorVocab,
                          fork_records, cfg: SamplerConfig, n_samples: int,
                          threads: int | None = None) -> dict:
    """Mode frequency map from seeded vocabulary-intent samples on forks."""

    def one(args):
        si, rec = args
        scene = rec.scene()
        experts = expert_trajectories(scene)
        if len(experts) < 2:
            return []
        modes = []
        for s in range(n_samples):
            cfg_c = _generative_cfg(cfg, "coverage", si, s)
            traj = _intent_sample(model, vocab, scene, cfg_c)
            modes.append(_nearest_mode(traj, experts)[0])
        return modes

    counts: dict = {}
    total = 0
    for modes in _map_ordered(one, list(enumerate(fork_records)), threads):
        for m in modes:
            counts[str(m)] = counts.get(str(m), 0) + 1
            total += 1
    return {k: counts[k] / total for k in sorted(counts)} if total else {}


def evaluate(model: VelocityModel, records, vocab: AnchorVocab,
             cfg: SamplerConfig, *, samples_per_scene: int = 1,
             ras_reward: float | None = None,
             coverage_samples: int = 8,
             threads: int | None = None) -> Metrics:
    """Open-loop metrics over the unique scenes behind ``records``.

    Hard collision counts any waypoint inside an obstacle disc within
    the horizon prefix.  Guidance anchors come from the feasibility
    screen per scene; an infeasible-best anchor disables velocity
    correction and truncation for that scene only.  Pure in (model,
    records, cfg): repeated calls give identical Metrics.
    """
    cfg.validate()
    if samples_per_scene <= 0:
        raise ConfigError("samples_per_scene must be positive")
    if coverage_samples < 0:
        raise ConfigError("coverage_samples must be >= 0")
    if len(vocab) == 0:
        raise ConfigError("evaluation needs a non-empty vocabulary")
    scenes = _unique_scenes(records)
    if not scenes:
        raise ConfigError("no scenes to evaluate")

    def one_scene(args):
        si, rec = args
        scene = rec.scene()
        anchor = select_constraint_anchor(vocab, scene)
        local = cfg
        if (cfg.cvf_enabled or cfg.cf_enabled) and not anchor.feasible:
            local = replace(cfg, cvf_enabled=False, cf_enabled=False)
        cond = anchor_condition(model, anchor.trajectory, reward=ras_reward)
        guided = local.cvf_enabled or local.cf_enabled
        hits = {name: 0 for name, _ in HORIZONS}
        road = 0
        eps = []
        for s in range(samples_per_scene):
            cfg_s = replace(local, seed=derive(cfg.seed, "eval", si, s))
            traj, _ = sample(model, scene, cond, cfg_s,
                             anchor=anchor if guided else None)
            for name, hit in collision_horizons(traj, scene).items():
                hits[name] += int(hit)
            road += int(on_road(traj, scene))
            eps.append(ep_reward(traj, scene))
        return hits, road, eps

    results = _map_ordered(one_scene, list(enumerate(scenes)), threads)
    total = len(scenes) * samples_per_scene
    rates = {name: sum(r[0][name] for r in results) / total
             for name, _ in HORIZONS}
    rates["avg"] = sum(rates[name] for name, _ in HORIZONS) / len(HORIZONS)
    road_rate = sum(r[1] for r in results) / total
    ep_mean = float(np.mean([e for r in results for e in r[2]]))

    # coverage_samples = 0 skips the (comparatively costly) pass
    fork = [rec for rec in scenes if rec.kind == "fork"]
    coverage = {}
    if fork and coverage_samples > 0:
        coverage = _coverage_frequencies(model, vocab, fork, cfg,
                                         coverage_samples, threads)

    metrics = Metrics(collision_rate=rates, road_compliance_rate=road_rate,
                      mode_coverage=coverage, ep_mean=ep_mean,
                      composite=composite_score(rates["avg"], road_rate,
                                                ep_mean))
    metrics.validate()
    return metrics


def random_walk_plan(scene: Scene, seed: int) -> Trajectory:
    """Heading random walk from the ego origin; a floor for planners."""
    rng = rng_from(seed, "random-walk")
    heading = 0.0
    pos = np.zeros(2)
    wps = []
    for _ in range(T_STEPS):
        heading += rng.normal(0.0, 0.5)
        speed = rng.uniform(3.0, 15.0)
        pos = pos + speed * DT * np.array([np.cos(heading),
                                           np.sin(heading)])
        wps.append(pos.copy())
    return Trajectory(np.array(wps), dt=DT)


# ---------------------------------------------------------------------------
# mode collapse report


def mode_collapse_report(model: VelocityModel, baseline: ImitationBaseline,
                         records, vocab: AnchorVocab, cfg: SamplerConfig, *,
                         samples_per_scene: int = 8,
                         threads: int | None = None) -> dict:
    """Per-mode frequencies and nearest-expert distances for the flow
    model versus the regression baseline on fork scenes.

    Flow proposals are seeded chains with guidance and refinement off,
    each conditioned on an intent drawn from the anchor vocabulary:
    diversity comes from the noise start and the conditioning signal,
    the way the planner assembles its candidate set.  The deterministic
    baseline contributes one prediction per scene.
    """
    if samples_per_scene <= 0:
        raise ConfigError("samples_per_scene must be positive")
    if len(vocab) == 0:
        raise ConfigError("mode collapse report needs a non-empty "
                          "vocabulary")
    scenes = _unique_scenes(records)
    if not scenes:
        raise ConfigError("no scenes to report on")
    multi = [rec for rec in scenes
             if len(expert_trajectories(rec.scene())) >= 2]
    single_mode_data = not multi
    if single_mode_data:
        multi = scenes

    def flow_one(args):
        si, rec = args
        scene = rec.scene()
        experts = expert_trajectories(scene)
        assigned = []
        for s in range(samples_per_scene):
            cfg_c = _generative_cfg(cfg, "collapse", si, s)
            traj = _intent_sample(model, vocab, scene, cfg_c)
            assigned.append(_nearest_mode(traj, experts))
        return assigned

    def imi_one(rec):
        scene = rec.scene()
        experts = expert_trajectories(scene)
        return [_nearest_mode(baseline.predict(scene), experts)]

    def summarize(per_scene) -> dict:
        counts: dict = {}
        dists = []
        for assigned in per_scene:
            for mode, dist in assigned:
                counts[str(mode)] = counts.get(str(mode), 0) + 1
                dists.append(dist)
        total = sum(counts.values())
        freqs = {k: counts[k] / total for k in sorted(counts)}
        collapse = single_mode_data is False and (
            len(freqs) < 2 or min(freqs.values()) < COLLAPSE_FREQ)
        return {"mode_frequencies": freqs,
                "mean_nearest_mode_distance": float(np.mean(dists)),
                "collapse": collapse}

    flow_summary = summarize(_map_ordered(flow_one, list(enumerate(multi)),
                                          threads))
    imi_summary = summarize([imi_one(rec) for rec in multi])
    flow_d = flow_summary["mean_nearest_mode_distance"]
    imi_d = imi_summary["mean_nearest_mode_distance"]
    return {
        "single_mode_data": single_mode_data,
        "scenes": len(multi),
        "flow": flow_summary,
        "imitation": imi_summary,
        "distance_ratio": imi_d / flow_d if flow_d > 0 else float("inf"),
    }


# ---------------------------------------------------------------------------
# ablation suite


MODULE_GRID = ("none", "cvf", "cf", "rfe", "cf+rfe", "cf+rfe+ras")
LAM_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)
KC_GRID = (10, 20, 30, 40, 50)
STEPS_GRID = (100, 50, 25, 10)
_KNOWN_MODULES = {"cvf", "cf", "rfe", "ras"}


def _flat_metrics(m: Metrics) -> dict:
    return {
        "collision_1s": m.collision_rate["1s"],
        "collision_2s": m.collision_rate["2s"],
        "collision_3s": m.collision_rate["3s"],
        "collision_avg": m.collision_rate["avg"],
        "road_compliance": m.road_compliance_rate,
        "ep_mean": m.ep_mean,
        "composite": m.composite,
        "mode_coverage": dict(m.mode_coverage),
    }


def ablation_suite(rf_model: VelocityModel, rfe_model: VelocityModel | None,
                   records, vocab: AnchorVocab, base: ExperimentSpec, *,
                   out_dir=None, module_grid=MODULE_GRID,
                   lam_grid=LAM_GRID, kc_grid=KC_GRID,
                   steps_grid=STEPS_GRID, samples_per_scene: int = 1,
                   coverage_samples: int = 0,
                   threads: int | None = None) -> list[dict]:
    """Module-toggle grid plus hyperparameter sweeps, one row per run.

    ``rfe_model`` backs the rows with refinement enabled (pass the plain
    model to reuse it).  Sweeps default to the full grids; pass empty
    tuples to skip them.  ``coverage_samples`` is 0 by default: the
    per-row mode-coverage pass is costly and off-topic for most sweeps.
    """
    base_cfg = base.sampler
    ras_value = base.ras_reward if base.ras_reward is not None else 1.0
    rows: list[dict] = []

    def run(name: str, model: VelocityModel, cfg: SamplerConfig,
            ras: float | None) -> None:
        m = evaluate(model, records, vocab, cfg,
                     samples_per_scene=samples_per_scene, ras_reward=ras,
                     coverage_samples=coverage_samples, threads=threads)
        rows.append({"name": name, "cvf": int(cfg.cvf_enabled),
                     "cf": int(cfg.cf_enabled), "rfe": int(cfg.rfe_enabled),
                     "ras": int(ras is not None), "lam": float(cfg.lam),
                     "k_c": int(cfg.truncate_step), "steps": int(cfg.steps),
                     **_flat_metrics(m)})

    for combo in module_grid:
        parts = set() if combo == "none" else set(combo.split("+"))
        unknown = parts - _KNOWN_MODULES
        if unknown:
            raise ConfigError("unknown ablation module(s): %s"
                              % ", ".join(sorted(unknown)))
        cfg = replace(base_cfg, cvf_enabled="cvf" in parts,
                      cf_enabled="cf" in parts, rfe_enabled="rfe" in parts)
        model = rf_model
        if "rfe" in parts:
            if rfe_model is None:
                raise ConfigError("combo %r needs a refinement-trained "
                                  "model" % combo)
            model = rfe_model
        run(combo, model, cfg, ras_value if "ras" in parts else None)

    for lam in lam_grid:
        cfg = replace(base_cfg, cvf_enabled=True, cf_enabled=False,
                      rfe_enabled=False, lam=float(lam))
        run("lam=%.1f" % lam, rf_model, cfg, None)

    for kc in kc_grid:
        cfg = replace(base_cfg, cvf_enabled=False, cf_enabled=True,
                      rfe_enabled=False, truncate_step=int(kc))
        run("k_c=%d" % kc, rf_model, cfg, None)

    for steps in steps_grid:
        cfg = replace(base_cfg, cvf_enabled=False, cf_enabled=False,
                      rfe_enabled=False, steps=int(steps),
                      truncate_step=max(1, int(steps) // 2))
        run("K=%d" % steps, rf_model, cfg, None)

    if out_dir is not None:
        write_results(out_dir, base, rows)
    return rows


def write_results(out_dir, spec: ExperimentSpec,
                  rows: list[dict]) -> tuple[str, str]:
    """CSV (flat metrics) and JSON (spec echo + rows), named by spec hash."""
    os.makedirs(out_dir, exist_ok=True)
    h = spec.spec_hash()
    csv_path = os.path.join(str(out_dir), "results-%s.csv" % h)
    json_path = os.path.join(str(out_dir), "results-%s.json" % h)

    def cell(v) -> str:
        if isinstance(v, float):
            return "%.9g" % v
        return str(v)

    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(cell(row[c]) for c in CSV_COLUMNS))
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    payload = {"spec": spec.as_dict(), "rows": rows}
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(payload) + "\n")
    return csv_path, json_path
