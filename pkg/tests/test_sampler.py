"""Sampling chain: correction math, truncation, refinement, path IO."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfmplan.errors import ConfigError, DataFormatError, GenerationError
from cfmplan.flownet import ConditionSet, VelocityModel, intent_condition
from cfmplan.sampler import (FlowPath, SamplerConfig, anchor_condition,
                             cvf_correct, cvf_reference, epsilon_schedule,
                             load_flow_path, refine_only, sample,
                             sample_multimodal, save_flow_path)
from cfmplan.scenario import (T_STEPS, Trajectory, generate_scene,
                              scene_tokens)
from cfmplan.seeding import rng_from
from cfmplan.vocab import AnchorVocab, ConstraintAnchor
from cfmplan.scenario import ConstraintScore


def perturbed(seed=2, embed_dim=16, condition="anchor", scale=0.05):
    model = VelocityModel.build(seed=seed, embed_dim=embed_dim,
                                condition=condition)
    rng = rng_from(seed, "perturb")
    for name, block in model.params.blocks.items():
        block += rng.normal(0.0, scale, block.shape)
    return model


@pytest.fixture(scope="module")
def model():
    return perturbed()


@pytest.fixture(scope="module")
def fork_scene():
    return generate_scene("fork", 0)


@pytest.fixture()
def masked_cond():
    return ConditionSet(intent_mask=True, reward_mask=True)


def short_cfg(**kw):
    kw.setdefault("steps", 20)
    kw.setdefault("truncate_step", 10)
    kw.setdefault("seed", 5)
    return SamplerConfig(**kw)


def make_anchor(rng, feasible=True):
    wp = np.cumsum(rng.normal(2.0, 0.5, (T_STEPS, 2)), axis=0)
    traj = Trajectory(wp, dt=0.5)
    score = ConstraintScore(0.0, 0.0, 0.0, 0.0)
    return ConstraintAnchor(index=0, trajectory=traj, score=score,
                            ep=0.5, feasible=feasible)


class TestConfig:
    def test_defaults_valid(self):
        SamplerConfig().validate()

    @pytest.mark.parametrize("kw", [
        {"steps": 0},
        {"steps": -3},
        {"truncate_step": 0},
        {"steps": 20, "truncate_step": 20},
        {"steps": 20, "truncate_step": 25},
        {"lam": 1.0},
        {"lam": -0.1},
        {"gamma": -0.5},
        {"refine_steps": -1},
        {"cvf_sign": "repel"},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            SamplerConfig(**kw).validate()


class TestCvfCorrect:
    def test_exact_orthogonal_is_identity(self):
        # inner product exactly zero by construction
        v = np.zeros((T_STEPS, 2))
        v[0, 0] = 3.0
        v_c = np.zeros((T_STEPS, 2))
        v_c[0, 1] = 2.0
        v2, applied = cvf_correct(v, v_c, 0.4)
        assert applied
        np.testing.assert_array_equal(v2, v)

    def test_damp_scales_parallel_component(self, rng):
        v = rng.normal(size=(T_STEPS, 2))
        v_c = rng.normal(size=(T_STEPS, 2))
        lam = 0.3
        coef = (v * v_c).sum() / (v_c * v_c).sum()
        par = coef * v_c
        perp = v - par
        v2, applied = cvf_correct(v, v_c, lam, "damp")
        assert applied
        np.testing.assert_allclose(v2, perp + (1 - 2 * lam) * par,
                                   atol=1e-12)

    def test_attract_flips_sign(self, rng):
        v = rng.normal(size=(T_STEPS, 2))
        v_c = rng.normal(size=(T_STEPS, 2))
        lam = 0.25
        damped, _ = cvf_correct(v, v_c, lam, "damp")
        attracted, _ = cvf_correct(v, v_c, lam, "attract")
        # the two modes are mirror images around the uncorrected field
        np.testing.assert_allclose(damped + attracted, 2 * v, atol=1e-12)

    def test_half_lam_annihilates_alignment(self, rng):
        v = rng.normal(size=(T_STEPS, 2))
        v_c = rng.normal(size=(T_STEPS, 2))
        v2, _ = cvf_correct(v, v_c, 0.5, "damp")
        assert abs((v2 * v_c).sum()) < 1e-10

    def test_zero_reference_skips(self, rng):
        v = rng.normal(size=(T_STEPS, 2))
        v_c = np.full((T_STEPS, 2), 1e-12)
        v2, applied = cvf_correct(v, v_c, 0.3)
        assert not applied
        assert v2 is v

    def test_bad_sign(self, rng):
        v = rng.normal(size=(2, 2))
        with pytest.raises(ConfigError):
            cvf_correct(v, v, 0.1, "sideways")

    @given(st.integers(0, 2**32 - 1),
           st.floats(0.0, 0.49, allow_nan=False))
    @settings(max_examples=30, deadline=None)
    def test_decomposition_property(self, seed, lam):
        r = np.random.default_rng(seed)
        v = r.normal(size=(T_STEPS, 2))
        v_c = r.normal(size=(T_STEPS, 2))
        v2, applied = cvf_correct(v, v_c, lam)
        assert applied
        nc2 = (v_c * v_c).sum()
        # aligned part scaled by 1 - 2 lam, orthogonal part preserved
        inner_after = (v2 * v_c).sum()
        inner_before = (v * v_c).sum()
        np.testing.assert_allclose(inner_after,
                                   (1 - 2 * lam) * inner_before,
                                   rtol=1e-9, atol=1e-9)
        perp_before = v - inner_before / nc2 * v_c
        perp_after = v2 - inner_after / nc2 * v_c
        np.testing.assert_allclose(perp_after, perp_before, atol=1e-9)

    def test_reference_points_noise_to_anchor(self, rng):
        x0 = rng.normal(size=(T_STEPS, 2))
        anchor = make_anchor(rng)
        ref = cvf_reference(x0, anchor)
        np.testing.assert_allclose(ref,
                                   anchor.trajectory.waypoints - x0)


class TestEpsilonSchedule:
    def test_zero_before_activation(self):
        assert epsilon_schedule(0.0, 0.8, 0.5) == 0.0
        assert epsilon_schedule(0.79, 0.8, 0.5) == 0.0
        assert epsilon_schedule(0.8, 0.8, 0.5) == 0.0

    def test_max_at_and_past_one(self):
        assert epsilon_schedule(1.0, 0.8, 0.5) == 0.5
        assert epsilon_schedule(1.7, 0.8, 0.5) == 0.5

    def test_linear_midpoint(self):
        assert epsilon_schedule(0.9, 0.8, 0.5) == pytest.approx(0.25)

    def test_nondecreasing(self):
        grid = np.linspace(0.0, 1.5, 301)
        vals = [epsilon_schedule(float(t), 0.8, 0.5) for t in grid]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_rejects_bad_params(self):
        with pytest.raises(ConfigError):
            epsilon_schedule(0.5, 1.0, 0.5)
        with pytest.raises(ConfigError):
            epsilon_schedule(0.5, 0.8, 0.0)


class TestTransport:
    def test_zero_field_stays_at_noise(self, zero_model, fork_scene,
                                       masked_cond):
        cfg = short_cfg()
        traj, fp = sample(zero_model, fork_scene, masked_cond, cfg)
        np.testing.assert_array_equal(traj.waypoints, fp.states[0])
        assert len(fp.states) == cfg.steps + 1

    def test_deterministic_in_seed(self, model, fork_scene, masked_cond):
        cfg = short_cfg(seed=9)
        t1, _ = sample(model, fork_scene, masked_cond, cfg)
        t2, _ = sample(model, fork_scene, masked_cond, cfg)
        np.testing.assert_array_equal(t1.waypoints, t2.waypoints)
        t3, _ = sample(model, fork_scene, masked_cond, short_cfg(seed=10))
        assert np.abs(t1.waypoints - t3.waypoints).max() > 0.0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_plain_euler_loop(self, model, fork_scene, seed, rng):
        # with every module off the chain must be a bare Euler
        # integration of the guided field, bit for bit
        cond = intent_condition("anchor", make_anchor(rng).trajectory,
                                reward=0.5)
        cfg = short_cfg(seed=seed, gamma=1.5)
        traj, fp = sample(model, fork_scene, cond, cfg)

        at, mt = scene_tokens(fork_scene)
        rng2 = rng_from(seed, "chain")
        x = rng2.standard_normal((model.t_steps, 2))
        dt = 1.0 / cfg.steps
        for k in range(cfg.steps):
            v = model.cfg_velocity_value(x, k * dt, at, mt, cond, cfg.gamma)
            x = x + v * dt
        np.testing.assert_array_equal(traj.waypoints, x)
        assert fp.truncation is None and fp.energies == []

    def test_time_grid(self, model, fork_scene, masked_cond):
        cfg = short_cfg(rfe_enabled=True, refine_steps=3)
        _, fp = sample(model, fork_scene, masked_cond, cfg)
        assert len(fp.states) == cfg.steps + 3 + 1
        assert len(fp.energies) == 3
        dt = 1.0 / cfg.steps
        np.testing.assert_allclose(fp.times,
                                   [k * dt for k in range(len(fp.states))])
        assert fp.times[-1] > 1.0

    def test_refine_budget_ignored_when_disabled(self, model, fork_scene,
                                                 masked_cond):
        cfg = short_cfg(refine_steps=7, rfe_enabled=False)
        _, fp = sample(model, fork_scene, masked_cond, cfg)
        assert len(fp.states) == cfg.steps + 1
        assert fp.energies == []

    def test_divergent_field_raises(self, fork_scene, masked_cond):
        wild = perturbed(seed=11, scale=1e4)
        with pytest.raises(GenerationError):
            with np.errstate(all="ignore"):
                sample(wild, fork_scene, masked_cond, short_cfg())


class TestGuidanceModules:
    def test_anchor_required(self, model, fork_scene, masked_cond):
        with pytest.raises(ConfigError):
            sample(model, fork_scene, masked_cond,
                   short_cfg(cvf_enabled=True))
        with pytest.raises(ConfigError):
            sample(model, fork_scene, masked_cond,
                   short_cfg(cf_enabled=True))

    def test_infeasible_anchor_rejected(self, model, fork_scene,
                                        masked_cond, rng):
        bad = make_anchor(rng, feasible=False)
        with pytest.raises(ConfigError):
            sample(model, fork_scene, masked_cond,
                   short_cfg(cf_enabled=True), anchor=bad)

    def test_truncation_is_bit_exact(self, model, fork_scene, masked_cond,
                                     rng):
        anchor = make_anchor(rng)
        cfg = short_cfg(cf_enabled=True, truncate_step=7)
        _, fp = sample(model, fork_scene, masked_cond, cfg, anchor=anchor)
        assert fp.truncation is not None
        k, arr = fp.truncation
        assert k == 7
        wp = anchor.trajectory.waypoints
        np.testing.assert_array_equal(fp.states[7], wp)
        np.testing.assert_array_equal(arr, wp)
        # the chain keeps integrating afterwards
        assert np.abs(fp.states[-1] - wp).max() > 0.0

    def test_cvf_changes_chain(self, model, fork_scene, masked_cond, rng):
        anchor = make_anchor(rng)
        plain, _ = sample(model, fork_scene, masked_cond, short_cfg())
        cfg = short_cfg(cvf_enabled=True, lam=0.3)
        guided, fp = sample(model, fork_scene, masked_cond, cfg,
                            anchor=anchor)
        assert np.abs(plain.waypoints - guided.waypoints).max() > 0.0
        assert fp.cvf_skips == 0

    def test_cvf_on_zero_field_is_noop(self, zero_model, fork_scene,
                                       masked_cond, rng):
        # correcting a zero velocity leaves it zero
        anchor = make_anchor(rng)
        cfg = short_cfg(cvf_enabled=True, lam=0.4)
        traj, fp = sample(zero_model, fork_scene, masked_cond, cfg,
                          anchor=anchor)
        np.testing.assert_array_equal(traj.waypoints, fp.states[0])


def quad_energy(block):
    e = 0.5 * (block ** 2).sum(axis=1)
    return e, block.copy()


class TestRefineOnly:
    def test_quadratic_descent(self):
        start = np.full((4, 6), 3.0)
        cfg = SamplerConfig(eta_scale=20.0, seed=0)
        out, trace = refine_only(None, start, None, 50, cfg,
                                 energy_fn=quad_energy)
        assert out.shape == (4, 6)
        assert np.abs(out).max() < np.abs(start).max() * 0.1
        diffs = np.diff(trace)
        assert (diffs <= 1e-12).all()
        assert trace[0] == pytest.approx(0.5 * 6 * 9.0)

    def test_langevin_deterministic(self):
        start = np.zeros((8, 2))
        cfg = SamplerConfig(eta_scale=4.0, seed=3)
        a, _ = refine_only(None, start, None, 25, cfg,
                           energy_fn=quad_energy, langevin=True)
        b, _ = refine_only(None, start, None, 25, cfg,
                           energy_fn=quad_energy, langevin=True)
        np.testing.assert_array_equal(a, b)
        c, _ = refine_only(None, start, None, 25,
                           SamplerConfig(eta_scale=4.0, seed=4),
                           energy_fn=quad_energy, langevin=True)
        assert np.abs(a - c).max() > 0.0

    def test_langevin_matches_boltzmann_variance(self):
        # stationary law of the noisy chain on E = x^2/2 is a centred
        # Gaussian with variance eps_max
        cfg = SamplerConfig(eta_scale=4.0, seed=12)  # eta = 0.02
        start = np.random.default_rng(0).normal(size=(3000, 1))
        out, _ = refine_only(None, start, None, 400, cfg,
                             energy_fn=quad_energy, langevin=True)
        assert float(np.var(out)) == pytest.approx(0.5, abs=0.05)

    def test_zero_model_refine_is_identity(self, zero_model, fork_scene):
        start = Trajectory(np.full((T_STEPS, 2), 2.0), dt=0.5)
        out, trace = refine_only(zero_model, start, fork_scene, 2,
                                 SamplerConfig(seed=0))
        assert isinstance(out, Trajectory)
        assert out.dt == start.dt
        np.testing.assert_array_equal(out.waypoints, start.waypoints)
        assert trace == [0.0, 0.0]

    def test_model_refine_runs(self, model, fork_scene):
        start = Trajectory(np.zeros((T_STEPS, 2)), dt=0.5)
        out, trace = refine_only(model, start, fork_scene, 3,
                                 SamplerConfig(seed=0))
        assert isinstance(out, Trajectory)
        assert len(trace) == 3
        diffs = np.diff(trace)
        assert (diffs <= 1e-12).all()

    def test_rejects_bad_budget(self, zero_model, fork_scene):
        start = Trajectory(np.zeros((T_STEPS, 2)), dt=0.5)
        with pytest.raises(ConfigError):
            refine_only(zero_model, start, fork_scene, 0,
                        SamplerConfig(seed=0))

    def test_requires_model_or_hook(self):
        with pytest.raises(ConfigError):
            refine_only(None, np.zeros((2, 2)), None, 5,
                        SamplerConfig(seed=0))

    def test_divergent_hook_raises(self):
        def explode(block):
            return np.zeros(block.shape[0]), np.full_like(block, np.inf)

        with pytest.raises(GenerationError):
            refine_only(None, np.zeros((2, 2)), None, 2,
                        SamplerConfig(seed=0), energy_fn=explode,
                        langevin=True)


class TestPathIO:
    def test_roundtrip(self, model, fork_scene, masked_cond, rng, tmp_path):
        anchor = make_anchor(rng)
        cfg = short_cfg(cf_enabled=True, rfe_enabled=True, refine_steps=2,
                        truncate_step=4)
        _, fp = sample(model, fork_scene, masked_cond, cfg, anchor=anchor)
        path = tmp_path / "chain.jsonl"
        save_flow_path(fp, path)
        back = load_flow_path(path)
        assert len(back.states) == len(fp.states)
        assert back.steps == fp.steps
        for a, b in zip(back.states, fp.states):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(back.times, fp.times)
        assert back.truncation is not None
        assert back.truncation[0] == fp.truncation[0]
        np.testing.assert_array_equal(back.truncation[1], fp.truncation[1])
        # energies are not persisted
        assert back.energies == []

    def test_rejects_empty(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text("")
        with pytest.raises(DataFormatError):
            load_flow_path(p)

    def test_rejects_garbage_header(self, tmp_path):
        p = tmp_path / "g.jsonl"
        p.write_text("{not json\n")
        with pytest.raises(DataFormatError):
            load_flow_path(p)

    def test_rejects_foreign_header(self, tmp_path):
        p = tmp_path / "f.jsonl"
        p.write_text('{"format": "something-else", "version": 1}\n')
        with pytest.raises(DataFormatError):
            load_flow_path(p)

    def test_rejects_future_version(self, tmp_path):
        p = tmp_path / "v.jsonl"
        p.write_text('{"format": "cfmplan-path", "version": 99}\n')
        with pytest.raises(DataFormatError):
            load_flow_path(p)

    def test_rejects_header_only(self, tmp_path):
        p = tmp_path / "h.jsonl"
        p.write_text('{"format": "cfmplan-path", "version": 1, '
                     '"steps": 4}\n')
        with pytest.raises(DataFormatError):
            load_flow_path(p)

    def test_rejects_bad_state_shape(self, tmp_path):
        p = tmp_path / "s.jsonl"
        p.write_text('{"format": "cfmplan-path", "version": 1, '
                     '"steps": 1}\n'
                     '{"step": 0, "t": 0.0, "state": [[1.0, 2.0, 3.0]]}\n')
        with pytest.raises(DataFormatError) as exc:
            load_flow_path(p)
        assert "line 2" in str(exc.value)

    def test_rejects_truncation_out_of_range(self, tmp_path):
        p = tmp_path / "t.jsonl"
        p.write_text('{"format": "cfmplan-path", "version": 1, '
                     '"steps": 1, "truncate_step": 5}\n'
                     '{"step": 0, "t": 0.0, "state": [[1.0, 2.0]]}\n')
        with pytest.raises(DataFormatError):
            load_flow_path(p)


class TestAnchorCondition:
    def test_anchor_channel(self, model, rng):
        traj = make_anchor(rng).trajectory
        cond = anchor_condition(model, traj)
        np.testing.assert_array_equal(cond.plan_anchor.waypoints,
                                      traj.waypoints)
        assert cond.reward_mask and cond.reward is None

    def test_reward_passthrough(self, model, rng):
        traj = make_anchor(rng).trajectory
        cond = anchor_condition(model, traj, reward=0.7)
        assert cond.reward == 0.7 and not cond.reward_mask

    def test_goal_channel(self, rng):
        m = perturbed(seed=6, condition="goal")
        traj = make_anchor(rng).trajectory
        cond = anchor_condition(m, traj)
        np.testing.assert_array_equal(cond.goal, traj.waypoints[-1])

    @pytest.mark.parametrize("end_y,expected", [(4.0, 0), (0.0, 1),
                                                (-4.0, 2)])
    def test_command_channel(self, end_y, expected):
        m = perturbed(seed=7, condition="command")
        wp = np.zeros((T_STEPS, 2))
        wp[:, 0] = np.arange(1, T_STEPS + 1)
        wp[-1, 1] = end_y
        cond = anchor_condition(m, Trajectory(wp, dt=0.5))
        assert cond.command == expected


class TestMultimodal:
    def test_one_sample_per_anchor(self, model, fork_scene, small_vocab):
        out = sample_multimodal(model, fork_scene, small_vocab, short_cfg())
        assert [i for _, i in out] == list(range(len(small_vocab)))
        for traj, _ in out:
            assert traj.waypoints.shape == (T_STEPS, 2)

    def test_indices_subset(self, model, fork_scene, small_vocab):
        out = sample_multimodal(model, fork_scene, small_vocab, short_cfg(),
                                indices=[2, 0])
        assert [i for _, i in out] == [2, 0]

    def test_per_anchor_seeds_differ(self, model, fork_scene, small_vocab):
        out = sample_multimodal(model, fork_scene, small_vocab, short_cfg())
        a = out[0][0].waypoints
        b = out[1][0].waypoints
        assert np.abs(a - b).max() > 0.0

    def test_rejects_empty_vocab(self, model, fork_scene):
        empty = AnchorVocab(np.zeros((0, T_STEPS, 2)), dt=0.5)
        with pytest.raises(ConfigError):
            sample_multimodal(model, fork_scene, empty, short_cfg())
