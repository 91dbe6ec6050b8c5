"""Autodiff core: op-level gradients against central differences."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfmplan.diffcore import (ParamStore, Tape, TimeEmbedding, adam_step,
                              cross_attention, dense, init_attention,
                              init_dense, read_blocks, sinusoidal_embed,
                              transpose, write_blocks)
from cfmplan.errors import DataFormatError, ShapeError, StateError

from conftest import numeric_grad


def check_input_grad(build, x0, rtol=1e-6):
    """Compare d(loss)/d(input) against central differences."""
    tape = Tape()
    leaf = tape.leaf(x0, requires_grad=True)
    tape.backward(build(tape, leaf))

    def f(x):
        t = Tape(record=False)
        return float(build(t, t.leaf(x)).value[0, 0])

    want = numeric_grad(f, x0.copy())
    assert leaf.grad is not None
    np.testing.assert_allclose(leaf.grad, want, rtol=rtol, atol=1e-9)


class TestPrimitiveGrads:
    def test_mm(self, rng):
        b = rng.normal(size=(3, 2))

        def build(tape, x):
            return tape.sum_all(tape.mm(x, tape.leaf(b)))
        check_input_grad(build, rng.normal(size=(4, 3)))

    def test_add_broadcast_row(self, rng):
        def build(tape, x):
            bias = tape.leaf(np.ones((1, 3)))
            return tape.sum_all(tape.square(tape.add(x, bias)))
        check_input_grad(build, rng.normal(size=(5, 3)))

    def test_mul_and_sub(self, rng):
        other = rng.normal(size=(4, 4))

        def build(tape, x):
            y = tape.mul(x, tape.leaf(other))
            return tape.sum_all(tape.sub(y, x))
        check_input_grad(build, rng.normal(size=(4, 4)))

    def test_gelu(self, rng):
        def build(tape, x):
            return tape.sum_all(tape.gelu(x))
        check_input_grad(build, rng.normal(size=(3, 5)), rtol=1e-5)

    def test_softmax_rows(self, rng):
        w = rng.normal(size=(2, 4))

        def build(tape, x):
            return tape.sum_all(tape.mul(tape.softmax_rows(x),
                                         tape.leaf(w)))
        check_input_grad(build, rng.normal(size=(2, 4)), rtol=1e-5)

    def test_mean_square_chain(self, rng):
        def build(tape, x):
            return tape.mean_all(tape.square(tape.scale(x, 3.0)))
        check_input_grad(build, rng.normal(size=(6, 2)))

    def test_reshape_concat(self, rng):
        def build(tape, x):
            flat = tape.reshape(x, 1, 8)
            both = tape.concat_rows([flat, flat])
            return tape.sum_all(tape.square(both))
        check_input_grad(build, rng.normal(size=(4, 2)))

    def test_transpose_shift_rowsum(self, rng):
        def build(tape, x):
            y = tape.shift(transpose(tape, x), 0.5)
            return tape.sum_all(tape.square(tape.row_sum(y)))
        check_input_grad(build, rng.normal(size=(3, 4)))


class TestTapeContract:
    def test_backward_twice_raises(self):
        tape = Tape()
        x = tape.leaf(np.ones((1, 1)), requires_grad=True)
        loss = tape.square(x)
        tape.backward(loss)
        with pytest.raises(StateError):
            tape.backward(loss)

    def test_backward_needs_scalar(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            tape.backward(tape.square(x))

    def test_non_recording_tape_rejects_backward(self):
        tape = Tape(record=False)
        x = tape.leaf(np.ones((1, 1)), requires_grad=True)
        with pytest.raises(StateError):
            tape.backward(tape.square(x))

    def test_train_false_keeps_params_frozen(self, rng):
        store = ParamStore()
        init_dense(store, rng, "l", 3, 2)
        tape = Tape(record=True, train=False)
        x = tape.leaf(rng.normal(size=(2, 3)), requires_grad=True)
        tape.backward(tape.sum_all(dense(tape, x, store, "l")))
        assert x.grad is not None
        assert not store.has_grads

    def test_param_cache_shares_var(self):
        store = ParamStore()
        store.add("w", np.ones((2, 2)))
        tape = Tape()
        assert tape.param(store, "w") is tape.param(store, "w")

    def test_shape_mismatch_raises(self):
        tape = Tape()
        a = tape.leaf(np.ones((2, 3)))
        b = tape.leaf(np.ones((3, 3)))
        with pytest.raises(ShapeError):
            tape.add(a, b)
        with pytest.raises(ShapeError):
            tape.mm(a, tape.leaf(np.ones((2, 2))))


class TestLayers:
    def test_dense_param_grads(self, rng):
        store = ParamStore()
        init_dense(store, rng, "l", 3, 2)
        x0 = rng.normal(size=(4, 3))

        tape = Tape()
        out = dense(tape, tape.leaf(x0), store, "l", "gelu")
        tape.backward(tape.mean_all(tape.square(out)))

        for name in ("l.w", "l.b"):
            got = store.grads[name].copy()

            def f(w, name=name):
                keep = store.blocks[name]
                store.blocks[name] = w
                t = Tape(record=False)
                val = t.mean_all(t.square(dense(t, t.leaf(x0), store, "l",
                                                "gelu"))).value[0, 0]
                store.blocks[name] = keep
                return float(val)

            want = numeric_grad(f, store.blocks[name].copy())
            np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-9)
        store.zero_grads()

    def test_attention_residual_identity_at_init(self, rng):
        # zero output projection -> fresh attention is the identity
        store = ParamStore()
        init_attention(store, rng, "a", 8)
        tape = Tape(record=False)
        q = tape.leaf(rng.normal(size=(3, 8)))
        kv = tape.leaf(rng.normal(size=(5, 8)))
        out, weights = cross_attention(tape, q, kv, store, "a")
        np.testing.assert_array_equal(out.value, q.value)
        np.testing.assert_allclose(weights.value.sum(axis=1), 1.0)

    def test_attention_input_grads(self, rng):
        store = ParamStore()
        init_attention(store, rng, "a", 4)
        # break the zero init so gradients flow through the mix
        store.blocks["a.o.w"] = rng.normal(size=(4, 4)) * 0.3
        kv0 = rng.normal(size=(3, 4))

        def build(tape, x):
            out, _ = cross_attention(tape, x, tape.leaf(kv0), store, "a")
            return tape.mean_all(tape.square(out))
        check_input_grad(build, rng.normal(size=(2, 4)), rtol=1e-4)

    def test_attention_dim_mismatch(self, rng):
        store = ParamStore()
        init_attention(store, rng, "a", 4)
        tape = Tape()
        with pytest.raises(ShapeError):
            cross_attention(tape, tape.leaf(np.ones((2, 4))),
                            tape.leaf(np.ones((2, 6))), store, "a")

    def test_sinusoidal_embed_bounds(self):
        emb = TimeEmbedding(16)
        for t in (0.0, 0.37, 1.0, 123.4):
            e = sinusoidal_embed(t, emb)
            assert e.shape == (1, 16)
            assert np.all(np.abs(e) <= 1.0)
        np.testing.assert_allclose(sinusoidal_embed(0.0, emb)[0, 0::2], 0.0)
        np.testing.assert_allclose(sinusoidal_embed(0.0, emb)[0, 1::2], 1.0)

    def test_time_embedding_rejects_odd(self):
        from cfmplan.errors import ConfigError
        with pytest.raises(ConfigError):
            TimeEmbedding(7)

    def test_kaiming_bound(self, rng):
        store = ParamStore()
        init_dense(store, rng, "l", 50, 60)
        bound = np.sqrt(6.0 / 50)
        w = store.blocks["l.w"]
        assert np.all(np.abs(w) <= bound)
        assert np.abs(w).max() > 0.8 * bound  # actually fills the range
        np.testing.assert_array_equal(store.blocks["l.b"], 0.0)


class TestOptim:
    def test_adam_single_quadratic_step(self):
        # one Adam step on f(w) = w^2/2 from w=1: bias correction makes
        # the first update exactly -lr * sign(grad)
        store = ParamStore()
        store.add("w", np.array([[1.0]]))
        store.accumulate_grad("w", np.array([[1.0]]))
        adam_step(store, lr=0.1)
        np.testing.assert_allclose(store.blocks["w"], 1.0 - 0.1, atol=1e-8)
        assert store.step == 1
        assert not store.has_grads

    def test_adam_without_grads_raises(self):
        store = ParamStore()
        store.add("w", np.ones((1, 1)))
        with pytest.raises(StateError):
            adam_step(store, lr=0.1)

    def test_adam_converges_quadratic(self):
        store = ParamStore()
        store.add("w", np.array([[5.0, -3.0]]))
        for _ in range(400):
            store.accumulate_grad("w", store.blocks["w"].copy())
            adam_step(store, lr=0.05)
        np.testing.assert_allclose(store.blocks["w"], 0.0, atol=1e-2)

    def test_duplicate_block_raises(self):
        store = ParamStore()
        store.add("w", np.ones((1, 1)))
        with pytest.raises(StateError):
            store.add("w", np.ones((1, 1)))

    def test_clone_detaches(self):
        store = ParamStore()
        store.add("w", np.ones((2, 2)))
        twin = store.clone()
        twin.blocks["w"][0, 0] = 9.0
        assert store.blocks["w"][0, 0] == 1.0


class TestCheckpoint:
    def test_roundtrip_byte_identical(self, tmp_path, rng):
        blocks = {"b": rng.normal(size=(3, 4)), "a": rng.normal(size=(1, 2))}
        p1 = tmp_path / "one.blk"
        p2 = tmp_path / "two.blk"
        write_blocks(p1, blocks)
        back = read_blocks(p1)
        assert sorted(back) == ["a", "b"]
        for name in blocks:
            np.testing.assert_array_equal(back[name], blocks[name])
        write_blocks(p2, back)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.blk"
        p.write_bytes(b"NOTRIGHT" + b"\x00" * 16)
        with pytest.raises(DataFormatError):
            read_blocks(p)

    def test_truncated_file(self, tmp_path, rng):
        p = tmp_path / "trunc.blk"
        write_blocks(p, {"w": rng.normal(size=(4, 4))})
        p.write_bytes(p.read_bytes()[:-7])
        with pytest.raises(DataFormatError):
            read_blocks(p)

    def test_trailing_bytes(self, tmp_path, rng):
        p = tmp_path / "extra.blk"
        write_blocks(p, {"w": rng.normal(size=(2, 2))})
        p.write_bytes(p.read_bytes() + b"xx")
        with pytest.raises(DataFormatError):
            read_blocks(p)


@given(rows=st.integers(1, 5), cols=st.integers(1, 5),
       seed=st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_softmax_rows_sum_to_one(rows, cols, seed):
    rng = np.random.default_rng(seed)
    tape = Tape(record=False)
    y = tape.softmax_rows(tape.leaf(rng.normal(size=(rows, cols)) * 10))
    np.testing.assert_allclose(y.value.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(y.value >= 0)


@given(seed=st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_mm_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    tape = Tape(record=False)
    out = tape.mm(tape.leaf(a), tape.leaf(b))
    np.testing.assert_allclose(out.value, a @ b, rtol=1e-12)
