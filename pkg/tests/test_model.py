"""Stacked-autoencoder structure: forward paths, sharing, counting, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densemble.gating import GatingParams
from densemble.model import (
    CheckpointError,
    DenoiserStack,
    count_parameters,
    decode_level,
    encode_level,
    load_checkpoint,
    parameter_breakdown,
    parent_backward,
    parent_forward,
    parent_forward_trace,
    save_checkpoint,
    zero_gradients,
)
from densemble.numerics import (
    dense_forward,
    fd_gradient,
    make_rng,
    max_relative_error,
    sigmoid,
)

LEVELS = ("large", "medium", "small")
PARENTS = ("mild", "moderate", "strong")


def tiny_model(num_users=3, num_items=6, dims=(4, 3, 2), seed=0):
    return DenoiserStack.initialize(num_users, num_items, dims=dims,
                                    rng=make_rng(seed))


# ------------------------------------------------------------ construction

def test_initialize_shapes():
    model = tiny_model()
    assert model.dims == (4, 3, 2)
    prev = 6
    for level, k in zip(model.levels, (4, 3, 2)):
        assert level.encoder.weight.shape == (prev, k)
        assert level.embedding.shape == (3, k)
        assert level.decoder.weight.shape == (k, prev)
        assert not level.encoder.bias.any()
        assert not level.decoder.bias.any()
        prev = k


def test_initialize_rejects_non_decreasing_dims():
    with pytest.raises(ValueError):
        DenoiserStack.initialize(3, 6, dims=(4, 4, 2))
    with pytest.raises(ValueError):
        DenoiserStack.initialize(3, 6, dims=(2, 3, 4))


def test_initialize_embedding_range():
    model = DenoiserStack.initialize(50, 40, dims=(8, 4, 2), rng=make_rng(1))
    for level in model.levels:
        assert np.max(np.abs(level.embedding)) <= 0.01


def test_initialize_is_deterministic():
    a = tiny_model(seed=5)
    b = tiny_model(seed=5)
    for pa, pb in zip(a.parameters().values(), b.parameters().values()):
        assert np.array_equal(pa, pb)


def test_parameters_order_is_stable():
    model = tiny_model()
    keys = list(model.parameters())
    assert keys == [
        f"{level}.{part}"
        for level in LEVELS
        for part in ("encoder.weight", "encoder.bias", "embedding",
                     "decoder.weight", "decoder.bias")
    ]


def test_parent_resolution():
    model = tiny_model()
    assert model.parent("mild").depth == 1
    assert model.parent("moderate").depth == 2
    assert model.parent("strong").depth == 3
    with pytest.raises(ValueError):
        model.parent("extreme")


# ------------------------------------------------------------ forward paths

def test_encode_level_zero_parameters_yield_half():
    model = tiny_model()
    level = model.levels[0]
    level.encoder.weight[:] = 0.0
    level.embedding[:] = 0.0
    out = encode_level(level, 0, np.zeros(6))
    assert np.allclose(out, 0.5, atol=1e-15)


def test_encode_level_matches_composed_oracle():
    model = tiny_model(seed=2)
    level = model.levels[0]
    rng = make_rng(11)
    x = (rng.random(6) < 0.5).astype(float)
    expected = sigmoid(dense_forward(level.encoder, x) + level.embedding[1])
    assert np.max(np.abs(encode_level(level, 1, x) - expected)) < 1e-12


def test_encode_level_embedding_distinguishes_users():
    model = tiny_model(seed=3)
    x = np.ones(6)
    a = encode_level(model.levels[0], 0, x)
    b = encode_level(model.levels[0], 2, x)
    assert not np.allclose(a, b)


def test_encode_level_user_out_of_range():
    model = tiny_model()
    with pytest.raises(IndexError):
        encode_level(model.levels[0], 7, np.zeros(6))


def test_decode_level_matches_composed_oracle():
    model = tiny_model(seed=4)
    level = model.levels[0]
    rng = make_rng(12)
    code = rng.random(4)
    expected = sigmoid(dense_forward(level.decoder, code))
    assert np.max(np.abs(decode_level(level, code) - expected)) < 1e-12


def test_parent_forward_shapes_and_range():
    model = tiny_model(seed=5)
    x = np.ones(6)
    for name in PARENTS:
        out = parent_forward(model, name, 0, x)
        assert out.shape == (6,)
        assert np.all((out > 0) & (out < 1))


def test_parent_forward_matches_manual_chain():
    model = tiny_model(seed=6)
    rng = make_rng(13)
    x = (rng.random(6) < 0.5).astype(float)
    user = 2

    z1 = encode_level(model.levels[0], user, x)
    z2 = encode_level(model.levels[1], user, z1)
    z3 = encode_level(model.levels[2], user, z2)

    mild = decode_level(model.levels[0], z1)
    moderate = decode_level(model.levels[0], decode_level(model.levels[1], z2))
    strong = decode_level(
        model.levels[0],
        decode_level(model.levels[1], decode_level(model.levels[2], z3)))

    assert np.max(np.abs(parent_forward(model, "mild", user, x) - mild)) < 1e-12
    assert np.max(np.abs(parent_forward(model, "moderate", user, x) - moderate)) < 1e-12
    assert np.max(np.abs(parent_forward(model, "strong", user, x) - strong)) < 1e-12


def test_parent_forward_batched_matches_per_row():
    model = tiny_model(seed=7)
    rng = make_rng(14)
    users = np.array([0, 2, 1])
    xs = (rng.random((3, 6)) < 0.5).astype(float)
    batched = parent_forward(model, "strong", users, xs)
    for i in range(3):
        single = parent_forward(model, "strong", int(users[i]), xs[i])
        assert np.max(np.abs(batched[i] - single)) < 1e-12


def test_parents_share_storage():
    model = tiny_model(seed=8)
    x = np.ones(6)
    before = [parent_forward(model, name, 0, x) for name in PARENTS]
    model.levels[0].encoder.weight[0, 0] += 0.5
    after = [parent_forward(model, name, 0, x) for name in PARENTS]
    for b, a in zip(before, after):
        assert not np.allclose(b, a)


def test_trace_agrees_with_forward():
    model = tiny_model(seed=9)
    rng = make_rng(15)
    users = np.array([0, 1])
    xs = (rng.random((2, 6)) < 0.5).astype(float)
    for name in PARENTS:
        out, trace = parent_forward_trace(model, name, users, xs)
        assert np.array_equal(out, parent_forward(model, name, users, xs))
        assert trace is not None


# ------------------------------------------------------------ backward

def test_parent_backward_matches_finite_differences():
    model = tiny_model(seed=10)
    rng = make_rng(16)
    users = np.array([0, 2])
    xs = (rng.random((2, 6)) < 0.5).astype(float)
    projection = rng.normal(size=(2, 6))

    for name in PARENTS:
        grads = zero_gradients(model)
        parent_backward(model, name, users, xs, projection, grads=grads)
        params = model.parameters()
        for key, param in params.items():
            flat = param.ravel()

            def loss_of(vec, key=key, param=param):
                saved = param.copy()
                param[:] = vec.reshape(param.shape)
                value = float(np.sum(parent_forward(model, name, users, xs) * projection))
                param[:] = saved
                return value

            numeric = fd_gradient(loss_of, flat.copy())
            analytic = grads[key].ravel()
            touched = analytic.any() or numeric.any()
            if not touched:
                continue
            assert max_relative_error(analytic, numeric) < 1e-4, (name, key)


def test_parent_backward_untouched_levels_get_zero_gradient():
    model = tiny_model(seed=11)
    users = np.array([0])
    xs = np.ones((1, 6))
    grads = zero_gradients(model)
    parent_backward(model, "mild", users, xs, np.ones((1, 6)), grads=grads)
    for key in grads:
        if key.startswith(("medium.", "small.")):
            assert not grads[key].any(), key
        else:
            assert grads[key].any(), key


# ------------------------------------------------------------ counting

def test_count_parameters_minimal_example():
    # One user, two items, single level of width one:
    # encoder 2x1 + embedding 1x1 + bias 1 + decoder 1x2 + bias 2 = 8
    assert count_parameters(1, 2, dims=(1,)) == 8


def test_count_parameters_matches_live_model():
    model = tiny_model()
    total = sum(p.size for p in model.parameters().values())
    assert count_parameters(3, 6, dims=(4, 3, 2)) == total


def test_count_parameters_gating_term():
    base = count_parameters(3, 6, dims=(4, 3, 2))
    with_gate = count_parameters(3, 6, dims=(4, 3, 2), include_gating=True)
    assert with_gate - base == 2 * 6 * 3
    gp = GatingParams.zeros(6, 3, 2)
    assert with_gate - base == sum(p.size for p in gp.parameters().values())


@settings(deadline=None, max_examples=50)
@given(num_users=st.integers(1, 40), num_items=st.integers(1, 40),
       dims=st.lists(st.integers(1, 30), min_size=1, max_size=4, unique=True))
def test_count_parameters_matches_loop_oracle(num_users, num_items, dims):
    dims = tuple(sorted(dims, reverse=True))
    total = 0
    prev = num_items
    for width in dims:
        total += prev * width          # encoder weight
        total += width                 # encoder bias
        total += num_users * width     # per-level user embedding
        total += width * prev          # decoder weight
        total += prev                  # decoder bias
        prev = width
    assert count_parameters(num_users, num_items, dims=dims) == total


def test_initialize_rejects_wrong_level_count():
    with pytest.raises(ValueError):
        DenoiserStack.initialize(3, 9, dims=(4, 3, 2, 1))
    with pytest.raises(ValueError):
        DenoiserStack.initialize(3, 9, dims=(4, 3))


def test_count_parameters_published_totals():
    assert count_parameters(44784, 1020) == 8_695_336
    assert count_parameters(943, 1682) == 623_362
    assert count_parameters(943, 1682, include_gating=True) == 633_454


def test_parameter_breakdown_sums_to_total():
    breakdown = parameter_breakdown(943, 1682)
    per_level = sum(breakdown[name] for name in LEVELS)
    assert per_level == breakdown["total_without_gating"]
    assert breakdown["total_with_gating"] == per_level + breakdown["gating"]


# ------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip_without_gating(tmp_path):
    model = tiny_model(seed=12)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    loaded, gating = load_checkpoint(path)
    assert gating is None
    for a, b in zip(model.parameters().values(), loaded.parameters().values()):
        assert np.array_equal(a, b)


def test_checkpoint_round_trip_with_gating(tmp_path):
    model = tiny_model(seed=13)
    gating = GatingParams.zeros(6, 3, 2)
    gating.w_gate[:] = make_rng(17).normal(size=gating.w_gate.shape)
    path = tmp_path / "g.ckpt"
    save_checkpoint(path, model, gating)
    loaded_model, loaded_gating = load_checkpoint(path)
    assert loaded_gating is not None
    assert loaded_gating.k == 2
    assert np.array_equal(loaded_gating.w_gate, gating.w_gate)
    assert np.array_equal(loaded_gating.w_noise, gating.w_noise)
    for a, b in zip(model.parameters().values(), loaded_model.parameters().values()):
        assert np.array_equal(a, b)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    model = tiny_model(seed=14)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, model)
    save_checkpoint(p2, model)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    model = tiny_model(seed=15)
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, model)
    blob = path.read_bytes()
    path.write_bytes(blob[:-16])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_trailing_garbage(tmp_path):
    model = tiny_model(seed=16)
    path = tmp_path / "g.ckpt"
    save_checkpoint(path, model)
    path.write_bytes(path.read_bytes() + bytes(8))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
