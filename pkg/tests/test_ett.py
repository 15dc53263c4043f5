"""Temporal transformer: embedding, attention algebra, residual map, export."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttsn.ett import (
    EttConfig,
    EttParams,
    add_positional,
    attention_map,
    embed_frames,
    ett_forward,
    export_attention_maps,
    inverse_transform,
    relation_matrix,
    write_pgm,
)
from ttsn.kernel import (
    ConfigError,
    DimensionError,
    Parameter,
    backward,
    constant,
    matmul,
    mul,
    softmax_rows,
    sum_all,
    variable,
)

from .gradcheck import assert_gradients_match


def tiny_config(**overrides):
    base = dict(frames=2, channels=2, height=2, width=2, hidden_dim=2, embed_channels=1)
    base.update(overrides)
    return EttConfig(**base)


def make_params(config, seed=0):
    return EttParams.init(config, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_rejects_oversized_hidden_dim():
    with pytest.raises(ConfigError):
        EttConfig(frames=2, channels=1, height=2, width=2, hidden_dim=2)  # 4*2 > 4


def test_config_rejects_hidden_dim_below_frame_count():
    with pytest.raises(ConfigError):
        EttConfig(frames=8, channels=8, height=8, width=8, hidden_dim=4)


def test_config_rejects_non_positive_fields():
    with pytest.raises(ConfigError):
        EttConfig(frames=0, channels=8, height=8, width=8, hidden_dim=8)


# ---------------------------------------------------------------------------
# frame embedding
# ---------------------------------------------------------------------------

def test_embed_frames_shape_contract():
    config = EttConfig(frames=8, channels=3, height=32, width=32, hidden_dim=64)
    params = make_params(config)
    x = constant(np.random.default_rng(1).normal(size=(8, 3, 32, 32)))
    assert embed_frames(x, params, config).value.shape == (8, 64)


def test_embed_frames_zero_weights_gives_bias_rows():
    config = tiny_config()
    params = make_params(config)
    params.embed_conv.node.value[...] = 0.0
    params.embed_b.node.value[...] = np.arange(config.hidden_dim)
    x = constant(np.random.default_rng(2).normal(size=(2, 2, 2, 2)))
    tokens = embed_frames(x, params, config).value
    np.testing.assert_allclose(tokens, np.tile(np.arange(config.hidden_dim), (2, 1)),
                               atol=1e-12)


def test_embed_frames_is_permutation_equivariant():
    config = EttConfig(frames=4, channels=2, height=4, width=4, hidden_dim=4)
    params = make_params(config, seed=3)
    frames = np.random.default_rng(4).normal(size=(4, 2, 4, 4))
    perm = np.array([2, 0, 3, 1])
    base = embed_frames(constant(frames), params, config).value
    permuted = embed_frames(constant(frames[perm]), params, config).value
    np.testing.assert_allclose(permuted, base[perm], atol=1e-12)


def test_embed_frames_wrong_dims():
    config = tiny_config()
    with pytest.raises(DimensionError):
        embed_frames(constant(np.zeros((2, 3, 2, 2))), make_params(config), config)


# ---------------------------------------------------------------------------
# positional encodings
# ---------------------------------------------------------------------------

def test_add_positional_zero_is_identity():
    t = constant(np.random.default_rng(5).normal(size=(3, 4)))
    out = add_positional(t, constant(np.zeros((3, 4))))
    np.testing.assert_array_equal(out.value, t.value)


def test_three_streams_are_independent_parameters():
    config = tiny_config()
    params = make_params(config, seed=6)
    pes = [params.pe_alpha, params.pe_beta, params.pe_gamma]
    assert len({id(p.node) for p in pes}) == 3
    t = constant(np.zeros((config.frames, config.hidden_dim)))
    outs = [add_positional(t, p).value for p in pes]
    assert not np.array_equal(outs[0], outs[1])
    assert not np.array_equal(outs[1], outs[2])


def test_positional_gradient_is_ones():
    pe = Parameter("pe", np.random.default_rng(7).normal(size=(3, 4)))
    t = constant(np.random.default_rng(8).normal(size=(3, 4)))
    backward(sum_all(add_positional(t, pe)))
    np.testing.assert_array_equal(pe.grad, np.ones((3, 4)))
    pe.node.zero_grad()
    assert_gradients_match(lambda: sum_all(add_positional(t, pe)), [pe])


# ---------------------------------------------------------------------------
# relation matrix
# ---------------------------------------------------------------------------

def test_relation_matrix_zero_lambda():
    t = constant(np.random.default_rng(9).normal(size=(3, 5)))
    z = relation_matrix(t, t, constant(0.0))
    np.testing.assert_array_equal(z.value, np.zeros((3, 3)))


def test_relation_matrix_identity_tokens():
    eye = constant(np.eye(3))
    z = relation_matrix(eye, eye, constant(1.0))
    np.testing.assert_array_equal(z.value, np.eye(3))


def test_relation_matrix_hand_example():
    t_alpha = constant([[1.0, 0.0], [0.0, 2.0]])
    t_beta = constant([[1.0, 1.0], [2.0, 0.0]])
    z = relation_matrix(t_alpha, t_beta, constant(0.5))
    np.testing.assert_allclose(z.value, [[0.5, 1.0], [1.0, 0.0]], atol=1e-12)


def test_scaling_alpha_and_inverse_lambda_leaves_z_unchanged():
    rng = np.random.default_rng(10)
    t_alpha = constant(rng.normal(size=(4, 6)))
    t_beta = constant(rng.normal(size=(4, 6)))
    k = 3.7
    z1 = relation_matrix(t_alpha, t_beta, constant(0.9))
    scaled_alpha = constant(t_alpha.value * k)
    z2 = relation_matrix(scaled_alpha, t_beta, constant(0.9 / k))
    np.testing.assert_allclose(z1.value, z2.value, atol=1e-9)


# ---------------------------------------------------------------------------
# attention map
# ---------------------------------------------------------------------------

def test_attention_map_near_identity_weights():
    config = tiny_config()
    params = make_params(config, seed=11)
    t_gamma = constant(np.random.default_rng(12).normal(size=(2, 2)))
    z = constant(1e6 * np.eye(2))  # softmax saturates to the identity
    out = attention_map(z, t_gamma, params, config)
    direct = inverse_transform(t_gamma, params, config)
    np.testing.assert_allclose(out.value, direct.value, atol=1e-9)


def test_attention_map_uniform_collapse():
    config = tiny_config(frames=3, hidden_dim=3, channels=3, height=2, width=2)
    params = make_params(config, seed=13)
    rng = np.random.default_rng(14)
    t_gamma_val = rng.normal(size=(3, 3))
    z = relation_matrix(constant(rng.normal(size=(3, 3))),
                        constant(rng.normal(size=(3, 3))), constant(0.0))
    out = attention_map(z, constant(t_gamma_val), params, config)
    mean_token = np.tile(t_gamma_val.mean(axis=0), (3, 1))
    direct = inverse_transform(constant(mean_token), params, config)
    np.testing.assert_allclose(out.value, direct.value, atol=1e-9)
    for f in range(1, 3):
        np.testing.assert_allclose(out.value[f], out.value[0], atol=1e-9)


def test_attention_map_output_shape_matches_frame_slice():
    config = tiny_config(frames=3, hidden_dim=3, channels=2, height=3, width=2)
    params = make_params(config, seed=15)
    rng = np.random.default_rng(16)
    z = constant(rng.normal(size=(3, 3)))
    out = attention_map(z, constant(rng.normal(size=(3, 3))), params, config)
    assert out.value.shape == (3, 2, 3, 2)


def test_attended_tokens_stay_in_convex_hull():
    rng = np.random.default_rng(17)
    z = constant(rng.normal(size=(5, 5)))
    t_gamma = constant(rng.normal(size=(5, 7)))
    mixed = matmul(softmax_rows(z), t_gamma).value
    lo = t_gamma.value.min(axis=0) - 1e-12
    hi = t_gamma.value.max(axis=0) + 1e-12
    assert (mixed >= lo).all() and (mixed <= hi).all()


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

def test_ett_forward_residual_identity():
    config = tiny_config(frames=3, hidden_dim=3, channels=2, height=2, width=3)
    params = make_params(config, seed=18)
    x = constant(np.random.default_rng(19).normal(size=(2, 3, 2, 2, 3)))
    augmented, a_star = ett_forward(x, params, config)
    assert a_star.value.shape == x.value.shape
    np.testing.assert_allclose(augmented.value - a_star.value, x.value, atol=1e-12)


def test_ett_forward_processes_clips_independently():
    config = tiny_config(frames=3, hidden_dim=3, channels=3, height=2, width=2)
    params = make_params(config, seed=20)
    x = np.random.default_rng(21).normal(size=(2, 3, 3, 2, 2))
    aug, a = ett_forward(constant(x), params, config)
    aug_swapped, a_swapped = ett_forward(constant(x[::-1]), params, config)
    np.testing.assert_allclose(aug_swapped.value, aug.value[::-1], atol=1e-12)
    np.testing.assert_allclose(a_swapped.value, a.value[::-1], atol=1e-12)


def test_ett_forward_deterministic():
    config = tiny_config(frames=3, hidden_dim=3, channels=3, height=2, width=2)
    params = make_params(config, seed=22)
    x = np.random.default_rng(23).normal(size=(1, 3, 3, 2, 2))
    out1 = ett_forward(constant(x), params, config)[0].value
    out2 = ett_forward(constant(x), params, config)[0].value
    assert out1.tobytes() == out2.tobytes()


def test_ett_forward_lambda_zero_collapses_attention_frames():
    config = tiny_config(frames=4, hidden_dim=4, channels=2, height=2, width=4)
    params = make_params(config, seed=24)
    params.lam.node.value[...] = 0.0
    x = constant(np.random.default_rng(25).normal(size=(2, 4, 2, 2, 4)))
    _, a_star = ett_forward(x, params, config)
    for b in range(2):
        for f in range(1, 4):
            np.testing.assert_allclose(a_star.value[b, f], a_star.value[b, 0], atol=1e-9)


def test_ett_forward_full_path_gradients():
    config = tiny_config()
    params = make_params(config, seed=26)
    x = variable(np.random.default_rng(27).normal(size=(1, 2, 2, 2, 2)))
    w = constant(np.random.default_rng(28).normal(size=(1, 2, 2, 2, 2)))

    def loss():
        augmented, _ = ett_forward(x, params, config)
        return sum_all(mul(augmented, w))

    err = assert_gradients_match(
        loss, [params.lam, params.pe_alpha, params.pe_beta, params.pe_gamma,
               params.embed_w, params.inv_w, params.embed_conv, params.inv_conv, x])
    assert err <= 1e-4


def test_ett_forward_scale_invariance_of_attention():
    # (k * T^alpha, lam / k) leaves the attention map unchanged end to end
    config = tiny_config(frames=3, hidden_dim=3, channels=3, height=2, width=2)
    params = make_params(config, seed=29)
    rng = np.random.default_rng(30)
    t_alpha = constant(rng.normal(size=(3, 3)))
    t_beta = constant(rng.normal(size=(3, 3)))
    t_gamma = constant(rng.normal(size=(3, 3)))
    k = 5.0
    a1 = attention_map(relation_matrix(t_alpha, t_beta, constant(0.6)),
                       t_gamma, params, config)
    a2 = attention_map(relation_matrix(constant(t_alpha.value * k), t_beta,
                                       constant(0.6 / k)), t_gamma, params, config)
    np.testing.assert_allclose(a1.value, a2.value, atol=1e-9)


@given(st.data())
@settings(max_examples=50, deadline=None)
def test_attention_shape_matches_input_over_random_configs(data):
    n = data.draw(st.integers(2, 4), label="frames")
    c = data.draw(st.integers(1, 3), label="channels")
    h = data.draw(st.integers(2, 4), label="height")
    w = data.draw(st.integers(2, 4), label="width")
    upper = (c * h * w) // 4
    if upper < n:
        c, h, w = 3, 4, 4  # guarantee room for the hidden dimension
        upper = (c * h * w) // 4
    l = data.draw(st.integers(n, min(upper, 8)), label="hidden_dim")
    ce = data.draw(st.integers(1, 2), label="embed_channels")
    b = data.draw(st.integers(1, 2), label="batch")
    config = EttConfig(frames=n, channels=c, height=h, width=w,
                       hidden_dim=l, embed_channels=ce)
    params = make_params(config, seed=31)
    x = constant(np.random.default_rng(32).normal(size=(b, n, c, h, w)))
    augmented, a_star = ett_forward(x, params, config)
    assert a_star.value.shape == x.value.shape
    assert augmented.value.shape == x.value.shape


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def test_write_pgm_format(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n4 3\n255\n")
    assert blob[len(b"P5\n4 3\n255\n"):] == img.tobytes()


def test_export_attention_maps_files_and_range(tmp_path):
    rng = np.random.default_rng(33)
    a_star = rng.normal(size=(1, 8, 4, 8, 8))
    written = export_attention_maps(a_star, tmp_path)
    assert len(written) == 8
    assert sorted(p.name for p in written) == [f"attn_b0_f{f}.pgm" for f in range(8)]
    for path in written:
        payload = np.frombuffer(path.read_bytes().split(b"\n", 3)[3], dtype=np.uint8)
        assert payload.min() == 0 and payload.max() == 255


def test_export_attention_maps_blended(tmp_path):
    rng = np.random.default_rng(34)
    a_star = rng.normal(size=(1, 2, 4, 8, 8))
    frames = rng.uniform(size=(1, 2, 3, 32, 32))
    written = export_attention_maps(a_star, tmp_path, frames=frames)
    assert len(written) == 2
    header = written[0].read_bytes().split(b"\n", 3)
    assert header[1] == b"32 32"
