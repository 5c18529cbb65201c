import numpy as np
import pytest
from hypothesis import given, strategies as st

from p2inn import jetad, nets
from p2inn.errors import (CheckpointLengthError, CheckpointParseError, CheckpointTruncatedError,
                          CheckpointVersionError, ConfigurationError)
from p2inn.jetad import Tape
from p2inn.nets import Params


def _manual_mlp_count(widths):
    return sum(i * o + o for i, o in zip(widths[:-1], widths[1:]))


def test_param_counts_exact():
    assert nets.count_params(nets.pinn()) == 10401
    assert nets.count_params(nets.pinn_p()) == 91651
    assert nets.count_params(nets.pinn_r()) == 10401


def test_param_counts_match_layer_arithmetic():
    assert nets.count_params(nets.large_pinn()) == _manual_mlp_count([2] + [143] * 5 + [1])
    p = nets.p2inn()
    enc_p = _manual_mlp_count([3, 150, 150, 150, 150])
    enc_c = _manual_mlp_count([2, 50, 50, 50])
    dec = _manual_mlp_count([200, 50, 50, 50, 50, 1])
    assert nets.count_params(p) == enc_p + enc_c + dec


@given(st.sampled_from(nets.VARIANTS), st.integers(0, 50))
def test_count_equals_init_length(variant, seed):
    spec = nets.default_spec(variant, 2, 3, hidden_dim=7, param_hidden_dim=5)
    assert nets.init_weights(spec, seed).theta.size == nets.count_params(spec)


def test_init_deterministic_and_zero_bias():
    a, b = nets.init_weights(nets.pinn(), 3), nets.init_weights(nets.pinn(), 3)
    np.testing.assert_array_equal(a.theta, b.theta)
    for s in a.slots.values():
        _, bias = a.layer(s.name)
        assert np.all(bias == 0)
        W, _ = a.layer(s.name)
        assert np.abs(W).max() <= np.sqrt(6 / (s.fan_in + s.fan_out))


def test_fan_in_init_bounds():
    w = nets.init_weights(nets.default_spec("PINN", init="fan_in"), 0)
    for s in w.slots.values():
        W, b = w.layer(s.name)
        lim = 1 / np.sqrt(s.fan_in)
        assert np.abs(W).max() <= lim and np.abs(b).max() <= lim and np.any(b != 0)


def test_bad_specs():
    with pytest.raises(ConfigurationError):
        nets.NetworkSpec("MLP")
    with pytest.raises(ConfigurationError):
        nets.NetworkSpec("P2INN", param_dim=0)
    with pytest.raises(ConfigurationError):
        nets.NetworkSpec("PINN", init="zeros")


def _plain_p2inn(w, pts, mu):
    spec = w.spec

    def mlp(h, names, last_linear):
        for i, n in enumerate(names):
            W, b = w.layer(n)
            h = h @ W.T + b
            if not (last_linear and i == len(names) - 1):
                h = np.tanh(h)
        return h

    hp = mlp(np.asarray(mu)[None], [f"p{i}" for i in range(spec.depth_p)], False)
    hc = mlp(pts, [f"c{i}" for i in range(spec.depth_c)], False)
    h = np.hstack([hc, np.repeat(hp, len(pts), axis=0)])
    return mlp(h, [f"g{i}" for i in range(spec.depth_g)], True)[:, 0]


def test_p2inn_split_first_layer_equals_concatenation(rng):
    w = nets.init_weights(nets.p2inn(hidden_dim=6, param_hidden_dim=5), 2)
    pts = rng.uniform(0, 6, size=(7, 2))
    mu = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(nets.predict(w, pts, mu), _plain_p2inn(w, pts, mu), rtol=1e-13, atol=1e-13)


def test_p2inn_mixed_mu_rows(rng):
    w = nets.init_weights(nets.p2inn(hidden_dim=6, param_hidden_dim=5), 2)
    pts = rng.uniform(0, 6, size=(6, 2))
    mus = np.array([[1.0, 0, 0], [0, 2.0, 5.0]])
    idx = np.array([0, 1, 1, 0, 1, 0])
    got = nets.predict(w, pts, mus, idx)
    for i in range(2):
        sel = idx == i
        np.testing.assert_allclose(got[sel], _plain_p2inn(w, pts[sel], mus[i]), rtol=1e-13, atol=1e-13)


def _fd_check(w, pt, mu, h=1e-4):
    tape = Tape()
    out = nets.network_output(Params(tape, w, trainable=False), pt, mu, first=(0, 1), second=(0, 1))
    f = lambda p: nets.predict(w, p, mu)  # noqa: E731
    for c in range(2):
        e = np.zeros(2)
        e[c] = h
        fp, f0, fm = f(pt + e), f(pt), f(pt - e)
        assert out.d1_along(c)[0, 0] == pytest.approx(((fp - fm) / (2 * h))[0], rel=1e-5, abs=1e-8)
        assert out.d2_along(c)[0, 0] == pytest.approx(((fp - 2 * f0 + fm) / h**2)[0], rel=1e-5, abs=1e-5)


def test_p2inn_jet_matches_finite_differences():
    _fd_check(nets.init_weights(nets.p2inn(), 7), np.array([[1.0, 0.5]]), np.array([1.0, 0.0, 0.0]))


def test_pinn_jet_matches_finite_differences():
    _fd_check(nets.init_weights(nets.pinn(), 7), np.array([[0.3, 0.7]]), None)


def test_pinn_r_skips_change_output(rng):
    a = nets.init_weights(nets.pinn(), 1)
    b = nets.NetworkWeights(nets.pinn_r(), a.theta.copy())
    pts = rng.uniform(size=(4, 2))
    assert not np.allclose(nets.predict(a, pts), nets.predict(b, pts))


def test_pinn_p_stacks_mu(rng):
    w = nets.init_weights(nets.pinn_p(hidden_dim=5), 0)
    pts = rng.uniform(size=(3, 2))
    mu = np.array([1.0, 2.0, 3.0])
    stacked = nets.NetworkWeights(nets.NetworkSpec("PINN", input_dim=5, hidden_dim=5), w.theta)
    np.testing.assert_allclose(nets.predict(w, pts, mu), nets.predict(stacked, np.hstack([pts, np.tile(mu, (3, 1))])))


def test_hidden_codes_shapes():
    w = nets.init_weights(nets.p2inn(), 0)
    hc = nets.hidden_codes(w, np.zeros((4, 2)), [1.0, 2.0, 3.0])
    assert hc.h_concat.shape == (4, 200)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    w = nets.init_weights(nets.p2inn(), 11)
    p = tmp_path / "m.ckpt"
    nets.save_checkpoint(w, p, {"seed": 11})
    back = nets.load_checkpoint(p)
    assert back.spec == w.spec
    np.testing.assert_array_equal(back.theta, w.theta)


def test_checkpoint_errors(tmp_path):
    w = nets.init_weights(nets.pinn(hidden_dim=3, layers=2), 0)
    p = tmp_path / "m.ckpt"
    nets.save_checkpoint(w, p)
    text = p.read_text()
    bad = tmp_path / "bad.ckpt"

    bad.write_text("")
    with pytest.raises(CheckpointParseError):
        nets.load_checkpoint(bad)
    bad.write_text(text.replace("format_version 1", "format_version 9"))
    with pytest.raises(CheckpointVersionError):
        nets.load_checkpoint(bad)
    bad.write_text("\n".join(text.splitlines()[:6]) + "\n")
    with pytest.raises(CheckpointTruncatedError):
        nets.load_checkpoint(bad)
    lines = text.splitlines()
    n = nets.count_params(w.spec)
    lines[3] = f"section weights {n - 1}"
    del lines[4]
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(CheckpointLengthError):
        nets.load_checkpoint(bad)
