import numpy as np
import pytest

import oracles
from csiunfold import numerics as nx
from csiunfold.codec import (
    PHI_FIXED, CheckpointError, CodecConfig, FeedbackVector, UnfoldingParams, decode, decode_graph,
    encode, init_params, load_params, load_params_bytes, orthonormal_rows, params_to_bytes, r_step,
    reconstruct, save_params, x_step,
)
from csiunfold.training import batch_loss
from csiunfold.transform import CsiMatrix, DegenerateInputError, Domain, vectorize

TR = Domain.ANGULAR_DELAY_TRUNCATED


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def tiny_cfg(**kw):
    base = dict(r_d=4, n_b=4, cr=0.25, n_iter=2, channels=4, seed=3)
    base.update(kw)
    return CodecConfig(**base)


def test_config_dims():
    cfg = CodecConfig()
    assert (cfg.n, cfg.m, cfg.n_rows) == (2048, 512, 511)
    assert CodecConfig(spherical=False).n_rows == 512
    assert CodecConfig(cr=1 / 32).m == 64
    with pytest.raises(ValueError):
        CodecConfig(r_d=1, n_b=1, cr=0.25)
    with pytest.raises(ValueError):
        CodecConfig(phi_mode="learned")


# --- encoder

def test_encode_selection_matrix():
    rng = np.random.default_rng(0)
    H = CsiMatrix(crandn(rng, 4, 4), TR)
    cfg = tiny_cfg()
    phi = np.eye(cfg.n)[: cfg.n_rows]
    fb = encode(H, phi)
    x = vectorize(H) / H.norm()
    np.testing.assert_array_equal(fb.y, x[: cfg.n_rows])
    assert fb.p == H.norm() and fb.dim == cfg.m


def test_encode_homogeneous():
    rng = np.random.default_rng(1)
    H = CsiMatrix(crandn(rng, 4, 4), TR)
    phi = rng.standard_normal((7, 32))
    a, b = encode(H, phi), encode(CsiMatrix(5.0 * H.data, TR), phi)
    np.testing.assert_allclose(b.y, a.y, atol=1e-13)
    assert abs(b.p - 5 * a.p) < 1e-12


def test_encode_bounded_by_top_singular_value():
    rng = np.random.default_rng(2)
    for _ in range(20):
        phi = rng.standard_normal((7, 32))
        fb = encode(CsiMatrix(crandn(rng, 4, 4), TR), phi)
        assert np.linalg.norm(fb.y) <= np.linalg.svd(phi, compute_uv=False)[0] + 1e-12


def test_encode_linear_in_unit_vector():
    rng = np.random.default_rng(3)
    phi = rng.standard_normal((7, 32))
    x1, x2 = rng.standard_normal(32), rng.standard_normal(32)
    np.testing.assert_allclose(phi @ (2 * x1 - 3 * x2), 2 * (phi @ x1) - 3 * (phi @ x2), atol=1e-12)


def test_encode_errors():
    with pytest.raises(DegenerateInputError):
        encode(CsiMatrix(np.zeros((4, 4)), TR), np.ones((7, 32)))
    with pytest.raises(ValueError):
        encode(CsiMatrix(np.ones((4, 4)), Domain.SPATIAL_FREQUENCY), np.ones((7, 32)))


def test_encode_nonspherical():
    rng = np.random.default_rng(4)
    H = CsiMatrix(crandn(rng, 4, 4), TR)
    phi = rng.standard_normal((8, 32))
    fb = encode(H, phi, spherical=False)
    assert fb.p is None
    np.testing.assert_allclose(fb.y, phi @ vectorize(H), atol=1e-12)


# --- r step

def test_r_step_examples():
    rng = np.random.default_rng(5)
    phi, x, y = rng.standard_normal((5, 12)), rng.standard_normal(12), rng.standard_normal(5)
    np.testing.assert_array_equal(r_step(x, y, phi, 0.0).data, x)
    np.testing.assert_allclose(r_step(x, phi @ x, phi, 0.7).data, x, atol=1e-14)
    expect = x - 0.3 * oracles.matmul(phi.T, oracles.matmul(phi, x[:, None]) - y[:, None])[:, 0]
    assert oracles.rel_err(r_step(x, y, phi, 0.3).data, expect) < 1e-12
    with pytest.raises(nx.DimensionError):
        r_step(x[:-1], y, phi, 0.3)


# --- x step

def _xstep_oracle(r, it, r_d, n_b):
    img = r.reshape(2, r_d, n_b)
    w = {k: getattr(it, k).data for k in it.FIELDS}
    m = oracles.conv2d(img, w["w_m"])
    h = oracles.conv2d(oracles.relu(oracles.conv2d(m, w["w_h1"])), w["w_h2"])
    s = oracles.soft(h, float(w["theta"]))
    t = oracles.conv2d(oracles.relu(oracles.conv2d(s, w["w_t1"])), w["w_t2"])
    return r + oracles.conv2d(t, w["w_b"]).ravel()


def test_x_step_matches_composed_oracle():
    params = init_params(tiny_cfg())
    rng = np.random.default_rng(6)
    for it in params.iters:
        it.theta.data = np.array(0.05)
        r = rng.standard_normal(32)
        assert oracles.rel_err(x_step(r, it, 4, 4).x.data, _xstep_oracle(r, it, 4, 4)) < 1e-10


def test_x_step_zero_b_is_identity():
    it = init_params(tiny_cfg()).iters[0]
    it.w_b.data[:] = 0.0
    r = np.random.default_rng(7).standard_normal(32)
    np.testing.assert_array_equal(x_step(r, it, 4, 4).x.data, r)


def test_x_step_huge_threshold_is_identity():
    it = init_params(tiny_cfg()).iters[0]
    it.theta.data = np.array(1e9)
    r = np.random.default_rng(8).standard_normal(32)
    np.testing.assert_array_equal(x_step(r, it, 4, 4).x.data, r)


def test_x_step_shape_error():
    it = init_params(tiny_cfg()).iters[0]
    with pytest.raises(nx.DimensionError):
        x_step(np.ones(30), it, 4, 4)


# --- decode

def test_decode_one_step_closed_form():
    cfg = tiny_cfg(n_iter=1, phi_mode=PHI_FIXED)
    params = init_params(cfg)
    params.iters[0].rho.data = np.array(1.0)
    params.iters[0].w_b.data[:] = 0.0
    H = CsiMatrix(crandn(np.random.default_rng(9), 4, 4), TR)
    fb = encode(H, params.phi.data)
    Hh, trace = decode(fb, params)
    phi = params.phi.data
    expect = fb.p * (phi.T @ fb.y)
    np.testing.assert_allclose(vectorize(Hh), expect, atol=1e-12)
    assert len(trace.rs) == 1 and len(trace.steps) == 1


def test_decode_p_is_pure_scale():
    params = init_params(tiny_cfg())
    y = np.random.default_rng(10).standard_normal(params.cfg.n_rows)
    a, _ = decode(FeedbackVector(y, 1.0), params)
    b, _ = decode(FeedbackVector(y, 2.0), params)
    c, _ = decode(FeedbackVector(y, 0.37), params)
    assert np.array_equal(b.data, 2.0 * a.data)
    np.testing.assert_array_equal(c.data, 0.37 * a.data)


def test_decode_errors():
    params = init_params(tiny_cfg())
    with pytest.raises(nx.DimensionError):
        decode(FeedbackVector(np.ones(5), 1.0), params)
    with pytest.raises(ValueError):
        decode(FeedbackVector(np.ones(params.cfg.n_rows)), params)


def test_reconstruct_batches_agree():
    params = init_params(tiny_cfg())
    X = crandn(np.random.default_rng(11), 9, 4, 4)
    a = reconstruct(X, params, batch_size=4)
    for k in (0, 5, 8):
        Hh, _ = decode(encode(CsiMatrix(X[k], TR), params.phi), params)
        np.testing.assert_allclose(a[k], Hh.data, rtol=1e-12, atol=1e-14)


# --- init

def test_init_deterministic_and_ranges():
    a, b = init_params(tiny_cfg()), init_params(tiny_cfg())
    for s, t in zip(a.all_tensors(), b.all_tensors()):
        assert np.array_equal(s.data, t.data)
    assert all(it.theta.data >= 0 for it in a.iters)
    assert all(float(it.rho.data) == 0.5 and float(it.theta.data) == 0.01 for it in a.iters)
    assert a.iters[0].w_m.shape == (4, 2, 3, 3) and a.iters[0].w_b.shape == (2, 4, 3, 3)
    c = init_params(tiny_cfg(seed=4))
    assert not np.array_equal(a.phi.data, c.phi.data)


def test_fixed_phi_orthonormal():
    p = init_params(CodecConfig(r_d=8, n_b=8, cr=0.25, n_iter=1, channels=2, phi_mode=PHI_FIXED))
    gram = p.phi.data @ p.phi.data.T
    assert np.abs(gram - np.eye(len(gram))).max() < 1e-10
    assert not p.phi.requires_grad and p.phi not in p.trainable()
    q = orthonormal_rows(5, 9, np.random.default_rng(0))
    assert np.abs(q @ q.T - np.eye(5)).max() < 1e-10


# --- gradient check on the full decoder

def test_full_decoder_gradient_check():
    cfg = tiny_cfg()
    params = init_params(cfg)
    rng = np.random.default_rng(12)
    for it in params.iters:
        it.theta.data = np.array(0.02)
    X = crandn(rng, 3, 4, 4)
    V = np.concatenate([X.real.reshape(3, -1), X.imag.reshape(3, -1)], axis=1)
    V /= np.linalg.norm(V, axis=1, keepdims=True)

    def loss():
        return batch_loss(params, V, gamma=0.01).total

    tensors = params.trainable()
    grads = [g.copy() for g in nx.backward(loss(), tensors)]
    worst = 0.0
    for p, g in zip(tensors, grads):
        fd = nx.numerical_grad(lambda: float(loss().data), p, eps=1e-6)
        scale = max(np.abs(fd).max(), np.abs(g).max(), 1e-12)
        worst = max(worst, np.abs(fd - g).max() / scale)
    assert worst < 1e-4, worst


# --- checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = init_params(tiny_cfg())
    params.meta["note"] = "x"
    path = tmp_path / "m.sptm"
    save_params(params, path)
    back = load_params(path)
    assert back.cfg == params.cfg and back.meta == params.meta
    for s, t in zip(params.all_tensors(), back.all_tensors()):
        assert s.data.tobytes() == t.data.tobytes()
    assert params_to_bytes(back) == path.read_bytes()


def test_checkpoint_errors():
    raw = params_to_bytes(init_params(tiny_cfg()))
    with pytest.raises(CheckpointError):
        load_params_bytes(raw[:10])
    with pytest.raises(CheckpointError):
        load_params_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_params_bytes(raw[:-3])


def test_copy_is_independent():
    params = init_params(tiny_cfg())
    other = params.copy()
    other.phi.data[0, 0] += 1.0
    assert params.phi.data[0, 0] != other.phi.data[0, 0]
    assert isinstance(other, UnfoldingParams)


def test_decode_graph_dims():
    params = init_params(tiny_cfg())
    with pytest.raises(nx.DimensionError):
        decode_graph(np.ones((2, 3)), params)
