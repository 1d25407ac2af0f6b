import numpy as np
import pytest

from shapefit import autodiff as ad
from shapefit.errors import NumericError, StructuralError
from shapefit.rng import substream

from oracles import fd_grad_vector, fd_spatial_grad, rel_err


def tiny_net(seed=0, sizes=(3, 4, 1), omega0=30.0):
    return ad.siren_init(sizes, substream(seed, "net"), omega0=omega0)


def test_identity_linear_layer():
    net = ad.MLPParams([np.array([[1.0, 0, 0]])], [np.zeros(1)], ("linear",))
    out = ad.eval_with_spatial_grad(net, np.array([0.3, 0.0, 0.0]))
    assert out.value == pytest.approx(0.3, abs=0)
    np.testing.assert_allclose(out.spatial_grad, [1.0, 0.0, 0.0])


def test_sine_layer_at_zero():
    net = ad.MLPParams([np.array([[1.0, 0, 0]])], [np.zeros(1)], ("sine",), omega0=30.0)
    out = ad.eval_with_spatial_grad(net, np.zeros(3))
    # sin(30 * w.x) at x=0: value 0, gradient 30 * w
    assert out.value == 0.0
    np.testing.assert_allclose(out.spatial_grad, [30.0, 0.0, 0.0], atol=1e-14)


def test_spatial_grad_matches_fd_random_points():
    net = tiny_net(1, sizes=(3, 8, 8, 1))
    rng = substream(2, "points")
    pts = rng.uniform(-1, 1, size=(100, 3))
    for x in pts:
        got = ad.eval_with_spatial_grad(net, x).spatial_grad
        want = fd_spatial_grad(lambda p: float(ad.forward(net, p)[0]), x)
        assert rel_err(got, want) < 1e-4


def test_forward_batched_matches_single():
    net = tiny_net(3)
    rng = substream(4, "pts")
    pts = rng.uniform(-1, 1, size=(17, 3))
    batch = ad.forward(net, pts)
    singles = np.stack([ad.forward(net, p) for p in pts])
    # BLAS may round differently per batch shape; agreement to ~1 ulp is enough
    np.testing.assert_allclose(batch, singles, rtol=1e-14, atol=1e-16)


def test_dimension_mismatch_raises():
    net = tiny_net(5)
    with pytest.raises(StructuralError):
        ad.eval_with_spatial_grad(net, np.zeros(4))


def test_determinism_bit_identical():
    net = tiny_net(6)
    x = np.array([0.1, -0.2, 0.3])
    a = ad.eval_with_spatial_grad(net, x)
    b = ad.eval_with_spatial_grad(net, x)
    assert a.value == b.value
    assert np.array_equal(a.spatial_grad, b.spatial_grad)


def _spec_loss_value(net, spec, batch, latents=()):
    """Recompute the LossSpec scalar with plain forward passes (no engine)."""
    total = 0.0
    y = ad.forward(net, batch)[:, 0]
    if spec.w_value_l1:
        t = spec.targets if spec.targets is not None else np.zeros_like(y)
        total += spec.w_value_l1 * np.mean(np.abs(y - t))
    if spec.w_grad_alignment or spec.w_eikonal:
        grads = np.stack(
            [fd_spatial_grad(lambda p: float(ad.forward(net, p)[0]), x, h=1e-6) for x in batch]
        )
        if spec.w_grad_alignment:
            cos = np.sum(grads * spec.normals, axis=1) / np.linalg.norm(grads, axis=1)
            total += spec.w_grad_alignment * np.mean(1.0 - cos)
        if spec.w_eikonal:
            total += spec.w_eikonal * np.mean(np.abs(np.linalg.norm(grads, axis=1) - 1.0))
    if spec.w_spike:
        total += spec.w_spike * np.mean(np.exp(-spec.spike_delta * np.abs(y)))
    for z in latents:
        total += spec.w_latent * np.linalg.norm(z)
    return total


def test_pure_latent_term_gradient():
    net = tiny_net(7)
    # zero out the final layer so field terms vanish identically
    net.weights[-1][:] = 0.0
    net.biases[-1][:] = 0.0
    z = np.zeros(8)
    z[0] = 1.0
    spec = ad.LossSpec(w_value_l1=1.0, w_latent=1.0)
    bundle = ad.loss_and_grads([net], [z], spec, np.zeros((5, 3)))
    assert bundle.loss == pytest.approx(1.0)
    np.testing.assert_allclose(bundle.latent_grads[0], z)


def test_param_grads_match_fd():
    net = tiny_net(8, sizes=(3, 4, 1))
    assert net.n_params() < 200
    rng = substream(9, "batch")
    batch = rng.uniform(-0.8, 0.8, size=(12, 3))
    normals = rng.standard_normal((12, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    targets = rng.uniform(-0.3, 0.3, size=12)
    spec = ad.LossSpec(
        w_value_l1=2.0,
        targets=targets,
        w_grad_alignment=0.7,
        normals=normals,
        w_eikonal=1.3,
        w_spike=0.5,
        spike_delta=10.0,
    )
    bundle = ad.loss_and_grads([net], [], spec, batch)
    got = ad.pack_params(bundle.param_grads[0].weights, bundle.param_grads[0].biases)

    base = ad.pack_params(net.weights, net.biases)

    def loss_of(vec):
        w, b = ad.unpack_params(vec, net)
        probe = ad.MLPParams(w, b, net.activations, net.omega0)
        return ad.loss_and_grads([probe], [], spec, batch).loss

    want = fd_grad_vector(loss_of, base, h=1e-6)
    assert rel_err(got, want, floor=1e-6) < 1e-3


def test_eikonal_exact_unit_field():
    # field psi(x) = n.x with ||n|| = 1: eikonal loss and all grads vanish
    n = np.array([[0.6, 0.8, 0.0]])
    net = ad.MLPParams([n], [np.zeros(1)], ("linear",))
    spec = ad.LossSpec(w_eikonal=1.0)
    batch = substream(10, "b").uniform(-1, 1, (20, 3))
    bundle = ad.loss_and_grads([net], [], spec, batch)
    assert bundle.loss == 0.0
    assert np.all(bundle.param_grads[0].weights[0] == 0.0)
    assert np.all(bundle.param_grads[0].biases[0] == 0.0)


def test_loss_linearity():
    net = tiny_net(11)
    batch = substream(12, "b").uniform(-1, 1, (10, 3))
    s1 = ad.LossSpec(w_value_l1=1.0)
    s2 = ad.LossSpec(w_eikonal=1.0)
    a, b = 0.37, 2.5
    combined = ad.LossSpec(w_value_l1=a, w_eikonal=b)
    b1 = ad.loss_and_grads([net], [], s1, batch)
    b2 = ad.loss_and_grads([net], [], s2, batch)
    bc = ad.loss_and_grads([net], [], combined, batch)
    want = a * b1.loss + b * b2.loss
    assert rel_err(bc.loss, want, floor=1e-12) < 1e-10
    for k in range(net.n_layers):
        want_w = a * b1.param_grads[0].weights[k] + b * b2.param_grads[0].weights[k]
        assert rel_err(bc.param_grads[0].weights[k], want_w, floor=1e-12) < 1e-10


def test_loss_value_matches_plain_recomputation():
    net = tiny_net(13, sizes=(3, 6, 1))
    rng = substream(14, "b")
    batch = rng.uniform(-1, 1, (9, 3))
    normals = rng.standard_normal((9, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    spec = ad.LossSpec(
        w_value_l1=1.0, w_grad_alignment=1.0, normals=normals, w_eikonal=1.0,
        w_spike=1.0, spike_delta=20.0,
    )
    bundle = ad.loss_and_grads([net], [], spec, batch)
    want = _spec_loss_value(net, spec, batch)
    assert rel_err(bundle.loss, want, floor=1e-9) < 1e-6


def test_non_finite_input_diagnostics():
    net = tiny_net(15)
    spec = ad.LossSpec(w_value_l1=1.0, targets=np.array([np.nan, 0.0]))
    with pytest.raises(NumericError, match="value_l1.*sample index 0"):
        ad.loss_and_grads([net], [], spec, np.zeros((2, 3)))


def test_relu_net_grads_match_fd():
    rng = substream(16, "relu")
    net = ad.MLPParams(
        [rng.standard_normal((5, 3)), rng.standard_normal((1, 5))],
        [rng.standard_normal(5), rng.standard_normal(1)],
        ("relu", "linear"),
    )
    batch = rng.uniform(-1, 1, (8, 3)) + 0.05  # keep away from relu kinks
    spec = ad.LossSpec(w_value_l1=1.0)
    bundle = ad.loss_and_grads([net], [], spec, batch)
    got = ad.pack_params(bundle.param_grads[0].weights, bundle.param_grads[0].biases)

    def loss_of(vec):
        w, b = ad.unpack_params(vec, net)
        probe = ad.MLPParams(w, b, net.activations, net.omega0)
        return ad.loss_and_grads([probe], [], spec, batch).loss

    want = fd_grad_vector(loss_of, ad.pack_params(net.weights, net.biases), h=1e-6)
    assert rel_err(got, want, floor=1e-6) < 1e-3


def test_backward_input_gradient():
    # dL/dx from backward must match finite differences of the loss in x
    net = tiny_net(17, sizes=(3, 6, 1))
    x = np.array([0.2, -0.4, 0.1])

    y, jac, cache = ad.forward_aug(net, x[None, :])
    gy = np.ones((1, 1))
    _, gx, _ = ad.backward(net, cache, gy)
    want = fd_spatial_grad(lambda p: float(ad.forward(net, p)[0]), x)
    assert rel_err(gx[0], want) < 1e-4
    # and it equals the tracked spatial jacobian
    assert rel_err(gx[0], jac[0, 0]) < 1e-12


def test_jacobian_chain_through_input_jacobian():
    # feeding jac_in = A must produce jac = (dPsi/dx) @ A
    net = tiny_net(18, sizes=(3, 5, 1))
    rng = substream(19, "A")
    a_mat = rng.standard_normal((3, 3))
    x = rng.uniform(-1, 1, (4, 3))
    y0, jac0, _ = ad.forward_aug(net, x)
    y1, jac1, _ = ad.forward_aug(net, x, jac_in=np.broadcast_to(a_mat, (4, 3, 3)).copy())
    np.testing.assert_array_equal(y0, y1)
    want = np.einsum("nok,kj->noj", jac0, a_mat)
    assert rel_err(jac1, want, floor=1e-12) < 1e-12


def test_adam_moves_toward_minimum():
    params = {"x": np.array([4.0])}
    opt = ad.Adam(lr=0.1)
    for _ in range(200):
        grads = {"x": 2.0 * params["x"]}
        opt.step(params, grads)
    assert abs(params["x"][0]) < 0.1


def test_pack_unpack_roundtrip():
    net = tiny_net(20, sizes=(3, 4, 2))
    vec = ad.pack_params(net.weights, net.biases)
    w, b = ad.unpack_params(vec, net)
    for w0, w1 in zip(net.weights, w):
        np.testing.assert_array_equal(w0, w1)
    for b0, b1 in zip(net.biases, b):
        np.testing.assert_array_equal(b0, b1)
