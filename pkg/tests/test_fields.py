import numpy as np
import pytest

from shapefit import autodiff as ad
from shapefit import fields
from shapefit.errors import StructuralError
from shapefit.rng import substream

from oracles import fd_spatial_grad, rel_err


def small_prior(seed=0, latent_dim=8):
    return fields.init_prior(
        "sphere",
        latent_dim=latent_dim,
        template_hidden=(16, 16),
        deform_hidden=(12, 12),
        hyper_hidden=24,
        seed=seed,
    )


def test_template_zeroed_final_layer():
    prior = small_prior(1)
    prior.template.weights[-1][:] = 0.0
    prior.template.biases[-1][:] = 0.0
    out = fields.template_eval(prior, np.array([0.3, -0.2, 0.5]))
    assert out.value == 0.0
    np.testing.assert_array_equal(out.spatial_grad, np.zeros(3))


def test_template_gradient_matches_fd():
    prior = small_prior(2)
    rng = substream(3, "x")
    for _ in range(20):
        x = rng.uniform(-1, 1, 3)
        got = fields.template_eval(prior, x).spatial_grad
        want = fd_spatial_grad(lambda p: float(ad.forward(prior.template, p)[0]), x)
        assert rel_err(got, want) < 1e-4


def test_hyper_zero_latent_returns_biases():
    prior = small_prior(4)
    dw = fields.hyper_weights(prior, np.zeros(prior.latent_dim))
    # hidden biases are zero, so hyper(0) reduces to the final-layer bias,
    # which holds the layout's init weights
    for k in range(dw.n_layers):
        flat = ad.pack_params([dw.weights[k]], [dw.biases[k]])
        np.testing.assert_array_equal(flat, prior.hyper[k].biases[-1])


def test_hyper_deterministic():
    prior = small_prior(5)
    z = substream(6, "z").standard_normal(prior.latent_dim)
    a = fields.hyper_weights(prior, z)
    b = fields.hyper_weights(prior, z)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)


def test_hyper_latent_dim_mismatch():
    prior = small_prior(7)
    with pytest.raises(StructuralError):
        fields.hyper_weights(prior, np.zeros(prior.latent_dim + 1))


def test_hyper_lipschitz_perturbation_bound():
    prior = small_prior(8)
    rng = substream(9, "z")
    z = rng.standard_normal(prior.latent_dim)
    z2 = z.copy()
    z2[3] += 1e-6
    a = fields.hyper_weights(prior, z)
    b = fields.hyper_weights(prior, z2)
    for k, h in enumerate(prior.hyper):
        # operator-norm product bounds the relu-net Lipschitz constant
        lip = np.prod([np.linalg.norm(w, 2) for w in h.weights])
        diff = ad.pack_params([b.weights[k]], [b.biases[k]]) - ad.pack_params(
            [a.weights[k]], [a.biases[k]]
        )
        assert np.linalg.norm(diff) <= 1e-6 * lip + 1e-15


def test_deform_eval_zeroed_final_layer():
    prior = small_prior(10)
    dw = fields.hyper_weights(prior, np.zeros(prior.latent_dim))
    dw.weights[-1][:] = 0.0
    dw.biases[-1][:] = 0.0
    v, ds, jac = fields.deform_eval(dw, np.array([0.1, 0.2, 0.3]))
    np.testing.assert_array_equal(v, np.zeros(3))
    assert ds == 0.0
    np.testing.assert_array_equal(jac, np.zeros((3, 3)))


def test_deform_linear_layer_jacobian_exact():
    rng = substream(11, "A")
    a_mat = rng.standard_normal((3, 3))
    w = np.zeros((4, 3))
    w[:3] = a_mat
    net = ad.MLPParams([w], [np.zeros(4)], ("linear",))
    v, ds, jac = fields.deform_eval(net, rng.uniform(-1, 1, 3))
    np.testing.assert_allclose(jac, a_mat, atol=1e-15)


def test_deform_jacobian_matches_fd():
    prior = small_prior(12)
    z = substream(13, "z").standard_normal(prior.latent_dim) * 0.1
    dw = fields.hyper_weights(prior, z)
    x = np.array([0.2, -0.3, 0.4])
    _, _, jac = fields.deform_eval(dw, x)
    for i in range(3):
        want = fd_spatial_grad(lambda p: float(ad.forward(dw, p)[i]), x)
        assert rel_err(jac[i], want) < 1e-4


def test_instance_sdf_identity_when_deformation_zero():
    prior = small_prior(14)
    z = np.zeros(prior.latent_dim)
    # zero the final hyper biases for the last deform layer => v = 0, ds = 0
    prior.hyper[-1].biases[-1][:] = 0.0
    rng = substream(15, "x")
    for _ in range(10):
        x = rng.uniform(-1, 1, 3)
        inst = fields.instance_sdf(prior, z, x)
        temp = fields.template_eval(prior, x)
        assert inst.value == pytest.approx(temp.value, abs=1e-14)
        np.testing.assert_allclose(inst.spatial_grad, temp.spatial_grad, atol=1e-13)


def test_instance_sdf_constant_correction_shift():
    prior = small_prior(16)
    z = np.zeros(prior.latent_dim)
    prior.hyper[-1].biases[-1][:] = 0.0
    c = 0.37
    prior.hyper[-1].biases[-1][-1] = c  # final bias of delta_s output row
    x = np.array([0.15, 0.25, -0.1])
    inst = fields.instance_sdf(prior, z, x)
    temp = fields.template_eval(prior, x)
    assert inst.value == pytest.approx(temp.value + c, abs=1e-14)


def test_composed_gradient_matches_fd_many():
    prior = small_prior(17)
    rng = substream(18, "zx")
    deform, _ = fields.hyper_forward(prior, rng.standard_normal(prior.latent_dim) * 0.5)
    pts = rng.uniform(-0.9, 0.9, (100, 3))
    ev = fields.compose_forward(prior.template, deform, pts)
    for i in range(0, 100, 5):
        want = fd_spatial_grad(
            lambda p: float(fields.compose_value(prior.template, deform, p[None, :])[0]),
            pts[i],
        )
        assert rel_err(ev.grad_psi[i], want) < 1e-4


def test_compose_backward_matches_fd_on_params():
    # full composed loss: check gradients w.r.t. template, hyper and latent
    prior = small_prior(19, latent_dim=4)
    prior_small = fields.init_prior(
        "sphere", latent_dim=4, template_hidden=(5,), deform_hidden=(4,),
        hyper_hidden=6, seed=20,
    )
    prior = prior_small
    rng = substream(21, "pts")
    pts = rng.uniform(-0.8, 0.8, (7, 3))
    z0 = rng.standard_normal(4) * 0.5

    def full_loss(template, hyper_list, z):
        probe = fields.ShapePrior(
            "sphere", 4, template, prior.deform_layout, hyper_list, {}
        )
        deform, _ = fields.hyper_forward(probe, z)
        ev = fields.compose_forward(template, deform, pts)
        # touch every output path: psi, grad_psi, grad_template, jac_v, delta_s
        return (
            np.abs(ev.psi).mean()
            + np.abs(np.linalg.norm(ev.grad_psi, axis=1) - 1).mean()
            + (1 - ev.grad_template[:, 0]).mean()
            + np.sqrt((ev.jac_v**2).sum(axis=(1, 2))).mean()
            + np.abs(ev.delta_s).mean()
        )

    deform, h_caches = fields.hyper_forward(prior, z0)
    ev = fields.compose_forward(prior.template, deform, pts)
    n = pts.shape[0]
    d_psi = np.sign(ev.psi) / n
    gn = np.linalg.norm(ev.grad_psi, axis=1)
    d_grad_psi = (np.sign(gn - 1) / np.where(gn > 0, gn, 1))[:, None] * ev.grad_psi / n
    d_grad_template = np.zeros((n, 3))
    d_grad_template[:, 0] = -1.0 / n
    fro = np.sqrt((ev.jac_v**2).sum(axis=(1, 2)))
    d_jac_v = ev.jac_v / np.where(fro > 0, fro, 1)[:, None, None] / n
    d_delta_s = np.sign(ev.delta_s) / n
    t_grads, d_grads, _ = fields.compose_backward(
        prior.template, deform, ev,
        d_psi=d_psi, d_grad_psi=d_grad_psi, d_grad_template=d_grad_template,
        d_jac_v=d_jac_v, d_delta_s=d_delta_s,
    )
    h_grads, g_z = fields.hyper_backward(prior, h_caches, d_grads)

    # template params
    base_t = ad.pack_params(prior.template.weights, prior.template.biases)

    def loss_t(vec):
        w, b = ad.unpack_params(vec, prior.template)
        t = ad.MLPParams(w, b, prior.template.activations, prior.template.omega0)
        return full_loss(t, prior.hyper, z0)

    from oracles import fd_grad_vector

    want_t = fd_grad_vector(loss_t, base_t, h=1e-6)
    got_t = ad.pack_params(t_grads.weights, t_grads.biases)
    assert rel_err(got_t, want_t, floor=1e-6) < 1e-3

    # hyper params (first hyper net)
    base_h = ad.pack_params(prior.hyper[0].weights, prior.hyper[0].biases)

    def loss_h(vec):
        w, b = ad.unpack_params(vec, prior.hyper[0])
        h0 = ad.MLPParams(w, b, prior.hyper[0].activations, prior.hyper[0].omega0)
        return full_loss(prior.template, [h0] + prior.hyper[1:], z0)

    want_h = fd_grad_vector(loss_h, base_h, h=1e-6)
    got_h = ad.pack_params(h_grads[0].weights, h_grads[0].biases)
    assert rel_err(got_h, want_h, floor=1e-6) < 1e-3

    # latent
    def loss_z(vec):
        return full_loss(prior.template, prior.hyper, vec)

    want_z = fd_grad_vector(loss_z, z0, h=1e-6)
    assert rel_err(g_z, want_z, floor=1e-6) < 1e-3


def test_prior_checkpoint_roundtrip(tmp_path):
    prior = small_prior(22)
    rng = substream(23, "lat")
    prior.latents = {"a": rng.standard_normal(8), "b": rng.standard_normal(8)}
    prior.meta = {"seed": 22, "loss_weights": [3e3, 1e2, 5e1, 5e2]}
    path = tmp_path / "prior.bin"
    fields.save_prior(prior, path)
    back = fields.load_prior(path)
    assert back.category == prior.category
    assert back.latent_dim == prior.latent_dim
    np.testing.assert_array_equal(back.latents["a"], prior.latents["a"])
    pts = rng.uniform(-1, 1, (20, 3))
    z = prior.latents["b"]
    a_field = fields.instance_field(prior, z)
    b_field = fields.instance_field(back, z)
    np.testing.assert_array_equal(a_field(pts), b_field(pts))
