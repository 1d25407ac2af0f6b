"""Prior training: SDF regression losses and the auto-decoder loop.

The full objective combines a four-term SDF regression loss (value
regression, surface normal alignment, eikonal unit-gradient, and a spike
penalty discouraging spurious zero crossings off the surface) with
regularizers for template-normal consistency, latent magnitude,
deformation smoothness and correction magnitude. Every sum over a point
set is a mean, so the weights stay decoupled from sample counts.
"""

import csv
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import fields
from .errors import NumericError, StructuralError
from .rng import substream

TERM_NAMES = (
    "sdf_value",
    "sdf_normal",
    "sdf_eikonal",
    "sdf_spike",
    "template_normal",
    "latent",
    "smooth",
    "correction",
)


@dataclass
class LossWeights:
    """Loss-term weights; defaults follow the standard SDF-regression recipe."""

    sdf_value: float = 3e3
    sdf_normal: float = 1e2
    sdf_eikonal: float = 5e1
    sdf_spike: float = 5e2
    spike_delta: float = 100.0
    template_normal: float = 1e2  # lambda_1
    latent: float = 5.0  # lambda_2
    smooth: float = 1e2  # lambda_3
    correction: float = 1e6  # lambda_4

    def validate(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise StructuralError(f"loss weight {name} must be >= 0")
        if self.spike_delta < 10:
            raise StructuralError("spike_delta must be >= 10 (sharp spike penalty)")
        return self

    @classmethod
    def for_category(cls, category):
        """Per-category latent / smoothness weights (car, plane, chair)."""
        lam2 = {"car": 5.0, "plane": 2.0, "chair": 5.0}.get(category, 5.0)
        lam3 = {"car": 1e2, "plane": 1e2, "chair": 5e1}.get(category, 1e2)
        return cls(latent=lam2, smooth=lam3)

    @property
    def sdf_term_weights(self):
        return np.array([self.sdf_value, self.sdf_normal, self.sdf_eikonal, self.sdf_spike])


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_shapes: int = 128
    surface_points_per_shape: int = 4000
    free_points_per_shape: int = 4000
    lr: float = 1e-4
    lr_latent: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    latent_init_std: float = 0.01
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise StructuralError("epochs must be >= 0")
        for name in ("batch_shapes", "surface_points_per_shape", "free_points_per_shape"):
            if getattr(self, name) <= 0:
                raise StructuralError(f"{name} must be positive")
        if self.lr <= 0 or self.lr_latent <= 0:
            raise StructuralError("learning rates must be positive")
        return self


# ---------------------------------------------------------------------------
# loss terms (public, value-only)


def _eval_composed(prior, z, points):
    if isinstance(z, fields.LatentCode):
        z = z.z
    deform, h_caches = fields.hyper_forward(prior, z)
    ev = fields.compose_forward(prior.template, deform, points)
    return ev, deform, h_caches


def sdf_terms(prior, z, samples, weights):
    """The four SDF-loss components (unweighted), as means per point set."""
    if samples.surface_normals is None or len(samples.surface_normals) == 0:
        raise StructuralError("surface samples must carry normals")
    n_s = len(samples.surface_points)
    pts = np.concatenate([samples.surface_points, samples.free_points])
    targets = np.concatenate([np.zeros(n_s), samples.free_sdf])
    ev, _, _ = _eval_composed(prior, z, pts)
    t_value = float(np.abs(ev.psi - targets).mean())
    t_normal = float(ad.term_grad_alignment(ev.grad_psi[:n_s], samples.surface_normals)[0])
    t_eik = float(np.abs(np.linalg.norm(ev.grad_psi, axis=1) - 1.0).mean())
    t_spike = float(np.exp(-weights.spike_delta * np.abs(ev.psi[n_s:])).mean())
    return t_value, t_normal, t_eik, t_spike


def loss_sdf(prior, z, samples, weights):
    """Weighted SDF regression loss over one shape's sample set."""
    t1, t2, t3, t4 = sdf_terms(prior, z, samples, weights)
    w = weights.sdf_term_weights
    return float(w[0] * t1 + w[1] * t2 + w[2] * t3 + w[3] * t4)


def loss_normal(prior, z, samples):
    """Template-normal consistency: the gradient is of the template field
    evaluated at the deformed point, not of the composed field."""
    if samples.surface_normals is None or len(samples.surface_normals) == 0:
        raise StructuralError("surface samples must carry normals")
    ev, _, _ = _eval_composed(prior, z, samples.surface_points)
    return float(ad.term_grad_alignment(ev.grad_template, samples.surface_normals)[0])


def loss_smooth(deform_weights, points):
    """Mean Frobenius norm of the deformation Jacobian."""
    points = np.asarray(points, dtype=np.float64)
    _, jac, _ = ad.forward_aug(deform_weights, points)
    return float(np.sqrt((jac[:, :3, :] ** 2).sum(axis=(1, 2))).mean())


def loss_correction(deform_weights, points):
    """Mean |delta_s| of the correction output."""
    points = np.asarray(points, dtype=np.float64)
    out = ad.forward(deform_weights, points)
    return float(np.abs(out[:, 3]).mean())


def loss_latent(z):
    if isinstance(z, fields.LatentCode):
        z = z.z
    return float(np.linalg.norm(z))


def total_loss(prior, z, samples, weights):
    """Weighted sum of every loss term for one shape."""
    terms, _ = shape_terms(prior, z, samples, weights)
    return terms["total"]


def _weighted_total(terms, weights):
    return (
        weights.sdf_value * terms["sdf_value"]
        + weights.sdf_normal * terms["sdf_normal"]
        + weights.sdf_eikonal * terms["sdf_eikonal"]
        + weights.sdf_spike * terms["sdf_spike"]
        + weights.template_normal * terms["template_normal"]
        + weights.latent * terms["latent"]
        + weights.smooth * terms["smooth"]
        + weights.correction * terms["correction"]
    )


def shape_terms(prior, z, samples, weights, with_grads=False):
    """Evaluate every loss term for one shape; optionally also the exact
    gradients w.r.t. template weights, hypernetwork weights and the latent.

    Returns (terms_dict, grads) where grads is None or a tuple
    (template_grads, hyper_grads, latent_grad).
    """
    weights.validate()
    if samples.surface_normals is None or len(samples.surface_normals) == 0:
        raise StructuralError("surface samples must carry normals")
    if isinstance(z, fields.LatentCode):
        z = z.z
    n_s = len(samples.surface_points)
    pts = np.concatenate([samples.surface_points, samples.free_points])
    n = pts.shape[0]
    targets = np.concatenate([np.zeros(n_s), samples.free_sdf])
    normals = samples.surface_normals

    deform, h_caches = fields.hyper_forward(prior, z)
    ev = fields.compose_forward(prior.template, deform, pts)

    terms = {}
    d_psi = np.zeros(n)
    d_grad_psi = np.zeros((n, 3))
    d_grad_template = np.zeros((n, 3))
    d_jac_v = np.zeros((n, 3, 3))
    d_delta_s = np.zeros(n)

    # SDF value regression over all sampled points
    r = ev.psi - targets
    terms["sdf_value"] = float(np.abs(r).mean())
    d_psi += weights.sdf_value * np.sign(r) / n

    # composed-field normal alignment (cosine) on the surface
    val, _, g = ad.term_grad_alignment(ev.grad_psi[:n_s], normals)
    terms["sdf_normal"] = float(val)
    d_grad_psi[:n_s] += weights.sdf_normal * g

    # eikonal over all sampled points
    gn = np.linalg.norm(ev.grad_psi, axis=1)
    terms["sdf_eikonal"] = float(np.abs(gn - 1.0).mean())
    safe = np.where(gn > 1e-300, gn, 1.0)
    d_grad_psi += weights.sdf_eikonal * (np.sign(gn - 1.0) / safe)[:, None] * ev.grad_psi / n

    # spike penalty on free-space points only
    spikes = np.exp(-weights.spike_delta * np.abs(ev.psi[n_s:]))
    terms["sdf_spike"] = float(spikes.mean())
    n_f = n - n_s
    d_psi[n_s:] += (
        weights.sdf_spike * (-weights.spike_delta) * np.sign(ev.psi[n_s:]) * spikes / n_f
    )

    # template-normal consistency (cosine) at deformed surface points
    val, _, g = ad.term_grad_alignment(ev.grad_template[:n_s], normals)
    terms["template_normal"] = float(val)
    d_grad_template[:n_s] += weights.template_normal * g

    # smooth deformation over all sampled points
    fro = np.sqrt((ev.jac_v**2).sum(axis=(1, 2)))
    terms["smooth"] = float(fro.mean())
    safe_fro = np.where(fro > 1e-300, fro, 1.0)
    d_jac_v += weights.smooth * ev.jac_v / safe_fro[:, None, None] / n

    # small corrections over all sampled points
    terms["correction"] = float(np.abs(ev.delta_s).mean())
    d_delta_s += weights.correction * np.sign(ev.delta_s) / n

    # latent magnitude
    z_norm, g_z_reg = ad.term_latent_l2(z)
    terms["latent"] = z_norm

    terms["total"] = float(_weighted_total(terms, weights))
    if not with_grads:
        return terms, None

    t_grads, d_grads, _ = fields.compose_backward(
        prior.template,
        deform,
        ev,
        d_psi=d_psi,
        d_grad_psi=d_grad_psi,
        d_grad_template=d_grad_template,
        d_jac_v=d_jac_v,
        d_delta_s=d_delta_s,
    )
    h_grads, g_z = fields.hyper_backward(prior, h_caches, d_grads)
    g_z = g_z + weights.latent * g_z_reg
    return terms, (t_grads, h_grads, g_z)


# ---------------------------------------------------------------------------
# auto-decoder training


def _param_dict(prior):
    """Live views of every trainable array, keyed for the optimizer."""
    out = {}
    for k, (w, b) in enumerate(zip(prior.template.weights, prior.template.biases)):
        out[f"template.{k}.w"] = w
        out[f"template.{k}.b"] = b
    for i, h in enumerate(prior.hyper):
        for k, (w, b) in enumerate(zip(h.weights, h.biases)):
            out[f"hyper.{i}.{k}.w"] = w
            out[f"hyper.{i}.{k}.b"] = b
    for iid in prior.latents:
        out[f"latent.{iid}"] = prior.latents[iid]
    return out


def _subsample(sample_set, n_surface, n_free, rng):
    ns = len(sample_set.surface_points)
    nf = len(sample_set.free_points)
    if n_surface > ns or n_free > nf:
        raise StructuralError(
            f"requested {n_surface}/{n_free} points but sample set has {ns}/{nf}"
        )
    si = rng.choice(ns, size=n_surface, replace=False) if n_surface < ns else slice(None)
    fi = rng.choice(nf, size=n_free, replace=False) if n_free < nf else slice(None)
    from .synthdata.shapes import ShapeSampleSet

    return ShapeSampleSet(
        sample_set.surface_points[si],
        sample_set.surface_normals[si],
        sample_set.free_points[fi],
        sample_set.free_sdf[fi],
    )


def init_latents(prior, instance_ids, config):
    """Small random latent codes for every unseen instance."""
    for iid in instance_ids:
        if iid not in prior.latents:
            rng = substream(config.seed, "latent-init", iid)
            prior.latents[iid] = rng.normal(0.0, config.latent_init_std, prior.latent_dim)


def fit(prior, dataset, config, weights=None, start_epoch=0, optimizer=None, on_epoch=None):
    """Jointly optimize template weights, hypernetwork weights and latents.

    dataset: list of (instance_id, ShapeSampleSet). Per-epoch randomness is
    derived statelessly from (seed, epoch), so training can resume from any
    epoch boundary and reproduce the uninterrupted trace.

    Returns (prior, history, optimizer); history has one row of term means
    per epoch.
    """
    config.validate()
    if not dataset:
        raise StructuralError("dataset is empty")
    weights = (weights or LossWeights.for_category(prior.category)).validate()
    init_latents(prior, [iid for iid, _ in dataset], config)
    prior.validate()
    params = _param_dict(prior)
    if optimizer is None:
        optimizer = ad.Adam(lr=config.lr, betas=config.betas, eps=config.eps)
    history = []
    net_keys = [k for k in params if not k.startswith("latent.")]
    for epoch in range(start_epoch, config.epochs):
        rng = substream(config.seed, "train-epoch", epoch)
        order = rng.permutation(len(dataset))
        epoch_terms = {name: 0.0 for name in (*TERM_NAMES, "total")}
        seen = 0
        for lo in range(0, len(order), config.batch_shapes):
            batch = order[lo : lo + config.batch_shapes]
            net_grads = {k: np.zeros_like(params[k]) for k in net_keys}
            latent_grads = {}
            for j in batch:
                iid, sample_set = dataset[j]
                sub = _subsample(
                    sample_set,
                    config.surface_points_per_shape,
                    config.free_points_per_shape,
                    rng,
                )
                terms, grads = shape_terms(
                    prior, prior.latents[iid], sub, weights, with_grads=True
                )
                if not np.isfinite(terms["total"]):
                    bad = [t for t, v in terms.items() if not np.isfinite(v)]
                    raise NumericError(
                        f"epoch {epoch}, shape {iid!r}: non-finite loss terms {bad}"
                    )
                t_grads, h_grads, g_z = grads
                for k, (gw, gb) in enumerate(zip(t_grads.weights, t_grads.biases)):
                    net_grads[f"template.{k}.w"] += gw
                    net_grads[f"template.{k}.b"] += gb
                for i, hg in enumerate(h_grads):
                    for k, (gw, gb) in enumerate(zip(hg.weights, hg.biases)):
                        net_grads[f"hyper.{i}.{k}.w"] += gw
                        net_grads[f"hyper.{i}.{k}.b"] += gb
                latent_grads[f"latent.{iid}"] = g_z
                for name in TERM_NAMES:
                    epoch_terms[name] += terms[name]
                epoch_terms["total"] += terms["total"]
                seen += 1
            scale = 1.0 / len(batch)
            for k in net_grads:
                net_grads[k] *= scale
            optimizer.step(params, net_grads, lr=config.lr)
            optimizer.step(params, latent_grads, lr=config.lr_latent)
        row = {"epoch": epoch}
        row.update({name: epoch_terms[name] / max(seen, 1) for name in (*TERM_NAMES, "total")})
        history.append(row)
        if on_epoch is not None:
            on_epoch(epoch, prior, optimizer, history)
    return prior, history, optimizer


def fit_latent(prior, sample_set, weights=None, iterations=300, lr=1e-3, seed=0, init="zero"):
    """Auto-decoder inference: optimize a fresh latent against one sample
    set with the networks frozen. Returns (z, per-iteration history)."""
    weights = (weights or LossWeights.for_category(prior.category)).validate()
    rng = substream(seed, "fit-latent")
    if init == "zero":
        z = np.zeros(prior.latent_dim)
    elif init == "mean":
        mean, std = prior.latent_stats()
        z = mean.copy()
    elif init == "learned":
        mean, std = prior.latent_stats()
        z = rng.normal(mean, np.maximum(std, 1e-6))
    else:
        raise StructuralError(f"unknown latent init mode {init!r}")
    opt = ad.Adam(lr=lr)
    history = []
    for it in range(iterations):
        terms, grads = shape_terms(prior, z, sample_set, weights, with_grads=True)
        if not np.isfinite(terms["total"]):
            raise NumericError(f"latent fitting diverged at iteration {it}")
        _, _, g_z = grads
        opt.step({"z": z}, {"z": g_z})
        history.append(terms)
    return z, history


def write_history_csv(history, path):
    """Loss history as CSV: epoch, every term mean, weighted total."""
    import os

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fields_ = ["epoch", *TERM_NAMES, "total"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields_)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in fields_})


def read_history_csv(path):
    with open(path, "r", newline="") as f:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]
