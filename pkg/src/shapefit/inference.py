"""Test-time reconstruction: joint optimization of latent code and object
pose against a partial observation, with network weights frozen.

Per step the observed points are moved into the canonical frame by the
current pose and the field is penalized for nonzero values there; fresh
uniform free-space samples keep the field eikonal; the latent stays small.
Rotations use the continuous 6D parametrization, so plain Adam steps stay
on the rotation manifold after Gram-Schmidt.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import fields
from .canonicalize import PointCloud, canonicalize, lift_depth
from .errors import NumericError, StageError, StructuralError
from .formats import save_container, save_json, save_obj
from .geometry import Pose, rot6d_backward, rot6d_to_matrix
from .meshing import marching_cubes, sample_mesh_surface
from .rng import substream

TRACE_FIELDS = ("iteration", "observation", "eikonal", "latent")


@dataclass
class InferenceConfig:
    iterations: int = 30
    lr_shape: float = 0.001
    lr_pose: float = 0.01
    eikonal_samples: int = 512
    latent_init: str = "learned"  # "learned" | "zero"
    optimize_pose: bool = True
    optimize_latent: bool = True
    max_observed_points: int = 2000
    mc_resolution: int = 128
    w_observation: float = 3e3
    w_eikonal: float = 5e1
    w_latent: float = 5.0
    seed: int = 0

    def validate(self):
        if self.iterations < 0:
            raise StructuralError("iterations must be >= 0")
        if self.lr_shape <= 0 or self.lr_pose <= 0:
            raise StructuralError("learning rates must be positive")
        if self.latent_init not in ("learned", "zero"):
            raise StructuralError(f"unknown latent init mode {self.latent_init!r}")
        if self.eikonal_samples <= 0 or self.max_observed_points <= 0:
            raise StructuralError("sample counts must be positive")
        return self


@dataclass
class ReconstructionResult:
    mesh: object  # TriangleMesh | None until meshing ran
    pose: Pose
    latent: fields.LatentCode
    trace: list  # per-iteration dicts: observation / eikonal / latent terms

    def validate(self, iterations=None):
        self.pose.validate()
        if iterations is not None and len(self.trace) != iterations:
            raise StructuralError("loss trace length != iteration count")
        return self


def init_latent(prior, config, rng):
    if config.latent_init == "zero":
        return np.zeros(prior.latent_dim)
    mean, std = prior.latent_stats()
    return rng.normal(mean, np.maximum(std, 1e-8))


def joint_optimize(prior, observed, init, config):
    """Refine (latent, rotation, translation) against observed points.

    observed: PointCloud in the camera frame. init: Pose mapping camera
    frame -> canonical frame. Network weights stay frozen; a frozen
    configuration (both optimize flags off or zero iterations) passes the
    initialization through unchanged.
    """
    config.validate()
    observed.validate()
    init.validate()
    rng = substream(config.seed, "inference")
    pts = observed.points
    if len(pts) > config.max_observed_points:
        pick = rng.choice(len(pts), size=config.max_observed_points, replace=False)
        pts = pts[pick]
    z = init_latent(prior, config, rng)
    r6 = init.rot6d.copy()
    t = init.translation.copy()
    opt = ad.Adam()
    params = {"z": z, "r6": r6, "t": t}
    trace = []
    for it in range(config.iterations):
        deform, h_caches = fields.hyper_forward(prior, z)
        rot = rot6d_to_matrix(r6)
        x_can = pts @ rot.T + t
        ev = fields.compose_forward(prior.template, deform, x_can)
        n = x_can.shape[0]
        obs_term = float(np.abs(ev.psi).mean())
        d_psi = config.w_observation * np.sign(ev.psi) / n

        # pose gradient via the chain rule at the observed points
        g_x = d_psi[:, None] * ev.grad_psi
        g_rot = g_x.T @ pts
        g_t = g_x.sum(axis=0)
        g_r6 = rot6d_backward(r6, g_rot)

        # latent gradient through the observation term
        _, d_grads, _ = fields.compose_backward(prior.template, deform, ev, d_psi=d_psi)
        _, g_z = fields.hyper_backward(prior, h_caches, d_grads)

        # eikonal on fresh uniform free-space samples
        free = substream(config.seed, "inference-eikonal", it).uniform(
            -1.0, 1.0, (config.eikonal_samples, 3)
        )
        ev_f = fields.compose_forward(prior.template, deform, free)
        eik_term, _, g_eik = ad.term_eikonal(ev_f.grad_psi)
        _, d_grads_f, _ = fields.compose_backward(
            prior.template, deform, ev_f, d_grad_psi=config.w_eikonal * g_eik
        )
        _, g_z_f = fields.hyper_backward(prior, h_caches, d_grads_f)
        g_z = g_z + g_z_f

        lat_term, g_lat = ad.term_latent_l2(z)
        g_z = g_z + config.w_latent * g_lat

        trace.append({"observation": obs_term, "eikonal": float(eik_term), "latent": lat_term})
        if not (np.isfinite(obs_term) and np.isfinite(eik_term)):
            raise NumericError(f"inference diverged at iteration {it}")
        if not (np.isfinite(g_z).all() and np.isfinite(g_r6).all() and np.isfinite(g_t).all()):
            raise NumericError(f"non-finite gradients at iteration {it}")

        if config.optimize_latent:
            opt.step(params, {"z": g_z}, lr=config.lr_shape)
        if config.optimize_pose:
            opt.step(params, {"r6": g_r6, "t": g_t}, lr=config.lr_pose)

    pose = Pose(r6, t)
    result = ReconstructionResult(None, pose, fields.LatentCode(z, "reconstruction"), trace)
    return result.validate(config.iterations)


def template_cloud(prior, resolution=48, n_points=4000, seed=0):
    """Surface samples of the prior's template zero level set (canonical)."""
    def field_fn(pts):
        return ad.forward(prior.template, pts)[:, 0]

    mesh = marching_cubes(field_fn, resolution)
    if mesh.is_empty:
        raise StructuralError("template field has no zero level set to sample")
    return PointCloud(sample_mesh_surface(mesh, n_points, seed), "canonical")


def reconstruct(prior, depth, estimator, config, template_points=None, frame_cache=None):
    """Full pipeline: lift -> canonicalize -> joint optimize -> extract mesh.

    Failures carry the stage name. template_points (canonical-frame
    surface samples) are computed from the template field when an
    estimator needs them and none are given.
    """
    config.validate()
    try:
        cloud = lift_depth(depth)
    except Exception as e:
        raise StageError("lift", e) from e

    needs_template = getattr(estimator, "own_frame", False) or estimator.name == "icp"
    tc = None
    if needs_template:
        try:
            tc = template_points or template_cloud(prior, seed=config.seed)
        except Exception as e:
            raise StageError("template-cloud", e) from e
    try:
        init = canonicalize(
            estimator,
            cloud,
            template_points=tc.points if tc is not None else None,
            template_cloud=tc,
            cache=frame_cache,
            category=prior.category,
        )
    except Exception as e:
        raise StageError("canonicalize", e) from e

    try:
        result = joint_optimize(prior, cloud, init, config)
    except Exception as e:
        raise StageError("joint-optimize", e) from e

    try:
        field_fn = fields.instance_field(prior, result.latent.z)
        result.mesh = marching_cubes(field_fn, config.mc_resolution)
    except Exception as e:
        raise StageError("meshing", e) from e
    return result


def save_result(result, directory, name):
    """Result bundle: OBJ mesh, JSON pose, latent container, trace CSV."""
    os.makedirs(directory, exist_ok=True)
    base = os.path.join(directory, name)
    if result.mesh is not None:
        save_obj(base + ".obj", result.mesh.vertices, result.mesh.triangles)
    save_json(
        base + ".pose.json",
        {
            "rotation_row_major": [float(v) for v in result.pose.matrix().ravel()],
            "translation": [float(v) for v in result.pose.translation],
        },
    )
    save_container(base + ".latent.bin", {"latent": result.latent.z})
    with open(base + ".trace.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(TRACE_FIELDS))
        writer.writeheader()
        for i, row in enumerate(result.trace):
            writer.writerow({"iteration": i, **{k: row[k] for k in TRACE_FIELDS[1:]}})
