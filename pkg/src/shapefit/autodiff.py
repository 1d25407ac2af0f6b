"""Differentiable evaluation of small dense MLPs with sinusoidal activations.

The forward pass optionally carries, next to each layer activation, its
Jacobian with respect to a set of base coordinates (normally the 3D input
point). Losses may therefore reference the spatial gradient of the field.
A hand-written reverse pass differentiates this augmented computation,
yielding exact first-order gradients for every weight, bias and latent
input. Only the fixed layer structure below is supported; there is no
general computation graph, no GPU path and no second-order derivatives.

All arithmetic is float64 and fully vectorized over the point batch, so
identical inputs produce bit-identical outputs.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, StructuralError

ACT_SINE = "sine"
ACT_RELU = "relu"
ACT_LINEAR = "linear"
_ACTIVATIONS = (ACT_SINE, ACT_RELU, ACT_LINEAR)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class MLPParams:
    """Weights of one dense MLP.

    weights[k] has shape (out_k, in_k), biases[k] shape (out_k,). The
    activation tag of layer k is one of "sine", "relu", "linear"; sine
    layers compute sin(omega0 * (W x + b)).
    """

    weights: list
    biases: list
    activations: tuple
    omega0: float = 30.0

    def __post_init__(self):
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in self.biases]
        self.activations = tuple(self.activations)

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self):
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self):
        return MLPParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activations,
            self.omega0,
        )

    def validate(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise StructuralError("weights and biases must be non-empty and aligned")
        if len(self.activations) != len(self.weights):
            raise StructuralError("one activation tag required per layer")
        if not self.omega0 > 0:
            raise StructuralError(f"omega0 must be positive, got {self.omega0}")
        prev_out = None
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in _ACTIVATIONS:
                raise StructuralError(f"layer {k}: unknown activation tag {act!r}")
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise StructuralError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if prev_out is not None and w.shape[1] != prev_out:
                raise StructuralError(
                    f"layer {k}: input dim {w.shape[1]} != previous output {prev_out}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise StructuralError(f"layer {k}: non-finite parameter entries")
            prev_out = w.shape[0]
        return self


def siren_init(layer_sizes, rng, omega0=30.0, final_activation=ACT_LINEAR):
    """Standard sinusoidal-network init.

    First layer uniform in [-1/in, 1/in]; later layers uniform in
    [-sqrt(6/in)/omega0, sqrt(6/in)/omega0]. The last layer uses
    `final_activation`, all earlier layers are sine.
    """
    weights, biases, acts = [], [], []
    n = len(layer_sizes) - 1
    for k in range(n):
        fan_in, fan_out = layer_sizes[k], layer_sizes[k + 1]
        if k == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / omega0
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
        acts.append(final_activation if k == n - 1 else ACT_SINE)
    return MLPParams(weights, biases, tuple(acts), omega0)


@dataclass
class MLPGrads:
    """Gradient arrays mirroring MLPParams layer shapes."""

    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, params):
        return cls(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
        )

    def add_(self, other, scale=1.0):
        for gw, ow in zip(self.weights, other.weights):
            gw += scale * ow
        for gb, ob in zip(self.biases, other.biases):
            gb += scale * ob
        return self

    def scale_(self, scale):
        for gw in self.weights:
            gw *= scale
        for gb in self.biases:
            gb *= scale
        return self

    def all_finite(self):
        return all(np.isfinite(a).all() for a in self.weights + self.biases)


def pack_params(weights, biases):
    """Flatten per-layer (W, b) pairs into one vector: row-major W then b."""
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(weights, biases)])


def unpack_params(vec, like):
    """Inverse of pack_params, shaped after the MLPParams `like`."""
    weights, biases = [], []
    off = 0
    for w, b in zip(like.weights, like.biases):
        weights.append(vec[off : off + w.size].reshape(w.shape))
        off += w.size
        biases.append(vec[off : off + b.size].copy())
        off += b.size
    if off != vec.size:
        raise StructuralError(f"parameter vector has {vec.size} entries, expected {off}")
    return weights, biases


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    """Intermediates retained for the reverse pass."""

    x: np.ndarray
    layers: list = field(default_factory=list)  # (z_prev, jac_prev, pre, jac_pre)
    track_jac: bool = False


def _as_batch(x, in_dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise StructuralError(f"input shape {x.shape} incompatible with network input dim {in_dim}")
    return x, single


def forward(params, x):
    """Value-only evaluation. x: (N, in) or (in,) -> (N, out) or (out,)."""
    x, single = _as_batch(x, params.in_dim)
    z = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        pre = z @ w.T + b
        if act == ACT_SINE:
            z = np.sin(params.omega0 * pre)
        elif act == ACT_RELU:
            z = np.maximum(pre, 0.0)
        else:
            z = pre
    return z[0] if single else z


def forward_aug(params, x, jac_in=None):
    """Evaluate the network and the Jacobian of its output.

    jac_in: (N, in, K) Jacobian of the input w.r.t. K base coordinates;
    identity (K = in) when omitted. Returns (y, jac, cache) with
    y (N, out), jac (N, out, K).
    """
    x, _ = _as_batch(x, params.in_dim)
    n = x.shape[0]
    if jac_in is None:
        jac = np.broadcast_to(np.eye(params.in_dim), (n, params.in_dim, params.in_dim)).copy()
    else:
        jac = np.asarray(jac_in, dtype=np.float64)
        if jac.shape[:2] != (n, params.in_dim):
            raise StructuralError(f"jac_in shape {jac.shape} incompatible with ({n}, {params.in_dim}, K)")
    cache = ForwardCache(x=x, track_jac=True)
    z = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        pre = z @ w.T + b
        jac_pre = np.matmul(w, jac)
        cache.layers.append((z, jac, pre, jac_pre))
        if act == ACT_SINE:
            c = params.omega0 * np.cos(params.omega0 * pre)
            z = np.sin(params.omega0 * pre)
            jac = c[:, :, None] * jac_pre
        elif act == ACT_RELU:
            m = pre > 0.0
            z = np.where(m, pre, 0.0)
            jac = np.where(m[:, :, None], jac_pre, 0.0)
        else:
            z = pre
            jac = jac_pre
    return z, jac, cache


def forward_cached(params, x):
    """Value-only evaluation retaining intermediates for backward()."""
    x, _ = _as_batch(x, params.in_dim)
    cache = ForwardCache(x=x, track_jac=False)
    z = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        pre = z @ w.T + b
        cache.layers.append((z, None, pre, None))
        if act == ACT_SINE:
            z = np.sin(params.omega0 * pre)
        elif act == ACT_RELU:
            z = np.maximum(pre, 0.0)
        else:
            z = pre
    return z, cache


def backward(params, cache, gy, gjac=None):
    """Reverse pass through a forward_aug / forward_cached computation.

    gy: (N, out) adjoint of the output values; gjac: (N, out, K) adjoint of
    the output Jacobian (zero if omitted). Returns (MLPGrads, gx, gjac_in)
    where gx (N, in) and gjac_in (N, in, K) are the adjoints of the inputs;
    gjac_in is None when the forward did not track Jacobians.
    """
    omega = params.omega0
    gz = np.asarray(gy, dtype=np.float64)
    track = cache.track_jac
    if gjac is None and track:
        k_dim = cache.layers[0][1].shape[2]
        gjac = np.zeros((gz.shape[0], params.out_dim, k_dim))
    gweights = [None] * params.n_layers
    gbiases = [None] * params.n_layers
    for k in range(params.n_layers - 1, -1, -1):
        w = params.weights[k]
        act = params.activations[k]
        z_prev, jac_prev, pre, jac_pre = cache.layers[k]
        if act == ACT_SINE:
            c = omega * np.cos(omega * pre)
            gpre = gz * c
            if track:
                # d/dpre of jac_out = -omega^2 sin(omega pre) * jac_pre
                gpre = gpre - (omega * omega) * np.sin(omega * pre) * np.einsum(
                    "nok,nok->no", gjac, jac_pre
                )
                gjac_pre = gjac * c[:, :, None]
        elif act == ACT_RELU:
            m = pre > 0.0
            gpre = np.where(m, gz, 0.0)
            if track:
                gjac_pre = np.where(m[:, :, None], gjac, 0.0)
        else:
            gpre = gz
            if track:
                gjac_pre = gjac
        gw = gpre.T @ z_prev
        gb = gpre.sum(axis=0)
        gz = gpre @ w
        if track:
            gw = gw + np.einsum("nok,nik->oi", gjac_pre, jac_prev)
            gjac = np.matmul(w.T, gjac_pre)
        gweights[k] = gw
        gbiases[k] = gb
    return MLPGrads(gweights, gbiases), gz, (gjac if track else None)


# ---------------------------------------------------------------------------
# public field evaluation


@dataclass
class FieldEval:
    """Field value and its spatial gradient at one point."""

    value: float
    spatial_grad: np.ndarray


def eval_with_spatial_grad(params, x):
    """Evaluate a scalar field network at one 3D point.

    Returns the output value and its exact gradient w.r.t. x, propagated
    analytically through the sine layers.
    """
    params.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.in_dim,):
        raise StructuralError(f"point shape {x.shape} incompatible with input dim {params.in_dim}")
    if not np.isfinite(x).all():
        raise StructuralError("input point has non-finite entries")
    y, jac, _ = forward_aug(params, x[None, :])
    if params.out_dim == 1:
        return FieldEval(float(y[0, 0]), jac[0, 0].copy())
    return FieldEval(y[0].copy(), jac[0].copy())


# ---------------------------------------------------------------------------
# pointwise loss terms
#
# Each helper returns (term_value, adjoints...) with the mean already taken
# over the batch, so combined losses stay decoupled from point counts.


def term_value_l1(y, targets):
    """mean |y - s| and its adjoint w.r.t. y."""
    r = y - targets
    per_point = np.abs(r)
    val = per_point.mean()
    gy = np.sign(r) / r.size
    return val, per_point, gy


def term_grad_alignment(jac, normals):
    """mean (1 - cos(g, n)) over points; adjoint w.r.t. jac.

    The inner product is normalized by ||g|| (the targets n are unit), which
    keeps the term in [0, 2]; the raw dot product would reward unbounded
    gradient growth along the normals.
    """
    norms = np.linalg.norm(jac, axis=1)
    safe = np.where(norms > 1e-300, norms, 1.0)
    dots = np.einsum("nk,nk->n", jac, normals)
    cos = np.where(norms > 1e-300, dots / safe, 0.0)
    per_point = 1.0 - cos
    val = per_point.mean()
    gjac = -(normals - (cos / safe)[:, None] * jac) / safe[:, None] / jac.shape[0]
    return val, per_point, gjac


def term_eikonal(jac):
    """mean | ||g|| - 1 |; adjoint w.r.t. jac."""
    norms = np.linalg.norm(jac, axis=1)
    per_point = np.abs(norms - 1.0)
    val = per_point.mean()
    safe = np.where(norms > 1e-300, norms, 1.0)
    gjac = (np.sign(norms - 1.0) / safe)[:, None] * jac / jac.shape[0]
    return val, per_point, gjac


def term_spike(y, delta):
    """mean exp(-delta |y|), penalizing near-zero values off the surface."""
    per_point = np.exp(-delta * np.abs(y))
    val = per_point.mean()
    gy = -delta * np.sign(y) * per_point / y.size
    return val, per_point, gy


def term_latent_l2(z):
    """||z||_2 and its adjoint (zero at the origin)."""
    norm = float(np.linalg.norm(z))
    gz = z / norm if norm > 0 else np.zeros_like(z)
    return norm, gz


# ---------------------------------------------------------------------------
# composed scalar losses over a single network


@dataclass
class LossSpec:
    """Weighted combination of the pointwise terms above.

    Field terms apply to the network output (and its spatial gradient) at
    the batch points; the latent term applies to each latent code.
    """

    w_value_l1: float = 0.0
    targets: np.ndarray | None = None
    w_grad_alignment: float = 0.0
    normals: np.ndarray | None = None
    w_eikonal: float = 0.0
    w_spike: float = 0.0
    spike_delta: float = 100.0
    w_latent: float = 0.0

    def needs_jacobian(self):
        return self.w_grad_alignment != 0.0 or self.w_eikonal != 0.0


@dataclass
class GradientBundle:
    """Scalar loss plus gradients for every parameter group involved."""

    loss: float
    param_grads: list  # one MLPGrads per network
    latent_grads: list = field(default_factory=list)  # one array per latent
    pose_grad: np.ndarray | None = None  # (9,) = 6D rotation + translation

    def check_finite(self, context=""):
        if not np.isfinite(self.loss):
            raise NumericError(f"non-finite loss{' in ' + context if context else ''}")
        for g in self.param_grads:
            if not g.all_finite():
                raise NumericError(f"non-finite parameter gradient{' in ' + context if context else ''}")
        for g in self.latent_grads:
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite latent gradient{' in ' + context if context else ''}")
        if self.pose_grad is not None and not np.isfinite(self.pose_grad).all():
            raise NumericError(f"non-finite pose gradient{' in ' + context if context else ''}")
        return self


def _check_term_finite(name, per_point):
    if not np.isfinite(per_point).all():
        idx = int(np.flatnonzero(~np.isfinite(np.asarray(per_point).ravel()))[0])
        raise NumericError(f"loss term '{name}' non-finite at sample index {idx}")


def loss_and_grads(networks, latents, spec, batch):
    """Evaluate a composed loss and all its gradients in one sweep.

    Each network is treated as a scalar field over `batch` (N, 3);
    field terms are summed over networks, the latent term over `latents`.
    Gradients of terms referencing the spatial gradient are obtained by
    reverse-differentiating the Jacobian-augmented forward pass.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise StructuralError("batch must be a non-empty (N, d) array")
    total = 0.0
    param_grads = []
    for net in networks:
        net.validate()
        if spec.needs_jacobian():
            y, jac, cache = forward_aug(net, batch)
        else:
            y, cache = forward_cached(net, batch)
            jac = None
        y1 = y[:, 0]
        gy = np.zeros_like(y1)
        gjac = np.zeros((batch.shape[0], 3)) if jac is not None else None
        if spec.w_value_l1:
            targets = np.zeros_like(y1) if spec.targets is None else spec.targets
            val, pp, g = term_value_l1(y1, targets)
            _check_term_finite("value_l1", pp)
            total += spec.w_value_l1 * val
            gy += spec.w_value_l1 * g
        if spec.w_grad_alignment:
            if spec.normals is None:
                raise StructuralError("grad_alignment term requires surface normals")
            val, pp, g = term_grad_alignment(jac[:, 0, :], spec.normals)
            _check_term_finite("grad_alignment", pp)
            total += spec.w_grad_alignment * val
            gjac += spec.w_grad_alignment * g
        if spec.w_eikonal:
            val, pp, g = term_eikonal(jac[:, 0, :])
            _check_term_finite("eikonal", pp)
            total += spec.w_eikonal * val
            gjac += spec.w_eikonal * g
        if spec.w_spike:
            val, pp, g = term_spike(y1, spec.spike_delta)
            _check_term_finite("spike", pp)
            total += spec.w_spike * val
            gy += spec.w_spike * g
        grads, _, _ = backward(
            net,
            cache,
            gy[:, None],
            gjac[:, None, :] if gjac is not None else None,
        )
        param_grads.append(grads)
    latent_grads = []
    for z in latents:
        z = np.asarray(z, dtype=np.float64)
        if spec.w_latent:
            val, gz = term_latent_l2(z)
            _check_term_finite("latent_l2", [val])
            total += spec.w_latent * val
            latent_grads.append(spec.w_latent * gz)
        else:
            latent_grads.append(np.zeros_like(z))
    bundle = GradientBundle(float(total), param_grads, latent_grads)
    return bundle.check_finite("loss_and_grads")


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over a dict of named float64 arrays, with lazy per-key state."""

    def __init__(self, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, params, grads, lr=None):
        """In-place update of every key present in `grads`."""
        lr = self.lr if lr is None else lr
        for key, g in grads.items():
            p = params[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
                self.t[key] = 0
            self.t[key] += 1
            t = self.t[key]
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            mhat = m / (1.0 - self.beta1**t)
            vhat = v / (1.0 - self.beta2**t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        """Flat view of the optimizer state for checkpointing."""
        out = {}
        for key in self.m:
            out[f"adam.m.{key}"] = self.m[key]
            out[f"adam.v.{key}"] = self.v[key]
            out[f"adam.t.{key}"] = np.array([self.t[key]], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays):
        for name, arr in arrays.items():
            if not name.startswith("adam."):
                continue
            kind, key = name[5:].split(".", 1)
            if kind == "m":
                self.m[key] = np.array(arr, dtype=np.float64)
            elif kind == "v":
                self.v[key] = np.array(arr, dtype=np.float64)
            elif kind == "t":
                self.t[key] = int(arr[0])
