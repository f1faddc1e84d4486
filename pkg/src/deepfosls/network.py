"""Feedforward trial-space generator with hand-written value/Jacobian forward and reverse passes.

The last hidden layer ``Phi_L`` of the network yields the spanning functions

    phi_j = g_D * Phi_L^(j),        tau_{j + k n_L} = Phi_L^(j) e_k.

Losses only depend on ``Phi_L`` and its spatial Jacobian, so the reverse pass
propagates cotangents through both channels at once; this is where the second
derivative of the activation enters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError, NonFiniteSampleError
from .fields import Lifting


class ReQU:
    """``max(0, z)^2``; the second derivative at exactly 0 is taken as 0."""

    name = "requ"
    trainable = False

    def value(self, z):
        p = np.maximum(z, 0.0)
        return p * p

    def d1(self, z):
        return 2.0 * np.maximum(z, 0.0)

    def d2(self, z):
        return 2.0 * (z > 0.0)

    def __repr__(self):
        return "ReQU()"


class ScaledTanh:
    """``tanh(m z)`` with a trainable steepness ``m`` shared by all layers."""

    name = "tanh"
    trainable = True

    def __init__(self, m: float = 50.0):
        if not m > 0:
            raise InvalidArgumentError(f"tanh steepness must be positive, got {m}")
        self.m = float(m)

    def value(self, z):
        return np.tanh(self.m * z)

    def d1(self, z):
        t = np.tanh(self.m * z)
        return self.m * (1.0 - t * t)

    def d2(self, z):
        t = np.tanh(self.m * z)
        return -2.0 * self.m**2 * t * (1.0 - t * t)

    def dm_value(self, z):
        t = np.tanh(self.m * z)
        return z * (1.0 - t * t)

    def dm_d1(self, z):
        t = np.tanh(self.m * z)
        return (1.0 - t * t) * (1.0 - 2.0 * self.m * z * t)

    def __repr__(self):
        return f"ScaledTanh(m={self.m!r})"


def make_activation(name: str, m: float = 50.0):
    key = name.lower()
    if key == "requ":
        return ReQU()
    if key in ("tanh", "scaled_tanh"):
        return ScaledTanh(m)
    if key == "relu":
        raise ConfigurationError(
            "ReLU is not C^{1,1}_loc: its parameter derivatives carry Dirac-type terms; use 'requ'"
        )
    raise ConfigurationError(f"unknown activation {name!r}; choose 'requ' or 'tanh'")


@dataclass(frozen=True)
class Network:
    weights: tuple
    biases: tuple
    activation: object

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float, ndmin=2) for w in self.weights)
        bs = tuple(np.array(b, dtype=float).reshape(-1) for b in self.biases)
        if len(ws) != len(bs) or not ws:
            raise InvalidArgumentError("need at least one layer and matching weights/biases")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.shape[0] != b.size:
                raise InvalidArgumentError(f"layer {i + 1}: weight rows {w.shape[0]} != bias size {b.size}")
            if i and w.shape[1] != ws[i - 1].shape[0]:
                raise InvalidArgumentError(f"layer {i + 1}: input width mismatch")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def widths(self) -> list:
        return [w.shape[0] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        n = sum(w.size + b.size for w, b in zip(self.weights, self.biases))
        return n + (1 if self.activation.trainable else 0)

    def parameters(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        if self.activation.trainable:
            parts.append([self.activation.m])
        return np.concatenate(parts)

    def with_parameters(self, theta: np.ndarray) -> "Network":
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise InvalidArgumentError(f"expected {self.n_params} parameters, got {theta.size}")
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(theta[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            bs.append(theta[pos:pos + b.size].copy())
            pos += b.size
        act = ScaledTanh(theta[pos]) if self.activation.trainable else self.activation
        return Network(tuple(ws), tuple(bs), act)

    def breaking_points_1d(self) -> np.ndarray:
        """Zeros of the first-layer pre-activations (1D input only)."""
        w, b = self.weights[0][:, 0], self.biases[0]
        return -b / w

    def to_dict(self) -> dict:
        doc = {
            "activation": self.activation.name,
            "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(self.weights, self.biases)],
        }
        if self.activation.trainable:
            doc["m"] = self.activation.m
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Network":
        act = make_activation(doc["activation"], doc.get("m", 50.0))
        layers = doc["layers"]
        return cls(tuple(l["weight"] for l in layers), tuple(l["bias"] for l in layers), act)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Network":
        return cls.from_dict(json.loads(text))


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)       # Phi_{l-1}, (N, n_{l-1})
    input_jacs: list = field(default_factory=list)   # dPhi_{l-1}/dx, (N, n_{l-1}, d)
    pre: list = field(default_factory=list)          # z_l
    pre_jacs: list = field(default_factory=list)     # W_l dPhi_{l-1}/dx


def _forward(net: Network, x: np.ndarray):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != net.input_dim:
        raise InvalidArgumentError(f"points have dimension {x.shape[1]}, network expects {net.input_dim}")
    for w, b in zip(net.weights, net.biases):
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NonFiniteSampleError("network has non-finite parameters")
    act = net.activation
    n, d = x.shape
    a = x
    jac = np.broadcast_to(np.eye(d), (n, d, d))
    cache = ForwardCache()
    for w, b in zip(net.weights, net.biases):
        cache.inputs.append(a)
        cache.input_jacs.append(jac)
        z = a @ w.T + b
        zj = w @ jac
        cache.pre.append(z)
        cache.pre_jacs.append(zj)
        a = act.value(z)
        jac = act.d1(z)[:, :, None] * zj
    return a, jac, cache


def forward_with_jacobian(net: Network, x: np.ndarray):
    """Return ``Phi_L(x)`` with shape (N, n_L) and ``dPhi_L/dx`` with shape (N, n_L, d)."""
    values, jac, _ = _forward(net, x)
    return values, jac


@dataclass
class SpanningSample:
    """Spanning-function data at a batch of points.

    ``tau_values`` holds ``Phi_L`` (shared by the d flux directions) and
    ``div_tau[:, j, k]`` is the divergence of ``tau_{j + k n_L}``.
    """

    points: np.ndarray
    phi: np.ndarray
    grad_phi: np.ndarray
    tau_values: np.ndarray
    div_tau: np.ndarray
    g: np.ndarray
    grad_g: np.ndarray
    cache: Optional[ForwardCache] = field(default=None, repr=False)

    @property
    def n_u(self) -> int:
        return self.phi.shape[1]

    @property
    def n_q(self) -> int:
        return self.tau_values.shape[1] * self.points.shape[1]


def spanning_sample(net: Network, lifting: Lifting, x: np.ndarray) -> SpanningSample:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    values, jac, cache = _forward(net, x)
    g = np.asarray(lifting.value(x), dtype=float)
    grad_g = np.asarray(lifting.gradient(x), dtype=float)
    phi = g[:, None] * values
    grad_phi = g[:, None, None] * jac + values[:, :, None] * grad_g[:, None, :]
    return SpanningSample(x, phi, grad_phi, values, jac, g, grad_g, cache)


@dataclass
class SampleCotangent:
    """Adjoints of the SpanningSample fields; any entry may be None (zero)."""

    phi: Optional[np.ndarray] = None
    grad_phi: Optional[np.ndarray] = None
    tau_values: Optional[np.ndarray] = None
    div_tau: Optional[np.ndarray] = None


@dataclass
class ParameterGradient:
    weights: list
    biases: list
    m: Optional[np.ndarray] = None

    def vector(self) -> np.ndarray:
        """Flatten in the order of ``Network.parameters``; keeps a leading point axis if present."""
        per_point = self.biases[0].ndim == 2
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(w.shape[0], -1) if per_point else w.ravel())
            parts.append(b)
        if self.m is not None:
            parts.append(np.reshape(self.m, (-1, 1)) if per_point else np.atleast_1d(self.m))
        return np.concatenate(parts, axis=-1)


def _as_cotangent_arrays(sample: SpanningSample, cot: SampleCotangent):
    n, n_l = sample.tau_values.shape
    d = sample.points.shape[1]
    bar_a = np.zeros((n, n_l))
    bar_j = np.zeros((n, n_l, d))
    if cot.phi is not None:
        bar_a += sample.g[:, None] * cot.phi
    if cot.grad_phi is not None:
        bar_j += sample.g[:, None, None] * cot.grad_phi
        bar_a += (cot.grad_phi @ sample.grad_g[:, :, None])[:, :, 0]
    if cot.tau_values is not None:
        bar_a += cot.tau_values
    if cot.div_tau is not None:
        bar_j += cot.div_tau
    if not (np.all(np.isfinite(bar_a)) and np.all(np.isfinite(bar_j))):
        raise NonFiniteSampleError("non-finite cotangent")
    return bar_a, bar_j


def backprop_parameter_gradient(
    net: Network,
    lifting: Lifting,
    points,
    cotangents: SampleCotangent,
    sample: Optional[SpanningSample] = None,
    per_point: bool = False,
) -> ParameterGradient:
    """Gradient of ``sum_points <cotangent, sample>`` with respect to every network parameter.

    ``points`` is a QuadratureRule or an (N, d) array.  With ``per_point`` the
    point axis is kept, giving per-point parameter gradients.
    """
    pts = getattr(points, "points", points)
    if sample is None or sample.cache is None:
        sample = spanning_sample(net, lifting, pts)
    cache = sample.cache
    act = net.activation
    bar_a, bar_j = _as_cotangent_arrays(sample, cotangents)

    gw, gb = [None] * net.n_layers, [None] * net.n_layers
    gm = np.zeros(bar_a.shape[0]) if per_point else 0.0
    for l in reversed(range(net.n_layers)):
        w = net.weights[l]
        z, zj = cache.pre[l], cache.pre_jacs[l]
        a_in, j_in = cache.inputs[l], cache.input_jacs[l]
        s1 = act.d1(z)
        # J_l = s1 * zj
        bar_s1 = np.sum(bar_j * zj, axis=2)
        bar_zj = s1[:, :, None] * bar_j
        bar_z = bar_a * s1 + bar_s1 * act.d2(z)
        if act.trainable:
            contrib = bar_a * act.dm_value(z) + bar_s1 * act.dm_d1(z)
            gm = gm + (contrib.sum(axis=1) if per_point else contrib.sum())
        # z = a_in W^T + b,  zj = W j_in
        # the input Jacobian of the first layer is the identity
        if per_point:
            jac_term = bar_zj if l == 0 else bar_zj @ np.swapaxes(j_in, 1, 2)
            gw[l] = bar_z[:, :, None] * a_in[:, None, :] + jac_term
        else:
            jac_term = bar_zj.sum(axis=0) if l == 0 else np.tensordot(bar_zj, j_in, axes=([0, 2], [0, 2]))
            gw[l] = bar_z.T @ a_in + jac_term
        gb[l] = bar_z if per_point else bar_z.sum(axis=0)
        if l:
            bar_a = bar_z @ w
            bar_j = w.T @ bar_zj
    return ParameterGradient(gw, gb, np.asarray(gm) if act.trainable else None)


def init_1d(n1: int, activation=None) -> Network:
    """Single hidden layer with breaking points at i / (n1 + 1), alternating orientation."""
    if n1 < 1:
        raise InvalidArgumentError("n1 must be >= 1")
    i = np.arange(1, n1 + 1)
    w = ((-1.0) ** (i + 1))[:, None]
    b = (-1.0) ** i * i / (n1 + 1)
    return Network((w,), (b,), activation or ReQU())


def init_tensor(n_per_axis: int, d: int, width: Optional[int] = None, activation=None) -> Network:
    """Axis-aligned breaking hyperplanes at i / (n_per_axis + 1) along each coordinate.

    Units are ordered axis by axis.  If ``width`` exceeds ``d * n_per_axis`` the
    pattern is repeated, the r-th repetition shifted by (1 - 2^-r) of a spacing.
    """
    if d not in (2, 3):
        raise InvalidArgumentError(f"tensor initialisation needs d in (2, 3), got {d}")
    if n_per_axis < 1:
        raise InvalidArgumentError("n_per_axis must be >= 1")
    base = d * n_per_axis
    width = base if width is None else int(width)
    if width < base:
        raise ConfigurationError(
            f"width {width} cannot hold {n_per_axis} breaking planes on each of {d} axes"
        )
    i = np.arange(1, n_per_axis + 1)
    sign = (-1.0) ** (i + 1)
    rows, bias = [], []
    rep = 0
    while len(rows) < width:
        shift = 1.0 - 0.5**rep
        pos = (i + shift) / (n_per_axis + 1)
        for k in range(d):
            for s, p in zip(sign, pos):
                if len(rows) == width:
                    break
                e = np.zeros(d)
                e[k] = s
                rows.append(e)
                bias.append(-s * p)
        rep += 1
    return Network((np.array(rows),), (np.array(bias),), activation or ReQU())


def init_identity_tail(net: Network, n_layers: Optional[int] = None) -> Network:
    """Set layers 2..L to identity weights and zero biases, optionally growing the net to ``n_layers``."""
    n_layers = net.n_layers if n_layers is None else int(n_layers)
    width = net.widths[0]
    if any(w != width for w in net.widths):
        raise ConfigurationError(f"identity layers need equal hidden widths, got {net.widths}")
    ws = [net.weights[0]] + [np.eye(width) for _ in range(n_layers - 1)]
    bs = [net.biases[0]] + [np.zeros(width) for _ in range(n_layers - 1)]
    return Network(tuple(ws), tuple(bs), net.activation)


def build_network(
    dim: int,
    width: int,
    layers: int = 1,
    activation=None,
    jitter: float = 0.0,
    jitter_seed: int = 0,
) -> Network:
    """Deterministic initial network for a unit box of dimension ``dim``."""
    activation = activation or ReQU()
    if dim == 1:
        net = init_1d(width, activation)
    else:
        if width % dim:
            raise ConfigurationError(
                f"width {width} is not a multiple of d={dim}; tensor initialisation places "
                f"width/d breaking planes per axis"
            )
        net = init_tensor(width // dim, dim, width, activation)
    net = init_identity_tail(net, layers)
    if jitter:
        rng = np.random.default_rng(jitter_seed)
        theta = net.parameters()
        theta = theta + jitter * rng.standard_normal(theta.size)
        if activation.trainable:
            theta[-1] = activation.m
        net = net.with_parameters(theta)
    return net
