"""Energy models: differentiable unnormalized log-densities.

Provides the model contract used by every sampler and the trainer, plus
concrete instances: closed-form analytic densities (isotropic Gaussian,
Gaussian mixture, concentric rings) used as verification targets, and a
small fully-connected network with hand-written reverse-mode gradients
used as the trainable model.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import (DimensionMismatchError, ParseError,
                     UnsupportedOperationError)

PARAM_MAGIC = b"ANISO1"


# ---------------------------------------------------------------------------
# Parameter vector


@dataclass
class ParamVector:
    """Flat parameter vector with named, non-overlapping segments.

    ``layout`` maps a segment name to a (start, length) index range; the
    ranges must partition [0, len(values)).
    """

    values: np.ndarray
    layout: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("ParamVector values must be one-dimensional")
        self._check_partition()

    def _check_partition(self):
        spans = sorted((start, start + length, name)
                       for name, start, length in self.layout)
        cursor = 0
        for start, end, name in spans:
            if start != cursor:
                raise ValueError(
                    f"segment {name!r} starts at {start}, expected {cursor}")
            cursor = end
        if cursor != self.values.size:
            raise ValueError(
                f"segments cover {cursor} entries, vector has {self.values.size}")

    def segment(self, name: str) -> np.ndarray:
        for seg_name, start, length in self.layout:
            if seg_name == name:
                return self.values[start:start + length]
        raise KeyError(name)

    def segment_names(self) -> list[str]:
        return [name for name, _, _ in self.layout]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def __len__(self) -> int:
        return self.values.size

    @staticmethod
    def from_segments(pairs: list[tuple[str, np.ndarray]]) -> "ParamVector":
        """Build a vector by concatenating named arrays (flattened in order)."""
        layout = []
        chunks = []
        start = 0
        for name, arr in pairs:
            flat = np.asarray(arr, dtype=np.float64).ravel()
            layout.append((name, start, flat.size))
            chunks.append(flat)
            start += flat.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return ParamVector(values, tuple(layout))


_EMPTY_LAYOUT: tuple = ()


def _empty_params() -> ParamVector:
    return ParamVector(np.zeros(0), _EMPTY_LAYOUT)


# ---------------------------------------------------------------------------
# Model contract


class EnergyModel:
    """Contract for an unnormalized log-density f(x) with gradients.

    Implementations must be pure in (parameters, x): evaluation never
    mutates state, so concurrent calls from parallel chains are safe.
    ``eval`` must return a finite value for every finite input.
    """

    dim: int

    @property
    def param(self) -> ParamVector:
        raise NotImplementedError

    @param.setter
    def param(self, value: ParamVector):
        raise NotImplementedError

    def eval_batch(self, x: np.ndarray) -> np.ndarray:
        """f at each row of x; shape (n,)."""
        raise NotImplementedError

    def grad_x_batch(self, x: np.ndarray) -> np.ndarray:
        """d f / d x at each row of x; shape (n, dim)."""
        raise NotImplementedError

    def grad_theta_single(self, x: np.ndarray) -> ParamVector:
        """d f / d parameters at one point."""
        raise NotImplementedError

    def grad_theta_batch_mean(self, x: np.ndarray) -> np.ndarray:
        """Flat parameter gradient of mean_i f(x_i); default loops rows."""
        n = x.shape[0]
        acc = np.zeros(len(self.param))
        for i in range(n):
            acc += self.grad_theta_single(x[i]).values
        return acc / n


class AnalyticEnergy(EnergyModel):
    """Closed-form target with an optionally known log normalizer.

    ``log_norm`` is log Z with Z the integral of exp(f); present for every
    built-in analytic target. ``max_energy`` is max_x f(x), used to
    normalize drift functions so V(mode) = 1.
    """

    log_norm: float | None = None

    def max_energy(self) -> float:
        raise NotImplementedError

    def default_box(self) -> tuple[tuple[float, float], ...]:
        """Bounding box holding essentially all target mass, per coordinate."""
        raise NotImplementedError


def _as_point(model: EnergyModel, x, what: str = "point") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size != model.dim:
        raise DimensionMismatchError(model.dim, arr.size, what)
    return arr


def eval_energy(model: EnergyModel, x) -> float:
    """f(x) at a single point."""
    point = _as_point(model, x)
    return float(model.eval_batch(point[None, :])[0])


def grad_x(model: EnergyModel, x) -> np.ndarray:
    """Gradient of f in x at a single point."""
    point = _as_point(model, x)
    return model.grad_x_batch(point[None, :])[0]


def grad_theta(model: EnergyModel, x) -> ParamVector:
    """Gradient of f in the model parameters at a single point."""
    point = _as_point(model, x)
    return model.grad_theta_single(point)


def log_density(model: AnalyticEnergy, x) -> float:
    """Normalized log-density f(x) - log Z."""
    if getattr(model, "log_norm", None) is None:
        raise UnsupportedOperationError(
            "log_density requires a model with a known log normalizer")
    return eval_energy(model, x) - model.log_norm


# ---------------------------------------------------------------------------
# Quadrature (1-D / 2-D only, by design)


def trapezoid_log_partition(energy_fn, box, tol: float = 1e-10,
                            max_doublings: int = 22) -> float:
    """log of the integral of exp(energy) over a 1-D or 2-D box.

    Trapezoid rule with grid doubling until the change drops below tol
    (relative, in log space). ``energy_fn`` maps (n, dim) to (n,).
    """
    box = tuple((float(lo), float(hi)) for lo, hi in box)
    dim = len(box)
    if dim not in (1, 2):
        raise UnsupportedOperationError("quadrature supports only 1-D/2-D")

    def log_integral(n: int) -> float:
        axes = [np.linspace(lo, hi, n) for lo, hi in box]
        if dim == 1:
            pts = axes[0][:, None]
            logf = energy_fn(pts)
            weights = np.full(n, 1.0)
            weights[0] = weights[-1] = 0.5
            h = (box[0][1] - box[0][0]) / (n - 1)
            m = logf.max()
            return m + math.log(float(np.sum(np.exp(logf - m) * weights)) * h)
        xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        logf = energy_fn(pts).reshape(n, n)
        w = np.full(n, 1.0)
        w[0] = w[-1] = 0.5
        weights = np.outer(w, w)
        hx = (box[0][1] - box[0][0]) / (n - 1)
        hy = (box[1][1] - box[1][0]) / (n - 1)
        m = logf.max()
        return m + math.log(float(np.sum(np.exp(logf - m) * weights)) * hx * hy)

    n = 33
    prev = log_integral(n)
    for _ in range(max_doublings):
        n = 2 * n - 1
        cur = log_integral(n)
        if abs(cur - prev) < tol:
            return cur
        prev = cur
        if (dim == 2 and n > 3000) or (dim == 1 and n > 2_000_000):
            break
    return prev


# ---------------------------------------------------------------------------
# Analytic targets


class GaussianEnergy(AnalyticEnergy):
    """Isotropic Gaussian: f(x) = -||x - mean||^2 / (2 sigma^2).

    The mean is the trainable parameter vector, which makes this the
    exponential-family test bed for the gradient estimator (with sigma=1,
    d f / d mean = x - mean).
    """

    def __init__(self, mean, sigma: float = 1.0):
        mean = np.asarray(mean, dtype=np.float64).ravel()
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.dim = mean.size
        self.sigma = float(sigma)
        self._param = ParamVector.from_segments([("mean", mean)])
        self.log_norm = 0.5 * self.dim * math.log(2 * math.pi * sigma * sigma)

    @property
    def mean(self) -> np.ndarray:
        return self._param.segment("mean")

    @property
    def param(self) -> ParamVector:
        return self._param

    @param.setter
    def param(self, value: ParamVector):
        if len(value) != len(self._param):
            raise DimensionMismatchError(len(self._param), len(value), "param")
        self._param = ParamVector(value.values, self._param.layout)

    def eval_batch(self, x):
        d = x - self.mean
        return -0.5 * np.sum(d * d, axis=1) / (self.sigma ** 2)

    def grad_x_batch(self, x):
        return -(x - self.mean) / (self.sigma ** 2)

    def grad_theta_single(self, x):
        return ParamVector.from_segments(
            [("mean", (x - self.mean) / (self.sigma ** 2))])

    def grad_theta_batch_mean(self, x):
        return (np.mean(x, axis=0) - self.mean) / (self.sigma ** 2)

    def max_energy(self) -> float:
        return 0.0

    def default_box(self):
        r = 10.0 * self.sigma
        return tuple((m - r, m + r) for m in self.mean)


class MixtureEnergy(AnalyticEnergy):
    """Isotropic Gaussian mixture with simplex weights.

    f(x) = log sum_j w_j exp(-||x - m_j||^2 / (2 sigma^2)); since the
    weights sum to one, log Z equals the single-Gaussian value.
    """

    def __init__(self, means, weights, sigma: float = 1.0):
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        weights = np.asarray(weights, dtype=np.float64).ravel()
        if means.shape[0] != weights.size:
            raise ValueError("one weight per component required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must form a simplex (sum to 1)")
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.means = means
        self.weights = weights
        self.sigma = float(sigma)
        self.dim = means.shape[1]
        self.log_norm = 0.5 * self.dim * math.log(2 * math.pi * sigma * sigma)
        self._max_energy: float | None = None

    @property
    def param(self) -> ParamVector:
        return _empty_params()

    def _log_terms(self, x):
        # (n, J): log w_j - ||x - m_j||^2 / (2 sigma^2)
        diff = x[:, None, :] - self.means[None, :, :]
        sq = np.sum(diff * diff, axis=2)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw[None, :] - 0.5 * sq / (self.sigma ** 2), diff

    def eval_batch(self, x):
        terms, _ = self._log_terms(x)
        m = terms.max(axis=1, keepdims=True)
        return (m + np.log(np.sum(np.exp(terms - m), axis=1, keepdims=True)))[:, 0]

    def grad_x_batch(self, x):
        terms, diff = self._log_terms(x)
        m = terms.max(axis=1, keepdims=True)
        resp = np.exp(terms - m)
        resp /= resp.sum(axis=1, keepdims=True)
        return -np.einsum("nj,njd->nd", resp, diff) / (self.sigma ** 2)

    def grad_theta_single(self, x):
        return _empty_params()

    def grad_theta_batch_mean(self, x):
        return np.zeros(0)

    def max_energy(self) -> float:
        if self._max_energy is None:
            # The mode may sit between overlapping components; refine from
            # every mean and every pairwise midpoint.
            starts = [m for m in self.means]
            for i in range(len(self.means)):
                for j in range(i + 1, len(self.means)):
                    starts.append(0.5 * (self.means[i] + self.means[j]))
            best = -math.inf
            for s in starts:
                res = optimize.minimize(
                    lambda p: -self.eval_batch(p[None, :])[0], s,
                    jac=lambda p: -self.grad_x_batch(p[None, :])[0],
                    method="BFGS")
                best = max(best, -res.fun)
            self._max_energy = float(best)
        return self._max_energy

    def default_box(self):
        r = 10.0 * self.sigma
        lo = self.means.min(axis=0) - r
        hi = self.means.max(axis=0) + r
        return tuple((float(a), float(b)) for a, b in zip(lo, hi))


class RingsEnergy(AnalyticEnergy):
    """Concentric-rings density: f(x) = -min_j (||x|| - r_j)^2 / (2 w^2).

    Smooth almost everywhere. On the non-differentiable set the gradient
    uses the nearest-ring branch with the lowest index (np.argmin's
    tie-break); at the origin it returns the zero subgradient.
    """

    def __init__(self, radii=(0.5, 1.0, 1.5), width: float = 0.05):
        radii = tuple(float(r) for r in radii)
        if not radii or any(r <= 0 for r in radii):
            raise ValueError("radii must be positive")
        if width <= 0:
            raise ValueError("width must be positive")
        self.radii = radii
        self.width = float(width)
        self.dim = 2
        self.log_norm = self._radial_log_norm()

    def _radial_log_norm(self) -> float:
        # Z = 2 pi * integral_0^R  r * exp(f(r)) dr, 1-D trapezoid.
        rmax = max(self.radii) + 12.0 * self.width
        radii = np.array(self.radii)

        def fn(pts):
            r = pts[:, 0]
            d = np.min((r[:, None] - radii[None, :]) ** 2, axis=1)
            with np.errstate(divide="ignore"):
                return np.where(r > 0, np.log(np.maximum(r, 1e-300)), -np.inf) \
                    - 0.5 * d / (self.width ** 2)

        return math.log(2 * math.pi) + trapezoid_log_partition(
            fn, ((0.0, rmax),), tol=1e-12)

    @property
    def param(self) -> ParamVector:
        return _empty_params()

    def eval_batch(self, x):
        r = np.linalg.norm(x, axis=1)
        d = (r[:, None] - np.array(self.radii)[None, :]) ** 2
        return -0.5 * d.min(axis=1) / (self.width ** 2)

    def grad_x_batch(self, x):
        r = np.linalg.norm(x, axis=1)
        d = np.abs(r[:, None] - np.array(self.radii)[None, :])
        nearest = np.array(self.radii)[np.argmin(d, axis=1)]
        safe_r = np.where(r > 0, r, 1.0)
        scale = -(r - nearest) / (self.width ** 2) / safe_r
        grad = x * scale[:, None]
        grad[r == 0] = 0.0
        return grad

    def grad_theta_single(self, x):
        return _empty_params()

    def grad_theta_batch_mean(self, x):
        return np.zeros(0)

    def max_energy(self) -> float:
        return 0.0

    def default_box(self):
        r = max(self.radii) + 12.0 * self.width
        return ((-r, r), (-r, r))


# ---------------------------------------------------------------------------
# Neural energy


def _leaky(s, leak):
    return np.where(s > 0, s, leak * s)


def _leaky_slope(s, leak):
    return np.where(s > 0, 1.0, leak)


class NeuralEnergy(EnergyModel):
    """Fully-connected scalar energy with leaky-ReLU hidden layers.

    Gradients in both x and the parameters are hand-written reverse-mode
    passes over the stored activations; correctness is anchored by the
    finite-difference tests rather than a framework.
    """

    def __init__(self, dim: int, hidden=(32, 64), leak: float = 0.05,
                 init_rng: np.random.Generator | None = None,
                 init_scale: float = 1.0):
        if not 0 < leak < 1:
            raise ValueError("leak must lie in (0, 1)")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.leak = float(leak)
        self.widths = (self.dim, *self.hidden, 1)
        segs = []
        rng = init_rng
        for i in range(len(self.widths) - 1):
            fan_in, fan_out = self.widths[i], self.widths[i + 1]
            if rng is None:
                w = np.zeros((fan_out, fan_in))
            else:
                # He-style scaling adjusted for the leaky slope.
                std = init_scale * math.sqrt(2.0 / (fan_in * (1 + leak * leak)))
                w = rng.normal(0.0, std, size=(fan_out, fan_in))
            segs.append((f"W{i}", w))
            segs.append((f"b{i}", np.zeros(fan_out)))
        self._param = ParamVector.from_segments(segs)

    @property
    def param(self) -> ParamVector:
        return self._param

    @param.setter
    def param(self, value: ParamVector):
        if len(value) != len(self._param):
            raise DimensionMismatchError(len(self._param), len(value), "param")
        self._param = ParamVector(value.values, self._param.layout)

    def _weights(self):
        n_layers = len(self.widths) - 1
        ws, bs = [], []
        for i in range(n_layers):
            w = self._param.segment(f"W{i}").reshape(
                self.widths[i + 1], self.widths[i])
            ws.append(w)
            bs.append(self._param.segment(f"b{i}"))
        return ws, bs

    def _forward(self, x):
        ws, bs = self._weights()
        acts = [x]
        pre = []
        a = x
        last = len(ws) - 1
        for i, (w, b) in enumerate(zip(ws, bs)):
            s = a @ w.T + b
            pre.append(s)
            a = s if i == last else _leaky(s, self.leak)
            acts.append(a)
        return pre, acts

    def eval_batch(self, x):
        _, acts = self._forward(x)
        return acts[-1][:, 0]

    def _backward_deltas(self, pre):
        # delta_i = d f / d pre-activation of layer i, shape (n, width_i+1)
        n = pre[-1].shape[0]
        deltas = [None] * len(pre)
        deltas[-1] = np.ones((n, 1))
        ws, _ = self._weights()
        for i in range(len(pre) - 2, -1, -1):
            upstream = deltas[i + 1] @ ws[i + 1]
            deltas[i] = upstream * _leaky_slope(pre[i], self.leak)
        return deltas

    def grad_x_batch(self, x):
        pre, _ = self._forward(x)
        deltas = self._backward_deltas(pre)
        ws, _ = self._weights()
        return deltas[0] @ ws[0]

    def grad_theta_single(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        grads = self._theta_grads(x, average=False)
        return ParamVector(grads, self._param.layout)

    def grad_theta_batch_mean(self, x):
        return self._theta_grads(np.asarray(x, dtype=np.float64), average=True)

    def _theta_grads(self, x, average: bool):
        pre, acts = self._forward(x)
        deltas = self._backward_deltas(pre)
        n = x.shape[0]
        scale = 1.0 / n if average else 1.0
        out = np.empty(len(self._param))
        for i in range(len(pre)):
            dw = deltas[i].T @ acts[i] * scale
            db = deltas[i].sum(axis=0) * scale
            name_w, name_b = f"W{i}", f"b{i}"
            for name, seg in ((name_w, dw.ravel()), (name_b, db)):
                for seg_name, start, length in self._param.layout:
                    if seg_name == name:
                        out[start:start + length] = seg
                        break
        return out


# ---------------------------------------------------------------------------
# Serialization


def params_to_bytes(pv: ParamVector) -> bytes:
    buf = io.BytesIO()
    buf.write(PARAM_MAGIC)
    buf.write(struct.pack("<I", len(pv.layout)))
    for name, start, length in pv.layout:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", start, length))
    buf.write(np.asarray(pv.values, dtype="<f8").tobytes())
    return buf.getvalue()


def params_from_bytes(data: bytes) -> ParamVector:
    if data[:6] != PARAM_MAGIC:
        raise ParseError("bad magic, expected ANISO1", offset=0)
    pos = 6
    if len(data) < pos + 4:
        raise ParseError("truncated segment count", offset=pos)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    layout = []
    for _ in range(count):
        if len(data) < pos + 2:
            raise ParseError("truncated segment name length", offset=pos)
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if len(data) < pos + nlen + 8:
            raise ParseError("truncated segment entry", offset=pos)
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        start, length = struct.unpack_from("<II", data, pos)
        pos += 8
        layout.append((name, start, length))
    total = sum(length for _, _, length in layout)
    expected = total * 8
    payload = data[pos:]
    if len(payload) < expected:
        raise ParseError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}",
            offset=pos + len(payload))
    values = np.frombuffer(payload[:expected], dtype="<f8").copy()
    return ParamVector(values, tuple(layout))


def write_params(pv: ParamVector, path):
    from .data import atomic_write_bytes
    atomic_write_bytes(path, params_to_bytes(pv))


def read_params(path) -> ParamVector:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())


def _fmt_floats(values) -> str:
    return ",".join(repr(float(v)) for v in np.asarray(values).ravel())


def model_to_text(model: EnergyModel) -> str:
    """Shape parameters as a key=value block (one key per line)."""
    if isinstance(model, GaussianEnergy):
        lines = ["kind=gaussian", f"dim={model.dim}",
                 f"mean={_fmt_floats(model.mean)}", f"sigma={model.sigma!r}"]
    elif isinstance(model, MixtureEnergy):
        rows = ";".join(_fmt_floats(m) for m in model.means)
        lines = ["kind=gmm", f"dim={model.dim}", f"means={rows}",
                 f"weights={_fmt_floats(model.weights)}",
                 f"sigma={model.sigma!r}"]
    elif isinstance(model, RingsEnergy):
        lines = ["kind=rings", f"radii={_fmt_floats(model.radii)}",
                 f"width={model.width!r}"]
    elif isinstance(model, NeuralEnergy):
        lines = ["kind=neural", f"dim={model.dim}",
                 "hidden=" + ",".join(str(h) for h in model.hidden),
                 f"leak={model.leak!r}"]
    else:
        raise UnsupportedOperationError(
            f"cannot serialize model type {type(model).__name__}")
    return "\n".join(lines) + "\n"


def model_from_text(text: str, params: ParamVector | None = None) -> EnergyModel:
    kv = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        kv[key.strip()] = value.strip()
    kind = kv.get("kind")
    if kind == "gaussian":
        model = GaussianEnergy([float(v) for v in kv["mean"].split(",")],
                               sigma=float(kv["sigma"]))
    elif kind == "gmm":
        means = [[float(v) for v in row.split(",")]
                 for row in kv["means"].split(";")]
        model = MixtureEnergy(means,
                              [float(v) for v in kv["weights"].split(",")],
                              sigma=float(kv["sigma"]))
    elif kind == "rings":
        model = RingsEnergy([float(v) for v in kv["radii"].split(",")],
                            width=float(kv["width"]))
    elif kind == "neural":
        model = NeuralEnergy(int(kv["dim"]),
                             hidden=[int(h) for h in kv["hidden"].split(",")],
                             leak=float(kv["leak"]))
    else:
        raise ParseError(f"unknown model kind {kind!r}")
    if params is not None:
        model.param = params
    return model
