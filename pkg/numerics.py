"""
Differentiable layer kernels for CaVINet
Every kernel works on batched numpy arrays (leading batch axis) and provides an
analytic backward pass; the model, trainer and visualizations are built from
these. Tensors are plain numpy arrays in row-major order.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import Config

logger = logging.getLogger(__name__)

TRAIN = 'train'
EVAL = 'eval'

INTERPRETATIONS = (
    'inverted-dropout',
    'dropout-ratio-is-drop-probability',
    'relu-subgradient-at-zero',
    'no-padding-default',
    'double-precision-gradcheck',
)


class ShapeError(ValueError):
    """Input shape does not match what the kernel was built for"""

    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected shape {expected}, got {actual}")


class KernelUsageError(RuntimeError):
    """Kernel called out of order (e.g. backward with no matching forward)"""


class NumericFailure(ArithmeticError):
    """Non-finite value produced where finite values are required"""


class LabelError(ValueError):
    """Class label outside the range a loss or head was sized for"""


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_tensor(rng, shape, fan_in, dtype, init):
    if init == 'zeros':
        return np.zeros(shape, dtype=dtype)
    if init == 'xavier':
        return (rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(dtype)
    return he_normal(rng, shape, fan_in, dtype)


class LayerKernel:
    """Base kernel: forward caches what backward needs; params are never written here"""
    kind = None
    stateful = False

    def __init__(self):
        self.params = []
        self._cache = None
        self.last_input = None

    def output_shape(self, in_shape):
        """Per-sample output shape for a per-sample input shape"""
        return tuple(in_shape)

    def forward(self, x, mode=EVAL, rng=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def share_params_from(self, other):
        """Point this kernel's parameters at another kernel's arrays"""
        if type(other) is not type(self) or len(other.params) != len(self.params):
            raise KernelUsageError(f"Cannot share parameters between {self.kind} and {other.kind}")
        self.params = other.params
        return self

    def _require_cache(self):
        if self._cache is None:
            raise KernelUsageError(f"{self.kind}: backward called with no matching forward")
        return self._cache

    def _check_grad(self, grad_out, expected):
        if tuple(grad_out.shape) != tuple(expected):
            raise ShapeError(f"{self.kind} backward", tuple(expected), tuple(grad_out.shape))

    def clear(self):
        self._cache = None
        self.last_input = None

    def __repr__(self):
        return f"{type(self).__name__}({self.kind})"


class Conv2D(LayerKernel):
    kind = 'conv2d'

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=0,
                 rng=None, dtype=np.float64, init='he'):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        weight = init_tensor(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype, init)
        bias = np.zeros(out_channels, dtype=dtype)
        self.params = [weight, bias]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError('conv2d input channels', (self.in_channels, h, w), tuple(in_shape))
        k, s, p = self.kernel_size, self.stride, self.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeError('conv2d spatial extent (too small for kernel)', (self.in_channels, k, k), tuple(in_shape))
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def _windows(self, xp):
        k, s = self.kernel_size, self.stride
        return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]

    def forward(self, x, mode=EVAL, rng=None):
        if x.ndim != 4:
            raise ShapeError('conv2d input (N, C, H, W)', ('N', self.in_channels, 'H', 'W'), tuple(x.shape))
        out_shape = self.output_shape(x.shape[1:])
        weight, bias = self.params
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        # (N, C, oh, ow, k, k) views of every receptive field, contracted with the filters
        windows = self._windows(xp)
        out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = out + bias[None, :, None, None]
        self._cache = (x.shape, xp)
        return np.ascontiguousarray(out.reshape((x.shape[0],) + out_shape))

    def backward(self, grad_out):
        x_shape, xp = self._require_cache()
        weight, _ = self.params
        n = x_shape[0]
        _, oh, ow = self.output_shape(x_shape[1:])
        self._check_grad(grad_out, (n, self.out_channels, oh, ow))
        k, s, p = self.kernel_size, self.stride, self.padding

        # Filter gradients reuse the forward windows
        windows = self._windows(xp)
        grad_w = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad_out.sum(axis=(0, 2, 3))

        # (N, oh, ow, C, k, k): contribution of each output location to each tap
        taps = np.tensordot(grad_out, weight, axes=([1], [0]))
        grad_xp = np.zeros(xp.shape, dtype=np.result_type(grad_out, weight))
        for i in range(k):
            for j in range(k):
                grad_xp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += \
                    taps[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, p:p + x_shape[2], p:p + x_shape[3]] if p else grad_xp
        return grad_x, [grad_w, grad_b]


class MaxPool2D(LayerKernel):
    kind = 'maxpool2d'
    stateful = True

    def __init__(self, size=2, stride=None):
        super().__init__()
        self.size = size
        self.stride = stride or size

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise ShapeError('maxpool2d spatial extent (too small for window)', (c, self.size, self.size), tuple(in_shape))
        return (c, (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1)

    def forward(self, x, mode=EVAL, rng=None):
        if x.ndim != 4:
            raise ShapeError('maxpool2d input (N, C, H, W)', ('N', 'C', 'H', 'W'), tuple(x.shape))
        c, oh, ow = self.output_shape(x.shape[1:])
        p, s = self.size, self.stride
        windows = sliding_window_view(x, (p, p), axis=(2, 3))[:, :, ::s, ::s]
        flat = windows.reshape(x.shape[0], c, oh, ow, p * p)
        # argmax picks the first maximum, so ties route the gradient to one cell
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx)
        self.last_input = x
        return out

    def backward(self, grad_out):
        x_shape, idx = self._require_cache()
        n, c, oh, ow = idx.shape
        self._check_grad(grad_out, (n, c, oh, ow))
        # Route each output gradient back to the cell that won its window
        di, dj = np.divmod(idx, self.size)
        rows = np.arange(oh)[None, None, :, None] * self.stride + di
        cols = np.arange(ow)[None, None, None, :] * self.stride + dj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
        np.add.at(grad_x, (np.broadcast_to(nn, idx.shape), np.broadcast_to(cc, idx.shape), rows, cols), grad_out)
        return grad_x, []


class ReLU(LayerKernel):
    kind = 'relu'

    def forward(self, x, mode=EVAL, rng=None):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad_out):
        mask = self._require_cache()
        self._check_grad(grad_out, mask.shape)
        return np.where(mask, grad_out, 0).astype(grad_out.dtype, copy=False), []


class Affine(LayerKernel):
    """y = W x + b with W stored (out, in)"""
    kind = 'affine'

    def __init__(self, in_dim, out_dim, rng=None, dtype=np.float64, init='he'):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        rng = rng if rng is not None else np.random.default_rng(0)
        weight = init_tensor(rng, (out_dim, in_dim), max(in_dim, 1), dtype, init)
        bias = np.zeros(out_dim, dtype=dtype)
        self.params = [weight, bias]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise ShapeError('affine input', (self.in_dim,), tuple(in_shape))
        return (self.out_dim,)

    def forward(self, x, mode=EVAL, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError('affine input (N, in)', ('N', self.in_dim), tuple(x.shape))
        weight, bias = self.params
        self._cache = x
        return x @ weight.T + bias

    def backward(self, grad_out):
        x = self._require_cache()
        weight, _ = self.params
        self._check_grad(grad_out, (x.shape[0], self.out_dim))
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
        return grad_out @ weight, [grad_w, grad_b]


class Dropout(LayerKernel):
    """Inverted dropout: survivors scaled by 1/(1-p) at train time, identity at eval"""
    kind = 'dropout'
    stateful = True

    def __init__(self, p=0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x, mode=EVAL, rng=None):
        if mode != TRAIN or self.p == 0.0:
            self._cache = ('identity', x.shape)
            self.last_input = x
            return x
        if rng is None:
            raise KernelUsageError("dropout in train mode needs a random stream")
        # Survivors are rescaled so the expected activation is unchanged
        keep = rng.random(x.shape) >= self.p
        mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.p)
        self._cache = ('mask', mask)
        self.last_input = x
        return x * mask

    def backward(self, grad_out):
        tag, payload = self._require_cache()
        if tag == 'identity':
            self._check_grad(grad_out, payload)
            return grad_out, []
        self._check_grad(grad_out, payload.shape)
        return grad_out * payload, []


class Sigmoid(LayerKernel):
    kind = 'sigmoid'

    def forward(self, x, mode=EVAL, rng=None):
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
        self._cache = out
        return out

    def backward(self, grad_out):
        out = self._require_cache()
        self._check_grad(grad_out, out.shape)
        return grad_out * out * (1.0 - out), []


class Softmax(LayerKernel):
    """Softmax over the last axis"""
    kind = 'softmax'

    def forward(self, x, mode=EVAL, rng=None):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)
        self._cache = out
        return out

    def backward(self, grad_out):
        out = self._require_cache()
        self._check_grad(grad_out, out.shape)
        dot = (grad_out * out).sum(axis=-1, keepdims=True)
        return out * (grad_out - dot), []


def forward(kernel, x, mode=EVAL, rng=None):
    """Run kernel forward; dropout draws from rng in train mode"""
    return kernel.forward(x, mode=mode, rng=rng)


def backward(kernel, x, grad_out, mode=EVAL, rng=None):
    """
    (grad_x, param_grads) for kernel evaluated at x

    Pure kernels replay their forward pass on x. Max-pool switches and dropout
    masks cannot be rebuilt from x alone, so those kernels need their last
    forward call to have been on this same x.
    """
    if kernel.stateful:
        seen = kernel.last_input
        if seen is None:
            raise KernelUsageError(f"{kernel.kind}: backward called with no matching forward")
        if seen is not x and (seen.shape != x.shape or not np.array_equal(seen, x)):
            raise KernelUsageError(f"{kernel.kind}: backward input differs from the last forward input")
    else:
        kernel.forward(x, mode=mode, rng=rng)
    return kernel.backward(grad_out)


# Losses: computed in float64, return (per-sample loss, gradient wrt the probabilities)

def binary_cross_entropy(o, y, eps=None):
    """-[y log o + (1-y) log(1-o)] with o clamped to [eps, 1-eps]"""
    eps = Config.LOSS_EPSILON if eps is None else eps
    o = np.asarray(o, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if o.shape != y.shape:
        raise ShapeError('binary cross-entropy labels', o.shape, y.shape)
    if np.any((y != 0) & (y != 1)):
        raise LabelError(f"verification labels must be 0 or 1, got {np.unique(y).tolist()}")
    oc = np.clip(o, eps, 1.0 - eps)
    loss = -(y * np.log(oc) + (1.0 - y) * np.log(1.0 - oc))
    inside = (o > eps) & (o < 1.0 - eps)
    grad = np.where(inside, -(y / oc) + (1.0 - y) / (1.0 - oc), 0.0)
    return loss, grad


def nll_loss(probs, labels, eps=None):
    """-log p[label] with p clamped to [eps, 1-eps]"""
    eps = Config.LOSS_EPSILON if eps is None else eps
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    n, classes = probs.shape
    if labels.shape[0] != n:
        raise ShapeError('nll labels', (n,), labels.shape)
    if np.any(labels < 0) or np.any(labels >= classes):
        bad = labels[(labels < 0) | (labels >= classes)]
        raise LabelError(f"identity labels {bad.tolist()} outside [0, {classes})")
    rows = np.arange(n)
    picked = probs[rows, labels]
    pc = np.clip(picked, eps, 1.0 - eps)
    loss = -np.log(pc)
    grad = np.zeros_like(probs)
    inside = (picked > eps) & (picked < 1.0 - eps)
    grad[rows, labels] = np.where(inside, -1.0 / pc, 0.0)
    return loss, grad


# Gradient checking

@dataclass
class GradCheckReport:
    max_rel_err: float
    num_params_checked: int
    passed: bool
    tolerance: float
    worst: str = ''
    failures: list = field(default_factory=list)
    kinks: int = 0

    def to_dict(self):
        return {
            'max_rel_err': self.max_rel_err,
            'num_params_checked': self.num_params_checked,
            'pass': self.passed,
            'tolerance': self.tolerance,
            'worst': self.worst,
            'kinks': self.kinks,
            'failures': list(self.failures),
        }


def relative_error(analytic, numeric, floor=1e-3):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating"""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def one_sided_slopes(objective, flat, i, step, f_base, f_plus, f_minus):
    """Second-order forward and backward differences at flat[i]"""
    original = flat[i]
    flat[i] = original + 2.0 * step
    f_plus2 = objective()
    flat[i] = original - 2.0 * step
    f_minus2 = objective()
    flat[i] = original
    forward_slope = (-f_plus2 + 4.0 * f_plus - 3.0 * f_base) / (2.0 * step)
    backward_slope = (3.0 * f_base - 4.0 * f_minus + f_minus2) / (2.0 * step)
    return forward_slope, backward_slope


def check_gradients(objective, tensors, analytic, tolerance=None, step=None, max_entries=None, rng=None):
    """
    Compare analytic gradients against central differences

    An entry sitting on a ReLU kink (pre-activation exactly 0, e.g. a zero bias
    behind a fully dropped row) has a central difference halfway between the two
    one-sided slopes. Such an entry passes when the analytic subgradient matches
    either one-sided slope; it is counted in report.kinks.

    Args:
        objective: callable returning the scalar objective for the current tensor contents
        tensors: dict name -> array, perturbed in place (and restored)
        analytic: dict name -> gradient array with the same shape
        max_entries: if set, check at most this many entries per tensor (chosen by rng)
    """
    tolerance = Config.GRADCHECK_TOLERANCE if tolerance is None else tolerance
    step = Config.GRADCHECK_STEP if step is None else step
    rng = rng if rng is not None else np.random.default_rng(0)

    max_err = 0.0
    checked = 0
    kinks = 0
    worst = ''
    failures = []
    f_base = None
    for name, tensor in tensors.items():
        if tensor.dtype != np.float64:
            raise NumericFailure(f"gradient check needs float64 tensors; {name} is {tensor.dtype}")
        grad = analytic[name]
        if grad.shape != tensor.shape:
            failures.append(f"{name}: gradient shape {grad.shape} != parameter shape {tensor.shape}")
            max_err = float('inf')
            continue
        flat = tensor.reshape(-1)
        if not np.shares_memory(flat, tensor):
            raise KernelUsageError(f"{name} is not contiguous; cannot perturb in place")
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        grad_flat = grad.reshape(-1)
        for i in indices:
            # Central difference around the current value, then restore it
            original = flat[i]
            flat[i] = original + step
            f_plus = objective()
            flat[i] = original - step
            f_minus = objective()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            checked += 1
            if not (np.isfinite(numeric) and np.isfinite(grad_flat[i])):
                failures.append(f"{name}[{i}]: non-finite (analytic={grad_flat[i]}, numeric={numeric})")
                max_err = float('inf')
                worst = f"{name}[{i}]"
                continue
            err = relative_error(float(grad_flat[i]), float(numeric))
            if err > tolerance:
                # parameters are restored, so the unperturbed objective is shared by every entry
                if f_base is None:
                    f_base = objective()
                slopes = one_sided_slopes(objective, flat, i, step, f_base, f_plus, f_minus)
                kink_err = min(relative_error(float(grad_flat[i]), float(s)) for s in slopes)
                if kink_err <= tolerance:
                    kinks += 1
                    logger.debug(f"{name}[{i}] on a kink: analytic={grad_flat[i]:.6e} "
                                 f"one-sided={slopes[0]:.6e}/{slopes[1]:.6e}")
                    err = kink_err
            if err > max_err:
                max_err = err
                worst = f"{name}[{i}]"
            if err > tolerance:
                failures.append(f"{name}[{i}]: analytic={grad_flat[i]:.6e} numeric={numeric:.6e} rel={err:.2e}")

    passed = bool(np.isfinite(max_err) and max_err <= tolerance)
    if not passed:
        logger.debug(f"Gradient check failed: max_rel_err={max_err:.3e} worst={worst}")
    return GradCheckReport(max_rel_err=float(max_err), num_params_checked=checked, passed=passed,
                           tolerance=tolerance, worst=worst, failures=failures[:20], kinks=kinks)


def kernel_objective(kernel, x, mode=TRAIN, seed=0):
    """Scalarize kernel output with a fixed random projection; dropout mask is replayed from seed"""
    projection = np.random.default_rng(seed + 1).uniform(-1.0, 1.0, size=kernel.forward(
        x, mode=mode, rng=np.random.default_rng(seed)).shape)

    def objective():
        out = kernel.forward(x, mode=mode, rng=np.random.default_rng(seed))
        return float((out * projection).sum())

    kernel.forward(x, mode=mode, rng=np.random.default_rng(seed))
    grad_x, grad_params = kernel.backward(projection.astype(x.dtype))
    tensors = {'input': x}
    analytic = {'input': grad_x}
    for i, (param, grad) in enumerate(zip(kernel.params, grad_params)):
        tensors[f"param{i}"] = param
        analytic[f"param{i}"] = grad
    return objective, tensors, analytic


def grad_check(target, x=None, tolerance=None, mode=TRAIN, seed=0, max_entries=None):
    """
    Gradient check for a LayerKernel (on input x) or any object exposing
    gradcheck_objective(x, seed) -> (objective, tensors, analytic)
    """
    tolerance = Config.GRADCHECK_TOLERANCE if tolerance is None else tolerance
    try:
        if isinstance(target, LayerKernel):
            objective, tensors, analytic = kernel_objective(target, x, mode=mode, seed=seed)
        else:
            objective, tensors, analytic = target.gradcheck_objective(x, seed=seed)
        with np.errstate(over='raise', invalid='raise'):
            return check_gradients(objective, tensors, analytic, tolerance=tolerance,
                                   max_entries=max_entries, rng=np.random.default_rng(seed))
    except (FloatingPointError, NumericFailure) as e:
        logger.error(f"Gradient check hit a numeric failure: {e}")
        return GradCheckReport(max_rel_err=float('inf'), num_params_checked=0, passed=False,
                               tolerance=tolerance, worst='', failures=[f"numeric failure: {e}"])


def first_non_finite(named_arrays):
    """Name of the first array containing a non-finite value, or None"""
    for name, value in named_arrays:
        if not np.all(np.isfinite(value)):
            return name
    return None
