"""Minimal CNN substrate with explicit forward/backward passes.

Layers are plain functions returning ``(output, cache)`` with matching
``*_backward(output_gradient, cache)`` companions computing exact
gradients.  ``GuidedNet`` assembles them into the prior-guided model:
a stem that concatenates frozen bright/dark prior channels with learned
convolution outputs (channel budget fixed at ``total_channels``),
followed by conv/batch-norm/ReLU blocks, global average pooling and a
linear classifier head.

Training runs in float32; a float64 mode exists for gradient checking.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import priors as _priors
from .priors import GaussianKernel, make_gaussian_kernel


class ShapeMismatch(ValueError):
    """Tensor shapes do not agree with the operation's contract."""


class DegenerateBatch(ValueError):
    """Train-mode batch normalization was given a batch of one."""


class LabelOutOfRange(ValueError):
    """A class label lies outside the valid range."""


class OddSpatialDim(ValueError):
    """The guided stem requires even input height and width."""


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class Param:
    """A named tensor; learnable ones carry a same-shape gradient buffer."""

    __slots__ = ("value", "grad", "frozen")

    def __init__(self, value: np.ndarray, frozen: bool = False):
        self.value = value
        self.frozen = bool(frozen)
        self.grad = None if frozen else np.zeros_like(value)


class ModelParams:
    """Ordered collection of named parameters."""

    def __init__(self):
        self._by_name: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> Param:
        if name in self._by_name:
            raise ValueError(f"duplicate tensor name {name!r}")
        p = Param(np.asarray(value), frozen)
        self._by_name[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __len__(self) -> int:
        return len(self._by_name)

    def names(self):
        return list(self._by_name)

    def items(self):
        return self._by_name.items()

    def learnable(self):
        return ((n, p) for n, p in self._by_name.items() if not p.frozen)


def sgd_step(params: ModelParams, lr: float) -> None:
    """w <- w - lr * g for every learnable tensor, then zero the gradients."""
    for _, p in params.learnable():
        p.value -= p.value.dtype.type(lr) * p.grad
        p.grad[...] = 0.0


def param_count(params: ModelParams) -> int:
    """Number of learnable scalars (frozen tensors excluded)."""
    return sum(p.value.size for _, p in params.learnable())


def kaiming_uniform_init(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Uniform in [-b, b] with b = sqrt(6 / fan_in)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) >= 2:
        fan_in = shape[1] * int(np.prod(shape[2:], dtype=np.int64))
    else:
        fan_in = shape[0]
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive for shape {shape}")
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
    )
    return view.reshape(n, c * kh * kw, oh * ow)


def conv2d_forward(x: np.ndarray, weights: np.ndarray, stride: int = 1, padding: int = 0):
    """Cross-correlation with zero padding, no bias.  x: (N,C,H,W), w: (O,I,kh,kw)."""
    x = np.asarray(x)
    w = np.asarray(weights)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D tensors, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ShapeMismatch(f"input has {c} channels, kernel expects {i}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch("kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    y = (w.reshape(o, -1) @ cols).reshape(n, o, oh, ow)
    cache = (cols, w, x.shape, stride, padding, oh, ow)
    return y, cache


def conv2d_backward(dy: np.ndarray, cache, need_input_grad: bool = True):
    cols, w, x_shape, stride, padding, oh, ow = cache
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    dy2 = dy.reshape(n, o, oh * ow)
    dw = np.matmul(dy2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    if not need_input_grad:
        return None, dw
    dcols = (w.reshape(o, -1).T @ dy2).reshape(n, c, kh, kw, oh, ow)
    hp, wp = h + 2 * padding, wd + 2 * padding
    dxp = np.zeros((n, c, hp, wp), dtype=dy.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dxp[
                :, :,
                ki : ki + (oh - 1) * stride + 1 : stride,
                kj : kj + (ow - 1) * stride + 1 : stride,
            ] += dcols[:, :, ki, kj]
    dx = dxp[:, :, padding : hp - padding, padding : wp - padding] if padding else dxp
    return np.ascontiguousarray(dx), dw


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
):
    """Per-channel normalization; train mode uses batch stats and, unless
    disabled, updates the running estimates in place (unbiased variance)."""
    if x.ndim != 4:
        raise ShapeMismatch(f"batchnorm expects (N,C,H,W), got {x.shape}")
    if train:
        if x.shape[0] < 2:
            raise DegenerateBatch("train-mode batch normalization needs batch >= 2")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            cnt = x.shape[0] * x.shape[2] * x.shape[3]
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * (var * (cnt / (cnt - 1.0)))
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv, gamma)


def batchnorm_backward(dy: np.ndarray, cache):
    xhat, inv, gamma = cache
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    t1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    t2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv[None, :, None, None] / n) * (n * dxhat - t1 - xhat * t2)
    return dx, dgamma, dbeta


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(dy: np.ndarray, mask: np.ndarray):
    return dy * mask


def global_avg_pool_forward(x: np.ndarray):
    """(N,C,H,W) -> (N,C) spatial mean per channel."""
    if x.ndim != 4:
        raise ShapeMismatch(f"global average pool expects (N,C,H,W), got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dy: np.ndarray, x_shape):
    n, c, h, w = x_shape
    return np.ascontiguousarray(
        np.broadcast_to((dy / (h * w))[:, :, None, None], x_shape)
    )


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """y = x @ W.T + b with x: (N,F), W: (O,F), b: (O,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear got x {x.shape}, weight {weight.shape}")
    return x @ weight.T + bias, (x, weight)


def linear_backward(dy: np.ndarray, cache):
    x, weight = cache
    return dy @ weight, dy.T @ x, dy.sum(axis=0)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood; returns (loss, logit gradient).

    Stabilized by max subtraction; gradient is (softmax - onehot) / N.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"got logits {logits.shape}, labels {labels.shape}")
    ncls = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= ncls):
        raise LabelOutOfRange(f"labels must lie in [0, {ncls}), got {labels}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# model configuration
# ---------------------------------------------------------------------------

VARIANTS = ("baseline", "dark_only", "bright_only", "dark_bright")
_PRIOR_CHANNELS = {"baseline": 0, "dark_only": 1, "bright_only": 1, "dark_bright": 2}


@dataclass(frozen=True)
class GuidedStemConfig:
    """First-layer configuration: prior channels plus learned convolutions.

    The channel budget ``total_channels`` is fixed; each prior channel in
    the chosen variant displaces one learned channel.
    """

    variant: str = "dark_bright"
    total_channels: int = 64
    kernel_size: int = 7
    stride: int = 2
    padding: int = 3
    sigma: float = 1.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown stem variant {self.variant!r}")
        # keep sigma exactly representable in the float32 checkpoint encoding
        object.__setattr__(self, "sigma", float(np.float32(self.sigma)))
        if self.learned_channels <= 0:
            raise ValueError("total_channels leaves no learned channels")

    @property
    def prior_channels(self) -> int:
        return _PRIOR_CHANNELS[self.variant]

    @property
    def learned_channels(self) -> int:
        return self.total_channels - self.prior_channels


@dataclass(frozen=True)
class BodyBlock:
    out_channels: int = 32
    kernel_size: int = 3
    stride: int = 2


@dataclass(frozen=True)
class ModelConfig:
    stem: GuidedStemConfig = GuidedStemConfig()
    body: tuple[BodyBlock, ...] = (BodyBlock(32), BodyBlock(32))
    class_count: int = 3


def canonical_text(cfg: ModelConfig) -> str:
    """Deterministic one-line description used for fingerprinting."""
    st = cfg.stem
    body = ",".join(
        f"{b.out_channels}x{b.kernel_size}s{b.stride}" for b in cfg.body
    )
    return (
        f"stem(variant={st.variant},channels={st.total_channels},"
        f"kernel={st.kernel_size},stride={st.stride},pad={st.padding},"
        f"sigma={st.sigma!r})|body({body})|classes={cfg.class_count}"
    )


def config_fingerprint(cfg: ModelConfig) -> int:
    return zlib.crc32(canonical_text(cfg).encode("utf-8")) & 0xFFFFFFFF


def config_to_vector(cfg: ModelConfig) -> np.ndarray:
    """Flat float encoding of the config, stored inside checkpoints."""
    vals = [
        VARIANTS.index(cfg.stem.variant),
        cfg.stem.total_channels,
        cfg.stem.kernel_size,
        cfg.stem.stride,
        cfg.stem.padding,
        cfg.stem.sigma,
        cfg.class_count,
        len(cfg.body),
    ]
    for b in cfg.body:
        vals += [b.out_channels, b.kernel_size, b.stride]
    return np.asarray(vals, dtype=np.float32)


def config_from_vector(vec: np.ndarray) -> ModelConfig:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size < 8:
        raise ValueError("config vector too short")
    nb = int(vec[7])
    if vec.size != 8 + 3 * nb:
        raise ValueError("config vector length mismatch")
    body = tuple(
        BodyBlock(int(vec[8 + 3 * i]), int(vec[9 + 3 * i]), int(vec[10 + 3 * i]))
        for i in range(nb)
    )
    stem = GuidedStemConfig(
        variant=VARIANTS[int(vec[0])],
        total_channels=int(vec[1]),
        kernel_size=int(vec[2]),
        stride=int(vec[3]),
        padding=int(vec[4]),
        sigma=float(vec[5]),
    )
    return ModelConfig(stem=stem, body=body, class_count=int(vec[6]))


# ---------------------------------------------------------------------------
# guided stem
# ---------------------------------------------------------------------------


def stem_prior_channels(
    x: np.ndarray, kernel_weights: np.ndarray, cfg: GuidedStemConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-path (bright, dark) maps for a batch, shape (N, H/2, W/2) each.

    Applies exactly the same per-image computation as priors.prior_maps,
    so the stem's prior channels are bit-identical to that function.
    """
    kern = GaussianKernel(size=cfg.kernel_size, sigma=cfg.sigma, weights=kernel_weights)
    n = x.shape[0]
    oh = (x.shape[2] + 2 * cfg.padding - cfg.kernel_size) // cfg.stride + 1
    ow = (x.shape[3] + 2 * cfg.padding - cfg.kernel_size) // cfg.stride + 1
    bright = np.empty((n, oh, ow), dtype=x.dtype)
    dark = np.empty((n, oh, ow), dtype=x.dtype)
    for i in range(n):
        img = np.ascontiguousarray(x[i].transpose(1, 2, 0))
        smooth = _priors.depthwise_gaussian(img, kern, cfg.stride, cfg.padding)
        bright[i] = _priors.channel_extremum_pool(smooth, "max")
        dark[i] = _priors.channel_extremum_pool(smooth, "min")
    return bright, dark


def guided_stem_forward(
    x: np.ndarray,
    params: ModelParams,
    cfg: GuidedStemConfig,
    prior_channels: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Concatenate [bright, dark] prior channels (per variant) with learned
    stride-2 convolution outputs.  Output: (N, total_channels, H/2, W/2)."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeMismatch(f"stem expects (N,3,H,W), got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise OddSpatialDim(f"stem needs even spatial dims, got {x.shape[2]}x{x.shape[3]}")
    learned, conv_cache = conv2d_forward(
        x, params["stem.conv"].value, cfg.stride, cfg.padding
    )
    nprior = cfg.prior_channels
    if nprior:
        if prior_channels is None:
            prior_channels = stem_prior_channels(x, params["stem.kernel"].value, cfg)
        bright, dark = prior_channels
        if cfg.variant == "dark_bright":
            parts = [bright[:, None], dark[:, None], learned]
        elif cfg.variant == "dark_only":
            parts = [dark[:, None], learned]
        else:  # bright_only
            parts = [bright[:, None], learned]
        y = np.concatenate(parts, axis=1)
    else:
        y = learned
    return y, (conv_cache, nprior)


def guided_stem_backward(dy: np.ndarray, cache) -> np.ndarray:
    """Gradient for the learned stem weights; the frozen path gets none."""
    conv_cache, nprior = cache
    dlearned = np.ascontiguousarray(dy[:, nprior:]) if nprior else dy
    _, dw = conv2d_backward(dlearned, conv_cache, need_input_grad=False)
    return dw


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class GuidedNet:
    """Prior-guided classifier: guided stem, conv/BN/ReLU blocks, GAP, linear."""

    def __init__(self, cfg: ModelConfig, params: ModelParams, dtype=np.float32):
        self.cfg = cfg
        self.params = params
        self.dtype = np.dtype(dtype)
        self._cache = None
        self._last_activation = None

    @classmethod
    def initialize(cls, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        dtype = np.dtype(dtype)
        params = ModelParams()
        st = cfg.stem
        kern = make_gaussian_kernel(st.kernel_size, st.sigma)
        params.add("stem.kernel", kern.weights.astype(dtype), frozen=True)
        params.add(
            "stem.conv",
            kaiming_uniform_init(
                (st.learned_channels, 3, st.kernel_size, st.kernel_size), rng, dtype
            ),
        )
        in_ch = st.total_channels
        for i, blk in enumerate(cfg.body, start=1):
            params.add(
                f"body{i}.conv",
                kaiming_uniform_init(
                    (blk.out_channels, in_ch, blk.kernel_size, blk.kernel_size),
                    rng,
                    dtype,
                ),
            )
            params.add(f"body{i}.bn.gamma", np.ones(blk.out_channels, dtype=dtype))
            params.add(f"body{i}.bn.beta", np.zeros(blk.out_channels, dtype=dtype))
            params.add(f"body{i}.bn.mean", np.zeros(blk.out_channels, dtype=dtype), frozen=True)
            params.add(f"body{i}.bn.var", np.ones(blk.out_channels, dtype=dtype), frozen=True)
            in_ch = blk.out_channels
        params.add("head.weight", kaiming_uniform_init((cfg.class_count, in_ch), rng, dtype))
        params.add("head.bias", np.zeros(cfg.class_count, dtype=dtype))
        params.add("meta.config", config_to_vector(cfg).astype(dtype), frozen=True)
        return cls(cfg, params, dtype)

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        update_stats: bool | None = None,
        stem_priors: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> np.ndarray:
        update = train if update_stats is None else update_stats
        p = self.params
        caches = []
        h, stem_cache = guided_stem_forward(x, p, self.cfg.stem, stem_priors)
        caches.append(stem_cache)
        for i, blk in enumerate(self.cfg.body, start=1):
            pad = (blk.kernel_size - 1) // 2
            h, cc = conv2d_forward(h, p[f"body{i}.conv"].value, blk.stride, pad)
            h, bc = batchnorm_forward(
                h,
                p[f"body{i}.bn.gamma"].value,
                p[f"body{i}.bn.beta"].value,
                p[f"body{i}.bn.mean"].value,
                p[f"body{i}.bn.var"].value,
                train=train,
                update_stats=update,
            )
            h, rc = relu_forward(h)
            caches.append((cc, bc, rc))
        self._last_activation = h
        feat, gshape = global_avg_pool_forward(h)
        logits, lc = linear_forward(feat, p["head.weight"].value, p["head.bias"].value)
        caches.append((gshape, lc))
        self._cache = caches
        return logits

    def backward(self, dlogits: np.ndarray) -> None:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        p = self.params
        gshape, lc = self._cache[-1]
        dfeat, dw, db = linear_backward(dlogits, lc)
        p["head.weight"].grad += dw
        p["head.bias"].grad += db
        dh = global_avg_pool_backward(dfeat, gshape)
        for i in range(len(self.cfg.body), 0, -1):
            cc, bc, rc = self._cache[i]
            dh = relu_backward(dh, rc)
            dh, dgamma, dbeta = batchnorm_backward(dh, bc)
            p[f"body{i}.bn.gamma"].grad += dgamma
            p[f"body{i}.bn.beta"].grad += dbeta
            dh, dwc = conv2d_backward(dh, cc, need_input_grad=True)
            p[f"body{i}.conv"].grad += dwc
        p["stem.conv"].grad += guided_stem_backward(dh, self._cache[0])

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x, train=False), axis=1)

    def cam_components(self, x: np.ndarray, class_index: int):
        """(activation, gradient) of the last conv-block output for one logit."""
        logits = self.forward(x, train=False)
        gshape, lc = self._cache[-1]
        dlog = np.zeros_like(logits)
        dlog[:, class_index] = 1.0
        dfeat, _, _ = linear_backward(dlog, lc)
        da = global_avg_pool_backward(dfeat, gshape)
        return self._last_activation, da


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    def passed(self, tolerance: float = 1e-5) -> bool:
        return all(e.max_rel_err <= tolerance for e in self.entries)

    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: e.max_rel_err)


def gradient_check(
    cfg: ModelConfig | None = None,
    seed: int = 0,
    step: float = 1e-4,
    corrupt: str | None = None,
    batch: int = 2,
    spatial: int = 16,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Runs in float64 on a tiny batch.  Per tensor, the reported error is
    the largest absolute analytic/numeric discrepancy normalized by the
    largest combined gradient magnitude in that tensor.  ``corrupt``
    names a tensor whose analytic gradient is sign-flipped before the
    comparison, as a self-test of the checker.
    """
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(seed)
    model = GuidedNet.initialize(cfg, rng, dtype=np.float64)
    x = rng.random((batch, 3, spatial, spatial))
    labels = rng.integers(0, cfg.class_count, size=batch)
    cached_priors = (
        stem_prior_channels(x, model.params["stem.kernel"].value, cfg.stem)
        if cfg.stem.prior_channels
        else None
    )

    def loss_value() -> float:
        logits = model.forward(x, train=True, update_stats=False, stem_priors=cached_priors)
        return softmax_cross_entropy(logits, labels)[0]

    logits = model.forward(x, train=True, update_stats=False, stem_priors=cached_priors)
    _, dlog = softmax_cross_entropy(logits, labels)
    model.backward(dlog)

    report = GradCheckReport()
    for name, p in model.params.learnable():
        analytic = p.grad.copy()
        if corrupt == name:
            analytic = -analytic
        numeric = np.zeros_like(analytic)
        flat_v = p.value.reshape(-1)
        flat_n = numeric.reshape(-1)
        for idx in range(flat_v.size):
            orig = flat_v[idx]
            flat_v[idx] = orig + step
            up = loss_value()
            flat_v[idx] = orig - step
            down = loss_value()
            flat_v[idx] = orig
            flat_n[idx] = (up - down) / (2.0 * step)
        denom = float(np.max(np.abs(analytic) + np.abs(numeric)))
        err = 0.0 if denom < 1e-12 else float(np.max(np.abs(analytic - numeric)) / denom)
        report.entries.append(GradCheckEntry(name, err))
    return report
