"""Noise-conditioned 3D denoising network.

Downsampling-free backbone: a head conv lifts the single input channel to
C feature channels, a stack of original-resolution blocks (each a chain
of channel-attention blocks plus a tail conv and skip connection)
processes them, and a tail conv projects back to one channel that is
added to the input (global residual).

The noise-level embedding maps the per-patch noise scalar through two
affine layers to a per-channel (scale, shift) pair. Inside each attention
block the globally max-pooled channel descriptor is modulated as
pooled * scale + shift before the squeeze/excite bottleneck. The last
embedding layer is zero-initialized with bias (1...1 | 0...0), so at
initialization the modulation is exactly the identity and the network is
bit-identical to its unconditioned ablation.

Forward/backward are hand-written reverse mode over the conv kernels in
`kernels`; everything runs in float32 normally and float64 in
gradient-check mode (dtype follows the parameter arrays).
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ParameterError, ShapeError
from .noise import describe_patch, embed_scalar
from .volume import Domain, Patch, Volume, extract_patches_covering, reassemble

import logging

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    n_orb: int = 2
    n_cab: int = 2
    reduction: int = 4
    nle_hidden: int = 32
    kernel: int = 3

    def __post_init__(self):
        if self.channels < self.reduction or self.channels % self.reduction:
            raise ParameterError("channels must be a positive multiple of reduction")
        if min(self.n_orb, self.n_cab, self.nle_hidden) < 1:
            raise ParameterError("block counts and nle_hidden must be >= 1")
        if self.kernel % 2 == 0:
            raise ParameterError("kernel must be odd")

    def to_dict(self):
        return {
            "channels": self.channels,
            "n_orb": self.n_orb,
            "n_cab": self.n_cab,
            "reduction": self.reduction,
            "nle_hidden": self.nle_hidden,
            "kernel": self.kernel,
        }


def param_spec(config: ModelConfig) -> list:
    """Ordered (name, shape) pairs; the fixed order is the checkpoint layout."""
    c, k, h = config.channels, config.kernel, config.nle_hidden
    cr = c // config.reduction
    spec = [("head.w", (c, 1, k, k, k)), ("head.b", (c,))]
    for i in range(config.n_orb):
        for j in range(config.n_cab):
            p = f"orb{i}.cab{j}"
            spec += [
                (f"{p}.conv1.w", (c, c, k, k, k)),
                (f"{p}.conv1.b", (c,)),
                (f"{p}.conv2.w", (c, c, k, k, k)),
                (f"{p}.conv2.b", (c,)),
                (f"{p}.reduce.w", (cr, c)),
                (f"{p}.reduce.b", (cr,)),
                (f"{p}.expand.w", (c, cr)),
                (f"{p}.expand.b", (c,)),
            ]
        spec += [(f"orb{i}.tail.w", (c, c, k, k, k)), (f"orb{i}.tail.b", (c,))]
    spec += [("tail.w", (1, c, k, k, k)), ("tail.b", (1,))]
    spec += [
        ("nle.fc1.w", (h,)),
        ("nle.fc1.b", (h,)),
        ("nle.fc2.w", (2 * c, h)),
        ("nle.fc2.b", (2 * c,)),
    ]
    return spec


def init_params(config: ModelConfig, seed: int) -> dict:
    """Fan-in-scaled normal conv weights, zero biases; the final embedding
    layer is zeroed with bias (1|0) so the modulation starts as identity."""
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    c = config.channels
    params = {}
    for name, shape in param_spec(config):
        if name == "nle.fc2.w":
            params[name] = np.zeros(shape, dtype=np.float32)
        elif name == "nle.fc2.b":
            params[name] = np.concatenate([np.ones(c), np.zeros(c)]).astype(np.float32)
        elif name == "nle.fc1.w":
            params[name] = rng.normal(0.0, np.sqrt(2.0), size=shape).astype(np.float32)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)
    return params


def zero_grads(params: dict) -> dict:
    return {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}


def _relu(x):
    return np.maximum(x, 0)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# conv3d re-export: the padded stride-1 convolution contract lives in kernels
conv3d = kernels.conv3d_forward
conv3d_backward = kernels.conv3d_backward


def nle_forward(s: float, params: dict, config: ModelConfig, cache: dict = None):
    """Map the noise scalar to per-channel (scale, shift)."""
    if not np.isfinite(s):
        raise ParameterError(f"embedding scalar must be finite, got {s}")
    c = config.channels
    s = params["nle.fc1.w"].dtype.type(s)  # keep the whole pass in one precision
    h_pre = params["nle.fc1.w"] * s + params["nle.fc1.b"]
    h = _relu(h_pre)
    out = params["nle.fc2.w"] @ h + params["nle.fc2.b"]
    if cache is not None:
        cache.update(s=s, h_pre=h_pre, h=h)
    return out[:c].copy(), out[c:].copy()


def nle_backward(cache: dict, d_scale, d_shift, params: dict, grads: dict) -> float:
    d_out = np.concatenate([d_scale, d_shift])
    grads["nle.fc2.w"] += np.outer(d_out, cache["h"])
    grads["nle.fc2.b"] += d_out
    dh = params["nle.fc2.w"].T @ d_out
    dh_pre = dh * (cache["h_pre"] > 0)
    grads["nle.fc1.w"] += dh_pre * cache["s"]
    grads["nle.fc1.b"] += dh_pre
    return float(dh_pre @ params["nle.fc1.w"])


def modulate(pooled, scale, shift):
    """FiLM-style conditioning of the pooled channel descriptor."""
    pooled, scale, shift = (np.asarray(a) for a in (pooled, scale, shift))
    if not (pooled.shape == scale.shape == shift.shape):
        raise ShapeError(f"modulate shapes differ: {pooled.shape}, {scale.shape}, {shift.shape}")
    return pooled * scale + shift


def adaptive_max_pool_global(features):
    """Per-channel max over all voxels; returns (values, flat argmax indices).

    The argmax is the first maximum in x-fastest order, where the
    gradient is routed on the backward pass.
    """
    flat = features.reshape(features.shape[0], -1)
    idx = flat.argmax(axis=1)
    return flat[np.arange(flat.shape[0]), idx].copy(), idx


def cab_forward(x, scale, shift, params: dict, prefix: str, cache: dict = None):
    """Channel attention block with noise-conditioned pooled descriptor."""
    a1 = conv3d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"])
    r1 = _relu(a1)
    u = conv3d(r1, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"])
    p, argmax = adaptive_max_pool_global(u)
    pm = modulate(p, scale, shift)
    t1 = params[f"{prefix}.reduce.w"] @ pm + params[f"{prefix}.reduce.b"]
    rt = _relu(t1)
    t2 = params[f"{prefix}.expand.w"] @ rt + params[f"{prefix}.expand.b"]
    a = _sigmoid(t2)
    out = x + u * a[:, None, None, None]
    if cache is not None:
        cache.update(x=x, a1=a1, r1=r1, u=u, p=p, argmax=argmax, pm=pm, t1=t1, rt=rt, a=a)
    return out


def cab_backward(cache: dict, d_out, scale, params: dict, prefix: str, grads: dict):
    """Returns (d_x, d_scale, d_shift) for one attention block."""
    u, a = cache["u"], cache["a"]
    d_u = d_out * a[:, None, None, None]
    d_a = np.einsum("cdhw,cdhw->c", d_out, u)
    d_t2 = d_a * a * (1.0 - a)
    grads[f"{prefix}.expand.w"] += np.outer(d_t2, cache["rt"])
    grads[f"{prefix}.expand.b"] += d_t2
    d_rt = params[f"{prefix}.expand.w"].T @ d_t2
    d_t1 = d_rt * (cache["t1"] > 0)
    grads[f"{prefix}.reduce.w"] += np.outer(d_t1, cache["pm"])
    grads[f"{prefix}.reduce.b"] += d_t1
    d_pm = params[f"{prefix}.reduce.w"].T @ d_t1
    d_p = d_pm * scale
    d_scale = d_pm * cache["p"]
    d_shift = d_pm.copy()
    # route pooled gradient to the argmax voxel of each channel
    d_u_flat = d_u.reshape(d_u.shape[0], -1)
    d_u_flat[np.arange(d_u.shape[0]), cache["argmax"]] += d_p
    d_r1, d_w2, d_b2 = conv3d_backward(cache["r1"], params[f"{prefix}.conv2.w"], d_u)
    grads[f"{prefix}.conv2.w"] += d_w2
    grads[f"{prefix}.conv2.b"] += d_b2
    d_a1 = d_r1 * (cache["a1"] > 0)
    d_x1, d_w1, d_b1 = conv3d_backward(cache["x"], params[f"{prefix}.conv1.w"], d_a1)
    grads[f"{prefix}.conv1.w"] += d_w1
    grads[f"{prefix}.conv1.b"] += d_b1
    return d_out + d_x1, d_scale, d_shift


def orsnet_forward(patch, s: float, params: dict, config: ModelConfig, use_nle: bool = True,
                   want_cache: bool = False):
    """Full network forward on one patch.

    patch: array of shape (p, p, p) or (1, p, p, p). Returns the denoised
    patch with the same shape, plus a cache when want_cache is set.
    """
    x = np.asarray(patch)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"expected single-channel 3D patch, got shape {np.asarray(patch).shape}")
    if min(x.shape[1:]) < config.kernel:
        raise ShapeError(f"patch dims {x.shape[1:]} smaller than kernel {config.kernel}")
    cache = {"use_nle": use_nle, "patch": x, "squeeze": squeeze} if want_cache else None
    c = config.channels
    if use_nle:
        nle_cache = {} if want_cache else None
        scale, shift = nle_forward(s, params, config, cache=nle_cache)
        if want_cache:
            cache["nle"] = nle_cache
    else:
        scale = np.ones(c, dtype=x.dtype)
        shift = np.zeros(c, dtype=x.dtype)
    f = conv3d(x, params["head.w"], params["head.b"])
    orb_caches = []
    for i in range(config.n_orb):
        f_in = f
        cab_caches = []
        for j in range(config.n_cab):
            cc = {} if want_cache else None
            f = cab_forward(f, scale, shift, params, f"orb{i}.cab{j}", cache=cc)
            cab_caches.append(cc)
        tail_in = f
        f = conv3d(f, params[f"orb{i}.tail.w"], params[f"orb{i}.tail.b"]) + f_in
        orb_caches.append({"f_in": f_in, "cabs": cab_caches, "tail_in": tail_in})
    out = x + conv3d(f, params["tail.w"], params["tail.b"])
    if want_cache:
        cache.update(orbs=orb_caches, tail_in=f, scale=scale, shift=shift)
        return (out[0] if squeeze else out), cache
    return out[0] if squeeze else out


def orsnet_backward(cache: dict, d_out, params: dict, config: ModelConfig, grads: dict = None):
    """Reverse-mode pass; returns (grads, d_s) with d_s the gradient w.r.t.
    the embedding scalar (0.0 when the forward ran without the embedding)."""
    if grads is None:
        grads = zero_grads(params)
    d = np.asarray(d_out)
    if d.ndim == 3:
        d = d[None]
    scale = cache["scale"]
    d_f, d_tw, d_tb = conv3d_backward(cache["tail_in"], params["tail.w"], d)
    grads["tail.w"] += d_tw
    grads["tail.b"] += d_tb
    d_scale_acc = np.zeros_like(scale, dtype=np.float64)
    d_shift_acc = np.zeros_like(scale, dtype=np.float64)
    for i in reversed(range(config.n_orb)):
        oc = cache["orbs"][i]
        d_tail_in, d_w, d_b = conv3d_backward(oc["tail_in"], params[f"orb{i}.tail.w"], d_f)
        grads[f"orb{i}.tail.w"] += d_w
        grads[f"orb{i}.tail.b"] += d_b
        d_cab = d_tail_in
        for j in reversed(range(config.n_cab)):
            d_cab, d_sc, d_sh = cab_backward(oc["cabs"][j], d_cab, scale, params, f"orb{i}.cab{j}", grads)
            d_scale_acc += d_sc
            d_shift_acc += d_sh
        d_f = d_cab + d_f  # skip connection around the ORB
    _, d_hw, d_hb = conv3d_backward(cache["patch"], params["head.w"], d_f)
    grads["head.w"] += d_hw
    grads["head.b"] += d_hb
    d_s = 0.0
    if cache["use_nle"]:
        d_s = nle_backward(cache["nle"], d_scale_acc, d_shift_acc, params, grads)
    return grads, d_s


def infer_volume(v: Volume, params: dict, config: ModelConfig, binning, stats,
                 patch_size: int, stride: int, use_nle: bool = True,
                 input_scale: float = 1.0, fallback_embed: float = 0.0) -> Volume:
    """Denoise a whole volume by sliding-window patches with overlap averaging.

    Noise descriptors are computed from the raw (counts-scale) patch
    values; the network sees values * input_scale. Patches whose
    descriptor cannot be computed fall back to `fallback_embed`.
    """
    patches = extract_patches_covering(v, patch_size, stride)
    preds = []
    for patch in patches:
        if use_nle:
            try:
                desc = describe_patch(patch, binning, stats)
                s = desc.embed_scalar
            except Exception as exc:  # noqa: BLE001 - descriptor failure is a data property
                log.warning("descriptor failed at origin %s (%s); using fallback scalar", patch.origin, exc)
                s = fallback_embed
        else:
            s = 0.0
        x = (patch.values * np.float32(input_scale)).astype(np.float32)
        y = orsnet_forward(x, s, params, config, use_nle=use_nle)
        if v.domain == Domain.COUNTS:
            # counts are physically non-negative; clip residual undershoot
            y = np.maximum(y, np.float32(0.0))
        preds.append(Patch(origin=patch.origin, size=patch.size, values=y))
    return reassemble(preds, v.dims, voxel_size=v.voxel_size, domain=v.domain,
                      counts_per_suv=v.counts_per_suv)
