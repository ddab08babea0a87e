"""Loss, Adam with cosine annealing, batch sampling, the training loop,
and checkpoint round-trips.

Determinism contract: every stochastic choice at step t is drawn from a
fresh Philox stream keyed on (seed, t), so a resumed run replays exactly
the same sample/flip decisions as an uninterrupted one.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    ParameterError,
    SamplingError,
    ShapeError,
    TrainingError,
)
from .network import ModelConfig, init_params, orsnet_backward, orsnet_forward, param_spec, zero_grads
from .noise import BIN_ORDER, EmbedStats

CHECKPOINT_MAGIC = "nldenoise-checkpoint"


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 32
    batch_size: int = 16
    total_steps: int = 2000
    lr0: float = 1e-5
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "mse"  # or "charbonnier"
    charbonnier_eps: float = 1e-3
    stratified: bool = False
    use_nle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 1:
            raise ParameterError("batch_size and total_steps must be >= 1")
        if not self.lr0 >= self.lr_min > 0:
            raise ParameterError("need lr0 >= lr_min > 0")
        if self.loss not in ("mse", "charbonnier"):
            raise ParameterError(f"unknown loss {self.loss!r}")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def loss_and_grad(pred, target, kind: str = "mse", charbonnier_eps: float = 1e-3):
    """Scalar loss plus gradient at pred (mean over all elements)."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    n = diff.size
    if kind == "mse":
        return float(np.mean(diff * diff)), 2.0 * diff / n
    if kind == "charbonnier":
        root = np.sqrt(diff * diff + charbonnier_eps**2)
        return float(np.mean(root)), diff / (root * n)
    raise ParameterError(f"unknown loss {kind!r}")


def cosine_lr(t: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """Cosine annealing from lr0 (t=0) to lr_min (t=total_steps)."""
    if not 0 <= t <= total_steps:
        raise ParameterError(f"step {t} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total_steps))


def adam_init(params: dict) -> dict:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
        "t": 0,
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on params/state."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient")
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, theta in params.items():
        g = grads[name].astype(theta.dtype)
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        theta -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(theta.dtype)


class PatchStore:
    """Paired (input, target) training patches with per-patch noise metadata.

    inputs are already scaled to the target count level (values / fraction);
    embed holds each patch's standardized noise scalar; bins the noise-bin
    label strings.
    """

    def __init__(self, inputs, targets, embed, bins, fraction, stats: EmbedStats):
        self.inputs = np.asarray(inputs, dtype=np.float32)
        self.targets = np.asarray(targets, dtype=np.float32)
        self.embed = np.asarray(embed, dtype=np.float64)
        self.bins = list(bins)
        self.fraction = float(fraction)
        self.stats = stats
        n = len(self.inputs)
        if not (len(self.targets) == len(self.embed) == len(self.bins) == n) or n == 0:
            raise ParameterError("patch store arrays must be non-empty and equally long")

    def __len__(self):
        return len(self.inputs)

    @property
    def median_embed(self) -> float:
        return float(np.median(self.embed))

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.savez(path / "patches.npz", inputs=self.inputs, targets=self.targets, embed=self.embed)
        meta = {
            "fraction": self.fraction,
            "bins": self.bins,
            "mu_logcov": self.stats.mu_logcov,
            "sigma_logcov": self.stats.sigma_logcov,
        }
        (path / "store.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PatchStore":
        path = Path(path)
        arrays = np.load(path / "patches.npz")
        meta = json.loads((path / "store.json").read_text())
        stats = EmbedStats(meta["mu_logcov"], meta["sigma_logcov"])
        return cls(arrays["inputs"], arrays["targets"], arrays["embed"], meta["bins"],
                   meta["fraction"], stats)


def sample_batch(store: PatchStore, batch_size: int, stratified: bool, rng) -> np.ndarray:
    """Indices of one training batch.

    Stratified mode draws floor(B/4) per noise bin, remainder round-robin
    in the fixed bin order; uniform mode draws i.i.d. uniform.
    """
    n = len(store)
    if not stratified:
        return rng.integers(0, n, size=batch_size)
    per_bin = {b: np.flatnonzero([x == b.value for x in store.bins]) for b in BIN_ORDER}
    counts = {b: batch_size // 4 for b in BIN_ORDER}
    for i in range(batch_size % 4):
        counts[BIN_ORDER[i]] += 1
    picks = []
    for b in BIN_ORDER:
        if counts[b] > 0 and per_bin[b].size == 0:
            raise SamplingError(f"stratified sampling: bin {b.value} is empty")
        if counts[b] > 0:
            picks.append(per_bin[b][rng.integers(0, per_bin[b].size, size=counts[b])])
    return np.concatenate(picks)


def _step_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(int(t) << 64) + int(seed)))


def _flip(arrs, flip_x, flip_y):
    out = []
    for a in arrs:
        if flip_x:
            a = a[:, :, ::-1]
        if flip_y:
            a = a[:, ::-1, :]
        out.append(np.ascontiguousarray(a))
    return out


def train_step(params, adam, store: PatchStore, model_config: ModelConfig,
               cfg: TrainConfig, t: int) -> float:
    """One optimization step; returns the batch loss."""
    rng = _step_rng(cfg.seed, t)
    idx = sample_batch(store, cfg.batch_size, cfg.stratified, rng)
    grads = zero_grads(params)
    total_loss = 0.0
    n_total = cfg.batch_size
    for i in idx:
        flip_x, flip_y = rng.random(2) < 0.5
        x, y = _flip([store.inputs[i], store.targets[i]], flip_x, flip_y)
        pred, cache = orsnet_forward(x, store.embed[i], params, model_config,
                                     use_nle=cfg.use_nle, want_cache=True)
        val, d_pred = loss_and_grad(pred, y, cfg.loss, cfg.charbonnier_eps)
        total_loss += val / n_total
        orsnet_backward(cache, d_pred.astype(np.float32) / n_total, params, model_config, grads=grads)
    if not math.isfinite(total_loss):
        raise TrainingError(f"non-finite loss at step {t} (batch indices {idx.tolist()})")
    lr = cosine_lr(t, cfg.total_steps, cfg.lr0, cfg.lr_min)
    adam_step(params, grads, adam, lr, cfg.beta1, cfg.beta2, cfg.eps)
    return total_loss


def train_loop(store: PatchStore, model_config: ModelConfig, cfg: TrainConfig,
               out_dir=None, resume_from=None) -> tuple:
    """Run (or resume) the full training schedule.

    Returns (params, trace) with trace a list of (step, lr, loss) rows.
    Writes checkpoint/ and loss_trace.csv under out_dir when given.
    """
    if resume_from is not None:
        params, adam, meta = load_checkpoint(resume_from, with_adam=True)
        start = meta["iteration"]
        trace = list(meta.get("trace", []))
    else:
        params = init_params(model_config, cfg.seed)
        adam = adam_init(params)
        start = 0
        trace = []
    for t in range(start, cfg.total_steps):
        loss = train_step(params, adam, store, model_config, cfg, t)
        trace.append((t, cosine_lr(t, cfg.total_steps, cfg.lr0, cfg.lr_min), loss))
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "checkpoint", params, model_config, cfg, store.stats,
                        iteration=cfg.total_steps, adam=adam,
                        median_embed=store.median_embed, trace=trace)
        with open(out_dir / "loss_trace.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "lr", "loss"])
            writer.writerows(trace)
    return params, trace


def save_checkpoint(path, params: dict, model_config: ModelConfig, train_config,
                    stats: EmbedStats, iteration: int, adam: dict = None,
                    median_embed: float = 0.0, trace=None) -> None:
    """manifest.json + params.bin (little-endian f32 in manifest order);
    optimizer state goes to adam.bin when resuming matters. Writes are
    atomic (temp file + rename)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    spec = param_spec(model_config)
    offset = 0
    tensors = []
    blobs = []
    for name, shape in spec:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        if arr.shape != shape:
            raise CheckpointError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        tensors.append({"name": name, "shape": list(shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": CHECKPOINT_MAGIC,
        "model": model_config.to_dict(),
        "train": train_config.to_dict() if hasattr(train_config, "to_dict") else dict(train_config or {}),
        "tensors": tensors,
        "mu_logcov": stats.mu_logcov,
        "sigma_logcov": stats.sigma_logcov,
        "median_embed": median_embed,
        "seed": getattr(train_config, "seed", 0),
        "iteration": iteration,
        "has_adam": adam is not None,
    }
    if trace is not None:
        manifest["trace"] = [list(row) for row in trace]
    _atomic_write(path / "params.bin", b"".join(blobs))
    if adam is not None:
        adam_blob = b"".join(
            np.ascontiguousarray(adam[key][name], dtype="<f4").tobytes()
            for key in ("m", "v")
            for name, _ in spec
        )
        adam_blob = np.int64(adam["t"]).tobytes() + adam_blob
        _atomic_write(path / "adam.bin", adam_blob)
    _atomic_write(path / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path, with_adam: bool = False):
    """Inverse of save_checkpoint; returns (params, meta) or
    (params, adam, meta)."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint manifest")
    model_config = ModelConfig(**manifest["model"])
    spec = param_spec(model_config)
    raw = (path / "params.bin").read_bytes()
    params = {}
    for entry, (name, shape) in zip(manifest["tensors"], spec):
        if entry["name"] != name or tuple(entry["shape"]) != shape:
            raise CheckpointError(f"manifest tensor {entry['name']} does not match expected {name} {shape}")
        n = int(np.prod(shape))
        start = entry["offset"]
        if start + 4 * n > len(raw):
            raise CheckpointError(f"params.bin truncated at tensor {name}")
        params[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=start).reshape(shape).copy()
    expected = sum(int(np.prod(s)) for _, s in spec) * 4
    if len(raw) != expected:
        raise CheckpointError(f"params.bin length {len(raw)} != expected {expected}")
    meta = {
        "model": model_config,
        "mu_logcov": manifest["mu_logcov"],
        "sigma_logcov": manifest["sigma_logcov"],
        "median_embed": manifest.get("median_embed", 0.0),
        "seed": manifest.get("seed", 0),
        "iteration": manifest["iteration"],
        "train": manifest.get("train", {}),
        "trace": manifest.get("trace", []),
    }
    if not with_adam:
        return params, meta
    if not manifest.get("has_adam"):
        raise CheckpointError("checkpoint has no optimizer state to resume from")
    blob = (path / "adam.bin").read_bytes()
    t = int(np.frombuffer(blob, dtype=np.int64, count=1)[0])
    adam = {"m": {}, "v": {}, "t": t}
    off = 8
    for key in ("m", "v"):
        for name, shape in spec:
            n = int(np.prod(shape))
            if off + 4 * n > len(blob):
                raise CheckpointError(f"adam.bin truncated at tensor {name}")
            adam[key][name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).copy()
            off += 4 * n
    return params, adam, meta
