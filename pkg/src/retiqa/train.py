"""Training loop, evaluation driver and checkpoint persistence.

The schedule follows a plain step function: ``lr_initial`` through
``lr_decay_epoch``, then ``lr_after`` (defaults 0.01 -> 0.001 after
epoch 10, 15 epochs total, batch size 8, plain SGD).  Everything is
deterministic per seed: identical config + data give byte-identical
checkpoints, logs and reports.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluate as eval_mod
from . import nnet
from .imgproc import AugmentFlags
from .nnet import GuidedNet, GuidedStemConfig, ModelConfig, ModelParams


class NonFiniteLoss(RuntimeError):
    """Training produced a non-finite loss; the run is aborted."""


class CorruptCheckpoint(RuntimeError):
    """Bad magic, version, encoding or truncated checkpoint data."""


class FingerprintMismatch(RuntimeError):
    """Checkpoint was written for a different model configuration."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    lr_initial: float = 0.01
    lr_decay_epoch: int = 10
    lr_after: float = 0.001
    seed: int = 0
    variant: str = "dark_bright"
    hflip: bool = True
    vflip: bool = True
    rotate: bool = True
    model: ModelConfig | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_initial <= 0 or self.lr_after <= 0:
            raise ValueError("learning rates must be > 0")
        if not 0 <= self.lr_decay_epoch <= max(self.epochs, self.lr_decay_epoch):
            raise ValueError("lr_decay_epoch must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def resolved_model(self) -> ModelConfig:
        if self.model is not None:
            return self.model
        return ModelConfig(stem=GuidedStemConfig(variant=self.variant))

    def augment_flags(self) -> AugmentFlags | None:
        if not (self.hflip or self.vflip or self.rotate):
            return None
        return AugmentFlags(hflip=self.hflip, vflip=self.vflip, rotate=self.rotate)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_initial": self.lr_initial,
            "lr_decay_epoch": self.lr_decay_epoch,
            "lr_after": self.lr_after,
            "seed": self.seed,
            "variant": self.variant,
            "hflip": self.hflip,
            "vflip": self.vflip,
            "rotate": self.rotate,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = set(cls().to_dict())
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**doc)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    val_macro_f: float | None = None


@dataclass
class Checkpoint:
    version: int
    fingerprint: int
    config: ModelConfig
    params: ModelParams
    epochs_completed: int
    seed: int

    def model(self) -> GuidedNet:
        dtype = self.params["stem.conv"].value.dtype
        return GuidedNet(self.config, self.params, dtype)


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """lr_initial for epochs up to lr_decay_epoch, lr_after beyond it."""
    if epoch < 1:
        raise ValueError(f"epoch is 1-based, got {epoch}")
    return cfg.lr_initial if epoch <= cfg.lr_decay_epoch else cfg.lr_after


def _macro_f(model: GuidedNet, manifest, root, images) -> float:
    report = _evaluate(model, manifest, root, images)
    return report.macro_f


def _evaluate(model: GuidedNet, manifest, root, images=None,
              batch_size: int = 32) -> eval_mod.MetricsReport:
    trues: list[int] = []
    preds: list[int] = []
    for xb, yb in data_mod.batch_iter(
        manifest, root, batch_size, seed=0, epoch=1,
        augment=None, images=images, shuffle=False,
    ):
        trues.extend(int(v) for v in yb)
        preds.extend(int(v) for v in model.predict(xb))
    cm = eval_mod.confusion_matrix(trues, preds, model.cfg.class_count)
    return eval_mod.metrics_from_cm(cm)


def train(
    cfg: TrainConfig,
    train_manifest: data_mod.Manifest,
    root,
    val_manifest: data_mod.Manifest | None = None,
    val_root=None,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Run the full schedule and return the final checkpoint plus log."""
    if not train_manifest:
        raise ValueError("training manifest is empty")
    model_cfg = cfg.resolved_model()
    rng = np.random.default_rng(cfg.seed)
    model = GuidedNet.initialize(model_cfg, rng, dtype=np.float32)
    images = data_mod.preload_images(train_manifest, root)
    val_images = None
    if val_manifest:
        val_root = root if val_root is None else val_root
        val_images = data_mod.preload_images(val_manifest, val_root)
    flags = cfg.augment_flags()
    log: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate(epoch, cfg)
        losses = []
        for bi, (xb, yb) in enumerate(
            data_mod.batch_iter(
                train_manifest, root, cfg.batch_size, cfg.seed,
                epoch=epoch, augment=flags, images=images,
            )
        ):
            logits = model.forward(xb, train=True)
            loss, dlog = nnet.softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss {loss} at epoch {epoch}, batch {bi}")
            model.backward(dlog)
            nnet.sgd_step(model.params, lr)
            losses.append(loss)
        vf = None
        if val_manifest:
            vf = _macro_f(model, val_manifest, val_root, val_images)
        log.append(EpochStats(epoch, float(np.mean(losses)), vf))
    ckpt = Checkpoint(
        version=1,
        fingerprint=nnet.config_fingerprint(model_cfg),
        config=model_cfg,
        params=model.params,
        epochs_completed=cfg.epochs,
        seed=cfg.seed,
    )
    return ckpt, log


def evaluate_model(ckpt: Checkpoint, manifest, root) -> eval_mod.MetricsReport:
    """Eval-mode forward over the manifest, argmax predictions, metrics."""
    return _evaluate(ckpt.model(), manifest, root)


def write_log(log: list[EpochStats], path) -> None:
    lines = ["epoch,mean_loss,val_macro_f\n"]
    for e in log:
        vf = "" if e.val_macro_f is None else f"{e.val_macro_f:.6f}"
        lines.append(f"{e.epoch},{e.mean_loss:.6f},{vf}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# checkpoint format (little-endian):
#   magic "GNET" | u32 version | u32 fingerprint | u32 tensor count
#   per tensor: u16 name length, name utf-8, u8 frozen, u8 rank,
#               u32 dims[rank], float32 data row-major
#   trailer: u32 epochs completed, u64 seed
# ---------------------------------------------------------------------------

_MAGIC = b"GNET"
_VERSION = 1


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<I", ckpt.version)
    buf += struct.pack("<I", ckpt.fingerprint)
    items = list(ckpt.params.items())
    buf += struct.pack("<I", len(items))
    for name, p in items:
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb))
        buf += nb
        arr = np.ascontiguousarray(p.value, dtype="<f4")
        buf += struct.pack("<BB", 1 if p.frozen else 0, arr.ndim)
        for d in arr.shape:
            buf += struct.pack("<I", d)
        buf += arr.tobytes()
    buf += struct.pack("<I", ckpt.epochs_completed)
    buf += struct.pack("<Q", ckpt.seed)
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptCheckpoint(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Parse a checkpoint; raises CorruptCheckpoint on malformed data and
    FingerprintMismatch when expected_config names a different model."""
    rd = _Reader(Path(path).read_bytes())
    if rd.take(4) != _MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    (version,) = rd.unpack("<I")
    if version != _VERSION:
        raise CorruptCheckpoint(f"unsupported version {version}")
    (fingerprint,) = rd.unpack("<I")
    (count,) = rd.unpack("<I")
    params = ModelParams()
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        try:
            name = rd.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpoint(f"bad tensor name: {exc}") from exc
        frozen, rank = rd.unpack("<BB")
        dims = rd.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = rd.take(4 * size)
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        params.add(name, arr, frozen=bool(frozen))
    (epochs_completed,) = rd.unpack("<I")
    (seed,) = rd.unpack("<Q")
    if "meta.config" not in params:
        raise CorruptCheckpoint("checkpoint lacks the embedded config tensor")
    try:
        config = nnet.config_from_vector(params["meta.config"].value)
    except (ValueError, IndexError) as exc:
        raise CorruptCheckpoint(f"undecodable config tensor: {exc}") from exc
    if nnet.config_fingerprint(config) != fingerprint:
        raise CorruptCheckpoint("fingerprint does not match embedded config")
    if expected_config is not None and nnet.config_fingerprint(expected_config) != fingerprint:
        raise FingerprintMismatch(
            f"checkpoint was built for {nnet.canonical_text(config)!r}, "
            f"not {nnet.canonical_text(expected_config)!r}"
        )
    return Checkpoint(
        version=version,
        fingerprint=fingerprint,
        config=config,
        params=params,
        epochs_completed=epochs_completed,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# ablation driver: synth -> train -> eval for every stem variant
# ---------------------------------------------------------------------------


@dataclass
class AblationCell:
    variant: str
    seed: int
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f: float


@dataclass
class AblationResult:
    cells: list[AblationCell] = field(default_factory=list)

    def macro_f_values(self, variant: str) -> list[float]:
        return [c.macro_f for c in self.cells if c.variant == variant]

    def mean_macro_f(self, variant: str) -> float:
        return float(np.mean(self.macro_f_values(variant)))

    def table(self) -> str:
        lines = ["variant,seed,accuracy,macro_precision,macro_recall,macro_f\n"]
        for c in self.cells:
            lines.append(
                f"{c.variant},{c.seed},{c.accuracy:.6f},"
                f"{c.macro_precision:.6f},{c.macro_recall:.6f},{c.macro_f:.6f}\n"
            )
        for variant in nnet.VARIANTS:
            vals = self.macro_f_values(variant)
            if not vals:
                continue
            mean, std = eval_mod.summarize_macro_f(vals)
            lines.append(f"{variant},mean,,,,{mean:.6f}\n")
            lines.append(f"{variant},std,,,,{std:.6f}\n")
        return "".join(lines)


def _ablation_cell(args) -> AblationCell:
    variant, seed, train_dir, test_dir, epochs, batch_size = args
    train_manifest = data_mod.load_manifest(Path(train_dir) / "manifest.txt")
    test_manifest = data_mod.load_manifest(Path(test_dir) / "manifest.txt")
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed, variant=variant)
    ckpt, _ = train(cfg, train_manifest, train_dir)
    report = evaluate_model(ckpt, test_manifest, test_dir)
    return AblationCell(
        variant=variant,
        seed=seed,
        accuracy=report.accuracy,
        macro_precision=report.macro_precision,
        macro_recall=report.macro_recall,
        macro_f=report.macro_f,
    )


def run_ablation(
    out_dir,
    seeds,
    train_per_class: int = 200,
    test_per_class: int = 100,
    image_size: int = 128,
    epochs: int = 15,
    batch_size: int = 8,
    data_seed: int = 1337,
    workers: int = 1,
) -> AblationResult:
    """Train every stem variant on one shared synthetic dataset per seed list.

    Cells may run in parallel worker processes; results are merged in
    deterministic (variant, seed) order either way.
    """
    out = Path(out_dir)
    params = data_mod.SyntheticParams(image_size=image_size)
    train_dir = out / "data" / "train"
    test_dir = out / "data" / "test"
    train_counts = {label: train_per_class for label in data_mod.QualityLabel}
    test_counts = {label: test_per_class for label in data_mod.QualityLabel}
    data_mod.generate_dataset(train_dir, train_counts, data_seed, params)
    data_mod.generate_dataset(test_dir, test_counts, data_seed + 1, params)

    jobs = [
        (variant, seed, str(train_dir), str(test_dir), epochs, batch_size)
        for variant in nnet.VARIANTS
        for seed in seeds
    ]
    if workers > 1:
        import multiprocessing as mp
        import os

        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        os.environ.setdefault("MKL_NUM_THREADS", "1")
        ctx = mp.get_context("spawn")
        with ctx.Pool(workers) as pool:
            cells = pool.map(_ablation_cell, jobs)
    else:
        cells = [_ablation_cell(job) for job in jobs]

    result = AblationResult(cells=list(cells))
    (out / "results.csv").write_text(result.table(), encoding="utf-8")
    return result
