"""Pretraining loop for the ``barlow``, ``dino`` and ``hybrid`` methods.

The run configuration is one flat key=value namespace covering
:class:`TrainConfig`, :class:`ViTConfig`, :class:`LossConfig` and
:class:`AugmentConfig` fields (``global_size`` is always ``image_size``;
``local_size = 0`` picks the default local resolution).
"""
from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import rng as rngmod
from . import tensor as T
from . import vit
from .augment import AugmentConfig, MultiCropBatch, default_local_size, make_multicrop
from .dataio import Checkpoint, load_images, resolve_dataset
from .errors import ConfigError, NumericError
from .objectives import (LossConfig, TeacherStudentPair, bt_head, bt_loss_from_embeddings, dino_distributions,
                         dino_head, dino_loss, ema_update, hybrid_loss, init_bt_head, init_dino_head,
                         teacher_momentum, teacher_temperature, update_center)
from .optim import AdamState, learning_rate, optimizer_step
from .vit import Params, ViTConfig

METHODS = ("barlow", "dino", "hybrid")
LOG_HEADER = ["epoch", "step", "loss_total", "loss_bt", "loss_dino", "ms"]
BACKBONE = "backbone."


@dataclass(frozen=True)
class TrainConfig:
    method: str = "hybrid"
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 5e-4
    weight_decay: float = 0.04
    warmup_fraction: float = 0.1
    seed: int = 0
    dataset: str = ""
    vit: ViTConfig = field(default_factory=ViTConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}, got {self.method!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2 (batch statistics), got {self.batch_size}")
        if self.augment.global_size != self.vit.image_size:
            raise ConfigError("augment.global_size must equal vit.image_size")
        if self.augment.local_size % self.vit.patch_size:
            raise ConfigError(f"local_size {self.augment.local_size} is not a multiple of patch {self.vit.patch_size}")

    @property
    def uses_bt(self) -> bool:
        return self.method in ("barlow", "hybrid")

    @property
    def uses_dino(self) -> bool:
        return self.method in ("dino", "hybrid")


# ------------------------------------------------------------- flat config
_SECTIONS = {"vit": ViTConfig, "loss": LossConfig, "augment": AugmentConfig}
_TOP = [f.name for f in dataclasses.fields(TrainConfig) if f.name not in _SECTIONS]
_DERIVED = {"global_size"}


def config_keys() -> list[str]:
    keys = list(_TOP)
    for cls in _SECTIONS.values():
        keys += [f.name for f in dataclasses.fields(cls) if f.name not in _DERIVED]
    return keys


def _coerce(key: str, value, default):
    if isinstance(default, tuple):
        parts = value.split(",") if isinstance(value, str) else list(value)
        return tuple(float(p) for p in parts)
    try:
        if isinstance(default, bool):
            return str(value).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from exc
    return str(value)


def _section(cls, flat: dict) -> dict:
    return {
        f.name: _coerce(f.name, flat[f.name], f.default)
        for f in dataclasses.fields(cls) if f.name in flat and f.name not in _DERIVED
    }


def config_from_flat(flat: dict) -> TrainConfig:
    """Build a :class:`TrainConfig` from flat keys; missing keys take defaults."""
    unknown = sorted(set(flat) - set(config_keys()))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    defaults = TrainConfig.__dataclass_fields__
    top = {k: _coerce(k, flat[k], defaults[k].default) for k in _TOP if k in flat}
    vcfg = ViTConfig(**_section(ViTConfig, flat))
    aug = _section(AugmentConfig, flat)
    aug["global_size"] = vcfg.image_size
    if not aug.get("local_size"):
        aug["local_size"] = default_local_size(vcfg.image_size, vcfg.patch_size)
    return TrainConfig(**top, vit=vcfg, loss=LossConfig(**_section(LossConfig, flat)), augment=AugmentConfig(**aug))


def config_to_flat(cfg: TrainConfig) -> dict:
    flat = {k: getattr(cfg, k) for k in _TOP}
    for name in _SECTIONS:
        for f in dataclasses.fields(getattr(cfg, name)):
            if f.name not in _DERIVED:
                value = getattr(getattr(cfg, name), f.name)
                flat[f.name] = list(value) if isinstance(value, tuple) else value
    return flat


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        flat[key] = value
    return flat


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in config_to_flat(cfg).items():
        if isinstance(value, list):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines)


# ------------------------------------------------------------------ records
@dataclass
class LossRecord:
    epoch: int
    step: int
    loss_total: float
    loss_bt: float | None
    loss_dino: float | None
    ms: float

    def key(self) -> tuple:
        """Everything except wall-clock time."""
        return self.epoch, self.step, self.loss_total, self.loss_bt, self.loss_dino


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_loss_log(records: Iterable[LossRecord], path, append: bool = False) -> None:
    path = Path(path)
    fresh = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_HEADER)
        for r in records:
            writer.writerow([r.epoch, r.step, _fmt(r.loss_total), _fmt(r.loss_bt), _fmt(r.loss_dino), f"{r.ms:.3f}"])


def read_loss_log(path) -> list[LossRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LOG_HEADER:
            raise ConfigError(f"{path}: expected header {','.join(LOG_HEADER)}")
        out = []
        for row in reader:
            if not row:
                continue
            opt = [float(v) if v else None for v in row[2:5]]
            out.append(LossRecord(int(row[0]), int(row[1]), opt[0], opt[1], opt[2], float(row[5] or 0)))
    return out


# -------------------------------------------------------------------- state
@dataclass
class TrainState:
    config: TrainConfig
    params: Params
    pair: TeacherStudentPair | None
    opt: AdamState
    total_steps: int
    step: int = 0
    last_teacher_logits: np.ndarray | None = None
    last_momentum: float | None = None


def init_student(cfg: TrainConfig) -> Params:
    params = vit.init_vit(cfg.vit, cfg.seed, prefix=BACKBONE)
    if cfg.uses_bt:
        params.update(init_bt_head(cfg.vit.dim, cfg.loss.bt_dim, cfg.seed))
    if cfg.uses_dino:
        params.update(init_dino_head(cfg.vit.dim, cfg.loss, cfg.seed))
    return params


def init_state(cfg: TrainConfig, total_steps: int) -> TrainState:
    params = init_student(cfg)
    pair = TeacherStudentPair.from_student(params, out_dim=cfg.loss.dino_out_dim) if cfg.uses_dino else None
    return TrainState(cfg, params, pair, AdamState(), total_steps)


def _stack(views: list[MultiCropBatch], attr: str) -> np.ndarray:
    """View-major stack: all images' view 0, then all images' view 1, ..."""
    arr = np.stack([getattr(v, attr) for v in views], axis=1)
    return arr.reshape(-1, *arr.shape[2:])


def _diagnostics(state: TrainState, **stats) -> str:
    biggest = max(float(np.abs(p.data).max()) for p in state.params.values())
    parts = [f"step={state.step}", f"max|param|={biggest:.4g}"]
    parts += [f"{k}={v}" for k, v in stats.items()]
    if state.pair is not None:
        parts.append(f"|center|={float(np.linalg.norm(state.pair.center)):.4g}")
    return ", ".join(parts)


def train_step(state: TrainState, views: list[MultiCropBatch], epoch: int = 0) -> LossRecord:
    """One optimizer update on the student (plus EMA and center updates for
    methods with a teacher)."""
    cfg, lc = state.config, state.config.loss
    b = len(views)
    if b < 2:
        raise ConfigError(f"a training batch needs at least 2 images, got {b}")
    start = time.perf_counter()
    lr = learning_rate(state.step, state.total_steps, cfg.learning_rate, cfg.warmup_fraction)
    for p in state.params.values():
        p.grad = None

    parts = []
    if cfg.uses_bt:
        parts.append(_stack(views, "bt_views"))
    if cfg.uses_dino:
        parts.append(_stack(views, "global_views"))
    cls, _ = vit.forward(state.params, cfg.vit, np.concatenate(parts), prefix=BACKBONE)

    l_bt = l_dino = None
    offset = 0
    if cfg.uses_bt:
        z = bt_head(state.params, cls[0:2 * b])
        l_bt = bt_loss_from_embeddings(z[0:b], z[b:2 * b], lc.lambda_bt)
        offset = 2 * b
    teacher_logits = None
    if cfg.uses_dino:
        student_logits = [dino_head(state.params, cls[offset:offset + 2 * b])]
        if cfg.augment.n_local:
            local_cls, _ = vit.forward(state.params, cfg.vit, _stack(views, "local_views"), prefix=BACKBONE)
            student_logits.append(dino_head(state.params, local_cls))
        logits = T.concat(student_logits, axis=0) if len(student_logits) > 1 else student_logits[0]
        with T.no_grad():
            t_cls, _ = vit.forward(state.pair.teacher, cfg.vit, _stack(views, "global_views"), prefix=BACKBONE)
            teacher_logits = dino_head(state.pair.teacher, t_cls).data
        tau_t = teacher_temperature(state.step, state.total_steps, lc)
        p_s, p_t = dino_distributions(logits, teacher_logits, state.pair.center, lc.tau_s, tau_t)
        n_student = p_s.shape[0] // b
        l_dino = dino_loss([p_s[i * b:(i + 1) * b] for i in range(n_student)],
                           [p_t[i * b:(i + 1) * b] for i in range(2)])

    if cfg.method == "hybrid":
        if not (np.isfinite(l_bt.data).all() and np.isfinite(l_dino.data).all()):
            raise NumericError("non-finite loss; " + _diagnostics(
                state, epoch=epoch, lr=lr, loss_bt=float(l_bt.data), loss_dino=float(l_dino.data)))
        total = hybrid_loss(l_bt, l_dino, lc)
    else:
        total = l_bt if cfg.method == "barlow" else l_dino
    if not np.isfinite(total.data).all():
        raise NumericError("non-finite loss; " + _diagnostics(
            state, epoch=epoch, lr=lr, loss=float(total.data), cls_std=float(cls.data.std())))

    total.backward()
    optimizer_step(state.params, lr, cfg.weight_decay, state.opt)
    if state.pair is not None:
        m = teacher_momentum(state.step, state.total_steps, lc.ema_momentum)
        ema_update(state.pair, m)
        state.pair.center = update_center(state.pair.center, teacher_logits, lc.center_momentum)
        state.last_teacher_logits = teacher_logits
        state.last_momentum = m
    record = LossRecord(
        epoch, state.step, float(total.data),
        None if l_bt is None else float(l_bt.data),
        None if l_dino is None else float(l_dino.data),
        (time.perf_counter() - start) * 1000.0,
    )
    state.step += 1
    return record


# ---------------------------------------------------------------- the loop
def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return rngmod.stream(seed, rngmod.SHUFFLE, epoch).permutation(n)


def make_checkpoint(state: TrainState) -> Checkpoint:
    tensors = {f"student/{k}": p.data for k, p in state.params.items()}
    if state.pair is not None:
        tensors.update({f"teacher/{k}": p.data for k, p in state.pair.teacher.items()})
        tensors["center"] = state.pair.center
    return Checkpoint(state.config.method, config_to_flat(state.config), tensors)


def backbone_from_checkpoint(ckpt: Checkpoint, which: str = "student") -> tuple[Params, ViTConfig]:
    """Backbone parameters (``backbone.`` prefix) and the config to run them."""
    cfg = config_from_flat(ckpt.config)
    prefix = f"{which}/{BACKBONE}"
    params = {k[len(which) + 1:]: T.Tensor(v, dtype=np.float32) for k, v in ckpt.tensors.items() if k.startswith(prefix)}
    if not params:
        raise ConfigError(f"checkpoint has no {which} backbone")
    return params, cfg.vit


def train(cfg: TrainConfig, images: list[np.ndarray] | None = None, log_path=None,
          on_record: Callable[[LossRecord], None] | None = None) -> tuple[Checkpoint, list[LossRecord], TrainState]:
    """Run ``epochs x ceil(n / batch_size)`` steps.

    ``images`` defaults to the configured dataset.  With ``log_path`` the
    loss CSV gains one row per step.
    """
    if images is None:
        if not cfg.dataset:
            raise ConfigError("no dataset configured")
        images = load_images(resolve_dataset(cfg.dataset))
    n = len(images)
    if n == 0:
        raise ConfigError("dataset is empty")
    if cfg.uses_bt and n % cfg.batch_size == 1:
        raise ConfigError(f"{n} images leave a final batch of one for batch_size {cfg.batch_size}")
    spe = steps_per_epoch(n, cfg.batch_size)
    state = init_state(cfg, cfg.epochs * spe)
    records: list[LossRecord] = []
    if log_path is not None:
        write_loss_log([], log_path)
    for epoch in range(cfg.epochs):
        order = epoch_order(cfg.seed, epoch, n)
        for s in range(spe):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            views = [make_multicrop(images[i], cfg.augment, cfg.seed, epoch, int(i)) for i in idx]
            record = train_step(state, views, epoch)
            records.append(record)
            if log_path is not None:
                write_loss_log([record], log_path, append=True)
            if on_record is not None:
                on_record(record)
    return make_checkpoint(state), records, state


def epoch_means(records: list[LossRecord]) -> list[tuple[int, float]]:
    by_epoch: dict[int, list[float]] = {}
    for r in records:
        by_epoch.setdefault(r.epoch, []).append(r.loss_total)
    return [(e, float(np.mean(v))) for e, v in sorted(by_epoch.items())]
