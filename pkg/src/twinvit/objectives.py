"""Self-supervised objectives: Barlow Twins, DINO and their weighted sum,
plus the projection heads, teacher EMA and DINO centering state."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ParameterError, ShapeError
from .tensor import Tensor
from .vit import Params, linear, linear_params

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda_bt: float = 0.005
    alpha: float = 1.0
    bt_scale: float = 0.01
    tau_s: float = 0.1
    tau_t: float = 0.04
    tau_t_warmup: float = 0.04
    tau_t_warmup_fraction: float = 0.1
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    bt_dim: int = 128
    dino_out_dim: int = 256
    dino_hidden: int = 256
    dino_bottleneck: int = 64

    def __post_init__(self):
        if self.lambda_bt < 0 or self.alpha < 0:
            raise ConfigError("lambda_bt and alpha must be non-negative")
        if self.bt_scale <= 0:
            raise ConfigError(f"bt_scale must be positive, got {self.bt_scale}")
        if min(self.tau_s, self.tau_t, self.tau_t_warmup) <= 0:
            raise ConfigError("temperatures must be positive")
        if max(self.tau_t, self.tau_t_warmup) > self.tau_s:
            raise ConfigError(f"teacher temperature must not exceed tau_s={self.tau_s}")
        for name in ("ema_momentum", "center_momentum", "tau_t_warmup_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if min(self.bt_dim, self.dino_out_dim, self.dino_hidden, self.dino_bottleneck) < 1:
            raise ConfigError("head dimensions must be positive")


# ----------------------------------------------------------------- heads
def init_bt_head(in_dim: int, out_dim: int, seed: int, prefix: str = "bt_head.") -> Params:
    """Two-layer projector, hidden width 4 x out_dim."""
    params: Params = {}
    linear_params(params, prefix + "fc1", in_dim, 4 * out_dim, seed)
    linear_params(params, prefix + "fc2", 4 * out_dim, out_dim, seed)
    return params


def bt_head(params: Params, x, prefix: str = "bt_head.") -> Tensor:
    h = T.gelu(linear(x, params[prefix + "fc1.weight"], params[prefix + "fc1.bias"]))
    return linear(h, params[prefix + "fc2.weight"], params[prefix + "fc2.bias"])


def init_dino_head(in_dim: int, cfg: LossConfig, seed: int, prefix: str = "dino_head.") -> Params:
    """Three-layer MLP to an L2-normalized bottleneck, then a bias-free,
    column-normalized projection to ``dino_out_dim`` logits."""
    params: Params = {}
    linear_params(params, prefix + "fc1", in_dim, cfg.dino_hidden, seed)
    linear_params(params, prefix + "fc2", cfg.dino_hidden, cfg.dino_hidden, seed)
    linear_params(params, prefix + "fc3", cfg.dino_hidden, cfg.dino_bottleneck, seed)
    linear_params(params, prefix + "last", cfg.dino_bottleneck, cfg.dino_out_dim, seed, bias=False)
    return params


def dino_head(params: Params, x, prefix: str = "dino_head.") -> Tensor:
    h = T.gelu(linear(x, params[prefix + "fc1.weight"], params[prefix + "fc1.bias"]))
    h = T.gelu(linear(h, params[prefix + "fc2.weight"], params[prefix + "fc2.bias"]))
    h = linear(h, params[prefix + "fc3.weight"], params[prefix + "fc3.bias"])
    # Unit-norm columns make every logit a cosine, so the student cannot
    # reach a uniform output by shrinking the last layer.
    w = T.l2_normalize(params[prefix + "last.weight"], axis=0)
    return linear(T.l2_normalize(h), w)


# --------------------------------------------------------------- Barlow Twins
def cross_correlation(z_a, z_b) -> Tensor:
    """C = z_a^T z_b / N for column-normalized (N, D) embeddings."""
    z_a, z_b = T.as_tensor(z_a), T.as_tensor(z_b)
    if z_a.ndim != 2 or z_a.shape != z_b.shape:
        raise ShapeError(f"cross_correlation needs equal N x D inputs, got {z_a.shape} and {z_b.shape}")
    return T.matmul(z_a.T, z_b) / float(z_a.shape[0])


def barlow_twins_loss(c, lambda_bt: float) -> Tensor:
    """sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2."""
    c = T.as_tensor(c)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"barlow_twins_loss needs a square matrix, got {c.shape}")
    eye = np.eye(c.shape[0], dtype=c.data.dtype)
    diag = (c * eye).sum(axis=1)
    on = ((1.0 - diag) ** 2).sum()
    off = ((c * (1.0 - eye)) ** 2).sum()
    return on + off * lambda_bt


def bt_loss_from_embeddings(z_a, z_b, lambda_bt: float, eps: float = 1e-5) -> Tensor:
    return barlow_twins_loss(cross_correlation(T.batch_norm_columns(z_a, eps), T.batch_norm_columns(z_b, eps)), lambda_bt)


# ----------------------------------------------------------------------- DINO
def dino_distributions(student_logits, teacher_logits, center, tau_s: float, tau_t: float):
    """Student softmax at tau_s (differentiable) and the centered teacher
    softmax at tau_t (a plain array, outside the graph)."""
    p_s = T.softmax_temp(student_logits, tau_s)
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    with T.no_grad():
        p_t = T.softmax_temp(Tensor(t - np.asarray(center, dtype=t.dtype), dtype=t.dtype), tau_t).data
    return p_s, p_t


def dino_loss(student_probs, teacher_probs, skip_same_view: bool = True) -> Tensor:
    """Mean over (teacher view t, student view s) pairs of the batch-mean
    cross-entropy -sum_k p_t log p_s.

    Both arguments are sequences of per-view ``(B, K)`` probabilities.  With
    ``skip_same_view`` the pair t == s is excluded, which assumes the first
    student views are the same crops the teacher saw.
    """
    terms = []
    for ti, pt in enumerate(teacher_probs):
        pt = pt.data if isinstance(pt, Tensor) else np.asarray(pt)
        for si, ps in enumerate(student_probs):
            if skip_same_view and si == ti:
                continue
            ce = -(T.log(ps, floor=LOG_FLOOR) * pt).sum(axis=-1)
            terms.append(ce.mean())
    if not terms:
        raise ShapeError("dino_loss: no (teacher, student) view pairs to compare")
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total / float(len(terms))


def hybrid_loss(l_bt, l_dino, cfg: LossConfig) -> Tensor:
    """bt_scale * l_bt + alpha * l_dino."""
    l_bt, l_dino = T.as_tensor(l_bt), T.as_tensor(l_dino)
    if not (np.isfinite(l_bt.data).all() and np.isfinite(l_dino.data).all()):
        raise NumericError(f"non-finite loss component: bt={l_bt.data}, dino={l_dino.data}")
    return l_bt * cfg.bt_scale + l_dino * cfg.alpha


# ------------------------------------------------------------ teacher state
@dataclass
class TeacherStudentPair:
    """Student parameters, an EMA teacher over a subset of them, and the
    running center of teacher logits."""

    student: Params
    teacher: Params
    center: np.ndarray = field(default=None)

    @classmethod
    def from_student(cls, student: Params, teacher_prefixes=("backbone.", "dino_head."), out_dim: int | None = None):
        teacher = {
            name: Tensor(p.data.copy(), dtype=p.data.dtype)
            for name, p in student.items() if name.startswith(tuple(teacher_prefixes))
        }
        if out_dim is None:
            out_dim = next(p.shape[-1] for n, p in student.items() if n.endswith("last.weight"))
        return cls(student, teacher, np.zeros(out_dim, dtype=np.float32))


def ema_update(pair: TeacherStudentPair, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, elementwise in float32."""
    if not 0 <= m <= 1:
        raise ParameterError(f"EMA momentum must lie in [0, 1], got {m}")
    for name, t in pair.teacher.items():
        s = pair.student.get(name)
        if s is None or s.shape != t.shape:
            raise ShapeError(f"teacher parameter {name} has no student counterpart of shape {t.shape}")
    keep, take = np.float32(m), np.float32(1.0 - m)
    for name, t in pair.teacher.items():
        t.data = t.data * keep + pair.student[name].data * take


def update_center(center: np.ndarray, teacher_logits, m_c: float) -> np.ndarray:
    """center <- m_c * center + (1 - m_c) * row-mean of the teacher logits.

    The row mean is accumulated in float64 and rounded to float32 before the
    float32 blend.
    """
    if not 0 <= m_c <= 1:
        raise ParameterError(f"center momentum must lie in [0, 1], got {m_c}")
    logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    batch_mean = logits.reshape(-1, logits.shape[-1]).mean(axis=0, dtype=np.float64).astype(np.float32)
    return np.asarray(center, dtype=np.float32) * np.float32(m_c) + batch_mean * np.float32(1.0 - m_c)


# ------------------------------------------------------------------ schedules
def teacher_momentum(step: int, total_steps: int, base: float) -> float:
    """Cosine ramp from ``base`` at step 0 to 1 at the last step."""
    if total_steps <= 1:
        return base
    return 1.0 - (1.0 - base) * (math.cos(math.pi * step / (total_steps - 1)) + 1.0) / 2.0


def teacher_temperature(step: int, total_steps: int, cfg: LossConfig) -> float:
    warm = int(round(cfg.tau_t_warmup_fraction * total_steps))
    if warm <= 0 or step >= warm:
        return cfg.tau_t
    return cfg.tau_t_warmup + (cfg.tau_t - cfg.tau_t_warmup) * step / warm
