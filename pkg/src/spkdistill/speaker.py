"""Speaker encoder, self-distillation head and loss, and the AAM-Softmax alternative."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .audio import FeatureSequence
from .errors import LabelError, ShapeError, StateError
from .grad import ParamSet, Tensor


def _init_linear(params: ParamSet, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    params.add(f"{name}.W", rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out)))
    params.add(f"{name}.b", np.zeros(n_out))


def _apply_linear(params: ParamSet, name: str, x: Tensor) -> Tensor:
    return G.linear(x, params[f"{name}.W"], params[f"{name}.b"])


@dataclass(frozen=True)
class SpeakerEncoder:
    """Frame-wise tanh MLP, mean pooling over frames, then a final linear layer.

    The final layer (``enc.out``) is the "last layer" that stays trainable
    while the body is frozen.
    """

    n_in: int = 32
    hidden: tuple = (64, 64)
    dim: int = 32
    prefix: str = "enc"

    def init(self, rng: np.random.Generator, params: ParamSet | None = None) -> ParamSet:
        params = ParamSet() if params is None else params
        n = self.n_in
        for i, h in enumerate(self.hidden):
            _init_linear(params, f"{self.prefix}.l{i}", n, h, rng)
            n = h
        _init_linear(params, f"{self.prefix}.out", n, self.dim, rng)
        return params

    @property
    def last_layer(self) -> tuple[str, str]:
        return (f"{self.prefix}.out.W", f"{self.prefix}.out.b")

    def body_names(self, params: ParamSet) -> list[str]:
        return [n for n in params if n.startswith(self.prefix + ".") and n not in self.last_layer]

    def forward(self, params: ParamSet, frames, lengths) -> Tensor:
        """Embeddings (N, dim) for N stacked segments of ``lengths`` frames each."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.data.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"encoder expects {self.n_in} bands, got {x.shape}")
        for i in range(len(self.hidden)):
            x = G.tanh(_apply_linear(params, f"{self.prefix}.l{i}", x))
        return _apply_linear(params, f"{self.prefix}.out", G.segment_mean(x, lengths))


def encode(net: SpeakerEncoder, params: ParamSet, f: FeatureSequence | np.ndarray) -> np.ndarray:
    frames = np.asarray(getattr(f, "frames", f))
    return net.forward(params, frames, [frames.shape[0]]).data[0]


@dataclass(frozen=True)
class DinoHead:
    """Three affine layers with tanh between them, producing ``k_out`` logits."""

    dim: int = 32
    hidden: int = 64
    k_out: int = 256
    prefix: str = "head"

    def init(self, rng: np.random.Generator, params: ParamSet | None = None) -> ParamSet:
        params = ParamSet() if params is None else params
        _init_linear(params, f"{self.prefix}.l0", self.dim, self.hidden, rng)
        _init_linear(params, f"{self.prefix}.l1", self.hidden, self.hidden, rng)
        _init_linear(params, f"{self.prefix}.l2", self.hidden, self.k_out, rng)
        return params

    def forward(self, params: ParamSet, e: Tensor) -> Tensor:
        h = G.tanh(_apply_linear(params, f"{self.prefix}.l0", e))
        h = G.tanh(_apply_linear(params, f"{self.prefix}.l1", h))
        return _apply_linear(params, f"{self.prefix}.l2", h)


@dataclass
class DinoState:
    teacher: ParamSet
    center: np.ndarray
    tau_t: float = 0.04
    tau_s: float = 0.1
    m_teacher: float = 0.996
    m_center: float = 0.9

    def __post_init__(self):
        if self.tau_t <= 0 or self.tau_s <= 0:
            raise StateError("temperatures must be positive")
        if not (0 <= self.m_teacher <= 1 and 0 <= self.m_center <= 1):
            raise StateError("momenta must lie in [0, 1]")
        self.center = np.asarray(self.center, dtype=np.float64)

    @property
    def k_out(self) -> int:
        return self.center.shape[-1]

    @classmethod
    def from_student(cls, student: ParamSet, k_out: int, prefixes=("enc.", "head."), **kw) -> "DinoState":
        return cls(teacher=student.subset(prefixes).copy(trainable=False), center=np.zeros(k_out), **kw)


def teacher_probs(teacher_logits, state: DinoState) -> np.ndarray:
    z = (np.asarray(teacher_logits, dtype=np.float64) - state.center) / state.tau_t
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def dino_loss(teacher_logits, student_logits: Tensor, state: DinoState) -> Tensor:
    """Cross-entropy between the centred, sharpened teacher and the student.

    ``teacher_logits`` is used as a constant: no gradient flows back into it.
    For (N, K) inputs the per-row losses are averaged.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if t.shape != student_logits.shape or t.shape[-1] != state.k_out:
        raise ShapeError(f"logit shapes {t.shape} / {student_logits.shape} do not match K_out={state.k_out}")
    p_t = Tensor(teacher_probs(t, state))
    log_q = G.log_softmax(G.scale(student_logits, 1.0 / state.tau_s))
    return G.cross_entropy_from_probs(p_t, log_q)


def update_center(state: DinoState, batch_teacher_logits) -> DinoState:
    t = np.atleast_2d(np.asarray(batch_teacher_logits, dtype=np.float64))
    if t.shape[0] < 1:
        raise ShapeError("need at least one teacher output")
    state.center = state.m_center * state.center + (1.0 - state.m_center) * t.mean(axis=0)
    return state


def update_teacher(state: DinoState, student_params: ParamSet) -> DinoState:
    G.ema_update(state.teacher, student_params.subset(tuple(_prefixes(state.teacher))), state.m_teacher)
    return state


def _prefixes(params: ParamSet) -> list[str]:
    return sorted({n.split(".", 1)[0] + "." for n in params})


def aam_softmax_loss(
    embeddings: Tensor, labels, class_weights: Tensor, margin: float = 0.2, scale: float = 30.0
) -> Tensor:
    """Additive angular margin softmax, averaged over the batch.

    The true-class logit is ``scale * cos(theta_y + margin)``; the others are
    ``scale * cos(theta_j)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = class_weights.shape[0]
    if margin < 0 or scale <= 0:
        raise ValueError("need margin >= 0 and scale > 0")
    if labels.shape != (embeddings.shape[0],):
        raise ShapeError("one label per embedding row is required")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes})")
    cos = G.matmul(G.l2_normalize(embeddings), G.transpose(G.l2_normalize(class_weights)))
    onehot = np.zeros(cos.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    if margin > 0:
        sin = G.sqrt(G.clamp(1.0 - G.mul(cos, cos), lo=0.0))
        shifted = G.scale(cos, np.cos(margin)) - G.scale(sin, np.sin(margin))
        logits = G.mul(shifted, Tensor(onehot)) + G.mul(cos, Tensor(1.0 - onehot))
    else:
        logits = cos
    logp = G.log_softmax(G.scale(logits, scale))
    return G.cross_entropy_from_probs(Tensor(onehot), logp)
