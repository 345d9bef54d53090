"""Finite-difference checks over every differentiable primitive and the joint losses.

Each case draws random shapes and values from its own seed, wraps the op in
a random linear read-out (so gradients are O(1) rather than tiny) and
compares backprop with central differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .audio import stream
from .grad import ParamSet, Tensor
from .speaker import DinoHead, DinoState, SpeakerEncoder, aam_softmax_loss, dino_loss
from .synth import SynthNet, vae_loss

TAG_GRADCHECK = 31


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    max_rel_error: float


def _leaf(rng, shape, lo=None, away_from=None) -> Tensor:
    x = rng.normal(size=shape)
    if away_from is not None:
        # keep clear of kinks so central differences stay valid
        x = np.where(np.abs(x - away_from) < 0.05, x + np.sign(x - away_from + 1e-12) * 0.1, x)
    if lo is not None:
        x = lo + np.abs(x)
    return Tensor(x, requires_grad=True)


def _dims(rng, n=2, lo=1, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


def _fixed_readout(rng, shape):
    r = Tensor(rng.normal(size=shape))
    return lambda y: G.sum(G.mul(y, r))


def _unary(op, **leaf_kw):
    def build(rng):
        x = _leaf(rng, _dims(rng), **leaf_kw)
        out = _fixed_readout(rng, op(x).shape)
        return (lambda: out(op(x))), [x]

    return build


def _binary_same(op, **leaf_kw):
    def build(rng):
        shape = _dims(rng)
        a, b = _leaf(rng, shape, **leaf_kw), _leaf(rng, shape, **leaf_kw)
        out = _fixed_readout(rng, shape)
        return (lambda: out(op(a, b))), [a, b]

    return build


def _linear(rng):
    n, i, o = _dims(rng, 3)
    x, w, b = _leaf(rng, (n, i)), _leaf(rng, (i, o)), _leaf(rng, (o,))
    out = _fixed_readout(rng, (n, o))
    return (lambda: out(G.linear(x, w, b))), [x, w, b]


def _matmul(rng):
    n, k, m = _dims(rng, 3)
    a, b = _leaf(rng, (n, k)), _leaf(rng, (k, m))
    out = _fixed_readout(rng, (n, m))
    return (lambda: out(G.matmul(a, b))), [a, b]


def _reduction(op):
    def build(rng):
        x = _leaf(rng, _dims(rng))
        c = float(rng.normal())
        return (lambda: G.scale(op(x), c)), [x]

    return build


def _mse(rng):
    shape = _dims(rng)
    a, b = _leaf(rng, shape), _leaf(rng, shape)
    return (lambda: G.mse(a, b)), [a, b]


def _cross_entropy(rng):
    n, k = _dims(rng, 2, 1, 6)
    p = Tensor(rng.dirichlet(np.ones(k), size=n))
    z = _leaf(rng, (n, k))
    return (lambda: G.cross_entropy_from_probs(p, G.log_softmax(z))), [z]


def _kl(rng):
    shape = _dims(rng)
    leaves = [_leaf(rng, shape) for _ in range(4)]
    for t in leaves[1::2]:
        t.data *= 0.5  # log-sigmas
    out = _fixed_readout(rng, (shape[0],))
    return (lambda: out(G.diag_gaussian_kl(*leaves))), leaves


def _concat(rng):
    n = int(rng.integers(1, 5))
    parts = [_leaf(rng, (n, int(rng.integers(1, 4)))) for _ in range(int(rng.integers(2, 4)))]
    out = _fixed_readout(rng, (n, sum(p.shape[1] for p in parts)))
    return (lambda: out(G.concat(parts, axis=1))), parts


def _slice(rng):
    n, d = _dims(rng, 2, 2, 6)
    x = _leaf(rng, (n, d))
    lo = int(rng.integers(0, d - 1))
    hi = int(rng.integers(lo + 1, d + 1))
    out = _fixed_readout(rng, (n, hi - lo))
    return (lambda: out(G.slice(x, lo, hi, axis=1))), [x]


def _segment_mean(rng):
    lengths = [int(v) for v in rng.integers(1, 4, size=int(rng.integers(1, 4)))]
    x = _leaf(rng, (sum(lengths), int(rng.integers(1, 4))))
    out = _fixed_readout(rng, (len(lengths), x.shape[1]))
    return (lambda: out(G.segment_mean(x, lengths))), [x]


def _take_rows(rng):
    n, d = _dims(rng)
    x = _leaf(rng, (n, d))
    idx = rng.integers(0, n, size=int(rng.integers(1, 7)))
    out = _fixed_readout(rng, (len(idx), d))
    return (lambda: out(G.take_rows(x, idx))), [x]


def _l2n(rng):
    n, d = _dims(rng, 2, 1, 5)
    x = _leaf(rng, (n, d + 1))
    x.data += np.sign(x.data) * 0.2  # keep norms well away from zero
    out = _fixed_readout(rng, x.shape)
    return (lambda: out(G.l2_normalize(x))), [x]


def _params(ps: ParamSet) -> list[Tensor]:
    return [t for _, t in ps.items()]


def _joint(mode: str):
    def build(rng):
        n_bands, k_units, d = 4, 5, 3
        enc = SpeakerEncoder(n_bands, (5,), d)
        head = DinoHead(d, 4, 6)
        syn = SynthNet(n_bands, k_units, 3, d, 2, 4)
        theta = enc.init(rng)
        head.init(rng, theta)
        phi = syn.init(rng)
        if mode == "aam":
            theta.add("aam.W", rng.normal(size=(3, d)))
        state = DinoState.from_student(theta, 6)
        state.center = rng.normal(size=6) * 0.1
        n_items, n_frames = 2, 3
        crop1 = rng.normal(size=(n_items * n_frames, n_bands))
        crop2 = rng.normal(size=(n_items * n_frames, n_bands))
        target = rng.normal(size=(n_items * n_frames, n_bands))
        units = rng.integers(0, k_units, size=n_items * n_frames)
        owner = np.repeat(np.arange(n_items), n_frames)
        noise = rng.normal(size=(n_items * n_frames, 2))
        labels = rng.integers(0, 3, size=n_items)
        lam, beta = float(rng.uniform(0.1, 2.0)), float(rng.uniform(0.1, 1.0))
        lengths = [n_frames] * n_items
        t_logits = head.forward(state.teacher, enc.forward(state.teacher, crop1, lengths)).data

        def loss():
            e = enc.forward(theta, crop1, lengths)
            total, _, _ = vae_loss(syn, phi, units, target, G.take_rows(e, owner), beta, noise)
            if mode == "dino":
                spk = dino_loss(t_logits, head.forward(theta, enc.forward(theta, crop2, lengths)), state)
            else:
                spk = aam_softmax_loss(enc.forward(theta, crop2, lengths), labels, theta["aam.W"], 0.2, 5.0)
            return total + G.scale(spk, lam)

        return loss, _params(theta) + _params(phi)

    return build


CASES = {
    "add": _binary_same(G.add),
    "mul": _binary_same(G.mul),
    "scale": _unary(lambda x: G.scale(x, 1.7)),
    "tanh": _unary(G.tanh),
    "relu": _unary(G.relu, away_from=0.0),
    "exp": _unary(G.exp),
    "log": _unary(G.log, lo=0.2),
    "sqrt": _unary(G.sqrt, lo=0.2),
    "clamp": _unary(lambda x: G.clamp(x, lo=-0.5, hi=0.5), away_from=0.5),
    "transpose": _unary(G.transpose),
    "softmax": _unary(G.softmax),
    "log_softmax": _unary(G.log_softmax),
    "linear": _linear,
    "matmul": _matmul,
    "sum": _reduction(G.sum),
    "mean": _reduction(G.mean),
    "mse": _mse,
    "cross_entropy_from_probs": _cross_entropy,
    "diag_gaussian_kl": _kl,
    "l2_normalize": _l2n,
    "concat": _concat,
    "slice": _slice,
    "segment_mean": _segment_mean,
    "take_rows": _take_rows,
    "joint_dino": _joint("dino"),
    "joint_aam": _joint("aam"),
}


def run_case(name: str, seed: int, h: float = 1e-5) -> CheckResult:
    rng = stream(seed, TAG_GRADCHECK, sorted(CASES).index(name))
    fn, leaves = CASES[name](rng)
    return CheckResult(name, seed, G.grad_check(fn, leaves, h))


def run_suite(seeds=range(5), names=None, h: float = 1e-5) -> list[CheckResult]:
    """Every case under every seed; ``len(CASES) * len(seeds)`` configurations."""
    names = sorted(CASES) if names is None else list(names)
    return [run_case(n, s, h) for s in seeds for n in names]
