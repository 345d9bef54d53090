"""Unit-conditioned conditional VAE over feature frames.

A frame-synchronous stand-in for a unit-to-speech model: the prior sees only
the unit of each frame, the posterior sees the target frame plus the speaker
embedding, and the decoder maps (z, speaker embedding) back to a frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .audio import FeatureSequence
from .errors import ShapeError, UnitError
from .grad import ParamSet, Tensor
from .speaker import _apply_linear, _init_linear


@dataclass(frozen=True)
class SynthNet:
    n_bands: int = 32
    k_units: int = 64
    d_unit: int = 16
    d_spk: int = 32
    d_z: int = 8
    hidden: int = 64
    prefix: str = "syn"

    def init(self, rng: np.random.Generator, params: ParamSet | None = None) -> ParamSet:
        params = ParamSet() if params is None else params
        p = self.prefix
        params.add(f"{p}.unit_emb", rng.normal(0.0, 1.0, (self.k_units, self.d_unit)))
        _init_linear(params, f"{p}.prior.l0", self.d_unit, self.hidden, rng)
        _init_linear(params, f"{p}.prior.out", self.hidden, 2 * self.d_z, rng)
        _init_linear(params, f"{p}.post.l0", self.n_bands + self.d_spk, self.hidden, rng)
        _init_linear(params, f"{p}.post.out", self.hidden, 2 * self.d_z, rng)
        _init_linear(params, f"{p}.dec.l0", self.d_z + self.d_spk, self.hidden, rng)
        _init_linear(params, f"{p}.dec.out", self.hidden, self.n_bands, rng)
        # start with small output variances so early samples stay near the means
        for part in ("prior", "post"):
            params[f"{p}.{part}.out.W"].data[:, self.d_z :] *= 0.1
        return params

    def _gaussian(self, params: ParamSet, part: str, x: Tensor) -> tuple[Tensor, Tensor]:
        h = G.tanh(_apply_linear(params, f"{self.prefix}.{part}.l0", x))
        out = _apply_linear(params, f"{self.prefix}.{part}.out", h)
        return G.slice(out, 0, self.d_z), G.slice(out, self.d_z, 2 * self.d_z)

    def _check_units(self, units: np.ndarray) -> np.ndarray:
        units = np.asarray(units, dtype=np.int64)
        if units.ndim != 1 or units.size == 0:
            raise UnitError("need a non-empty 1-D unit sequence")
        if units.min() < 0 or units.max() >= self.k_units:
            raise UnitError(f"unit ids must lie in [0, {self.k_units})")
        return units

    def prior(self, params: ParamSet, units) -> tuple[Tensor, Tensor]:
        emb = G.take_rows(params[f"{self.prefix}.unit_emb"], self._check_units(units))
        return self._gaussian(params, "prior", emb)

    def posterior(self, params: ParamSet, target: Tensor, e_rows: Tensor) -> tuple[Tensor, Tensor]:
        return self._gaussian(params, "post", G.concat([target, e_rows], axis=1))

    def decode(self, params: ParamSet, z: Tensor, e_rows: Tensor) -> Tensor:
        h = G.tanh(_apply_linear(params, f"{self.prefix}.dec.l0", G.concat([z, e_rows], axis=1)))
        return _apply_linear(params, f"{self.prefix}.dec.out", h)


def vae_loss(
    net: SynthNet,
    params: ParamSet,
    units,
    target,
    e_rows: Tensor,
    beta: float,
    noise: np.ndarray,
) -> tuple[Tensor, Tensor, Tensor]:
    """Reconstruction + beta * KL over a stack of aligned frames.

    ``units`` holds one raw unit id per target frame, ``e_rows`` the speaker
    embedding repeated per frame and ``noise`` the standard normal draw
    used by the reparameterisation (so the loss is a pure function of it).
    Returns ``(total, recon, kl)``.
    """
    target = target if isinstance(target, Tensor) else Tensor(getattr(target, "frames", target))
    units = np.asarray(units)
    n = target.shape[0]
    if units.shape != (n,) or e_rows.shape[0] != n or noise.shape != (n, net.d_z):
        raise ShapeError(
            f"misaligned item: {units.shape[0] if units.ndim else 0} units, {n} frames, "
            f"{e_rows.shape[0]} embedding rows, noise {noise.shape}"
        )
    mu_p, ls_p = net.prior(params, units)
    mu_q, ls_q = net.posterior(params, target, e_rows)
    z = mu_q + G.mul(G.exp(ls_q), Tensor(noise))
    recon = G.mse(net.decode(params, z, e_rows), target)
    kl = G.mean(G.diag_gaussian_kl(mu_q, ls_q, mu_p, ls_p))
    total = recon + G.scale(kl, beta)
    return total, recon, kl


def synthesize(net: SynthNet, params: ParamSet, units, e, hop_s: float = 0.010) -> FeatureSequence:
    """Decode the prior mean of each frame's unit with speaker embedding ``e``."""
    units = net._check_units(units)
    e = np.asarray(getattr(e, "data", e), dtype=np.float64).reshape(1, -1)
    if e.shape[1] != net.d_spk:
        raise ShapeError(f"speaker embedding of size {e.shape[1]}, expected {net.d_spk}")
    mu_p, _ = net.prior(params, units)
    e_rows = Tensor(np.repeat(e, len(units), axis=0))
    return FeatureSequence(net.decode(params, Tensor(mu_p.data), e_rows).data, hop_s)
