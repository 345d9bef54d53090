import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spkdistill import grad as G
from spkdistill.errors import ShapeError, UnitError
from spkdistill.grad import Tensor
from spkdistill.synth import SynthNet, synthesize, vae_loss

NET = SynthNet(n_bands=4, k_units=5, d_unit=3, d_spk=2, d_z=2, hidden=6)


def item(rng, n=3):
    return (
        rng.integers(0, 5, size=n),
        rng.normal(size=(n, 4)),
        Tensor(np.repeat(rng.normal(size=(1, 2)), n, axis=0)),
        rng.normal(size=(n, 2)),
    )


def test_identical_standard_normals_give_zero_kl(rng):
    p = NET.init(rng)
    for part in ("prior", "post"):
        p[f"syn.{part}.out.W"].data[:] = 0.0
        p[f"syn.{part}.out.b"].data[:] = 0.0
    units, target, e, noise = item(rng)
    _, _, kl = vae_loss(NET, p, units, target, e, 1.0, noise)
    assert float(kl.data) == 0.0


def test_total_is_recon_plus_beta_kl(rng):
    p = NET.init(rng)
    units, target, e, noise = item(rng, 5)
    total, recon, kl = vae_loss(NET, p, units, target, e, 0.37, noise)
    assert float(total.data) == pytest.approx(float(recon.data) + 0.37 * float(kl.data), rel=1e-14)


def test_loss_matches_hand_computation(rng):
    p = NET.init(rng)
    units, target, e, noise = item(rng, 4)
    a = {n: t.data for n, t in p.items()}

    def mlp(x, name):
        h = np.tanh(x @ a[f"syn.{name}.l0.W"] + a[f"syn.{name}.l0.b"])
        return h @ a[f"syn.{name}.out.W"] + a[f"syn.{name}.out.b"]

    prior = mlp(a["syn.unit_emb"][units], "prior")
    post = mlp(np.hstack([target, e.data]), "post")
    mp, lp, mq, lq = prior[:, :2], prior[:, 2:], post[:, :2], post[:, 2:]
    z = mq + np.exp(lq) * noise
    rec = mlp(np.hstack([z, e.data]), "dec")
    kl = (lp - lq + (np.exp(2 * lq) + (mq - mp) ** 2) / (2 * np.exp(2 * lp)) - 0.5).sum(1).mean()
    total, recon, klv = vae_loss(NET, p, units, target, e, 0.5, noise)
    assert float(recon.data) == pytest.approx(np.mean((rec - target) ** 2), rel=1e-12)
    assert float(klv.data) == pytest.approx(kl, rel=1e-12)


def test_three_frame_gradient(rng):
    p = NET.init(rng)
    units, target, _, noise = item(rng)
    e = Tensor(rng.normal(size=(1, 2)), requires_grad=True)
    owner = np.zeros(3, dtype=int)
    leaves = [t for _, t in p.items()] + [e]
    fn = lambda: vae_loss(NET, p, units, target, G.take_rows(e, owner), 0.8, noise)[0]  # noqa: E731
    assert G.grad_check(fn, leaves) < 1e-4


def test_beta_zero_reduces_to_regression(rng):
    p = NET.init(rng)
    units, target, e, noise = item(rng, 4)
    total, _, _ = vae_loss(NET, p, units, target, e, 0.0, noise)
    total.backward()
    via_vae = {n: t.grad.copy() for n, t in p.items() if t.grad is not None}
    p.zero_grad()
    mu, ls = NET.posterior(p, Tensor(target), e)
    z = mu + G.mul(G.exp(ls), Tensor(noise))
    G.mse(NET.decode(p, z, e), Tensor(target)).backward()
    via_mse = {n: t.grad.copy() for n, t in p.items() if t.grad is not None}
    for n in via_vae:
        # the prior only enters through the zero-weighted KL term
        want = via_mse.get(n, np.zeros_like(via_vae[n]))
        np.testing.assert_allclose(via_vae[n], want, rtol=1e-12, atol=1e-15)
    assert set(via_mse) <= set(via_vae)


def test_misaligned_item(rng):
    p = NET.init(rng)
    units, target, e, noise = item(rng)
    with pytest.raises(ShapeError):
        vae_loss(NET, p, units[:2], target, e, 1.0, noise)
    with pytest.raises(ShapeError):
        vae_loss(NET, p, units, target, e, 1.0, noise[:2])


@given(st.integers(0, 2**31), st.floats(0, 5))
def test_losses_nonnegative(seed, beta):
    r = np.random.default_rng(seed)
    p = NET.init(r)
    units, target, e, noise = item(r, int(r.integers(1, 6)))
    total, recon, kl = vae_loss(NET, p, units, target, e, beta, noise)
    assert float(recon.data) >= 0 and float(kl.data) >= 0 and float(total.data) >= 0


def test_synthesize_conditioning_and_purity(rng):
    p = NET.init(rng)
    units = [0, 3, 3, 1, 4]
    e = rng.normal(size=2)
    a = synthesize(NET, p, units, e)
    assert a.frames.shape == (5, 4)
    np.testing.assert_array_equal(a.frames, synthesize(NET, p, units, e).frames)
    b = synthesize(NET, p, units, e + np.array([0.5, -0.5]))
    assert not np.allclose(a.frames, b.frames)


def test_synthesize_errors(rng):
    p = NET.init(rng)
    with pytest.raises(UnitError):
        synthesize(NET, p, [], np.zeros(2))
    with pytest.raises(UnitError):
        synthesize(NET, p, [0, 5], np.zeros(2))
    with pytest.raises(ShapeError):
        synthesize(NET, p, [0, 1], np.zeros(3))
