import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import approx_fprime

from spkdistill import eval as E
from spkdistill.errors import ConfigError, IoError, ManifestError, StratificationError


# ------------------------------------------------------------------ probes

def _blobs(rng, n_per, centres, spread=0.1):
    x = np.concatenate([c + spread * rng.normal(size=(n_per, len(c))) for c in centres])
    y = np.repeat(np.arange(len(centres)), n_per)
    return x, y


def test_separable_blobs_probe_perfectly(rng):
    x, y = _blobs(rng, 20, [np.array([3.0, 0, 0]), np.array([-3.0, 0, 0]), np.array([0, 3.0, 0])])
    res = E.linear_probe(x, y, n_folds=5, seed=1)
    assert res.accuracy == 1.0 and res.std == 0.0
    assert res.n_classes == 3 and res.chance == pytest.approx(1 / 3)
    assert len(res.fold_accuracies) == 5


def test_shuffled_labels_sit_near_chance(rng):
    n = 200
    x = rng.normal(size=(n, 6))
    y = rng.permutation(np.repeat([0, 1], n // 2))
    res = E.linear_probe(x, y, seed=2, max_epochs=300)
    # accuracy over n held-out predictions: 3-sigma binomial band around chance
    half = 3 * np.sqrt(0.25 / n)
    assert abs(res.accuracy - 0.5) < half


def test_true_labels_beat_permuted(rng):
    x, y = _blobs(rng, 30, [np.zeros(4), np.full(4, 0.8)], spread=1.0)
    true = E.linear_probe(x, y, seed=0).accuracy
    perm = E.linear_probe(x, rng.permutation(y), seed=0).accuracy
    assert true > perm


def test_probe_is_deterministic(rng):
    x, y = _blobs(rng, 10, [np.zeros(3), np.ones(3)], spread=0.7)
    assert E.linear_probe(x, y, seed=4) == E.linear_probe(x, y, seed=4)


def test_probe_errors(rng):
    with pytest.raises(ConfigError):
        E.linear_probe(rng.normal(size=(3, 2)), [0, 1, 0], n_folds=5)
    with pytest.raises(StratificationError):
        E.linear_probe(rng.normal(size=(10, 2)), np.zeros(10))
    with pytest.raises(StratificationError):
        # one example of class 1: some training fold must lack it
        E.linear_probe(rng.normal(size=(10, 2)), [1] + [0] * 9)


@settings(max_examples=30)
@given(st.lists(st.integers(0, 3), min_size=10, max_size=60), st.integers(2, 5), st.integers(0, 99))
def test_folds_are_stratified(labels, k, seed):
    y = np.array(labels)
    fold = E.stratified_folds(y, k, np.random.default_rng(seed))
    assert fold.shape == y.shape and set(fold.tolist()) <= set(range(k))
    for c in np.unique(y):
        counts = np.bincount(fold[y == c], minlength=k)
        assert counts.max() - counts.min() <= 1


def test_two_layer_trainer_fits_xor_free_problem(rng):
    x, y = _blobs(rng, 15, [np.array([2.0, 0]), np.array([-2.0, 0])])
    params = E.train_two_layer(x, y, 2, 4, rng, max_epochs=300)
    pred = E._two_layer(params, E.Tensor(x)).data.argmax(axis=1)
    assert np.all(pred == y)


# ------------------------------------------------------------ separability

def test_logistic_gradient_matches_finite_differences(rng):
    x = rng.normal(size=(30, 4))
    y = (rng.random(30) < 0.3).astype(float)
    theta = E.fit_logistic(x, y, alpha=0.5)
    sw = np.where(y == 1, 0.5 / y.mean(), 0.5 / (1 - y.mean())) / len(y)

    def loss(t):
        z = x @ t[:-1] + t[-1]
        return np.sum(sw * (np.logaddexp(0, z) - y * z)) + 0.25 * t[:-1] @ t[:-1]

    # the optimum has zero gradient
    assert np.abs(approx_fprime(theta, loss, 1e-7)).max() < 1e-4


def _sep_fixture(rng, shift, n=60):
    feats, labels = [], []
    for lab, mu in [("clean", 0.0), ("a", shift), ("b", shift)]:
        feats.append(rng.normal(mu, 1.0, size=(n, 3)))
        labels += [lab] * n
    return np.concatenate(feats), labels


def test_separable_conditions_score_high(rng):
    x, lab = _sep_fixture(rng, 4.0)
    res = E.leave_one_condition_out(x, lab)
    assert set(res) == {"a", "b"}
    assert all(r.f_score > 0.95 for r in res.values())


def test_identical_distributions_are_not_separable(rng):
    scores = []
    for _ in range(20):
        x, lab = _sep_fixture(rng, 0.0)
        scores += [r.f_score for r in E.leave_one_condition_out(x, lab, alpha=1.0).values()]
    # an uninformed classifier: test set is half clean, so F hovers near 0.5 on average
    assert 0.3 < np.mean(scores) < 0.7


def test_separability_ignores_record_order(rng):
    x, lab = _sep_fixture(rng, 1.0)
    perm = rng.permutation(len(lab))
    a = E.noise_separability(x, lab, "a")
    b = E.noise_separability(x[perm], [lab[i] for i in perm], "a")
    assert a == b


def test_separability_errors(rng):
    x, lab = _sep_fixture(rng, 1.0)
    with pytest.raises(ConfigError):
        E.noise_separability(x, lab, "zzz")
    with pytest.raises(ConfigError):
        E.noise_separability(x[:120], lab[:120], "a")
    with pytest.raises(ConfigError):
        E.noise_separability(x[60:], lab[60:], "a")


def test_separability_features():
    frames = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(E.separability_features(frames, [0, 2], 3), [2, 3, 0.5, 0, 0.5])


# -------------------------------------------------------------- similarity

def test_constant_encoder_has_zero_gap():
    e = np.ones((6, 3))
    spk = np.array([0, 0, 1, 1, 2, 2])
    res = E.cross_condition_similarity(e, spk, e, spk)
    assert res.gap == 0.0 and res.same_mean == pytest.approx(1.0)


def test_one_hot_speakers_have_unit_gap():
    spk = np.array([0, 0, 1, 1, 2, 2])
    e = np.eye(3)[spk]
    res = E.cross_condition_similarity(e, spk, e, spk)
    assert res.same_mean == 1.0 and res.diff_mean == 0.0 and res.gap == 1.0
    assert res.eer == 0.0


def test_similarity_matches_direct_loop(rng):
    spk = np.array([0, 1, 2, 0, 1, 2, 0])
    a, b = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    res = E.cross_condition_similarity(a, spk, b, spk)
    same, diff = [], []
    for i in range(7):
        for j in range(7):
            c = a[i] @ b[j] / np.linalg.norm(a[i]) / np.linalg.norm(b[j])
            (same if spk[i] == spk[j] else diff).append(c)
    assert res.same_mean == pytest.approx(np.mean(same), abs=1e-12)
    assert res.diff_mean == pytest.approx(np.mean(diff), abs=1e-12)


@settings(max_examples=30)
@given(st.floats(0.01, 100.0), st.integers(0, 10**6))
def test_similarity_is_scale_invariant(c, seed):
    rng = np.random.default_rng(seed)
    spk = np.array([0, 1, 0, 1, 2])
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    r1 = E.cross_condition_similarity(a, spk, b, spk)
    r2 = E.cross_condition_similarity(c * a, spk, b / c, spk)
    assert r1.gap == pytest.approx(r2.gap, abs=1e-12)


def test_similarity_errors(rng):
    e = rng.normal(size=(4, 2))
    with pytest.raises(ManifestError):
        E.cross_condition_similarity(e, [0, 0, 1, 1], e, [0, 0, 2, 2])
    with pytest.raises(ManifestError):
        E.cross_condition_similarity(e, [0, 0, 0, 0], e, [0, 0, 0, 0])


def _eer_sweep(target, nontarget):
    best = None
    for t in np.concatenate([target, nontarget, [np.inf]]):
        frr = np.mean(target < t)
        far = np.mean(nontarget >= t)
        if best is None or abs(frr - far) < abs(best[0] - best[1]):
            best = (frr, far)
    return (best[0] + best[1]) / 2


@settings(max_examples=40)
@given(st.integers(0, 10**6))
def test_eer_matches_threshold_sweep(seed):
    rng = np.random.default_rng(seed)
    tgt, non = rng.normal(1.0, 1.0, 25), rng.normal(0.0, 1.0, 40)
    assert E.equal_error_rate(tgt, non) == pytest.approx(_eer_sweep(tgt, non), abs=1 / 25)


# ------------------------------------------------------------------ report

def _fake_run(d, losses):
    d.mkdir()
    lines = ["step,stage,loss_total,loss_recon,loss_kl,loss_speaker,teacher_entropy,grad_norm,seed"]
    lines += [f"{i + 1},1,{v},{v},0.0,0.0,1.0,2.0,0" for i, v in enumerate(losses)]
    (d / "metrics.csv").write_text("\n".join(lines) + "\n")


def test_report_schema(tmp_path):
    _fake_run(tmp_path / "r1", [3.0, 2.0])
    _fake_run(tmp_path / "r2", [5.0])
    E.write_metric_csv(tmp_path / "r2" / "eval.csv", {"sim_gap": 0.25})
    path = E.report([tmp_path / "r2", tmp_path / "r1"], tmp_path / "out")
    rows = path.read_text().splitlines()
    assert rows[0] == "run_id,metric,value"
    assert "r1,stage1_loss_total,2.0" in rows
    assert "r1,final_loss_total,2.0" in rows and "r2,sim_gap,0.25" in rows and "r1,steps,2.0" in rows
    assert rows[1:] == sorted(rows[1:])
    assert (tmp_path / "out" / "summary.txt").exists()


def test_report_plots(tmp_path):
    pytest.importorskip("matplotlib")
    _fake_run(tmp_path / "r1", [3.0, 2.0, 1.0])
    E.report([tmp_path / "r1"], tmp_path / "out", plots=True)
    assert (tmp_path / "out" / "loss_total.svg").exists()


def test_report_missing_metrics(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(IoError):
        E.report([tmp_path / "empty"], tmp_path / "out")


def test_metric_csv_roundtrip(tmp_path):
    m = {"a": 0.1 + 0.2, "b": -3.0, "c": 1e-300}
    E.write_metric_csv(tmp_path / "m.csv", m)
    assert E.read_metric_csv(tmp_path / "m.csv") == m
