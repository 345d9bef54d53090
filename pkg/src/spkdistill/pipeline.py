"""File-level steps shared by the command line and the end-to-end tests.

Directory layout produced by :func:`datagen`::

    data/
      corpus.json                 corpus settings used
      train/manifest.jsonl        training speakers
      test/manifest.jsonl         held-out speakers
      noise_train/noise_manifest.jsonl
      noise_eval/noise_manifest.jsonl   noise never seen in training
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import eval as E
from .audio import (
    CorpusSpec,
    Waveform,
    build_noise_bank,
    load_noise_bank,
    load_records,
    log_filterbank,
    mix_at_snr,
    stream,
    synth_corpus,
    write_noise_bank,
)
from .errors import ConfigError, IoError
from .trainer import (
    TrainConfig,
    embed,
    fit_units,
    load_checkpoint,
    prepare_data,
    run_schedule,
)
from .units import load_codebook, quantize, save_codebook

log = logging.getLogger(__name__)

TAG_EVAL_MIX = 21
TEST_SPEAKER_OFFSET = 1000
EVAL_NOISE_OFFSET = 20_000


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_speakers: int = 24
    utterances_per_speaker: int = 20
    n_test_speakers: int = 8
    test_utterances_per_speaker: int = 30
    noise_per_class: int = 8
    noise_duration_s: float = 3.0
    vibrato_depth: float = 0.03

    def corpus(self, test: bool = False) -> CorpusSpec:
        if test:
            return CorpusSpec(
                self.n_test_speakers,
                self.test_utterances_per_speaker,
                seed=self.seed,
                speaker_offset=TEST_SPEAKER_OFFSET,
                vibrato_depth=self.vibrato_depth,
            )
        return CorpusSpec(self.n_speakers, self.utterances_per_speaker, seed=self.seed, vibrato_depth=self.vibrato_depth)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        unknown = sorted(set(d) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f"unknown data config keys: {unknown}")
        return cls(**d)


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 0
    n_folds: int = 5
    probe_hidden: int = 16
    probe_epochs: int = 1000
    similarity_snr_db: float = 5.0
    separability_snr_db: float = 0.0


def _write_json(path: Path, obj) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def datagen(out_dir, dcfg: DataConfig = DataConfig()) -> Path:
    out_dir = Path(out_dir)
    synth_corpus(dcfg.corpus(), out_dir / "train")
    synth_corpus(dcfg.corpus(test=True), out_dir / "test")
    train_spec = dcfg.corpus()
    write_noise_bank(build_noise_bank(train_spec, dcfg.noise_per_class, dcfg.noise_duration_s), out_dir / "noise_train")
    # a different seed and speaker range keep evaluation noise disjoint from training noise
    eval_spec = dataclasses.replace(train_spec, seed=dcfg.seed + 7919, speaker_offset=EVAL_NOISE_OFFSET)
    write_noise_bank(build_noise_bank(eval_spec, dcfg.noise_per_class, dcfg.noise_duration_s), out_dir / "noise_eval")
    _write_json(out_dir / "corpus.json", dataclasses.asdict(dcfg))
    return out_dir


def _paths(data_dir):
    data_dir = Path(data_dir)
    paths = {
        "train": data_dir / "train" / "manifest.jsonl",
        "test": data_dir / "test" / "manifest.jsonl",
        "noise_train": data_dir / "noise_train" / "noise_manifest.jsonl",
        "noise_eval": data_dir / "noise_eval" / "noise_manifest.jsonl",
    }
    for p in paths.values():
        if not p.exists():
            raise IoError(f"missing {p}; run datagen first")
    return paths


def fit_units_step(data_dir, cfg: TrainConfig, out_path) -> Path:
    records = load_records(_paths(data_dir)["train"])
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_codebook(fit_units(records, cfg), out_path)
    return out_path


def train_step_files(data_dir, cfg: TrainConfig, units_path, out_dir):
    """Train one run from files; writes resolved_config.json, metrics.csv, final.bin."""
    paths = _paths(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "resolved_config.json")
    data = prepare_data(load_records(paths["train"]), load_codebook(units_path), cfg)
    return run_schedule(cfg, data, load_noise_bank(paths["noise_train"]), out_dir)


def noisy_copies(waves, noise_bank, snr_db: float, seed: int, classes=None) -> tuple[list, list]:
    """Mix each wave with eval noise at ``snr_db``; noise classes alternate by record."""
    classes = sorted({c for c, _ in noise_bank}) if classes is None else list(classes)
    by_class = {c: [w for k, w in noise_bank if k == c] for c in classes}
    out, labels = [], []
    for i, w in enumerate(waves):
        rng = stream(seed, TAG_EVAL_MIX, i)
        cls = classes[i % len(classes)]
        pool = by_class[cls]
        noise = pool[int(rng.integers(len(pool)))]
        start = int(rng.integers(len(noise)))
        noise = Waveform(np.roll(noise.samples, -start), noise.sample_rate)
        out.append(mix_at_snr(w, noise, snr_db))
        labels.append(cls)
    return out, labels


def evaluate_state(state, test_records, eval_bank, ecfg: EvalConfig = EvalConfig()) -> dict:
    """All held-out diagnostics for one trained run, as a flat metric dict."""
    cfg = state.config
    recs = [r for r, _ in test_records]
    waves = [w for _, w in test_records]
    speakers = np.array([r.speaker_id for r in recs])
    styles = np.array([int(r.style_flag) for r in recs])
    emb = embed(state, waves)
    out = {}
    style = E.linear_probe(emb, styles, ecfg.n_folds, ecfg.probe_hidden, ecfg.seed, ecfg.probe_epochs)
    out["style_probe_acc"], out["style_probe_std"], out["style_chance"] = style.accuracy, style.std, style.chance
    spk = E.linear_probe(emb, speakers, ecfg.n_folds, ecfg.probe_hidden, ecfg.seed, ecfg.probe_epochs)
    out["speaker_probe_acc"], out["speaker_probe_std"] = spk.accuracy, spk.std

    noisy, _ = noisy_copies(waves, eval_bank, ecfg.similarity_snr_db, ecfg.seed)
    sim = E.cross_condition_similarity(emb, speakers, embed(state, noisy), speakers)
    out["sim_same"], out["sim_diff"], out["sim_gap"], out["sim_eer"] = sim.same_mean, sim.diff_mean, sim.gap, sim.eer

    sep = separability_table(waves, eval_bank, state.codebook, cfg, ecfg)
    for cond, res in sep.items():
        out[f"sep_f1_{cond}"] = res.f_score
    return out


def separability_table(waves, noise_bank, codebook, cfg: TrainConfig, ecfg: EvalConfig = EvalConfig()) -> dict:
    """Leave-one-condition-out clean-vs-noisy F-scores over clean and mixed copies."""
    noisy, labels = noisy_copies(waves, noise_bank, ecfg.separability_snr_db, ecfg.seed + 1)
    feats, noise_labels = [], []
    for w, lab in [(w, "clean") for w in waves] + list(zip(noisy, labels)):
        frames = log_filterbank(w, cfg.n_bands, cfg.win_s, cfg.hop_s).frames
        feats.append(E.separability_features(frames, quantize(frames, codebook), codebook.K))
        noise_labels.append(lab)
    return E.leave_one_condition_out(np.array(feats), noise_labels, n_hist=codebook.K)


def eval_files(run_dir, data_dir, out_dir=None, ecfg: EvalConfig = EvalConfig()) -> dict:
    paths = _paths(data_dir)
    run_dir = Path(run_dir)
    state = load_checkpoint(run_dir / "final.bin")
    metrics = evaluate_state(state, load_records(paths["test"]), load_noise_bank(paths["noise_eval"]), ecfg)
    out_dir = run_dir if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    E.write_metric_csv(out_dir / "eval.csv", metrics)
    _write_json(out_dir / "eval_config.json", dataclasses.asdict(ecfg))
    return metrics
