"""Joint training of the speaker encoder and the unit-conditioned VAE.

One step: encode the first crop for synthesis conditioning, score the
speaker loss on the crop pair, backprop the weighted sum, take an Adam step
(respecting the stage-1 freeze), then move the teacher and the centre.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grad as G
from .audio import (
    AugmentPolicy,
    Record,
    Waveform,
    augment_reference,
    log_filterbank,
    random_crop_pair,
    stream,
)
from .errors import ConfigError, FormatError, IoError, NumericsError, TooShort
from .grad import AdamState, ParamSet
from .speaker import (
    DinoHead,
    DinoState,
    SpeakerEncoder,
    aam_softmax_loss,
    dino_loss,
    teacher_probs,
    update_center,
    update_teacher,
)
from .synth import SynthNet, vae_loss
from .units import Codebook, as_float32_grid, kmeans_fit, quantize

log = logging.getLogger(__name__)

TAG_INIT, TAG_SELECT, TAG_RECORD, TAG_VAE, TAG_KMEANS = 11, 12, 13, 14, 15
SPEAKER_LOSSES = ("dino", "aam_softmax", "none")
METRIC_COLUMNS = (
    "step",
    "stage",
    "loss_total",
    "loss_recon",
    "loss_kl",
    "loss_speaker",
    "teacher_entropy",
    "grad_norm",
    "seed",
)


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    stage1_steps: int = 500
    stage2_steps: int = 2000
    speaker_weight: float = 1.0  # lambda in front of the speaker loss
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    speaker_loss: str = "dino"
    augment: bool = True
    augment_both_crops: bool = True
    apply_probability: float = 0.5
    snr_babble: tuple = (16.0, 25.0)
    snr_music: tuple = (6.0, 20.0)
    snr_generic: tuple = (3.0, 20.0)
    segment_cap_s: float = 5.0
    target_window_frames: int = 64  # 0 = whole utterance
    tau_teacher: float = 0.04
    tau_student: float = 0.1
    single_tau: bool = False
    teacher_momentum: float = 0.996
    center_momentum: float = 0.9
    k_out: int = 256
    symmetric_dino: bool = False
    aam_margin: float = 0.2
    aam_scale: float = 30.0
    k_units: int = 64
    kmeans_iters: int = 30
    kmeans_max_frames: int = 20000
    n_bands: int = 32
    win_s: float = 0.025
    hop_s: float = 0.010
    enc_hidden: tuple = (64, 64)
    emb_dim: int = 32
    head_hidden: int = 64
    syn_unit_dim: int = 16
    syn_latent_dim: int = 8
    syn_hidden: int = 64
    beta: float = 1.0
    beta_warmup_frac: float = 0.1
    checkpoint_every: int = 0
    checkpoint_dtype: str = "float64"
    metrics_ring: int = 256

    def __post_init__(self):
        for name in ("snr_babble", "snr_music", "snr_generic", "enc_hidden"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("stage step counts must be >= 0")
        if self.speaker_weight < 0:
            raise ConfigError("speaker_weight (lambda) must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.speaker_loss not in SPEAKER_LOSSES:
            raise ConfigError(f"speaker_loss must be one of {SPEAKER_LOSSES}")
        if self.checkpoint_dtype not in ("float64", "float32"):
            raise ConfigError("checkpoint_dtype must be float64 or float32")
        if self.target_window_frames < 0:
            raise ConfigError("target_window_frames must be >= 0")
        if self.segment_cap_s <= 0 or self.k_units < 1:
            raise ConfigError("segment_cap_s and k_units must be positive")
        AugmentPolicy(self.apply_probability, self.snr_ranges())

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    def snr_ranges(self) -> dict:
        return {"babble": self.snr_babble, "music": self.snr_music, "generic": self.snr_generic}

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.apply_probability if self.augment else 0.0, self.snr_ranges())

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    # network shapes
    def encoder(self) -> SpeakerEncoder:
        return SpeakerEncoder(self.n_bands, self.enc_hidden, self.emb_dim)

    def head(self) -> DinoHead:
        return DinoHead(self.emb_dim, self.head_hidden, self.k_out)

    def synth(self) -> SynthNet:
        return SynthNet(
            self.n_bands, self.k_units, self.syn_unit_dim, self.emb_dim, self.syn_latent_dim, self.syn_hidden
        )


# ----------------------------------------------------------------- data

@dataclass
class FeatureNorm:
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        return (frames - self.mean) / self.std


@dataclass
class Item:
    record: Record
    wave: Waveform
    target: np.ndarray  # normalised clean features (T, B)
    units: np.ndarray  # raw frame-synchronous unit ids (T,)
    speaker: int  # index into TrainData.speakers


@dataclass
class TrainData:
    items: list
    speakers: list
    norm: FeatureNorm
    codebook: Codebook


def features(w: Waveform, cfg: TrainConfig) -> np.ndarray:
    return log_filterbank(w, cfg.n_bands, cfg.win_s, cfg.hop_s).frames


def fit_units(records, cfg: TrainConfig) -> Codebook:
    """Codebook from clean training features, fitted once before training."""
    clean = [(r, w) for r, w in records if r.noise_label == "clean"] or list(records)
    usable = []
    for r, w in clean:
        try:
            usable.append(features(w, cfg))
        except TooShort:
            log.warning("skipping %s: shorter than one analysis window", r.path)
    if not usable:
        raise ConfigError("no usable records for the unit codebook")
    frames = np.concatenate(usable)
    rng = stream(cfg.seed, TAG_KMEANS)
    if len(frames) > cfg.kmeans_max_frames:
        frames = frames[np.sort(rng.choice(len(frames), cfg.kmeans_max_frames, replace=False))]
    return as_float32_grid(kmeans_fit(frames, cfg.k_units, cfg.kmeans_iters, seed=cfg.seed))


def prepare_data(records, codebook: Codebook, cfg: TrainConfig, norm: FeatureNorm | None = None) -> TrainData:
    """Feature targets, units and speaker indices for ``[(Record, Waveform), ...]``.

    Targets are the record's own audio: clean records give clean targets,
    records labelled noisy keep their noisy targets.
    """
    if codebook.K != cfg.k_units:
        raise ConfigError(f"codebook has K={codebook.K}, config expects k_units={cfg.k_units}")
    raw, kept = [], []
    for r, w in records:
        try:
            raw.append(features(w, cfg))
            kept.append((r, w))
        except TooShort:
            log.warning("skipping %s: shorter than one analysis window", r.path)
    if not kept:
        raise ConfigError("no usable records")
    if norm is None:
        stacked = np.concatenate(raw)
        norm = FeatureNorm(stacked.mean(axis=0), stacked.std(axis=0) + 1e-3)
    speakers = sorted({r.speaker_id for r, _ in kept})
    index = {s: i for i, s in enumerate(speakers)}
    items = [
        Item(r, w, norm(f), quantize(f, codebook), index[r.speaker_id]) for (r, w), f in zip(kept, raw)
    ]
    return TrainData(items, speakers, norm, codebook)


@dataclass
class Batch:
    record_ids: np.ndarray
    crop1: np.ndarray  # (N * T, B) normalised, first crop (synthesis reference)
    crop2: np.ndarray
    crop_frames: int
    segment_s: float
    target: np.ndarray  # (M, B)
    units: np.ndarray  # (M,)
    frame_owner: np.ndarray  # (M,) batch row of each target frame
    speakers: np.ndarray  # (N,)
    applied: list = field(default_factory=list)
    snr_used: list = field(default_factory=list)
    crop_waves: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.record_ids)


def assemble_batch(data: TrainData, noise_bank, cfg: TrainConfig, step: int) -> Batch:
    """Draw records for ``step``, crop, augment, featurise.

    All randomness comes from streams keyed by (seed, step, record), so a
    batch depends on nothing but the config and the step index.
    """
    if not data.items:
        raise ConfigError("empty manifest")
    rng = stream(cfg.seed, TAG_SELECT, step)
    n = min(cfg.batch_size, len(data.items))
    chosen = np.sort(rng.choice(len(data.items), n, replace=False))
    win = int(round(cfg.win_s * data.items[0].wave.sample_rate))
    usable = []
    for i in chosen:
        if len(data.items[i].wave) < win:
            log.warning("skipping %s: shorter than one analysis window", data.items[i].record.path)
        else:
            usable.append(int(i))
    if not usable:
        raise ConfigError("no record in the batch is long enough")
    segment_s = min(min(data.items[i].wave.duration for i in usable), cfg.segment_cap_s)
    policy = cfg.policy()
    c1, c2, targets, units, owner, applied, snrs, waves = [], [], [], [], [], [], [], []
    for row, i in enumerate(usable):
        item = data.items[i]
        r_rng = stream(cfg.seed, TAG_RECORD, step, i)
        x1, x2 = random_crop_pair(item.wave, segment_s, r_rng)
        x1, a1, s1 = augment_reference(x1, noise_bank, policy, r_rng)
        if cfg.augment_both_crops:
            x2, a2, s2 = augment_reference(x2, noise_bank, policy, r_rng)
        else:
            a2, s2 = False, None
        c1.append(data.norm(features(x1, cfg)))
        c2.append(data.norm(features(x2, cfg)))
        lo, hi = 0, len(item.units)
        if 0 < cfg.target_window_frames < hi:
            lo = int(r_rng.integers(0, hi - cfg.target_window_frames + 1))
            hi = lo + cfg.target_window_frames
        targets.append(item.target[lo:hi])
        units.append(item.units[lo:hi])
        owner.append(np.full(hi - lo, row))
        applied.append((a1, a2))
        snrs.append((s1, s2))
        waves.append((x1, x2))
    return Batch(
        record_ids=np.array(usable),
        crop1=np.concatenate(c1),
        crop2=np.concatenate(c2),
        crop_frames=c1[0].shape[0],
        segment_s=segment_s,
        target=np.concatenate(targets),
        units=np.concatenate(units),
        frame_owner=np.concatenate(owner),
        speakers=np.array([data.items[i].speaker for i in usable]),
        applied=applied,
        snr_used=snrs,
        crop_waves=waves,
    )


# ------------------------------------------------------------ run state

@dataclass
class RunState:
    config: TrainConfig
    step: int
    theta: ParamSet  # speaker encoder, DINO head, AAM class weights
    phi: ParamSet  # synthesiser
    adam: AdamState
    dino: DinoState
    norm: FeatureNorm
    codebook: Codebook
    n_speakers: int
    metrics: deque = field(default_factory=deque)

    @property
    def params(self) -> ParamSet:
        return self.theta.merged(self.phi)

    def stage(self, step: int | None = None) -> int:
        step = self.step if step is None else step
        return 1 if step < self.config.stage1_steps else 2


def init_state(cfg: TrainConfig, data: TrainData) -> RunState:
    rng = stream(cfg.seed, TAG_INIT)
    theta = cfg.encoder().init(rng)
    cfg.head().init(rng, theta)
    if cfg.speaker_loss == "aam_softmax":
        theta.add("aam.W", rng.normal(0.0, 1.0, (len(data.speakers), cfg.emb_dim)))
    phi = cfg.synth().init(rng)
    tau_t = cfg.tau_student if cfg.single_tau else cfg.tau_teacher
    dino = DinoState.from_student(
        theta, cfg.k_out, tau_t=tau_t, tau_s=cfg.tau_student, m_teacher=cfg.teacher_momentum, m_center=cfg.center_momentum
    )
    state = RunState(
        cfg, 0, theta, phi, None, dino, data.norm, data.codebook, len(data.speakers), deque(maxlen=cfg.metrics_ring)
    )
    state.adam = AdamState.for_params(state.params)
    return state


def apply_stage(state: RunState) -> None:
    """Freeze the encoder body during stage 1; everything trains in stage 2."""
    frozen = state.stage() == 1
    for name in state.config.encoder().body_names(state.theta):
        state.theta.set_trainable(name, not frozen)


def beta_at(cfg: TrainConfig, step: int) -> float:
    warm = cfg.beta_warmup_frac * cfg.total_steps
    if warm <= 0:
        return cfg.beta
    return cfg.beta * min(1.0, step / warm)


def train_step(state: RunState, batch: Batch, trace: list | None = None) -> dict:
    """One optimisation step; returns the metrics row for this step."""
    cfg = state.config
    enc, head, syn = cfg.encoder(), cfg.head(), cfg.synth()
    apply_stage(state)
    params = state.params
    params.zero_grad()
    lengths = [batch.crop_frames] * batch.size

    e = enc.forward(state.theta, batch.crop1, lengths)
    noise = stream(cfg.seed, TAG_VAE, state.step).standard_normal((len(batch.units), cfg.syn_latent_dim))
    vae_total, recon, kl = vae_loss(
        syn, state.phi, batch.units, batch.target, G.take_rows(e, batch.frame_owner), beta_at(cfg, state.step), noise
    )
    total = vae_total
    spk_value, entropy, teacher_out = 0.0, math.nan, None
    if cfg.speaker_loss == "dino":
        t1 = head.forward(state.dino.teacher, enc.forward(state.dino.teacher, batch.crop1, lengths)).data
        s2 = head.forward(state.theta, enc.forward(state.theta, batch.crop2, lengths))
        spk = dino_loss(t1, s2, state.dino)
        teacher_out = [t1]
        if cfg.symmetric_dino:
            t2 = head.forward(state.dino.teacher, enc.forward(state.dino.teacher, batch.crop2, lengths)).data
            spk = G.scale(spk + dino_loss(t2, head.forward(state.theta, e), state.dino), 0.5)
            teacher_out.append(t2)
        p = teacher_probs(np.concatenate(teacher_out), state.dino)
        entropy = float(-(p * np.log(np.maximum(p, 1e-300))).sum(axis=1).mean())
        total = total + G.scale(spk, cfg.speaker_weight)
        spk_value = float(spk.data)
    elif cfg.speaker_loss == "aam_softmax":
        s2 = enc.forward(state.theta, batch.crop2, lengths)
        spk = aam_softmax_loss(s2, batch.speakers, state.theta["aam.W"], cfg.aam_margin, cfg.aam_scale)
        total = total + G.scale(spk, cfg.speaker_weight)
        spk_value = float(spk.data)

    try:
        total.backward()
    except NumericsError:
        log.error("non-finite gradient at step %d", state.step)
        raise
    grad_sq = sum(float(np.sum(t.grad * t.grad)) for _, t in params.items() if t.grad is not None)
    G.adam_step(params, None, state.adam, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    if trace is not None:
        trace.append("student")
    if cfg.speaker_loss == "dino":
        update_teacher(state.dino, state.theta)
        if trace is not None:
            trace.append("teacher")
        update_center(state.dino, np.concatenate(teacher_out))
        if trace is not None:
            trace.append("center")
    stage = state.stage()
    state.step += 1
    row = {
        "step": state.step,
        "stage": stage,
        "loss_total": float(total.data),
        "loss_recon": float(recon.data),
        "loss_kl": float(kl.data),
        "loss_speaker": spk_value,
        "teacher_entropy": entropy,
        "grad_norm": math.sqrt(grad_sq),
        "seed": cfg.seed,
    }
    state.metrics.append(row)
    return row


def _format(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _sync_metrics_file(path: Path, upto_step: int) -> None:
    """Start or trim the metrics CSV so it ends at ``upto_step``."""
    if path.exists() and upto_step > 0:
        lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
        keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= upto_step]
        path.write_text("".join(keep), encoding="utf-8")
    else:
        path.write_text(",".join(METRIC_COLUMNS) + "\n", encoding="utf-8")


def run_schedule(
    cfg: TrainConfig,
    data: TrainData,
    noise_bank,
    out_dir=None,
    state: RunState | None = None,
    stop_at: int | None = None,
) -> RunState:
    """Run stage 1 (encoder body frozen) then stage 2 (all trainable).

    With ``out_dir`` set, metrics go to ``metrics.csv`` and checkpoints to
    ``ckpt_<step>.bin`` (every ``checkpoint_every`` steps) and ``final.bin``.
    Pass a loaded ``state`` to resume; ``stop_at`` ends the run early.
    """
    state = init_state(cfg, data) if state is None else state
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            _sync_metrics_file(out_dir / "metrics.csv", state.step)
            writer = open(out_dir / "metrics.csv", "a", encoding="utf-8", newline="")
        except OSError as exc:
            raise IoError(f"cannot write run outputs to {out_dir}: {exc}") from exc
    try:
        while state.step < end:
            batch = assemble_batch(data, noise_bank, cfg, state.step)
            row = train_step(state, batch)
            if writer is not None:
                writer.write(",".join(_format(row[c]) for c in METRIC_COLUMNS) + "\n")
                if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    writer.flush()
                    save_checkpoint(state, out_dir / f"ckpt_{state.step:06d}.bin")
    finally:
        if writer is not None:
            writer.close()
    if out_dir is not None:
        save_checkpoint(state, out_dir / "final.bin")
    return state


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            r[k] = int(v) if k in ("step", "stage", "seed") else float(v)
    return rows


# ----------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SPKDCKPT"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sIQ")


def _checkpoint_payload(state: RunState) -> tuple[dict, list]:
    tensors = []
    for group, ps in (("theta", state.theta), ("phi", state.phi), ("teacher", state.dino.teacher)):
        tensors += [(f"{group}/{n}", t.data) for n, t in ps.items()]
    tensors += [(f"adam.m/{n}", a) for n, a in state.adam.m.items()]
    tensors += [(f"adam.v/{n}", a) for n, a in state.adam.v.items()]
    tensors += [
        ("dino/center", state.dino.center),
        ("norm/mean", state.norm.mean),
        ("norm/std", state.norm.std),
        ("codebook/centroids", state.codebook.centroids),
    ]
    d = state.dino
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "n_speakers": state.n_speakers,
        "trainable": {n: state.theta.is_trainable(n) for n in state.theta},
        "adam_t": state.adam.t,
        "dino": {"tau_t": d.tau_t, "tau_s": d.tau_s, "m_teacher": d.m_teacher, "m_center": d.m_center},
        # batches, crops, augmentation and VAE noise are drawn from streams keyed
        # by (seed, step), so the step index is the whole RNG cursor
        "rng": {"seed": state.config.seed, "cursor": state.step},
        "metrics": list(state.metrics),
    }
    return meta, tensors


def checkpoint_bytes(state: RunState) -> bytes:
    meta, tensors = _checkpoint_payload(state)
    dtype = "<f8" if state.config.checkpoint_dtype == "float64" else "<f4"
    entries, blobs, offset = [], [], 0
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": dtype, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, allow_nan=True).encode("utf-8")
    body = _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(state: RunState, path) -> None:
    try:
        Path(path).write_bytes(checkpoint_bytes(state))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def state_from_bytes(blob: bytes) -> RunState:
    if len(blob) < _CKPT_HEAD.size + 4:
        raise FormatError("checkpoint is truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    magic, version, hlen = _CKPT_HEAD.unpack_from(body)
    if magic != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch (truncated or corrupt)")
    try:
        header = json.loads(body[_CKPT_HEAD.size : _CKPT_HEAD.size + hlen].decode("utf-8"))
        data = body[_CKPT_HEAD.size + hlen :]
        arrays = {
            e["name"]: np.frombuffer(data[e["offset"] : e["offset"] + e["nbytes"]], dtype=e["dtype"])
            .astype(np.float64)
            .reshape(e["shape"])
            for e in header["tensors"]
        }
        meta = header["meta"]
        cfg = TrainConfig.from_dict(meta["config"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc

    def group(prefix: str, trainable) -> ParamSet:
        ps = ParamSet()
        for name, arr in arrays.items():
            if name.startswith(prefix + "/"):
                n = name.split("/", 1)[1]
                ps.add(n, arr, trainable=trainable(n))
        return ps

    theta = group("theta", lambda n: meta["trainable"][n])
    phi = group("phi", lambda n: True)
    teacher = group("teacher", lambda n: False)
    adam = AdamState(
        m={n.split("/", 1)[1]: a.copy() for n, a in arrays.items() if n.startswith("adam.m/")},
        v={n.split("/", 1)[1]: a.copy() for n, a in arrays.items() if n.startswith("adam.v/")},
        t={k: int(v) for k, v in meta["adam_t"].items()},
    )
    dino = DinoState(teacher, arrays["dino/center"].copy(), **meta["dino"])
    metrics = deque(meta["metrics"], maxlen=cfg.metrics_ring)
    return RunState(
        cfg,
        int(meta["step"]),
        theta,
        phi,
        adam,
        dino,
        FeatureNorm(arrays["norm/mean"].copy(), arrays["norm/std"].copy()),
        Codebook(arrays["codebook/centroids"].copy()),
        int(meta["n_speakers"]),
        metrics,
    )


def load_checkpoint(path) -> RunState:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return state_from_bytes(blob)


# ------------------------------------------------------------- inference

def embed(state: RunState, waves, teacher: bool = False) -> np.ndarray:
    """Speaker embeddings (N, d) of whole waveforms under the run's encoder."""
    cfg = state.config
    frames = [state.norm(features(w, cfg)) for w in waves]
    params = state.dino.teacher if teacher else state.theta
    return cfg.encoder().forward(params, np.concatenate(frames), [len(f) for f in frames]).data
