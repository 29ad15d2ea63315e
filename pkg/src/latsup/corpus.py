"""Synthetic speech-like corpora with controllable speaker mismatch.

Each phone has a fixed class mean.  An utterance is a Markov-chain phone
sequence; every frame is the phone mean plus Gaussian noise, pushed through
the speaker's affine distortion::

    x = expm(kappa * A) @ (exp(kappa * s) * (mu + eps)) + kappa * b

with A skew-symmetric (a rotation), s a log-scale vector and b a bias, all
drawn once per speaker.  kappa = 0 is the identity.  Test speakers keep the
same (A, s, b) and the same clean utterances at every mismatch level, so a
kappa sweep changes nothing but the distortion magnitude.

On-disk layout of a corpus directory::

    feats/<utt>.bin        4-byte magic b"LFT1", uint32 rows, uint32 cols
                           (little-endian), then rows*cols float32 LE
    text                   "<utt> <phone> <phone> ..." per line
    utt2spk                "<utt> <speaker>" per line
    alignments/<utt>.txt   one phone id per input frame, space separated
    split                  "train" or "test"
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import BadConfig, CorruptFile

_FEAT_MAGIC = b"LFT1"


@dataclass
class GeneratorConfig:
    num_phones: int = 12
    feat_dim: int = 20
    min_frames: int = 6
    max_frames: int = 18
    edge_pad: int = 9
    min_phones: int = 6
    max_phones: int = 10
    mean_scale: float = 1.0
    noise_std: float = 2.0
    markov_concentration: float = 0.5
    rotation_scale: float = 1.0
    log_scale_std: float = 0.3
    bias_std: float = 1.0
    kappa_train: float = 0.3
    kappa_test: tuple = (0.0,)
    train_speakers: int = 40
    train_utts: int = 30
    test_speakers: int = 8
    test_utts: int = 20
    seed: int = 0

    def validate(self):
        if self.num_phones < 2 or self.feat_dim < 1:
            raise BadConfig("need at least 2 phones and 1 feature dimension")
        if not 1 <= self.min_frames <= self.max_frames:
            raise BadConfig("frame range must satisfy 1 <= min <= max")
        if not 1 <= self.min_phones <= self.max_phones:
            raise BadConfig("phone range must satisfy 1 <= min <= max")
        if self.noise_std < 0 or self.kappa_train < 0 or min(self.kappa_test, default=0) < 0:
            raise BadConfig("noise std and kappa values must be non-negative")
        if self.edge_pad < 0:
            raise BadConfig("edge_pad must be non-negative")


@dataclass
class Utterance:
    id: str
    speaker: str
    features: np.ndarray  # (T, D) float32
    transcript: list
    alignment: np.ndarray  # (T,) phone id per input frame

    def __eq__(self, other):
        return (isinstance(other, Utterance) and self.id == other.id
                and self.speaker == other.speaker
                and list(self.transcript) == list(other.transcript)
                and np.array_equal(self.alignment, other.alignment)
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


@dataclass
class Corpus:
    utterances: list = field(default_factory=list)
    split: str = "train"

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def speakers(self) -> dict:
        table = {}
        for u in self.utterances:
            table.setdefault(u.speaker, []).append(u.id)
        return table

    def by_speaker(self, speaker: str) -> list:
        return [u for u in self.utterances if u.speaker == speaker]

    def by_id(self) -> dict:
        return {u.id: u for u in self.utterances}

    def __eq__(self, other):
        return (isinstance(other, Corpus) and self.split == other.split
                and self.utterances == other.utterances)


@dataclass
class SpeakerTransform:
    skew: np.ndarray
    log_scale: np.ndarray
    bias: np.ndarray

    def matrices(self, kappa: float):
        rot = expm(kappa * self.skew)
        return rot * np.exp(kappa * self.log_scale)[None, :], kappa * self.bias

    def apply(self, x, kappa: float):
        if kappa == 0:
            return np.asarray(x, dtype=np.float64)
        m, b = self.matrices(kappa)
        return x @ m.T + b


def _draw_transform(rng, cfg: GeneratorConfig) -> SpeakerTransform:
    d = cfg.feat_dim
    g = rng.normal(0.0, cfg.rotation_scale / np.sqrt(d), size=(d, d))
    return SpeakerTransform((g - g.T) / np.sqrt(2.0),
                            rng.normal(0.0, cfg.log_scale_std, size=d),
                            rng.normal(0.0, cfg.bias_std, size=d))


class _World:
    """Seeded quantities shared by all splits of one configuration."""

    def __init__(self, cfg: GeneratorConfig):
        cfg.validate()
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed)
        s_means, s_chain, s_train, s_test = ss.spawn(4)
        P = cfg.num_phones
        self.means = np.random.default_rng(s_means).normal(
            0.0, cfg.mean_scale, size=(P, cfg.feat_dim))
        rng = np.random.default_rng(s_chain)
        trans = np.zeros((P, P))
        for p in range(P):
            others = [q for q in range(P) if q != p]
            trans[p, others] = rng.dirichlet(np.full(P - 1, cfg.markov_concentration))
        self.transitions = trans
        self.train_seed = s_train
        self.test_seed = s_test

    def phone_sequence(self, rng) -> list:
        cfg = self.cfg
        n = int(rng.integers(cfg.min_phones, cfg.max_phones + 1))
        seq = [int(rng.integers(cfg.num_phones))]
        for _ in range(n - 1):
            seq.append(int(rng.choice(cfg.num_phones, p=self.transitions[seq[-1]])))
        return [p + 1 for p in seq]

    def clean_utterance(self, rng):
        """(phones, alignment, undistorted frames)."""
        cfg = self.cfg
        phones = self.phone_sequence(rng)
        durs = rng.integers(cfg.min_frames, cfg.max_frames + 1, size=len(phones))
        durs[0] += cfg.edge_pad
        durs[-1] += cfg.edge_pad
        ali = np.repeat(np.asarray(phones), durs)
        x = self.means[ali - 1] + rng.normal(0.0, cfg.noise_std, size=(len(ali), cfg.feat_dim))
        return phones, ali, x

    def split(self, seed, prefix, num_speakers, num_utts, kappas):
        rng = np.random.default_rng(seed)
        speakers = []
        for i in range(num_speakers):
            spk = f"{prefix}{i:03d}"
            tr = _draw_transform(rng, self.cfg)
            utts = [self.clean_utterance(rng) for _ in range(num_utts)]
            speakers.append((spk, tr, utts))
        out = {}
        for kappa in kappas:
            corpus = Corpus(split="train" if prefix == "tr" else "test")
            for spk, tr, utts in speakers:
                for j, (phones, ali, x) in enumerate(utts):
                    feats = tr.apply(x, kappa).astype(np.float32)
                    corpus.utterances.append(
                        Utterance(f"{spk}-{j:03d}", spk, feats, phones, ali.copy()))
            out[kappa] = corpus
        return out


def generate(cfg: GeneratorConfig):
    """Return ``(train_corpus, {kappa_test: test_corpus})``."""
    world = _World(cfg)
    train = world.split(world.train_seed, "tr", cfg.train_speakers, cfg.train_utts,
                        [cfg.kappa_train])[cfg.kappa_train]
    tests = world.split(world.test_seed, "te", cfg.test_speakers, cfg.test_utts,
                        list(cfg.kappa_test))
    return train, tests


def make_test_corpus(cfg: GeneratorConfig, kappa: float) -> Corpus:
    world = _World(cfg)
    return world.split(world.test_seed, "te", cfg.test_speakers, cfg.test_utts, [kappa])[kappa]


def make_train_corpus(cfg: GeneratorConfig) -> Corpus:
    world = _World(cfg)
    return world.split(world.train_seed, "tr", cfg.train_speakers, cfg.train_utts,
                       [cfg.kappa_train])[cfg.kappa_train]


def markov_chain(cfg: GeneratorConfig) -> np.ndarray:
    return _World(cfg).transitions.copy()


def class_means(cfg: GeneratorConfig) -> np.ndarray:
    return _World(cfg).means.copy()


# ---------------------------------------------------------------------------
# I/O


def write_features(x, path) -> None:
    x = np.ascontiguousarray(x, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<II", *x.shape))
        fh.write(x.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise CorruptFile(f"{path}: header needs 12 bytes, file has {len(raw)}", len(raw))
    if raw[:4] != _FEAT_MAGIC:
        raise CorruptFile(f"{path}: bad magic", 0)
    rows, cols = struct.unpack("<II", raw[4:12])
    need = 12 + 4 * rows * cols
    if len(raw) != need:
        raise CorruptFile(f"{path}: expected {need} bytes, found {len(raw)}",
                          min(len(raw), need))
    return np.frombuffer(raw[12:], dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_corpus(corpus: Corpus, path) -> None:
    os.makedirs(os.path.join(path, "feats"), exist_ok=True)
    os.makedirs(os.path.join(path, "alignments"), exist_ok=True)
    with open(os.path.join(path, "text"), "w") as text, \
            open(os.path.join(path, "utt2spk"), "w") as u2s:
        for u in corpus.utterances:
            text.write(" ".join([u.id] + [str(p) for p in u.transcript]) + "\n")
            u2s.write(f"{u.id} {u.speaker}\n")
            write_features(u.features, os.path.join(path, "feats", f"{u.id}.bin"))
            with open(os.path.join(path, "alignments", f"{u.id}.txt"), "w") as fa:
                fa.write(" ".join(str(int(p)) for p in u.alignment) + "\n")
    with open(os.path.join(path, "split"), "w") as fh:
        fh.write(corpus.split + "\n")


def _read_table(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                rows.append(parts)
    return rows


def read_corpus(path) -> Corpus:
    try:
        with open(os.path.join(path, "split")) as fh:
            split = fh.read().strip()
        text = _read_table(os.path.join(path, "text"))
        u2s = dict(_read_table(os.path.join(path, "utt2spk")))
    except FileNotFoundError as exc:
        raise CorruptFile(f"{path}: missing corpus file {exc.filename}") from exc
    corpus = Corpus(split=split)
    for row in text:
        utt, phones = row[0], [int(p) for p in row[1:]]
        feats = read_features(os.path.join(path, "feats", f"{utt}.bin"))
        with open(os.path.join(path, "alignments", f"{utt}.txt")) as fh:
            ali = np.array([int(p) for p in fh.read().split()], dtype=np.int64)
        if len(ali) != feats.shape[0]:
            raise CorruptFile(f"{utt}: alignment has {len(ali)} frames, features {feats.shape[0]}")
        if utt not in u2s:
            raise CorruptFile(f"{utt}: missing from utt2spk")
        corpus.utterances.append(Utterance(utt, u2s[utt], feats, phones, ali))
    return corpus
