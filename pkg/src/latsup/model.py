"""Feed-forward acoustic model with temporal splicing and LHUC amplitudes.

Each hidden layer splices its input at fixed offsets (measured in that
layer's input frame rate), applies an affine map and a rectifier, then
multiplies the result elementwise by the active speaker's LHUC vector.  A
stride greater than one keeps every n-th output and lowers the frame rate
for all later layers.  The output layer is affine and produces raw log
scores, one column per output unit.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import BadConfig, CorruptFile, ShapeMismatch, TooShortUtterance

SI = "<si>"
ALL = "ALL"
LHUC_ONLY = "LHUC_ONLY"

_MAGIC = b"LSCKPT\x00\x01"


@dataclass
class ModelConfig:
    input_dim: int = 20
    hidden_dims: tuple = (64, 64, 64, 64, 64)
    splice: tuple = ((-1, 0, 1),) * 5
    strides: tuple = (1, 1, 3, 1, 1)
    subsample: int = 3
    num_outputs: int = 12
    seed: int = 0

    def validate(self):
        n = len(self.hidden_dims)
        if n < 1 or len(self.splice) != n or len(self.strides) != n:
            raise BadConfig("hidden_dims, splice and strides must have equal length >= 1")
        if self.subsample < 1 or math.prod(self.strides) != self.subsample:
            raise BadConfig("product of strides must equal the subsample factor")
        if min(self.strides) < 1 or self.input_dim < 1 or self.num_outputs < 1:
            raise BadConfig("dimensions and strides must be positive")
        if any(len(o) == 0 for o in self.splice) or min(self.hidden_dims) < 1:
            raise BadConfig("empty splice or zero-width layer")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden_dims"] = tuple(d["hidden_dims"])
        d["splice"] = tuple(tuple(o) for o in d["splice"])
        d["strides"] = tuple(d["strides"])
        return cls(**d)


@dataclass(frozen=True)
class ParamSelector:
    """Which parameters a backward pass reports and an SGD step touches.

    ``LHUC_ONLY`` picks the active speaker's LHUC vectors.  ``ALL`` adds
    every weight and bias.  The speaker-independent LHUC vectors count as
    active only when ``include_si`` is set (SAT-LHUC training); otherwise an
    SI pass trains weights and biases alone.
    """
    mode: str = ALL
    layers: tuple | None = None
    include_si: bool = False

    def __post_init__(self):
        if self.mode not in (ALL, LHUC_ONLY):
            raise ValueError(f"unknown selector mode {self.mode!r}")

    def wants_layer(self, i: int) -> bool:
        return self.layers is None or i in self.layers

    def wants_lhuc(self, speaker) -> bool:
        if speaker is None:
            return False
        return speaker != SI or self.include_si


@dataclass
class LrSchedule:
    initial: float
    final: float
    epochs: int
    iters_per_epoch: int = 1

    @property
    def num_iterations(self) -> int:
        return self.epochs * self.iters_per_epoch

    @classmethod
    def fixed(cls, lr, epochs, iters_per_epoch=1):
        return cls(lr, lr, epochs, iters_per_epoch)


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    """Geometric interpolation from ``initial`` (iteration 0) to ``final``."""
    n = schedule.num_iterations
    if n <= 1 or schedule.initial == schedule.final:
        return schedule.initial
    frac = min(max(iteration / (n - 1), 0.0), 1.0)
    return schedule.initial * (schedule.final / schedule.initial) ** frac


class AcousticModel:
    def __init__(self, cfg: ModelConfig, weights, biases, out_weight, out_bias,
                 lhuc, metadata=None):
        self.cfg = cfg
        self.weights = weights
        self.biases = biases
        self.out_weight = out_weight
        self.out_bias = out_bias
        self.lhuc = lhuc  # speaker id -> list of per-layer vectors; SI always present
        self.metadata = dict(metadata or {})

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "AcousticModel":
        return copy.deepcopy(self)

    # -- geometry ---------------------------------------------------------

    def output_positions(self, num_input_frames: int) -> np.ndarray:
        """Input frame index at the centre of every output frame."""
        pos = np.arange(num_input_frames)
        for offs, stride in zip(self.cfg.splice, self.cfg.strides):
            lo, hi = -min(offs), max(offs)
            pos = pos[lo:len(pos) - hi][::stride] if len(pos) > lo + hi else pos[:0]
        return pos

    def output_length(self, num_input_frames: int) -> int:
        return len(self.output_positions(num_input_frames))

    @property
    def context(self) -> int:
        """Total input frames lost to splicing (receptive field minus one)."""
        rate, c = 1, 0
        for offs, stride in zip(self.cfg.splice, self.cfg.strides):
            c += (max(offs) - min(offs)) * rate
            rate *= stride
        return c

    @property
    def left_context(self) -> int:
        rate, c = 1, 0
        for offs, stride in zip(self.cfg.splice, self.cfg.strides):
            c += -min(offs) * rate
            rate *= stride
        return c

    # -- parameters -------------------------------------------------------

    def params(self) -> dict:
        """Every tensor by name (live references, not copies)."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"hidden.{i}.weight"] = w
            out[f"hidden.{i}.bias"] = b
        out["output.weight"] = self.out_weight
        out["output.bias"] = self.out_bias
        for spk in sorted(self.lhuc):
            for i, a in enumerate(self.lhuc[spk]):
                out[lhuc_name(spk, i)] = a
        return out

    def add_speaker(self, speaker: str, rng=None, init: str = "normal") -> None:
        """Create LHUC vectors for ``speaker``: N(1, 0.01) draws or an SI copy."""
        if speaker == SI or "/" in speaker:
            raise ValueError(f"invalid speaker id {speaker!r}")
        if init == "si":
            self.lhuc[speaker] = [a.copy() for a in self.lhuc[SI]]
        elif init == "normal":
            rng = np.random.default_rng() if rng is None else rng
            self.lhuc[speaker] = [rng.normal(1.0, 0.01, size=d) for d in self.cfg.hidden_dims]
        else:
            raise ValueError(f"unknown LHUC init {init!r}")


def lhuc_name(speaker: str, layer: int) -> str:
    return f"lhuc/{speaker}/{layer}"


def param_group(name: str) -> str:
    if name.startswith("lhuc/"):
        return "lhuc"
    return "bias" if name.endswith(".bias") else "weight"


def init_model(cfg: ModelConfig) -> AcousticModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    weights, biases = [], []
    d_in = cfg.input_dim
    for d, offs in zip(cfg.hidden_dims, cfg.splice):
        fan_in = d_in * len(offs)
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, d)))
        biases.append(np.zeros(d))
        d_in = d
    bound = math.sqrt(3.0 / d_in)
    out_w = rng.uniform(-bound, bound, size=(d_in, cfg.num_outputs))
    out_b = np.zeros(cfg.num_outputs)
    lhuc = {SI: [np.ones(d) for d in cfg.hidden_dims]}
    return AcousticModel(cfg, weights, biases, out_w, out_b, lhuc)


def _splice(x, offs, stride):
    lo, hi = -min(offs), max(offs)
    n_full = x.shape[0] - lo - hi
    idx = np.arange(0, n_full, stride)
    return np.concatenate([x[idx + lo + o] for o in offs], axis=1), idx


def forward(model: AcousticModel, features, speaker=SI, return_cache=False):
    """Raw output log scores, shape (T_out, num_outputs).

    ``speaker=None`` skips the LHUC multiplication altogether.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.cfg.input_dim:
        raise ShapeMismatch(f"features must be (T, {model.cfg.input_dim}), got {x.shape}")
    if model.output_length(x.shape[0]) < 1:
        raise TooShortUtterance(
            f"{x.shape[0]} input frames; need at least {model.context + 1}")
    amps = None if speaker is None else model.lhuc[speaker]
    cache = []
    h = x
    for i, (w, b, offs, stride) in enumerate(zip(model.weights, model.biases,
                                                 model.cfg.splice, model.cfg.strides)):
        s, idx = _splice(h, offs, stride)
        z = s @ w + b
        r = np.maximum(z, 0.0)
        h_next = r if amps is None else r * amps[i]
        cache.append((h.shape[0], idx, s, z, r))
        h = h_next
    out = h @ model.out_weight + model.out_bias
    if return_cache:
        return out, (cache, h)
    return out


def backward(model: AcousticModel, features, speaker, grad_out, selector=None, cache=None):
    """Gradients of sum(grad_out * outputs) for the selected parameters."""
    selector = selector or ParamSelector()
    if cache is None:
        out, cache = forward(model, features, speaker, return_cache=True)
    layers, h_last = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (h_last.shape[0], model.cfg.num_outputs):
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} does not match outputs")
    amps = None if speaker is None else model.lhuc[speaker]
    want_w = selector.mode == ALL
    want_lhuc = amps is not None and selector.wants_lhuc(speaker)
    grads = {}
    if want_w:
        grads["output.weight"] = h_last.T @ grad_out
        grads["output.bias"] = grad_out.sum(axis=0)
    dh = grad_out @ model.out_weight.T
    for i in range(model.num_layers - 1, -1, -1):
        n_in, idx, s, z, r = layers[i]
        offs = model.cfg.splice[i]
        if amps is not None:
            if want_lhuc and selector.wants_layer(i):
                grads[lhuc_name(speaker, i)] = (dh * r).sum(axis=0)
            dr = dh * amps[i]
        else:
            dr = dh
        dz = dr * (z > 0)
        if want_w and selector.wants_layer(i):
            grads[f"hidden.{i}.weight"] = s.T @ dz
            grads[f"hidden.{i}.bias"] = dz.sum(axis=0)
        if i == 0:
            break
        ds = dz @ model.weights[i].T
        d_in = ds.shape[1] // len(offs)
        dh = np.zeros((n_in, d_in))
        lo = -min(offs)
        for k, o in enumerate(offs):
            dh[idx + lo + o] += ds[:, k * d_in:(k + 1) * d_in]
    return grads


def sat_lhuc_pass_selector(rng: np.random.Generator, p: float = 0.5) -> str:
    """"SI" with probability ``p``, otherwise "SD"."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return "SI" if rng.random() < p else "SD"


def sgd_step(model: AcousticModel, grads: dict, selector: ParamSelector | None,
             lr: float, l2=0.0, max_change: float | None = None) -> None:
    """In-place update ``p -= lr * (g + l2_group * p)``; LHUC never decays.

    ``l2`` is either a float applied to weight matrices or a mapping from
    group name (``weight``, ``bias``) to coefficient.  With ``max_change``
    each tensor's step is rescaled so its L2 norm stays within that bound.
    """
    if lr <= 0:
        if lr == 0:
            return
        raise ValueError("lr must be positive")
    if not isinstance(l2, dict):
        l2 = {"weight": float(l2)}
    params = model.params()
    for name, g in grads.items():
        group = param_group(name)
        if selector is not None and selector.mode == LHUC_ONLY and group != "lhuc":
            continue
        p = params[name]
        decay = 0.0 if group == "lhuc" else l2.get(group, 0.0)
        step = lr * (g + decay * p) if decay else lr * g
        if max_change is not None:
            norm = float(np.sqrt(np.sum(step * step)))
            if norm > max_change:
                step = step * (max_change / norm)
        p -= step


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
# (config, metadata, tensor table of name/shape/offset), then float64 LE data.


def save_model(model: AcousticModel, path) -> None:
    table, chunks, offset = [], [], 0
    for name, arr in model.params().items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {"version": 1, "config": asdict(model.cfg),
              "metadata": model.metadata, "tensors": table}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_model(path) -> AcousticModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise CorruptFile(f"{path}: bad checkpoint magic", 0)
    if len(raw) < 12:
        raise CorruptFile(f"{path}: truncated header", len(raw))
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as exc:
        raise CorruptFile(f"{path}: unreadable header", 12) from exc
    base = 12 + hlen
    tensors = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) * 8
        start = base + t["offset"]
        if start + n > len(raw):
            raise CorruptFile(f"{path}: tensor {t['name']} truncated", len(raw))
        tensors[t["name"]] = np.frombuffer(raw[start:start + n], dtype="<f8").reshape(t["shape"]).copy()
    cfg = ModelConfig.from_dict(header["config"])
    n = len(cfg.hidden_dims)
    weights = [tensors[f"hidden.{i}.weight"] for i in range(n)]
    biases = [tensors[f"hidden.{i}.bias"] for i in range(n)]
    lhuc = {}
    for name, arr in tensors.items():
        if name.startswith("lhuc/"):
            _, spk, i = name.split("/")
            lhuc.setdefault(spk, [None] * n)[int(i)] = arr
    return AcousticModel(cfg, weights, biases, tensors["output.weight"],
                         tensors["output.bias"], lhuc, header.get("metadata"))
