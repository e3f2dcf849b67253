"""Brain-state sequence classifier: a small bidirectional LSTM over feature windows.

Classes are ordered (seizure, interictal, healthy) package-wide.  Gradients
are hand-derived (verified against finite differences) and training is plain
full-batch gradient descent; features are z-normalized with statistics that
persist in the model artifact, since raw band powers span orders of
magnitude.  The same module hosts the softmax-regression trainer that
produces the fog node's risk model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from . import tensorio
from .errors import (
    DegenerateDataError,
    InvalidInputError,
    NumericError,
    ShapeError,
)
from .features import FEATURE_NAMES
from .fog import RiskModel
from .signal_chain import EegSignal
from . import features as feat_mod

CLASSES = ("seizure", "interictal", "healthy")
N_FEATURES = len(FEATURE_NAMES)


@dataclass
class SequenceSample:
    """Ordered feature windows (T, 11) with a class label."""

    windows: np.ndarray
    label: str

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        if self.windows.ndim != 2 or self.windows.shape[1] != N_FEATURES:
            raise ShapeError(f"windows must be (T, {N_FEATURES})")
        if self.windows.shape[0] < 1:
            raise ShapeError("need at least one window")
        if not np.all(np.isfinite(self.windows)):
            raise InvalidInputError("windows contain non-finite values")
        if self.label not in CLASSES:
            raise InvalidInputError(f"unknown label {self.label!r}")

    @property
    def label_index(self) -> int:
        return CLASSES.index(self.label)


@dataclass
class CellParams:
    """One LSTM direction; gate rows stacked (input, forget, output, candidate)."""

    wx: np.ndarray   # (4h, n_in)
    wh: np.ndarray   # (4h, h)
    b: np.ndarray    # (4h,)


@dataclass
class BiLstmParams:
    fwd: CellParams
    bwd: CellParams
    w_out: np.ndarray  # (3, 2h)
    b_out: np.ndarray  # (3,)

    @property
    def hidden(self) -> int:
        return self.fwd.wh.shape[1]

    def named_arrays(self) -> Iterator[Tuple[str, np.ndarray]]:
        for tag, cell in (("fwd", self.fwd), ("bwd", self.bwd)):
            yield f"{tag}.wx", cell.wx
            yield f"{tag}.wh", cell.wh
            yield f"{tag}.b", cell.b
        yield "out.w", self.w_out
        yield "out.b", self.b_out


def init_bilstm(seed: int, hidden: int = 16, n_features: int = N_FEATURES,
                scale: float = 0.5, zero: bool = False) -> BiLstmParams:
    rng = np.random.default_rng(seed)

    def w(shape, fan_in):
        if zero:
            return np.zeros(shape)
        return rng.normal(0.0, scale / math.sqrt(fan_in), size=shape)

    def cell():
        return CellParams(wx=w((4 * hidden, n_features), n_features),
                          wh=w((4 * hidden, hidden), hidden),
                          b=np.zeros(4 * hidden))

    return BiLstmParams(fwd=cell(), bwd=cell(),
                        w_out=w((len(CLASSES), 2 * hidden), 2 * hidden),
                        b_out=np.zeros(len(CLASSES)))


def zeros_like_bilstm(params: BiLstmParams) -> BiLstmParams:
    return BiLstmParams(
        fwd=CellParams(np.zeros_like(params.fwd.wx), np.zeros_like(params.fwd.wh),
                       np.zeros_like(params.fwd.b)),
        bwd=CellParams(np.zeros_like(params.bwd.wx), np.zeros_like(params.bwd.wh),
                       np.zeros_like(params.bwd.b)),
        w_out=np.zeros_like(params.w_out),
        b_out=np.zeros_like(params.b_out),
    )


@dataclass
class StatePrediction:
    probs: np.ndarray          # (3,) in CLASSES order, sums to 1
    argmax_label: str

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (len(CLASSES),):
            raise ShapeError("probs must have one entry per class")
        if abs(float(self.probs.sum()) - 1.0) > 1e-12:
            raise InvalidInputError("probabilities must sum to 1")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _run_direction(cell: CellParams, xs: np.ndarray, hidden: int) -> Tuple[np.ndarray, list]:
    """Run one direction over (T, n_in) inputs; returns final h and step caches."""
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    steps = []
    for t in range(xs.shape[0]):
        x = xs[t]
        z = cell.wx @ x + cell.wh @ h + cell.b
        zi, zf, zo, zg = np.split(z, 4)
        gi, gf, go = _sigmoid(zi), _sigmoid(zf), _sigmoid(zo)
        gg = np.tanh(zg)
        c_new = gf * c + gi * gg
        tanh_c = np.tanh(c_new)
        h_new = go * tanh_c
        if not np.all(np.isfinite(h_new)):
            raise NumericError("non-finite hidden state", location=f"time step {t}")
        steps.append({"x": x, "h_prev": h, "c_prev": c, "i": gi, "f": gf,
                      "o": go, "g": gg, "c": c_new, "tanh_c": tanh_c})
        h, c = h_new, c_new
    return h, steps


def forward(params: BiLstmParams, windows: np.ndarray) -> Tuple[np.ndarray, dict]:
    """Class probabilities for one sequence; cache kept for backward."""
    xs = np.asarray(windows, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != params.fwd.wx.shape[1]:
        raise ShapeError("windows shape does not match the model input size")
    hidden = params.hidden
    h_f, steps_f = _run_direction(params.fwd, xs, hidden)
    h_b, steps_b = _run_direction(params.bwd, xs[::-1], hidden)
    concat = np.concatenate([h_f, h_b])
    logits = params.w_out @ concat + params.b_out
    z = logits - logits.max()
    e = np.exp(z)
    probs = e / e.sum()
    cache = {"steps_f": steps_f, "steps_b": steps_b, "concat": concat,
             "probs": probs, "xs": xs}
    return probs, cache


def predict_from_normalized(params: BiLstmParams, windows: np.ndarray) -> StatePrediction:
    probs, _ = forward(params, windows)
    return StatePrediction(probs, CLASSES[int(np.argmax(probs))])


def _backward_direction(cell: CellParams, steps: list, d_h_final: np.ndarray,
                        grads: CellParams) -> None:
    hidden = d_h_final.size
    dh = d_h_final
    dc = np.zeros(hidden)
    for step in reversed(steps):
        do = dh * step["tanh_c"]
        dc = dc + dh * step["o"] * (1.0 - step["tanh_c"] ** 2)
        di = dc * step["g"]
        dg = dc * step["i"]
        df = dc * step["c_prev"]
        dzi = di * step["i"] * (1.0 - step["i"])
        dzf = df * step["f"] * (1.0 - step["f"])
        dzo = do * step["o"] * (1.0 - step["o"])
        dzg = dg * (1.0 - step["g"] ** 2)
        dz = np.concatenate([dzi, dzf, dzo, dzg])
        grads.wx += np.outer(dz, step["x"])
        grads.wh += np.outer(dz, step["h_prev"])
        grads.b += dz
        dh = cell.wh.T @ dz
        dc = dc * step["f"]


def loss_and_grads(params: BiLstmParams,
                   dataset: Sequence[SequenceSample]) -> Tuple[float, BiLstmParams]:
    """Mean cross-entropy over the dataset plus its analytic gradient."""
    if len(dataset) == 0:
        raise InvalidInputError("dataset must be nonempty")
    grads = zeros_like_bilstm(params)
    hidden = params.hidden
    total = 0.0
    scale = 1.0 / len(dataset)
    for sample in dataset:
        probs, cache = forward(params, sample.windows)
        y = sample.label_index
        total += -math.log(max(probs[y], 1e-300))
        d_logits = probs.copy()
        d_logits[y] -= 1.0
        d_logits *= scale
        grads.w_out += np.outer(d_logits, cache["concat"])
        grads.b_out += d_logits
        d_concat = params.w_out.T @ d_logits
        _backward_direction(params.fwd, cache["steps_f"], d_concat[:hidden], grads.fwd)
        _backward_direction(params.bwd, cache["steps_b"], d_concat[hidden:], grads.bwd)
    return total * scale, grads


def dataset_loss(params: BiLstmParams, dataset: Sequence[SequenceSample]) -> float:
    total = 0.0
    for sample in dataset:
        probs, _ = forward(params, sample.windows)
        total += -math.log(max(probs[sample.label_index], 1e-300))
    return total / len(dataset)


def train(params: BiLstmParams, dataset: Sequence[SequenceSample], lr: float,
          epochs: int) -> Tuple[BiLstmParams, List[float]]:
    """Full-batch gradient descent; aborts if the loss goes non-finite."""
    if lr <= 0:
        raise InvalidInputError("lr must be positive")
    history = []
    for epoch in range(epochs):
        loss, grads = loss_and_grads(params, dataset)
        if not math.isfinite(loss):
            raise NumericError(f"loss diverged at epoch {epoch}", location="train")
        history.append(loss)
        new = zeros_like_bilstm(params)
        for (_, p), (_, g), (_, out) in zip(params.named_arrays(),
                                            grads.named_arrays(),
                                            new.named_arrays()):
            out[...] = p - lr * g
        params = new
    return params, history


def accuracy(params: BiLstmParams, dataset: Sequence[SequenceSample]) -> float:
    hits = 0
    for sample in dataset:
        probs, _ = forward(params, sample.windows)
        hits += int(np.argmax(probs)) == sample.label_index
    return hits / len(dataset)


def grad_check(params: BiLstmParams, sample: SequenceSample,
               h: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients."""
    _, grads = loss_and_grads(params, [sample])
    worst = 0.0
    for (_, arr), (_, g_arr) in zip(params.named_arrays(), grads.named_arrays()):
        flat = arr.reshape(-1)
        g_flat = g_arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = dataset_loss(params, [sample])
            flat[i] = orig - h
            down = dataset_loss(params, [sample])
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(g_flat[i] - numeric) / max(1e-6, abs(g_flat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Normalizing wrapper: the persisted model artifact
# ---------------------------------------------------------------------------

@dataclass
class StateModel:
    """BiLSTM plus the z-normalization statistics it was trained with."""

    params: BiLstmParams
    mean: np.ndarray   # (11,)
    std: np.ndarray    # (11,)

    def normalize(self, windows: np.ndarray) -> np.ndarray:
        return (np.asarray(windows, dtype=np.float64) - self.mean) / self.std

    def predict(self, windows: np.ndarray) -> StatePrediction:
        return predict_from_normalized(self.params, self.normalize(windows))

    def save(self, path: str) -> None:
        tensors = dict(self.params.named_arrays())
        tensors["norm.mean"] = self.mean
        tensors["norm.std"] = self.std
        tensorio.save_tensors(path, tensors, meta={
            "kind": "state-model", "classes": list(CLASSES),
            "hidden": self.params.hidden,
        })

    @classmethod
    def load(cls, path: str) -> "StateModel":
        tensors, meta = tensorio.load_tensors(path)
        if meta.get("kind") != "state-model":
            raise InvalidInputError(f"{path} is not a state-model artifact")
        params = BiLstmParams(
            fwd=CellParams(tensors["fwd.wx"], tensors["fwd.wh"], tensors["fwd.b"]),
            bwd=CellParams(tensors["bwd.wx"], tensors["bwd.wh"], tensors["bwd.b"]),
            w_out=tensors["out.w"], b_out=tensors["out.b"],
        )
        return cls(params, tensors["norm.mean"], tensors["norm.std"])


def norm_stats(dataset: Sequence[SequenceSample]) -> Tuple[np.ndarray, np.ndarray]:
    stacked = np.concatenate([s.windows for s in dataset], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std == 0.0] = 1.0
    return mean, std


def train_state_model(dataset: Sequence[SequenceSample], seed: int,
                      hidden: int = 16, lr: float = 0.5,
                      epochs: int = 200) -> Tuple[StateModel, List[float]]:
    """Normalize, train, and wrap into a persistable artifact."""
    mean, std = norm_stats(dataset)
    normalized = [SequenceSample((s.windows - mean) / std, s.label)
                  for s in dataset]
    params = init_bilstm(seed, hidden=hidden)
    params, history = train(params, normalized, lr=lr, epochs=epochs)
    return StateModel(params, mean, std), history


# ---------------------------------------------------------------------------
# Synthetic labeled dataset: three regimes with distinct spectral signatures
# ---------------------------------------------------------------------------

def _regime_signal(rng: np.random.Generator, label: str, duration_s: float,
                   fs: float) -> EegSignal:
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    jitter = rng.uniform(0.85, 1.15)

    def tone(freq, amp):
        return amp * jitter * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))

    if label == "healthy":
        x = tone(10.0, 12.0) + tone(20.0, 2.0) + rng.normal(0, 2.0, n)
    elif label == "seizure":
        x = (tone(22.0, 9.0) + tone(38.0, 7.0) + tone(6.0, 2.0)
             + rng.normal(0, 4.0, n))
    elif label == "interictal":
        x = tone(6.0, 11.0) + tone(10.0, 3.0) + rng.normal(0, 2.5, n)
        # sporadic sharp transients between seizures
        n_spikes = max(1, int(round(duration_s * 0.8)))
        centers = rng.uniform(0.2, duration_s - 0.2, n_spikes)
        for c in centers:
            x += 18.0 * np.exp(-0.5 * ((t - c) / 0.02) ** 2)
    else:
        raise InvalidInputError(f"unknown regime {label!r}")
    return EegSignal(x, fs, f"synth_{label}")


def synth_state_dataset(seed: int, n_per_class: int,
                        windows_per_sample: int = 10,
                        sample_rate_hz: float = 250.0) -> List[SequenceSample]:
    """Balanced, seeded dataset; samples interleave classes in CLASSES order."""
    if n_per_class < 1:
        raise InvalidInputError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    spec = feat_mod.WindowSpec(length_s=2.0, overlap_fraction=0.0)
    duration = windows_per_sample * spec.length_s
    samples = []
    for _ in range(n_per_class):
        for label in CLASSES:
            signal = _regime_signal(rng, label, duration, sample_rate_hz)
            rows = feat_mod.extract_features(signal, spec)
            windows = np.stack([fv.as_array() for _, fv in rows])
            samples.append(SequenceSample(windows[:windows_per_sample], label))
    return samples


# ---------------------------------------------------------------------------
# Softmax regression (produces the fog RiskModel)
# ---------------------------------------------------------------------------

def train_logistic(features: np.ndarray, binary_labels: np.ndarray,
                   lr: float = 0.2, epochs: int = 400) -> RiskModel:
    """Two-class softmax regression over raw feature rows.

    Features are z-scored internally and the learned weights are folded back
    into raw-feature space, so the returned model scores unnormalized
    vectors directly.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(binary_labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != N_FEATURES:
        raise ShapeError(f"features must be (n, {N_FEATURES})")
    if x.shape[0] != y.shape[0]:
        raise ShapeError("features and labels must align")
    counts = np.bincount(y, minlength=2)
    if counts[0] < 2 or counts[1] < 2 or np.any(y > 1) or np.any(y < 0):
        raise DegenerateDataError(
            f"need >= 2 examples of each class, got low={counts[0]} high={counts[1]}")

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0.0] = 1.0
    xn = (x - mean) / std
    onehot = np.zeros((y.size, 2))
    onehot[np.arange(y.size), y] = 1.0

    w = np.zeros((2, N_FEATURES))
    b = np.zeros(2)
    n = x.shape[0]
    for _ in range(epochs):
        logits = xn @ w.T + b
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        diff = probs - onehot
        w -= lr * (diff.T @ xn) / n
        b -= lr * diff.mean(axis=0)

    w_raw = w / std
    b_raw = b - w_raw @ mean
    return RiskModel(w_raw, b_raw)


def risk_labels_for(dataset: Sequence[SequenceSample]) -> Tuple[np.ndarray, np.ndarray]:
    """Window-level training pairs: seizure/interictal windows are high risk."""
    rows, labels = [], []
    for sample in dataset:
        high = 1 if sample.label in ("seizure", "interictal") else 0
        for w in sample.windows:
            rows.append(w)
            labels.append(high)
    return np.asarray(rows), np.asarray(labels)


# ---------------------------------------------------------------------------
# Dataset CSV: sample_id,label,window_index + the 11 feature columns
# ---------------------------------------------------------------------------

DATASET_CSV_HEADER = "sample_id,label,window_index," + ",".join(FEATURE_NAMES)


def write_dataset_csv(path: str, dataset: Sequence[SequenceSample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(DATASET_CSV_HEADER + "\n")
        for sid, sample in enumerate(dataset):
            for wi, row in enumerate(sample.windows):
                vals = ",".join(repr(float(v)) for v in row)
                fh.write(f"{sid},{sample.label},{wi},{vals}\n")


def read_dataset_csv(path: str) -> List[SequenceSample]:
    groups: Dict[int, Tuple[str, List[Tuple[int, List[float]]]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != DATASET_CSV_HEADER:
            raise InvalidInputError(f"unexpected dataset CSV header: {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            sid, label, wi = int(parts[0]), parts[1], int(parts[2])
            row = [float(p) for p in parts[3:]]
            groups.setdefault(sid, (label, []))[1].append((wi, row))
    samples = []
    for sid in sorted(groups):
        label, rows = groups[sid]
        rows.sort(key=lambda r: r[0])
        samples.append(SequenceSample(np.asarray([r[1] for r in rows]), label))
    return samples
