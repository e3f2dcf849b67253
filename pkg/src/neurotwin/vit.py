"""Toy patch transformer for tumor-vs-background scoring of small scans.

Everything runs in float64 numpy with hand-written gradients so the whole
model can be verified against central finite differences.  The training
objective is per-patch binary cross-entropy plus an attention-entropy
regularizer that pushes attention away from collapsing onto a few patches;
inference adds a scan-adaptive decision threshold derived from background
probability statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensorio
from .errors import (
    DegenerateStatsError,
    InvalidInputError,
    NumericError,
    ShapeError,
)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class VitConfig:
    image_size: int = 64
    patch_size: int = 16
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 64
    use_positions: bool = True
    #: which attention maps the entropy regularizer sees: "all" | "final"
    reg_layer_scope: str = "all"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError("image_size must be divisible by patch_size")
        if self.d_model % self.n_heads != 0:
            raise ShapeError("d_model must be divisible by n_heads")
        if self.reg_layer_scope not in ("all", "final"):
            raise InvalidInputError("reg_layer_scope must be 'all' or 'final'")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LossConfig:
    """Loss mix: BCE plus ``entropy_weight`` times the attention-entropy term.

    ``log_eps`` guards log(0) inside the entropy; ``per_entry_norm`` switches
    the regularizer from mean-over-query-patches to mean-over-all-entries.
    """

    entropy_weight: float = 0.5
    log_eps: float = 1e-8
    per_entry_norm: bool = False

    def __post_init__(self):
        if self.entropy_weight < 0:
            raise InvalidInputError("entropy_weight must be nonnegative")
        if self.log_eps <= 0:
            raise InvalidInputError("log_eps must be positive")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class VitParams:
    w_embed: np.ndarray          # (patch_dim, d_model)
    b_embed: np.ndarray          # (d_model,)
    pos: np.ndarray              # (n_patches, d_model)
    layers: List[LayerParams]
    w_head: np.ndarray           # (d_model,)
    b_head: np.ndarray           # ()

    def named_arrays(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield "embed.w", self.w_embed
        yield "embed.b", self.b_embed
        yield "pos", self.pos
        for i, layer in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"):
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "head.w", self.w_head
        yield "head.b", self.b_head


def init_params(config: VitConfig, seed: int, weight_scale: float = 0.6,
                attn_gain: float = 8.0, zero: bool = False) -> VitParams:
    """Seeded Gaussian init, scaled by fan-in.

    ``attn_gain`` multiplies the query/key scales only: embeddings of small
    intensity patches give near-zero attention scores otherwise, which makes
    every map start uniform and leaves entropy effects invisible.
    ``zero=True`` gives the all-zero model used by edge-case tests.
    """
    rng = np.random.default_rng(seed)

    def w(shape, fan_in, gain=1.0):
        if zero:
            return np.zeros(shape)
        return rng.normal(0.0, gain * weight_scale / math.sqrt(fan_in), size=shape)

    d, dff, pdim = config.d_model, config.d_ff, config.patch_dim
    layers = [
        LayerParams(
            wq=w((d, d), d, attn_gain), wk=w((d, d), d, attn_gain),
            wv=w((d, d), d), wo=w((d, d), d),
            w1=w((d, dff), d), b1=np.zeros(dff),
            w2=w((dff, d), dff), b2=np.zeros(d),
        )
        for _ in range(config.n_layers)
    ]
    return VitParams(
        w_embed=w((pdim, d), pdim),
        b_embed=np.zeros(d),
        pos=np.zeros((config.n_patches, d)) if zero else rng.normal(
            0.0, 0.1, size=(config.n_patches, d)),
        layers=layers,
        w_head=w((d,), d),
        b_head=np.zeros(()),
    )


def zeros_like_params(params: VitParams) -> VitParams:
    return VitParams(
        w_embed=np.zeros_like(params.w_embed),
        b_embed=np.zeros_like(params.b_embed),
        pos=np.zeros_like(params.pos),
        layers=[LayerParams(**{k: np.zeros_like(getattr(l, k))
                               for k in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")})
                for l in params.layers],
        w_head=np.zeros_like(params.w_head),
        b_head=np.zeros_like(params.b_head),
    )


def apply_gradient(params: VitParams, grads: VitParams, lr: float) -> VitParams:
    new = zeros_like_params(params)
    for (_, p), (_, g), (_, out) in zip(params.named_arrays(),
                                        grads.named_arrays(),
                                        new.named_arrays()):
        out[...] = p - lr * g
    return new


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------

@dataclass
class PatchGrid:
    """Row-major flattened patches of one grayscale image in [0, 1]."""

    patches: np.ndarray          # (n_patches, patch_dim)
    image_hw: Tuple[int, int]
    patch_size: int

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


def patchify(image: np.ndarray, patch_size: int = 16) -> PatchGrid:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError("image must be a 2-D array")
    h, w = image.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ShapeError(
            f"image {h}x{w} not divisible by patch size {patch_size}; resize first")
    if image.min() < -1e-9 or image.max() > 1.0 + 1e-9:
        raise InvalidInputError("image intensities must lie in [0, 1]")
    rows, cols = h // patch_size, w // patch_size
    if rows * cols < 2:
        raise ShapeError("need at least 2 patches")
    patches = (image.reshape(rows, patch_size, cols, patch_size)
               .transpose(0, 2, 1, 3)
               .reshape(rows * cols, patch_size * patch_size))
    return PatchGrid(np.clip(patches, 0.0, 1.0), (h, w), patch_size)


def reassemble(grid: PatchGrid) -> np.ndarray:
    h, w = grid.image_hw
    p = grid.patch_size
    rows, cols = h // p, w // p
    return (grid.patches.reshape(rows, cols, p, p)
            .transpose(0, 2, 1, 3)
            .reshape(h, w))


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize; callers use this to conform scans to the model size.

    (E.g. 600x600 clinical exports are not divisible by the 16-pixel patch.)
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError("image must be 2-D")
    in_h, in_w = image.shape
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * in_h / out_h - 0.5, 0, in_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * in_w / out_w - 0.5, 0, in_w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = image[np.ix_(y0, x0)] * (1 - wx) + image[np.ix_(y0, x1)] * wx
    bottom = image[np.ix_(y1, x0)] * (1 - wx) + image[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

@dataclass
class PatchProbMap:
    probs: np.ndarray
    labels: Optional[np.ndarray] = None  # 0 = background, 1 = tumor

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if not np.all(np.isfinite(self.probs)):
            raise InvalidInputError("patch probabilities must be finite")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise InvalidInputError("patch probabilities must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.probs.shape:
                raise ShapeError("labels must match probs shape")


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(params: VitParams, grid: PatchGrid,
            config: VitConfig) -> Tuple[PatchProbMap, List[np.ndarray], dict]:
    """Per-patch tumor probabilities plus every head's attention map.

    The cache holds all intermediates needed by :func:`backward`.  Maps are
    ordered layer-major: ``[l0h0, l0h1, ..., l1h0, ...]``.
    """
    n, dh = grid.n_patches, config.head_dim
    if grid.patches.shape != (config.n_patches, config.patch_dim):
        raise ShapeError(
            f"grid shape {grid.patches.shape} does not match config "
            f"({config.n_patches}, {config.patch_dim})")
    x = grid.patches
    e = x @ params.w_embed + params.b_embed
    if config.use_positions:
        e = e + params.pos
    cache: dict = {"x": x, "e0": e, "layers": []}
    maps: List[np.ndarray] = []

    for li, layer in enumerate(params.layers):
        e_in = e
        q = e_in @ layer.wq
        k = e_in @ layer.wk
        v = e_in @ layer.wv
        heads_out = np.empty((n, config.d_model))
        attn = np.empty((config.n_heads, n, n))
        for h in range(config.n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = (q[:, sl] @ k[:, sl].T) / math.sqrt(dh)
            a = _softmax_rows(scores)
            attn[h] = a
            heads_out[:, sl] = a @ v[:, sl]
            maps.append(a)
        proj = heads_out @ layer.wo
        e_mid = e_in + proj
        hff = np.tanh(e_mid @ layer.w1 + layer.b1)
        ffn = hff @ layer.w2 + layer.b2
        e = e_mid + ffn
        if not np.all(np.isfinite(e)):
            raise NumericError("non-finite activations", location=f"layer {li}")
        cache["layers"].append(
            {"e_in": e_in, "q": q, "k": k, "v": v, "attn": attn,
             "heads_out": heads_out, "e_mid": e_mid, "hff": hff})

    logits = e @ params.w_head + params.b_head
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits", location="head")
    cache["e_final"] = e
    cache["logits"] = logits
    probs = _sigmoid(logits)
    cache["probs"] = probs
    return PatchProbMap(probs), maps, cache


def select_reg_maps(maps: Sequence[np.ndarray], config: VitConfig) -> List[np.ndarray]:
    """Attention maps the entropy regularizer applies to, per config scope."""
    if config.reg_layer_scope == "all":
        return list(maps)
    return list(maps[-config.n_heads:])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def attention_entropy(alpha: np.ndarray, log_eps: float = 1e-8) -> np.ndarray:
    """Row entropies H_i = -sum_j a_ij * log(a_ij + eps).

    Maximal (ln N) for uniform rows, ~0 for one-hot rows.  Rows must be
    stochastic to within 1e-6.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 2:
        raise ShapeError("attention map must be 2-D")
    row_sums = alpha.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise InvalidInputError(
            f"attention rows must sum to 1 (max deviation "
            f"{np.max(np.abs(row_sums - 1.0)):.3g})")
    return -np.sum(alpha * np.log(alpha + log_eps), axis=1)


def attention_entropy_loss(maps: Sequence[np.ndarray], log_eps: float = 1e-8,
                           per_entry_norm: bool = False) -> float:
    """Negative mean attention entropy, averaged over the given maps.

    The default normalization divides each map's entropy sum by N (the
    query-patch count); ``per_entry_norm`` divides by N^2 instead.
    """
    if len(maps) == 0:
        raise InvalidInputError("need at least one attention map")
    total = 0.0
    for alpha in maps:
        h = attention_entropy(alpha, log_eps)
        denom = alpha.shape[0] ** 2 if per_entry_norm else alpha.shape[0]
        total += -float(np.sum(h)) / denom
    return total / len(maps)


def bce_loss(prob_map: PatchProbMap, labels: np.ndarray | None = None) -> float:
    """Mean per-patch binary cross-entropy; probabilities clamped at 1e-12."""
    labels = prob_map.labels if labels is None else np.asarray(labels)
    if labels is None:
        raise InvalidInputError("labels are required for the classification loss")
    p = np.clip(prob_map.probs, 1e-12, 1.0 - 1e-12)
    y = labels.astype(np.float64)
    if y.shape != p.shape:
        raise ShapeError("labels must match probability shape")
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def total_loss(prob_map: PatchProbMap, labels: np.ndarray,
               maps: Sequence[np.ndarray], loss_config: LossConfig) -> float:
    """Classification loss plus weighted attention-entropy regularizer."""
    ce = bce_loss(prob_map, labels)
    reg = attention_entropy_loss(maps, loss_config.log_eps,
                                 loss_config.per_entry_norm)
    return ce + loss_config.entropy_weight * reg


# ---------------------------------------------------------------------------
# Backward (hand-derived; verified by grad_check)
# ---------------------------------------------------------------------------

def _backward_sample(params: VitParams, config: VitConfig,
                     loss_config: LossConfig, cache: dict,
                     labels: np.ndarray, grads: VitParams,
                     batch_scale: float) -> None:
    n, dh = config.n_patches, config.head_dim
    n_maps = (config.n_layers if config.reg_layer_scope == "all" else 1) * config.n_heads
    reg_first_layer = 0 if config.reg_layer_scope == "all" else config.n_layers - 1
    denom = n * n if loss_config.per_entry_norm else n

    probs = cache["probs"]
    d_logits = (probs - labels.astype(np.float64)) / n * batch_scale
    e_final = cache["e_final"]
    grads.w_head += e_final.T @ d_logits
    grads.b_head += d_logits.sum()
    d_e = np.outer(d_logits, params.w_head)

    for li in range(config.n_layers - 1, -1, -1):
        layer = params.layers[li]
        lg = grads.layers[li]
        lc = cache["layers"][li]

        # feed-forward + residual
        d_ffn = d_e
        lg.b2 += d_ffn.sum(axis=0)
        lg.w2 += lc["hff"].T @ d_ffn
        d_hff = d_ffn @ layer.w2.T
        d_z1 = d_hff * (1.0 - lc["hff"] ** 2)
        lg.b1 += d_z1.sum(axis=0)
        lg.w1 += lc["e_mid"].T @ d_z1
        d_e_mid = d_e + d_z1 @ layer.w1.T

        # attention projection + residual
        d_proj = d_e_mid
        lg.wo += lc["heads_out"].T @ d_proj
        d_heads = d_proj @ layer.wo.T
        d_e_in = d_e_mid.copy()

        d_q = np.zeros_like(lc["q"])
        d_k = np.zeros_like(lc["k"])
        d_v = np.zeros_like(lc["v"])
        for h in range(config.n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            a = lc["attn"][h]
            d_a = d_heads[:, sl] @ lc["v"][:, sl].T
            d_v[:, sl] = a.T @ d_heads[:, sl]
            if loss_config.entropy_weight != 0.0 and li >= reg_first_layer:
                # d/da of the entropy term  sum a*log(a+eps) / denom
                reg_scale = (loss_config.entropy_weight * batch_scale
                             / (n_maps * denom))
                d_a = d_a + reg_scale * (
                    np.log(a + loss_config.log_eps)
                    + a / (a + loss_config.log_eps))
            d_scores = a * (d_a - np.sum(d_a * a, axis=1, keepdims=True))
            d_scores /= math.sqrt(dh)
            d_q[:, sl] = d_scores @ lc["k"][:, sl]
            d_k[:, sl] = d_scores.T @ lc["q"][:, sl]

        lg.wq += lc["e_in"].T @ d_q
        lg.wk += lc["e_in"].T @ d_k
        lg.wv += lc["e_in"].T @ d_v
        d_e_in += d_q @ layer.wq.T + d_k @ layer.wk.T + d_v @ layer.wv.T
        d_e = d_e_in

    if config.use_positions:
        grads.pos += d_e
    grads.w_embed += cache["x"].T @ d_e
    grads.b_embed += d_e.sum(axis=0)


Batch = Sequence[Tuple[PatchGrid, np.ndarray]]


def loss_and_grads(params: VitParams, batch: Batch, config: VitConfig,
                   loss_config: LossConfig) -> Tuple[Dict[str, float], VitParams]:
    """Mean total loss over the batch and its analytic gradient."""
    if len(batch) == 0:
        raise InvalidInputError("batch must be nonempty")
    grads = zeros_like_params(params)
    scale = 1.0 / len(batch)
    ce_sum = reg_sum = ent_sum = 0.0
    for grid, labels in batch:
        prob_map, maps, cache = forward(params, grid, config)
        reg_maps = select_reg_maps(maps, config)
        ce_sum += bce_loss(prob_map, labels)
        reg_sum += attention_entropy_loss(reg_maps, loss_config.log_eps,
                                          loss_config.per_entry_norm)
        ent_sum += float(np.mean([attention_entropy(m, loss_config.log_eps).mean()
                                  for m in maps]))
        _backward_sample(params, config, loss_config, cache, labels, grads, scale)
    ce = ce_sum * scale
    reg = reg_sum * scale
    metrics = {
        "ce": ce,
        "entropy_reg": reg,
        "total": ce + loss_config.entropy_weight * reg,
        "mean_attention_entropy": ent_sum * scale,
    }
    return metrics, grads


def batch_loss(params: VitParams, batch: Batch, config: VitConfig,
               loss_config: LossConfig) -> float:
    total = 0.0
    for grid, labels in batch:
        prob_map, maps, _ = forward(params, grid, config)
        total += total_loss(prob_map, labels, select_reg_maps(maps, config),
                            loss_config)
    return total / len(batch)


def train_step(params: VitParams, batch: Batch, config: VitConfig,
               loss_config: LossConfig, lr: float) -> Tuple[VitParams, Dict[str, float]]:
    """One full-batch gradient-descent step on the combined loss."""
    if lr <= 0:
        raise InvalidInputError("lr must be positive")
    metrics, grads = loss_and_grads(params, batch, config, loss_config)
    if not math.isfinite(metrics["total"]):
        raise NumericError(
            f"loss became non-finite (ce={metrics['ce']}, reg={metrics['entropy_reg']})",
            location="train_step")
    return apply_gradient(params, grads, lr), metrics


def train(params: VitParams, batch: Batch, config: VitConfig,
          loss_config: LossConfig, lr: float,
          steps: int) -> Tuple[VitParams, List[Dict[str, float]]]:
    history = []
    for _ in range(steps):
        params, metrics = train_step(params, batch, config, loss_config, lr)
        history.append(metrics)
    return params, history


def grad_check(params: VitParams, batch: Batch, config: VitConfig,
               loss_config: LossConfig, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    _, grads = loss_and_grads(params, batch, config, loss_config)
    worst = 0.0
    for (_, arr), (_, g_arr) in zip(params.named_arrays(), grads.named_arrays()):
        flat = arr.reshape(-1)
        g_flat = g_arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = batch_loss(params, batch, config, loss_config)
            flat[i] = orig - h
            down = batch_loss(params, batch, config, loss_config)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(g_flat[i] - numeric) / max(1e-6, abs(g_flat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Adaptive threshold
# ---------------------------------------------------------------------------

@dataclass
class ThresholdStats:
    mean_bg: float
    std_bg: float
    k: float
    threshold: float


def threshold_from_stats(mean_bg: float, std_bg: float,
                         k: float = 1.5) -> ThresholdStats:
    """threshold = mean_bg + k * std_bg, exactly."""
    if std_bg < 0:
        raise InvalidInputError("std_bg must be nonnegative")
    return ThresholdStats(mean_bg, std_bg, k, mean_bg + k * std_bg)


def adaptive_threshold(prob_map: PatchProbMap | np.ndarray,
                       k: float = 1.5) -> ThresholdStats:
    """Scan-specific threshold from provisional-background statistics.

    Background is estimated label-free as the patches with probability at or
    below the scan median; the threshold then sits k standard deviations
    above that set's mean, like a one-tailed anomaly cut.
    """
    probs = prob_map.probs if isinstance(prob_map, PatchProbMap) else np.asarray(prob_map)
    background = probs[probs <= np.median(probs)]
    if background.size < 2:
        raise DegenerateStatsError(
            f"need >= 2 provisional background patches, got {background.size}")
    return threshold_from_stats(float(background.mean()),
                                float(background.std()), k)


def classify_patches(probs: np.ndarray, threshold: float) -> np.ndarray:
    """Tumor iff p > threshold (strict)."""
    return np.asarray(probs) > threshold


# ---------------------------------------------------------------------------
# Attribution
# ---------------------------------------------------------------------------

def patch_attribution(params: VitParams, grid: PatchGrid, config: VitConfig,
                      target: str = "tumor") -> np.ndarray:
    """Gradient-weighted patch heatmap in [0, 1].

    Weights are the gradient of the mean target logit w.r.t. the final-layer
    patch embeddings, channel-averaged; the heatmap is the weighted embedding
    sum per patch, negatives clipped, max-normalized.  (The head is linear,
    so that gradient is w_head / N for every patch.)
    """
    if target not in ("tumor", "background"):
        raise InvalidInputError("target must be 'tumor' or 'background'")
    _, _, cache = forward(params, grid, config)
    e_final = cache["e_final"]
    n = grid.n_patches
    sign = 1.0 if target == "tumor" else -1.0
    channel_weights = sign * params.w_head / n
    raw = e_final @ channel_weights
    heat = np.maximum(raw, 0.0)
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    return heat


# ---------------------------------------------------------------------------
# Synthetic scan corpus
# ---------------------------------------------------------------------------

def synth_scan(rng: np.random.Generator, config: VitConfig,
               n_foci: int | None = None) -> Tuple[np.ndarray, np.ndarray]:
    """One synthetic grayscale scan plus per-patch tumor labels.

    Bright Gaussian foci (possibly several, i.e. multifocal) on a dim
    textured background; a patch is labeled tumor iff a focus center falls
    inside it.
    """
    size, p = config.image_size, config.patch_size
    cells = size // p
    if n_foci is None:
        n_foci = int(rng.integers(1, 4))
    image = 0.20 + 0.05 * rng.standard_normal((size, size))
    labels = np.zeros(cells * cells, dtype=np.int64)
    if n_foci > 0:
        chosen = rng.choice(cells * cells, size=min(n_foci, cells * cells),
                            replace=False)
        yy, xx = np.mgrid[0:size, 0:size]
        for cell in chosen:
            r, c = divmod(int(cell), cells)
            cy = r * p + rng.uniform(0.3 * p, 0.7 * p)
            cx = c * p + rng.uniform(0.3 * p, 0.7 * p)
            sigma = rng.uniform(0.25 * p, 0.45 * p)
            amp = rng.uniform(0.55, 0.75)
            image += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            labels[cell] = 1
    return np.clip(image, 0.0, 1.0), labels


def make_scan_corpus(seed: int, n_images: int, config: VitConfig,
                     tumor_fraction: float = 1.0) -> List[Tuple[PatchGrid, np.ndarray]]:
    """Seeded corpus of (grid, labels); a slice of images may be tumor-free."""
    rng = np.random.default_rng(seed)
    corpus = []
    for i in range(n_images):
        has_tumor = rng.uniform() < tumor_fraction
        image, labels = synth_scan(rng, config,
                                   n_foci=None if has_tumor else 0)
        corpus.append((patchify(image, config.patch_size), labels))
    return corpus


def mean_attention_entropy(params: VitParams, batch: Batch,
                           config: VitConfig, log_eps: float = 1e-8) -> float:
    """Mean row entropy over every map and sample (training diagnostic)."""
    vals = []
    for grid, _ in batch:
        _, maps, _ = forward(params, grid, config)
        vals.extend(float(attention_entropy(m, log_eps).mean()) for m in maps)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(path: str, params: VitParams, config: VitConfig) -> None:
    tensors = dict(params.named_arrays())
    meta = {
        "kind": "vit-model",
        "config": {
            "image_size": config.image_size,
            "patch_size": config.patch_size,
            "d_model": config.d_model,
            "n_heads": config.n_heads,
            "n_layers": config.n_layers,
            "d_ff": config.d_ff,
            "use_positions": config.use_positions,
            "reg_layer_scope": config.reg_layer_scope,
        },
    }
    tensorio.save_tensors(path, tensors, meta)


def load_model(path: str) -> Tuple[VitParams, VitConfig]:
    tensors, meta = tensorio.load_tensors(path)
    if meta.get("kind") != "vit-model":
        raise InvalidInputError(f"{path} is not a vit-model artifact")
    config = VitConfig(**meta["config"])
    layers = [
        LayerParams(**{k: tensors[f"layers.{i}.{k}"]
                       for k in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")})
        for i in range(config.n_layers)
    ]
    params = VitParams(
        w_embed=tensors["embed.w"], b_embed=tensors["embed.b"],
        pos=tensors["pos"], layers=layers,
        w_head=tensors["head.w"], b_head=tensors["head.b"].reshape(()),
    )
    return params, config
