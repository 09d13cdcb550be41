"""Turn layer sequences into normalised, downsampled snippets for the model."""

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .synth import LayerSequence

ArrayOrLayer = Union[np.ndarray, LayerSequence]


def _frames(x: ArrayOrLayer) -> np.ndarray:
    return x.frames if isinstance(x, LayerSequence) else np.asarray(x)


@dataclass(frozen=True)
class NormalizationSpec:
    data_min: float
    data_max: float

    def __post_init__(self):
        if not self.data_max > self.data_min:
            raise ValueError(f"degenerate normalization range [{self.data_min}, {self.data_max}]")

    @property
    def scale(self) -> float:
        return self.data_max - self.data_min

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        out = (x.astype(np.float64) - self.data_min) / self.scale
        return out.astype(np.float32) if x.dtype == np.float32 else out

    def to_normalized_delta(self, degrees: float) -> float:
        """Express a temperature difference in normalised units."""
        return degrees / self.scale

    def to_dict(self) -> dict:
        return {"data_min": self.data_min, "data_max": self.data_max}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(float(d["data_min"]), float(d["data_max"]))


def fit_normalization(train_layers: Iterable[ArrayOrLayer]) -> NormalizationSpec:
    """Min/max over every pixel of every training layer."""
    lo, hi = np.inf, -np.inf
    seen = False
    for layer in train_layers:
        f = _frames(layer)
        if f.size == 0:
            continue
        seen = True
        lo = min(lo, float(f.min()))
        hi = max(hi, float(f.max()))
    if not seen:
        raise ValueError("fit_normalization needs at least one non-empty training layer")
    if not hi > lo:
        raise ValueError(f"training data is constant ({lo}); cannot normalise a zero range")
    return NormalizationSpec(lo, hi)


def apply_normalization(layer: ArrayOrLayer, spec: NormalizationSpec) -> ArrayOrLayer:
    if isinstance(layer, LayerSequence):
        return LayerSequence(layer.layer_id, spec.apply(layer.frames), layer.labels, layer.column_id)
    return spec.apply(layer)


def downsample(frames: ArrayOrLayer) -> ArrayOrLayer:
    """2x2 block mean over the last two axes (64x64 -> 32x32)."""
    if isinstance(frames, LayerSequence):
        return LayerSequence(frames.layer_id, downsample(frames.frames), frames.labels, frames.column_id)
    f = np.asarray(frames)
    h, w = f.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"downsample needs even frame dimensions, got {h}x{w}")
    g = f.astype(np.float64, copy=False)
    # fixed summation order keeps the result exactly reproducible
    total = g[..., 0::2, 0::2] + g[..., 0::2, 1::2] + g[..., 1::2, 0::2] + g[..., 1::2, 1::2]
    return (total / 4.0).astype(f.dtype if f.dtype.kind == "f" else np.float64)


def prepare_frames(layer: ArrayOrLayer, spec: Optional[NormalizationSpec]) -> np.ndarray:
    """Downsample then (optionally) normalise a layer's frames."""
    f = downsample(_frames(layer))
    return f if spec is None else spec.apply(f)


@dataclass
class Snippet:
    """``p + q`` frames at one within-line frame index over consecutive lines.

    ``target`` has shape ``(p+q, m, n)``; ``input`` is its first ``p`` frames.
    """

    index: int
    layer_id: int
    start_line: int
    frame_index: int
    target: np.ndarray
    p: int

    @property
    def input(self) -> np.ndarray:
        return self.target[:self.p]


def window_count(lines: int, p: int, q: int, stride: int = 1) -> int:
    if p < 1 or q < 0:
        raise ValueError(f"need p >= 1 and q >= 0, got p={p}, q={q}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if lines < p + q:
        raise ValueError(f"layer has {lines} lines, fewer than p+q={p + q}")
    return (lines - (p + q)) // stride + 1


def snippet_view(frames: np.ndarray, p: int, q: int) -> np.ndarray:
    """Zero-copy view of all stride-1 snippet targets.

    ``frames`` is ``(lines, F, m, n)``; the result is ``(F, W, p+q, m, n)`` with
    ``W = lines - p - q + 1`` start lines, so snippet ``k = j * W + i0``.
    """
    window_count(frames.shape[0], p, q)
    v = np.lib.stride_tricks.sliding_window_view(frames, p + q, axis=0)  # (W, F, m, n, p+q)
    return v.transpose(1, 0, 4, 2, 3)


def make_snippets(layer: ArrayOrLayer, p: int, q: int, stride: int = 1, layer_id: Optional[int] = None) -> List[Snippet]:
    frames = _frames(layer)
    if layer_id is None:
        layer_id = layer.layer_id if isinstance(layer, LayerSequence) else 0
    n_win = window_count(frames.shape[0], p, q, stride)
    out = []
    k = 0
    for j in range(frames.shape[1]):
        for w in range(n_win):
            i0 = w * stride
            target = frames[i0:i0 + p + q, j]
            out.append(Snippet(k, layer_id, i0, j, target, p))
            k += 1
    return out


class SnippetSet:
    """Stride-1 snippets drawn from several prepared layers without copying them.

    Snippets are addressed by a flat index; ``targets(idx)`` gathers a batch of
    shape ``(len(idx), p+q, m, n)``.
    """

    def __init__(self, layers: Sequence[np.ndarray], p: int, q: int):
        self.p, self.q = p, q
        self.views = [snippet_view(np.asarray(f), p, q) for f in layers]
        sizes = [v.shape[0] * v.shape[1] for v in self.views]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    def __len__(self) -> int:
        return int(self.offsets[-1])

    @property
    def frame_shape(self) -> Tuple[int, int]:
        return self.views[0].shape[-2:]

    def locate(self, k: int) -> Tuple[int, int, int]:
        """Return ``(layer position, frame index j, start line i0)`` of snippet ``k``."""
        li = int(np.searchsorted(self.offsets, k, side="right") - 1)
        local = k - self.offsets[li]
        n_win = self.views[li].shape[1]
        return li, int(local // n_win), int(local % n_win)

    def targets(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        out = np.empty((len(idx), self.p + self.q) + tuple(self.frame_shape), dtype=self.views[0].dtype)
        layer_pos = np.searchsorted(self.offsets, idx, side="right") - 1
        for li in np.unique(layer_pos):
            sel = layer_pos == li
            local = idx[sel] - self.offsets[li]
            n_win = self.views[li].shape[1]
            out[sel] = self.views[li][local // n_win, local % n_win]
        return out


def augment(targets: np.ndarray, spec: NormalizationSpec, copies: int, rng: np.random.Generator,
            noise_sigma_c: float = 0.01, bias_range_c: Tuple[float, float] = (-1.8, 1.8)) -> np.ndarray:
    """Append ``copies`` perturbed versions of each snippet target.

    Each copy gets i.i.d. Gaussian pixel noise plus one constant bias, uniform
    in ``bias_range_c``, shared by every pixel of every frame of the snippet.
    Noise and bias are given in degrees and converted with ``spec``.
    """
    targets = np.asarray(targets)
    if copies <= 0:
        return targets
    sigma = spec.to_normalized_delta(noise_sigma_c)
    lo, hi = (spec.to_normalized_delta(b) for b in bias_range_c)
    out = [targets]
    bshape = (targets.shape[0],) + (1,) * (targets.ndim - 1)
    for _ in range(copies):
        bias = rng.uniform(lo, hi, size=bshape)
        noise = rng.normal(0.0, sigma, size=targets.shape) if sigma > 0 else 0.0
        out.append((targets + bias + noise).astype(targets.dtype))
    return np.concatenate(out, axis=0)
