"""Frame error metrics, snippet errors and their aggregation into per-frame
and per-line anomaly scores, plus detrending, thresholding and detection."""

from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np


def mse_metric(S, S_hat) -> Union[float, np.ndarray]:
    """Frobenius norm of ``S - S_hat`` over the last two axes."""
    e = np.asarray(S, dtype=np.float64) - np.asarray(S_hat, dtype=np.float64)
    out = np.sqrt(np.sum(e * e, axis=(-2, -1)))
    return float(out) if out.ndim == 0 else out


def window_energy(E, a: int, b: int) -> np.ndarray:
    """Sum of squares of ``E`` over every ``a x b`` window (stride 1), via a
    summed-area table. Returns shape ``(..., m - a + 1, n - b + 1)``."""
    E = np.asarray(E, dtype=np.float64)
    m, n = E.shape[-2:]
    if not (1 <= a <= m and 1 <= b <= n):
        raise ValueError(f"window {a}x{b} does not fit in a {m}x{n} frame")
    sat = np.zeros(E.shape[:-2] + (m + 1, n + 1))
    np.cumsum(np.cumsum(E * E, axis=-2), axis=-1, out=sat[..., 1:, 1:])
    return sat[..., a:, b:] - sat[..., :-a, b:] - sat[..., a:, :-b] + sat[..., :-a, :-b]


def spatial_scoping_metric(S, S_hat, a: int = 8, b: int = 8) -> Union[float, np.ndarray]:
    """Largest Frobenius norm of any ``a x b`` window of the error ``S - S_hat``."""
    e = np.asarray(S, dtype=np.float64) - np.asarray(S_hat, dtype=np.float64)
    energy = window_energy(e, a, b)
    # cancellation in the table can leave tiny negatives
    out = np.sqrt(np.maximum(energy.max(axis=(-2, -1)), 0.0))
    return float(out) if out.ndim == 0 else out


def make_metric(name: str = "spatial", window: Tuple[int, int] = (8, 8)) -> Callable:
    if name == "mse":
        return mse_metric
    if name == "spatial":
        a, b = window
        return lambda S, S_hat: spatial_scoping_metric(S, S_hat, a, b)
    raise ValueError(f"unknown metric {name!r} (expected 'mse' or 'spatial')")


def snippet_errors(Z, Z_hat, p: int, metric: Callable = mse_metric) -> Tuple[np.ndarray, np.ndarray]:
    """Reconstruction and regression errors of snippets.

    ``Z``/``Z_hat`` are ``(p+q, m, n)`` or ``(K, p+q, m, n)``. ``e_rec`` sums
    the per-frame metric over the first ``p`` frames, ``e_reg`` over all of
    them, so ``e_reg >= e_rec`` always.
    """
    per_frame = np.asarray(metric(Z, Z_hat), dtype=np.float64)
    frames = per_frame.shape[-1]
    if not 0 < p <= frames:
        raise ValueError(f"p={p} incompatible with {frames} frames per snippet")
    e_rec = per_frame[..., :p].sum(axis=-1)
    e_reg = e_rec + per_frame[..., p:].sum(axis=-1)
    return e_rec, e_reg


@dataclass
class FrameScores:
    """Per-frame anomaly scores on a ``(lines, frames_per_line)`` grid.

    Frames covered by no snippet hold NaN and are flagged by a zero count.
    """

    f_rec: np.ndarray
    f_reg: np.ndarray
    rec_count: np.ndarray
    reg_count: np.ndarray

    @property
    def rec_covered(self) -> np.ndarray:
        return self.rec_count > 0

    @property
    def reg_covered(self) -> np.ndarray:
        return self.reg_count > 0


def _window_mean(errors: np.ndarray, lines: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    # errors: (F, W) indexed by start line; line i gets starts in [i-width+1, i]
    f, n_win = errors.shape
    csum = np.concatenate([np.zeros((f, 1)), np.cumsum(errors, axis=1)], axis=1)
    i = np.arange(lines)
    lo = np.clip(i - width + 1, 0, n_win)
    hi = np.clip(i + 1, 0, n_win)
    count = np.maximum(hi - lo, 0)
    total = csum[:, hi] - csum[:, lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return mean.T, count


def frame_anomaly_scores(e_rec, e_reg, lines: int, frames_per_line: int, p: int, q: int) -> FrameScores:
    """Average snippet errors onto the frames they cover.

    ``e_rec``/``e_reg`` are flat in snippet order ``k = j * W + i0`` (``W``
    start lines) or already shaped ``(frames_per_line, W)``. A frame's
    reconstruction score averages the snippets whose first ``p`` lines cover
    it; its regression score averages every snippet covering it.
    """
    n_win = lines - p - q + 1
    if n_win < 1:
        raise ValueError(f"{lines} lines cannot hold a snippet of {p + q} lines")
    e_rec = np.asarray(e_rec, dtype=np.float64).reshape(frames_per_line, n_win)
    e_reg = np.asarray(e_reg, dtype=np.float64).reshape(frames_per_line, n_win)
    f_rec, n_rec = _window_mean(e_rec, lines, p)
    f_reg, n_reg = _window_mean(e_reg, lines, p + q)
    return FrameScores(f_rec, f_reg, n_rec, n_reg)


def linewise(frame_scores: np.ndarray) -> np.ndarray:
    """Mean score of each line over its frames; lines with no finite score are NaN."""
    s = np.asarray(frame_scores, dtype=np.float64)
    ok = np.isfinite(s)
    count = ok.sum(axis=1)
    total = np.where(ok, s, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def centered_moving_average(series, window: int = 20) -> np.ndarray:
    """Symmetric moving average of width ``window``.

    Odd widths are a plain box; even widths use the usual centred ``2 x w``
    average (``w + 1`` taps, half weight at both ends) so the filter stays
    symmetric. Near the edges the half-width shrinks to what fits on both
    sides. NaN entries are skipped.
    """
    if window < 2:
        raise ValueError(f"detrend window must be >= 2, got {window}")
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    half = window // 2
    if window % 2:
        taps = np.ones(2 * half + 1)
    else:
        taps = np.ones(2 * half + 1)
        taps[0] = taps[-1] = 0.5
    out = np.full(n, np.nan)
    ok = np.isfinite(x)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        if h == half:
            w = taps
        else:
            w = np.ones(2 * h + 1)
        seg = x[i - h:i + h + 1]
        good = ok[i - h:i + h + 1]
        if not good.any():
            continue
        # averaging offsets from a local reference makes constant runs cancel exactly
        ref = seg[good][0]
        out[i] = ref + np.sum(w[good] * (seg[good] - ref)) / np.sum(w[good])
    return out


def detrend(series, window: int = 20) -> np.ndarray:
    """Subtract the centred moving average; NaN stays NaN."""
    x = np.asarray(series, dtype=np.float64)
    return x - centered_moving_average(x, window)


def boundary_mask(lines: int, margin: int) -> np.ndarray:
    """True for lines at least ``margin`` away from both ends."""
    m = np.ones(lines, dtype=bool)
    if margin > 0:
        m[:margin] = False
        m[max(lines - margin, 0):] = False
    return m


def reference_std(detrended_series: Sequence[np.ndarray], masks: Optional[Sequence[np.ndarray]] = None) -> float:
    """Standard deviation of pooled detrended training line scores."""
    vals = []
    for k, s in enumerate(detrended_series):
        s = np.asarray(s, dtype=np.float64)
        keep = np.isfinite(s)
        if masks is not None:
            keep &= np.asarray(masks[k], dtype=bool)
        vals.append(s[keep])
    pooled = np.concatenate(vals) if vals else np.empty(0)
    if pooled.size < 2:
        raise ValueError("need at least two finite training line scores for a reference std")
    std = float(pooled.std())
    if std <= 0:
        raise ValueError("training line scores have zero spread")
    return std


def normalize_series(series, ref_std: float) -> np.ndarray:
    if not ref_std > 0:
        raise ValueError(f"ref_std must be positive, got {ref_std}")
    return np.asarray(series, dtype=np.float64) / ref_std


def fit_threshold(train_scores: Sequence[np.ndarray], masks: Optional[Sequence[np.ndarray]] = None) -> float:
    """Largest normalised training line score, so no training line exceeds it.

    ``train_scores`` is one series per training layer; ``masks`` optionally
    restricts each to its evaluated lines. NaNs are ignored.
    """
    best = -np.inf
    seen = False
    for k, s in enumerate(train_scores):
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        keep = np.isfinite(s)
        if masks is not None:
            keep &= np.asarray(masks[k], dtype=bool)
        if keep.any():
            seen = True
            best = max(best, float(s[keep].max()))
    if not seen:
        raise ValueError("fit_threshold needs at least one training line score")
    return max(best, 0.0)


@dataclass
class DetectionConfig:
    threshold: Optional[float] = None
    detrend_window: int = 20
    window: Tuple[int, int] = (8, 8)
    metric: str = "spatial"
    boundary_margin: int = 3
    halo: Optional[int] = None

    def __post_init__(self):
        self.window = tuple(int(v) for v in self.window)
        self.validate()

    def validate(self):
        if self.threshold is not None and self.threshold < 0:
            raise ValueError(f"threshold must be >= 0, got {self.threshold}")
        if self.detrend_window < 2:
            raise ValueError(f"detrend window must be >= 2, got {self.detrend_window}")
        if len(self.window) != 2 or min(self.window) < 1:
            raise ValueError(f"spatial window must be two positive sizes, got {self.window}")
        if self.metric not in ("mse", "spatial"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.boundary_margin < 0 or (self.halo is not None and self.halo < 0):
            raise ValueError("boundary margin and halo must be >= 0")

    def halo_width(self, p: int, q: int) -> int:
        return p + q - 1 if self.halo is None else self.halo

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionConfig":
        return cls(**d)


def evaluation_mask(lines: int, labels: Sequence[int], margin: int, halo: int) -> np.ndarray:
    """Lines that count towards confusion statistics.

    Boundary lines are dropped, and so are unlabeled lines within ``halo``
    lines of a labeled one (neither true nor false positives).
    """
    mask = boundary_mask(lines, margin)
    lab = np.zeros(lines, dtype=bool)
    lab[list(labels)] = True
    near = np.zeros(lines, dtype=bool)
    for i in np.flatnonzero(lab):
        near[max(i - halo, 0):i + halo + 1] = True
    mask &= ~(near & ~lab)
    return mask


@dataclass
class Detection:
    flags: np.ndarray
    mask: np.ndarray


def detect(scores, epsilon: float, lines_labels: Sequence[int] = (), config: Optional[DetectionConfig] = None,
           p: int = 3, q: int = 3) -> Detection:
    """Flag lines whose normalised detrended score exceeds ``epsilon``."""
    config = config or DetectionConfig()
    s = np.asarray(scores, dtype=np.float64)
    flags = np.isfinite(s) & (s > epsilon)
    mask = evaluation_mask(len(s), lines_labels, config.boundary_margin, config.halo_width(p, q))
    mask &= np.isfinite(s)
    return Detection(flags, mask)


def baseline_score(frames) -> Union[float, np.ndarray]:
    """Frobenius norm of each raw (normalised) frame."""
    f = np.asarray(frames, dtype=np.float64)
    out = np.sqrt(np.sum(f * f, axis=(-2, -1)))
    return float(out) if out.ndim == 0 else out
