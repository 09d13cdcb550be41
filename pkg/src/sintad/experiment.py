"""Glue between the model and the scoring code: score whole layers, calibrate
the detector on training layers and assemble per-layer results."""

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .evaluation import EvalReport, UndefinedMetricError, evaluate, roc_auc
from .model import EncoderDecoderModel
from .pipeline import snippet_view
from .scoring import (DetectionConfig, FrameScores, baseline_score, boundary_mask, detect, detrend,
                      fit_threshold, frame_anomaly_scores, linewise, make_metric, normalize_series,
                      reference_std, snippet_errors)

SCORE_COLUMNS = ("line", "f_rec", "f_reg", "f_rec_detrended", "f_reg_detrended", "f_reg_normalized", "flag", "mask")


@dataclass
class LayerScores:
    layer_id: int
    labels: Tuple[int, ...]
    e_rec: np.ndarray           # (F, W) snippet errors, indexed [frame_index, start_line]
    e_reg: np.ndarray
    frames: FrameScores         # (lines, F) grids
    line_rec: np.ndarray
    line_reg: np.ndarray
    baseline_frames: np.ndarray
    baseline_line: np.ndarray

    @property
    def lines(self) -> int:
        return len(self.line_reg)


def score_layer(model: EncoderDecoderModel, frames: np.ndarray, config: DetectionConfig,
                layer_id: int = 0, labels: Sequence[int] = (), batch_size: int = 256) -> LayerScores:
    """Run the model over every snippet of a prepared ``(lines, F, m, n)`` layer."""
    p, q = model.config.p, model.config.q
    metric = make_metric(config.metric, config.window)
    view = snippet_view(frames, p, q)  # (F, W, p+q, m, n)
    F, W = view.shape[:2]
    e_rec = np.empty((F, W))
    e_reg = np.empty((F, W))
    for j in range(F):
        Z = np.ascontiguousarray(view[j], dtype=np.float32)
        Z_hat = model.predict(Z[:, :p], batch_size=batch_size)
        e_rec[j], e_reg[j] = snippet_errors(Z, Z_hat, p, metric)
    lines = frames.shape[0]
    fs = frame_anomaly_scores(e_rec, e_reg, lines, F, p, q)
    base = baseline_score(frames)
    return LayerScores(layer_id, tuple(labels), e_rec, e_reg, fs, linewise(fs.f_rec), linewise(fs.f_reg),
                       base, linewise(base))


@dataclass
class Calibration:
    ref_std_rec: float
    ref_std_reg: float
    epsilon: float
    baseline_ref_std: float
    baseline_epsilon: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        return cls(**{k: float(d[k]) for k in cls.__dataclass_fields__})


def calibrate(train_scores: Sequence[LayerScores], config: DetectionConfig) -> Calibration:
    """Reference spreads and thresholds from nominal training layers."""
    w = config.detrend_window

    def fit(series_list):
        det = [detrend(s, w) for s in series_list]
        masks = [boundary_mask(len(s), config.boundary_margin) & np.isfinite(s) for s in det]
        ref = reference_std(det, masks)
        eps = fit_threshold([normalize_series(d, ref) for d in det], masks)
        return ref, eps

    ref_rec, _ = fit([t.line_rec for t in train_scores])
    ref_reg, eps = fit([t.line_reg for t in train_scores])
    ref_base, eps_base = fit([t.baseline_line for t in train_scores])
    if config.threshold is not None:
        eps = config.threshold
    return Calibration(ref_rec, ref_reg, eps, ref_base, eps_base)


@dataclass
class LineTable:
    """Per-line columns of the scores CSV for one scorer."""

    f_rec: np.ndarray
    f_reg: np.ndarray
    f_rec_detrended: np.ndarray
    f_reg_detrended: np.ndarray
    f_reg_normalized: np.ndarray
    flag: np.ndarray
    mask: np.ndarray
    labels: Tuple[int, ...] = ()

    def label_array(self) -> np.ndarray:
        y = np.zeros(len(self.f_reg), dtype=bool)
        y[list(self.labels)] = True
        return y


def line_table(ls: LayerScores, cal: Calibration, config: DetectionConfig, p: int, q: int,
               baseline: bool = False) -> LineTable:
    w = config.detrend_window
    if baseline:
        rec = reg = ls.baseline_line
        ref_rec = ref_reg = cal.baseline_ref_std
        eps = cal.baseline_epsilon
    else:
        rec, reg = ls.line_rec, ls.line_reg
        ref_rec, ref_reg, eps = cal.ref_std_rec, cal.ref_std_reg, cal.epsilon
    rec_d, reg_d = detrend(rec, w), detrend(reg, w)
    reg_n = normalize_series(reg_d, ref_reg)
    det = detect(reg_n, eps, ls.labels, config, p, q)
    return LineTable(rec, reg, rec_d, reg_d, reg_n, det.flags, det.mask, ls.labels)


def evaluate_table(table: LineTable, layer_id: int) -> EvalReport:
    y = table.label_array()
    try:
        return evaluate(table.f_reg_normalized, table.flag, y, table.mask, layer_id)
    except UndefinedMetricError:
        # nominal layer: only false-positive counts are meaningful
        from .evaluation import confusion
        return EvalReport(layer_id=layer_id, confusion=confusion(table.flag, y, table.mask))


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if np.isnan(x) else format(x, ".9g")


def scores_csv(table: LineTable) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(SCORE_COLUMNS)
    for i in range(len(table.f_reg)):
        wr.writerow([i] + [_fmt(v) for v in (table.f_rec[i], table.f_reg[i], table.f_rec_detrended[i],
                                              table.f_reg_detrended[i], table.f_reg_normalized[i],
                                              table.flag[i], table.mask[i])])
    return buf.getvalue()


def read_scores_csv(path) -> Dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != SCORE_COLUMNS:
        raise ValueError(f"{path}: unexpected scores CSV header {rows[0] if rows else None}")
    cols = list(zip(*rows[1:])) if len(rows) > 1 else [()] * len(SCORE_COLUMNS)
    out = {}
    for name, col in zip(SCORE_COLUMNS, cols):
        if name in ("line",):
            out[name] = np.array([int(v) for v in col], dtype=int)
        elif name in ("flag", "mask"):
            out[name] = np.array([v == "1" for v in col], dtype=bool)
        else:
            out[name] = np.array([float(v) for v in col], dtype=np.float64)
    return out


def grid_csv(grid: np.ndarray) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["line"] + [f"frame_{j}" for j in range(grid.shape[1])])
    for i, row in enumerate(grid):
        wr.writerow([i] + [_fmt(v) for v in row])
    return buf.getvalue()


def pgm16(grid: np.ndarray) -> bytes:
    """Binary 16-bit PGM (lines down, frames across), min-max scaled; NaN -> 0."""
    g = np.asarray(grid, dtype=np.float64)
    ok = np.isfinite(g)
    img = np.zeros(g.shape, dtype=">u2")
    if ok.any():
        lo, hi = g[ok].min(), g[ok].max()
        span = hi - lo if hi > lo else 1.0
        img[ok] = np.round((g[ok] - lo) / span * 65535).astype(np.uint16)
    header = f"P5\n{g.shape[1]} {g.shape[0]}\n65535\n".encode("ascii")
    return header + img.tobytes()
