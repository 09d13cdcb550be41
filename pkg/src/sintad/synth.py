"""Synthetic boresight thermal sequences with injected laser-power faults.

The simulator keeps an "excess temperature" canvas covering the whole scanned
rectangle. Every frame the canvas cools by a constant factor and the laser
deposits a Gaussian spot at its current position; the camera frame is the
window of the canvas centred on the spot, plus ambient temperature, an
optional hot-region bias and sensor noise. Only the powered rightward pass of
each scan line is emitted; the unpowered return pass just lets the canvas
cool.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class DatasetError(Exception):
    """Base class for dataset read/write failures."""


class LayerNotFoundError(DatasetError, KeyError):
    pass


class ShapeMismatchError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


@dataclass
class HotRegion:
    """Rectangle in (line, frame) coordinates whose frames run ``bias`` degrees hotter."""

    line_start: int
    line_stop: int
    frame_start: int
    frame_stop: int
    bias: float = 2.0

    def contains(self, line: int, frame: int) -> bool:
        return self.line_start <= line < self.line_stop and self.frame_start <= frame < self.frame_stop


@dataclass
class ProcessParams:
    lines_per_layer: int = 215
    frames_per_line: int = 40
    frame_height: int = 64
    frame_width: int = 64
    ambient_temp: float = 25.0
    nominal_power: float = 0.61
    spot_peak_gain: float = 100.0
    spot_sigma: float = 3.0
    trail_decay: float = 0.9
    scan_step_px: int = 2
    line_spacing_px: int = 2
    return_frames: Optional[int] = None
    hot_region: Optional[HotRegion] = None
    noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.hot_region, dict):
            self.hot_region = HotRegion(**self.hot_region)
        self.validate()

    def validate(self):
        if self.lines_per_layer < 1:
            raise ValueError(f"lines_per_layer must be >= 1, got {self.lines_per_layer}")
        if self.frames_per_line < 1:
            raise ValueError(f"frames_per_line must be >= 1, got {self.frames_per_line}")
        if self.frame_height < 2 or self.frame_width < 2 or self.frame_height % 2 or self.frame_width % 2:
            raise ValueError(f"frame size must be even, got {self.frame_height}x{self.frame_width}")
        if not 0 < self.trail_decay < 1:
            raise ValueError(f"trail_decay must lie in (0, 1), got {self.trail_decay}")
        if not 0 < self.nominal_power <= 1:
            raise ValueError(f"nominal_power must lie in (0, 1], got {self.nominal_power}")
        if self.spot_sigma <= 0 or self.noise_sigma < 0 or self.spot_peak_gain < 0:
            raise ValueError("spot_sigma must be > 0; noise_sigma and spot_peak_gain must be >= 0")
        if self.scan_step_px < 0 or self.line_spacing_px < 0:
            raise ValueError("scan_step_px and line_spacing_px must be >= 0")

    @property
    def frame_shape(self) -> Tuple[int, int]:
        return self.frame_height, self.frame_width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProcessParams":
        return cls(**d)


@dataclass(frozen=True)
class FaultEntry:
    layer_id: int
    start_line: int
    duration_lines: int
    off_nominal_power: float

    @property
    def lines(self) -> range:
        return range(self.start_line, self.start_line + self.duration_lines)


@dataclass
class FaultSchedule:
    entries: List[FaultEntry] = field(default_factory=list)

    def for_layer(self, layer_id: int) -> List[FaultEntry]:
        return [e for e in self.entries if e.layer_id == layer_id]

    def validate(self, params: ProcessParams):
        for e in self.entries:
            if not 1 <= e.duration_lines <= 4:
                raise ValueError(f"fault duration must be 1..4 lines, got {e.duration_lines}")
            if e.start_line < 0 or e.start_line + e.duration_lines > params.lines_per_layer:
                raise ValueError(
                    f"fault lines {e.start_line}..{e.start_line + e.duration_lines - 1} outside layer "
                    f"of {params.lines_per_layer} lines")
            if not 0 <= e.off_nominal_power <= 1:
                raise ValueError(f"off-nominal power must lie in [0, 1], got {e.off_nominal_power}")


@dataclass
class FaultPattern:
    """Placement policy for the faults of one off-nominal layer.

    Events start at ``first_line`` and every ``spacing`` lines after, cycling
    through ``durations``; events that would end within ``end_margin`` lines
    of the layer end are dropped. A layer's deviation lowers the laser power
    unless ``over_power`` is set.
    """

    first_line: int = 14
    spacing: int = 24
    durations: Tuple[int, ...] = (1, 2, 3, 4)
    end_margin: int = 8
    over_power: bool = False

    def power(self, params: "ProcessParams", deviation_points: float) -> float:
        return off_nominal_power(params, deviation_points if self.over_power else -deviation_points)

    def place(self, layer_id: int, lines_per_layer: int, power: float) -> List[FaultEntry]:
        out = []
        start, k = self.first_line, 0
        while True:
            d = self.durations[k % len(self.durations)]
            if start + d > lines_per_layer - self.end_margin:
                break
            out.append(FaultEntry(layer_id, start, d, power))
            start += self.spacing
            k += 1
        return out


@dataclass
class LayerSequence:
    """Frames of one layer, shaped ``(lines, frames_per_line, m, n)``."""

    layer_id: int
    frames: np.ndarray
    labels: Tuple[int, ...] = ()
    column_id: int = 0

    @property
    def lines_per_layer(self) -> int:
        return self.frames.shape[0]

    @property
    def frames_per_line(self) -> int:
        return self.frames.shape[1]

    def label_mask(self) -> np.ndarray:
        mask = np.zeros(self.lines_per_layer, dtype=bool)
        mask[list(self.labels)] = True
        return mask


def _spot_kernel(sigma: float) -> np.ndarray:
    r = int(np.ceil(4 * sigma))
    y = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(y ** 2) / (2 * sigma ** 2))
    return np.outer(g, g)


def line_powers(params: ProcessParams, faults: Sequence[FaultEntry]) -> np.ndarray:
    power = np.full(params.lines_per_layer, params.nominal_power, dtype=np.float64)
    for e in faults:
        power[e.start_line:e.start_line + e.duration_lines] = e.off_nominal_power
    return power


def generate_layer(params: ProcessParams, faults: FaultSchedule, layer_id: int) -> LayerSequence:
    """Simulate one layer. Deterministic in ``(params.seed, layer_id)``."""
    faults.validate(params)
    entries = faults.for_layer(layer_id)
    power = line_powers(params, entries)
    L, F = params.lines_per_layer, params.frames_per_line
    m, n = params.frame_shape
    dy, dx = params.line_spacing_px, params.scan_step_px
    ret = F if params.return_frames is None else params.return_frames

    kernel = _spot_kernel(params.spot_sigma)
    r = kernel.shape[0] // 2
    pad_r, pad_c = max(m // 2, r), max(n // 2, r)
    canvas = np.zeros(((L - 1) * dy + 2 * pad_r + 1, (F - 1) * dx + 2 * pad_c + 1))
    rng = np.random.default_rng([params.seed, layer_id])
    frames = np.empty((L, F, m, n), dtype=np.float32)
    decay = params.trail_decay
    return_decay = decay ** ret

    for i in range(L):
        row = pad_r + i * dy
        # rows above the current crop are never seen again, so they need not cool
        band = canvas[row - pad_r:]
        amp = params.spot_peak_gain * power[i]
        for j in range(F):
            col = pad_c + j * dx
            band *= decay
            canvas[row - r:row + r + 1, col - r:col + r + 1] += amp * kernel
            frames[i, j] = canvas[row - m // 2:row + m // 2, col - n // 2:col + n // 2]
        band *= return_decay

    frames += params.ambient_temp
    hr = params.hot_region
    if hr is not None:
        frames[hr.line_start:hr.line_stop, hr.frame_start:hr.frame_stop] += np.float32(hr.bias)
    if params.noise_sigma > 0:
        frames += rng.normal(0.0, params.noise_sigma, size=frames.shape).astype(np.float32)
    labels = tuple(sorted({ln for e in entries for ln in e.lines}))
    return LayerSequence(layer_id=layer_id, frames=frames, labels=labels)


def off_nominal_power(params: ProcessParams, deviation_points: float) -> float:
    """Laser power fraction for a deviation given in percentage points of max power.

    Positive deviations over-power the line; pass a negative value to under-power it.
    """
    power = params.nominal_power + deviation_points / 100.0
    if not 0 <= power <= 1:
        raise ValueError(f"deviation of {deviation_points} points leaves power {power:.3f} outside [0, 1]")
    return power


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"no dataset manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format_version {manifest.get('format_version')!r} in {path}")
    return manifest


def write_manifest(dataset_dir, manifest: dict):
    path = Path(dataset_dir) / MANIFEST_NAME
    tmp = path.with_suffix(".json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_layer(dataset_dir, layer: LayerSequence) -> dict:
    path = Path(dataset_dir) / f"layer_{layer.layer_id}.f32"
    layer.frames.astype("<f4", copy=False).tofile(path)
    return {"file": path.name, "sha256": _sha256(path)}


def generate_dataset(params: ProcessParams, out_dir, train_layers: int = 5,
                     test_deviations: Iterable[float] = (13, 11, 9, 5, 3),
                     pattern: Optional[FaultPattern] = None, overwrite: bool = False) -> dict:
    """Generate ``train_layers`` nominal layers followed by one off-nominal
    layer per deviation, write them to ``out_dir`` and return the manifest.

    Layer ids are assigned in that order starting at 0.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"output directory {out} is not empty (pass overwrite to replace it)")
        for old in list(out.glob("layer_*.f32")) + [out / MANIFEST_NAME]:
            if old.exists():
                old.unlink()
    out.mkdir(parents=True, exist_ok=True)
    pattern = pattern or FaultPattern()
    deviations = list(test_deviations)

    schedule = FaultSchedule()
    roles = []
    for lid in range(train_layers):
        roles.append((lid, "train", 0))
    for k, dev in enumerate(deviations):
        lid = train_layers + k
        schedule.entries.extend(pattern.place(lid, params.lines_per_layer, pattern.power(params, dev)))
        roles.append((lid, "test", dev))
    schedule.validate(params)

    layers = []
    for lid, role, dev in roles:
        layer = generate_layer(params, schedule, lid)
        info = write_layer(out, layer)
        entries = schedule.for_layer(lid)
        layers.append({
            "id": lid,
            "role": role,
            "power_deviation": dev,
            "off_nominal_power": entries[0].off_nominal_power if entries else None,
            "fault_lines": list(layer.labels),
            "faults": [{"start_line": e.start_line, "duration_lines": e.duration_lines} for e in entries],
            **info,
        })
        logger.info("wrote layer %d (%s, deviation %s)", lid, role, dev)

    manifest = {
        "format_version": FORMAT_VERSION,
        "m": params.frame_height,
        "n": params.frame_width,
        "lines_per_layer": params.lines_per_layer,
        "frames_per_line": params.frames_per_line,
        "test_deviations": deviations,
        "process": params.to_dict(),
        "layers": layers,
        "normalization": None,
    }
    write_manifest(out, manifest)
    return manifest


def _layer_entry(manifest: dict, layer_id: int) -> dict:
    for entry in manifest["layers"]:
        if entry["id"] == layer_id:
            return entry
    raise LayerNotFoundError(f"layer {layer_id} is not listed in the dataset manifest")


def load_layer(dataset_dir, layer_id: int, manifest: Optional[dict] = None) -> LayerSequence:
    manifest = manifest or read_manifest(dataset_dir)
    entry = _layer_entry(manifest, layer_id)
    path = Path(dataset_dir) / entry["file"]
    if not path.is_file():
        raise LayerNotFoundError(f"layer file {path} is missing")
    shape = (manifest["lines_per_layer"], manifest["frames_per_line"], manifest["m"], manifest["n"])
    expected = int(np.prod(shape)) * 4
    actual = path.stat().st_size
    if actual != expected:
        raise ShapeMismatchError(f"{path}: {actual} bytes on disk, expected {expected} for shape {shape}")
    if _sha256(path) != entry["sha256"]:
        raise ChecksumError(f"{path}: checksum does not match the manifest")
    frames = np.fromfile(path, dtype="<f4").astype(np.float32, copy=False).reshape(shape)
    return LayerSequence(layer_id=layer_id, frames=frames, labels=tuple(entry["fault_lines"]))


def layer_ids(manifest: dict, role: Optional[str] = None) -> List[int]:
    return [e["id"] for e in manifest["layers"] if role is None or e["role"] == role]


def layer_info(manifest: dict) -> Dict[int, dict]:
    return {e["id"]: e for e in manifest["layers"]}
