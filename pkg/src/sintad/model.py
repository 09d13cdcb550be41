"""Convolutional encoder-decoder trained to reconstruct its input frames and
predict the frames of the following scan lines."""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autograd import BatchNormState, Parameter, Tape, Tensor, adam_step, ops, zero_grad
from .pipeline import NormalizationSpec, SnippetSet, augment

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
N_GROUPS = 4


class ModelFileError(Exception):
    """Raised when a saved model is missing, corrupt or inconsistent."""


@dataclass
class ArchitectureConfig:
    p: int = 3
    q: int = 3
    height: int = 32
    width: int = 32
    base_width: int = 16
    convs_per_group: int = 1
    latent_width: int = 128
    dropout_rates: Tuple[float, ...] = (0.1,) * (2 * N_GROUPS)
    lam: float = 1.0
    epochs: int = 500
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    val_fraction: float = 0.2
    patience: Optional[int] = None
    # desk-scale knobs; None means "use everything"
    snippets_per_epoch: Optional[int] = None
    max_val_snippets: Optional[int] = None
    augment_copies: int = 0
    augment_noise_c: float = 0.01
    augment_bias_c: Tuple[float, float] = (-1.8, 1.8)

    def __post_init__(self):
        self.dropout_rates = tuple(float(r) for r in self.dropout_rates)
        self.augment_bias_c = tuple(float(b) for b in self.augment_bias_c)
        self.validate()

    def validate(self):
        div = 2 ** N_GROUPS
        if self.height % div or self.width % div or self.height < div or self.width < div:
            raise ValueError(f"frame size {self.height}x{self.width} must be a positive multiple of {div}")
        if self.p < 1 or self.q < 0:
            raise ValueError(f"need p >= 1 and q >= 0, got p={self.p}, q={self.q}")
        if self.convs_per_group not in (1, 2):
            raise ValueError(f"convs_per_group must be 1 or 2, got {self.convs_per_group}")
        if len(self.dropout_rates) != 2 * N_GROUPS:
            raise ValueError(f"need {2 * N_GROUPS} dropout rates (down groups then up groups)")
        if any(not 0 <= r < 1 for r in self.dropout_rates):
            raise ValueError(f"dropout rates must lie in [0, 1): {self.dropout_rates}")
        if self.base_width < 1 or self.latent_width < 1 or self.batch_size < 1:
            raise ValueError("base_width, latent_width and batch_size must be positive")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    @property
    def out_channels(self) -> int:
        return self.p + self.q

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropout_rates"] = list(self.dropout_rates)
        d["augment_bias_c"] = list(self.augment_bias_c)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


def _he_uniform(rng, shape, fan_in) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class EncoderDecoderModel:
    """Four down-sampling groups, two fully connected layers, four
    up-sampling groups and a linear 3x3 output convolution."""

    def __init__(self, config: ArchitectureConfig):
        self.config = config
        self.params: Dict[str, Parameter] = {}
        self.bn: Dict[str, BatchNormState] = {}
        self.metadata: dict = {}
        self.normalization: Optional[NormalizationSpec] = None

    # -- construction ----------------------------------------------------

    def _conv(self, rng, name, c_in, c_out):
        self.params[f"{name}.w"] = Parameter(_he_uniform(rng, (c_out, c_in, 3, 3), c_in * 9), name=f"{name}.w")
        self.params[f"{name}.b"] = Parameter(np.zeros(c_out, np.float32), name=f"{name}.b")

    def _dense(self, rng, name, n_in, n_out):
        self.params[f"{name}.w"] = Parameter(_he_uniform(rng, (n_out, n_in), n_in), name=f"{name}.w")
        self.params[f"{name}.b"] = Parameter(np.zeros(n_out, np.float32), name=f"{name}.b")

    def _bn(self, name, c):
        self.params[f"{name}.gamma"] = Parameter(np.ones(c, np.float32), name=f"{name}.gamma")
        self.params[f"{name}.beta"] = Parameter(np.zeros(c, np.float32), name=f"{name}.beta")
        self.bn[name] = BatchNormState.initialized(c)

    def _build(self, rng):
        cfg = self.config
        c = cfg.p
        for g in range(N_GROUPS):
            width = cfg.base_width * 2 ** g
            for k in range(cfg.convs_per_group):
                self._conv(rng, f"down{g}.conv{k}", c, width)
                c = width
            self._bn(f"down{g}.bn", c)
        self.bottleneck = (c, cfg.height // 2 ** N_GROUPS, cfg.width // 2 ** N_GROUPS)
        flat = int(np.prod(self.bottleneck))
        self._dense(rng, "fc0", flat, cfg.latent_width)
        self._dense(rng, "fc1", cfg.latent_width, flat)
        for g in range(N_GROUPS):
            width = c // 2
            for k in range(cfg.convs_per_group):
                self._conv(rng, f"up{g}.conv{k}", c, width)
                c = width
            self._bn(f"up{g}.bn", c)
        self._conv(rng, "out", c, cfg.out_channels)

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    # -- forward ---------------------------------------------------------

    def forward(self, x: Tensor, mode: str = "infer", rng: Optional[np.random.Generator] = None,
                return_latent: bool = False):
        cfg, P = self.config, self.params
        if x.data.ndim != 4 or x.shape[1:] != (cfg.p, cfg.height, cfg.width):
            raise ValueError(f"model expects input (N, {cfg.p}, {cfg.height}, {cfg.width}), got {x.shape}")
        h = x
        for g in range(N_GROUPS):
            for k in range(cfg.convs_per_group):
                h = ops.relu(ops.conv2d(h, P[f"down{g}.conv{k}.w"], P[f"down{g}.conv{k}.b"]))
            h = ops.maxpool2d(h)
            h = ops.batchnorm(h, P[f"down{g}.bn.gamma"], P[f"down{g}.bn.beta"], self.bn[f"down{g}.bn"], mode)
            h = ops.dropout(h, cfg.dropout_rates[g], mode, rng)
        n = x.shape[0]
        h = ops.reshape(h, (n, -1))
        latent = ops.relu(ops.dense(h, P["fc0.w"], P["fc0.b"]))
        h = ops.relu(ops.dense(latent, P["fc1.w"], P["fc1.b"]))
        h = ops.reshape(h, (n,) + self.bottleneck)
        for g in range(N_GROUPS):
            for k in range(cfg.convs_per_group):
                h = ops.relu(ops.conv2d(h, P[f"up{g}.conv{k}.w"], P[f"up{g}.conv{k}.b"]))
            h = ops.upsample2d(h)
            h = ops.batchnorm(h, P[f"up{g}.bn.gamma"], P[f"up{g}.bn.beta"], self.bn[f"up{g}.bn"], mode)
            h = ops.dropout(h, cfg.dropout_rates[N_GROUPS + g], mode, rng)
        out = ops.conv2d(h, P["out.w"], P["out.b"])
        return (out, latent) if return_latent else out

    def _infer(self, inputs: np.ndarray, batch_size: int, latent: bool) -> np.ndarray:
        x = np.asarray(inputs, dtype=np.float32)
        single = x.ndim == 3
        if single:
            x = x[None]
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.p, cfg.height, cfg.width):
            raise ValueError(f"expected input (p={cfg.p}, {cfg.height}, {cfg.width}) per snippet, got {np.shape(inputs)}")
        chunks = []
        for s in range(0, x.shape[0], batch_size):
            out, z = self.forward(Tensor(x[s:s + batch_size]), mode="infer", return_latent=True)
            chunks.append((z if latent else out).data)
        res = np.concatenate(chunks, axis=0) if chunks else np.empty((0,), np.float32)
        return res[0] if single else res

    def predict(self, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Map ``(K, p, m, n)`` (or one ``(p, m, n)``) inputs to ``(K, p+q, m, n)`` outputs."""
        return self._infer(inputs, batch_size, latent=False)

    def encode(self, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Bottleneck activations, ``(K, latent_width)``."""
        return self._infer(inputs, batch_size, latent=True)


def build_model(config: ArchitectureConfig, rng: Optional[np.random.Generator] = None) -> EncoderDecoderModel:
    config.validate()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    model = EncoderDecoderModel(config)
    model._build(rng)
    return model


def composite_loss(target, pred, lam: float, p: int):
    """Squared-norm composite objective ``e_rec + lam * e_reg``.

    ``e_rec`` sums squared Frobenius errors over the first ``p`` frames and
    ``e_reg`` over all frames. Inputs are ``(p+q, m, n)`` for one snippet or
    ``(N, p+q, m, n)`` for a batch, in which case the loss is averaged over
    snippets. Tensors give a differentiable Tensor; arrays give a float.
    """
    as_tensor = isinstance(pred, Tensor) or isinstance(target, Tensor)
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float32))
    y = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float32))
    if t.shape != y.shape:
        raise ValueError(f"composite_loss: target {t.shape} and prediction {y.shape} differ")
    if t.data.ndim not in (3, 4):
        raise ValueError(f"composite_loss: expected 3-D or 4-D snippets, got {t.shape}")
    batched = t.data.ndim == 4
    channels = t.shape[1] if batched else t.shape[0]
    if not 0 < p <= channels:
        raise ValueError(f"composite_loss: p={p} incompatible with {channels} frames")
    w = np.full(channels, lam, dtype=np.float64)
    w[:p] += 1.0
    if not batched:
        t, y = ops.reshape(t, (1,) + t.shape), ops.reshape(y, (1,) + y.shape)
    loss = ops.channel_weighted_sse(y, t, w)
    loss = ops.scale(loss, 1.0 / t.shape[0])
    if as_tensor:
        return loss
    return float(loss.data)


@dataclass
class TrainingHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    train_count: int = 0
    val_count: int = 0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def split_indices(n: int, val_fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Random disjoint train/validation split of ``range(n)``."""
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _as_snippet_source(snippets):
    if isinstance(snippets, SnippetSet):
        return snippets, snippets.targets
    arr = np.asarray(snippets, dtype=np.float32)
    return arr, lambda idx: arr[np.asarray(idx)]


def evaluate_loss(model: EncoderDecoderModel, targets: np.ndarray, batch_size: int = 256) -> float:
    """Mean composite loss over ``(N, p+q, m, n)`` targets, infer mode."""
    cfg = model.config
    total = 0.0
    for s in range(0, len(targets), batch_size):
        t = targets[s:s + batch_size]
        pred = model.forward(Tensor(t[:, :cfg.p]), mode="infer")
        total += composite_loss(t, pred.data, cfg.lam, cfg.p) * len(t)
    return total / max(len(targets), 1)


def train(model: EncoderDecoderModel, snippets, config: Optional[ArchitectureConfig] = None,
          normalization: Optional[NormalizationSpec] = None, progress=None) -> TrainingHistory:
    """Fit ``model`` on nominal snippet targets (``SnippetSet`` or ``(K, p+q, m, n)`` array).

    A ``val_fraction`` share of snippets is held out at random and scored in
    infer mode after every epoch. Augmentation needs ``normalization`` to
    convert its degree-valued noise and bias.
    """
    cfg = config or model.config
    source, gather = _as_snippet_source(snippets)
    n = len(source)
    if n == 0:
        raise ValueError("train needs at least one snippet")
    if cfg.augment_copies and normalization is None:
        raise ValueError("augmentation needs the normalization spec")
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    split_rng, order_rng, drop_rng, aug_rng = (np.random.default_rng(s) for s in seeds)
    train_idx, val_idx = split_indices(n, cfg.val_fraction, split_rng)
    if len(train_idx) == 0:
        raise ValueError("no training snippets left after the validation split")
    if cfg.max_val_snippets is not None and len(val_idx) > cfg.max_val_snippets:
        val_idx = np.sort(split_rng.choice(val_idx, cfg.max_val_snippets, replace=False))
    val_targets = gather(val_idx) if len(val_idx) else None

    hist = TrainingHistory(train_count=len(train_idx), val_count=len(val_idx))
    params = model.parameters()
    best, since_best = np.inf, 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(train_idx)
        if cfg.snippets_per_epoch is not None:
            order = order[:cfg.snippets_per_epoch]
        targets = gather(np.sort(order))
        targets = targets[order_rng.permutation(len(targets))]
        if cfg.augment_copies:
            targets = augment(targets, normalization, cfg.augment_copies, aug_rng,
                              cfg.augment_noise_c, cfg.augment_bias_c)
            targets = targets[order_rng.permutation(len(targets))]
        total, count = 0.0, 0
        for s in range(0, len(targets), cfg.batch_size):
            batch = targets[s:s + cfg.batch_size]
            zero_grad(params)
            with Tape() as tape:
                pred = model.forward(Tensor(batch[:, :cfg.p]), mode="train", rng=drop_rng)
                loss = composite_loss(Tensor(batch), pred, cfg.lam, cfg.p)
            tape.backward(loss)
            adam_step(params, lr=cfg.learning_rate)
            total += float(loss.data) * len(batch)
            count += len(batch)
        hist.train_loss.append(total / count)
        if val_targets is not None:
            hist.val_loss.append(evaluate_loss(model, val_targets))
        if progress is not None:
            progress(epoch, hist)
        logger.info("epoch %d: train %.5g val %s", epoch + 1, hist.train_loss[-1],
                    f"{hist.val_loss[-1]:.5g}" if hist.val_loss else "-")
        if cfg.patience is not None and hist.val_loss:
            if hist.val_loss[-1] < best:
                best, since_best = hist.val_loss[-1], 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    hist.stopped_early = True
                    break
    model.metadata = {
        "epochs_run": len(hist.train_loss),
        "final_train_loss": hist.train_loss[-1],
        "final_val_loss": hist.val_loss[-1] if hist.val_loss else None,
    }
    if normalization is not None:
        model.normalization = normalization
    return hist


# -- persistence -----------------------------------------------------------

def _arrays(model: EncoderDecoderModel):
    for name, p in model.params.items():
        yield name, "param", p.data
    for name, st in model.bn.items():
        yield f"{name}.running_mean", "bn_mean", st.mean
        yield f"{name}.running_var", "bn_var", st.var


def save_model(model: EncoderDecoderModel, path, extra: Optional[dict] = None) -> dict:
    """Write ``model.json`` and ``weights.bin`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    listing, offset = [], 0
    wpath = out / "weights.bin"
    with open(wpath, "wb") as fh:
        for name, kind, arr in _arrays(model):
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(buf)
            listing.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
            offset += len(buf)
    manifest = {
        "format_version": MODEL_FORMAT_VERSION,
        "architecture": model.config.to_dict(),
        "tensors": listing,
        "weights_file": wpath.name,
        "weights_bytes": offset,
        "weights_sha256": hashlib.sha256(wpath.read_bytes()).hexdigest(),
        "normalization": model.normalization.to_dict() if model.normalization else None,
        "training": model.metadata,
    }
    if extra:
        manifest.update(extra)
    tmp = out / "model.json.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, out / "model.json")
    return manifest


def load_model(path) -> EncoderDecoderModel:
    src = Path(path)
    mpath = src / "model.json"
    if not mpath.is_file():
        raise ModelFileError(f"no model manifest at {mpath}")
    with open(mpath, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFileError(f"unsupported model format_version {manifest.get('format_version')!r}")
    wpath = src / manifest["weights_file"]
    if not wpath.is_file():
        raise ModelFileError(f"weights file {wpath} is missing")
    raw = wpath.read_bytes()
    if hashlib.sha256(raw).hexdigest() != manifest["weights_sha256"]:
        raise ModelFileError(f"{wpath}: checksum mismatch")
    model = build_model(ArchitectureConfig.from_dict(manifest["architecture"]), np.random.default_rng(0))
    expected = {name: arr.shape for name, _, arr in _arrays(model)}
    listed = {t["name"]: tuple(t["shape"]) for t in manifest["tensors"]}
    if listed != expected:
        bad = sorted(set(listed.items()) ^ set(expected.items()))
        raise ModelFileError(f"manifest tensors disagree with the architecture: {bad[:4]}")
    if len(raw) != manifest["weights_bytes"] or len(raw) != sum(int(np.prod(s)) * 4 for s in listed.values()):
        raise ModelFileError(f"{wpath}: size {len(raw)} does not match the tensor listing")
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"]))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=t["offset"]).astype(np.float32).reshape(t["shape"])
        name, kind = t["name"], t["kind"]
        if kind == "param":
            model.params[name].data[...] = arr
        else:
            bn_name = name.rsplit(".", 1)[0]
            if kind == "bn_mean":
                model.bn[bn_name].mean = arr
            else:
                model.bn[bn_name].var = arr
    if manifest.get("normalization"):
        model.normalization = NormalizationSpec.from_dict(manifest["normalization"])
    model.metadata = manifest.get("training", {})
    return model
