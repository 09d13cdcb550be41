"""Command line entry point: ``sintad gen|train|score|eval|report``."""

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .evaluation import EvalReport
from .experiment import (Calibration, calibrate, evaluate_table, grid_csv, line_table, pgm16, read_scores_csv,
                         score_layer, scores_csv, LineTable)
from .model import ModelFileError, build_model, load_model, save_model, train
from .pipeline import NormalizationSpec, SnippetSet, fit_normalization, prepare_frames
from .synth import DatasetError, generate_dataset, layer_ids, layer_info, load_layer, read_manifest, write_manifest

logger = logging.getLogger("sintad")


class StageError(Exception):
    def __init__(self, message: str, path: Optional[Path] = None):
        super().__init__(message)
        self.path = path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _checksums(root: Path, directory: Path) -> Dict[str, str]:
    if not directory.exists():
        return {}
    files = sorted(p for p in directory.rglob("*") if p.is_file() and p.name != "run_manifest.json")
    return {_display(root, p): _sha256(p) for p in files}


def _display(root: Path, path: Path) -> str:
    # inputs from outside the experiment root are keyed by absolute path
    try:
        return str(path.relative_to(root))
    except ValueError:
        return str(path.resolve())


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_output(directory: Path, overwrite: bool):
    if directory.exists() and any(directory.iterdir()):
        if not overwrite:
            raise StageError(f"output directory {directory} is not empty (use --overwrite)", directory)
        for p in sorted(directory.rglob("*"), reverse=True):
            if p.is_file():
                p.unlink()
    directory.mkdir(parents=True, exist_ok=True)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {what}: {path}", path)
    return path


class Stage:
    def __init__(self, name: str, cfg: ExperimentConfig, root: Path, overwrite: bool):
        self.name, self.cfg, self.root, self.overwrite = name, cfg, root, overwrite
        self.t0 = time.perf_counter()

    def dir(self, key: str) -> Path:
        return self.root / getattr(self.cfg.paths, key)

    def finish(self, out_dir: Path, inputs: List[Path]):
        manifest = {
            "stage": self.name,
            "tool_version": __version__,
            "config": self.cfg.to_dict(),
            "inputs": {k: v for d in inputs for k, v in _checksums(self.root, d).items()},
            "outputs": _checksums(self.root, out_dir),
            "timings": {"seconds": round(time.perf_counter() - self.t0, 3)},
        }
        _write_json(out_dir / "run_manifest.json", manifest)
        logger.info("%s finished in %.1fs", self.name, manifest["timings"]["seconds"])


# -- stages -------------------------------------------------------------------

def cmd_gen(stage: Stage):
    cfg = stage.cfg
    out = stage.dir("dataset")
    try:
        generate_dataset(cfg.process, out, cfg.train_layers, cfg.test_deviations, cfg.fault_pattern,
                         overwrite=stage.overwrite)
    except FileExistsError as exc:
        raise StageError(f"output directory {out} is not empty (use --overwrite)", out) from exc
    stage.finish(out, [])


def _prepared(dataset: Path, manifest: dict, spec: Optional[NormalizationSpec], lid: int) -> np.ndarray:
    return prepare_frames(load_layer(dataset, lid, manifest), spec)


def cmd_train(stage: Stage):
    cfg = stage.cfg
    dataset = stage.dir("dataset")
    _require(dataset / "manifest.json", "dataset manifest")
    manifest = read_manifest(dataset)
    out = stage.dir("model")
    _prepare_output(out, stage.overwrite)

    train_ids = layer_ids(manifest, "train")
    if not train_ids:
        raise StageError("dataset has no training layers", dataset)
    raw = [_prepared(dataset, manifest, None, lid) for lid in train_ids]
    spec = fit_normalization(raw)
    manifest["normalization"] = spec.to_dict()
    write_manifest(dataset, manifest)
    frames = [spec.apply(f) for f in raw]
    del raw

    model = build_model(cfg.architecture)
    hist = train(model, SnippetSet(frames, cfg.architecture.p, cfg.architecture.q), normalization=spec)
    save_model(model, out, extra={"dataset_layers": {str(l): layer_info(manifest)[l]["sha256"] for l in train_ids}})
    _write_json(out / "history.json", hist.to_dict())
    stage.finish(out, [dataset])


def _model_and_spec(stage: Stage):
    model_dir = stage.dir("model")
    _require(model_dir / "model.json", "model manifest")
    model = load_model(model_dir)
    if model.normalization is None:
        raise StageError("model carries no normalization spec", model_dir / "model.json")
    return model


def cmd_score(stage: Stage, only_layer: Optional[int] = None):
    cfg = stage.cfg
    dataset = stage.dir("dataset")
    _require(dataset / "manifest.json", "dataset manifest")
    manifest = read_manifest(dataset)
    model = _model_and_spec(stage)
    if manifest.get("normalization") != model.normalization.to_dict():
        raise StageError("dataset normalization does not match the model's; re-run train", dataset / "manifest.json")
    out = stage.dir("scores")
    _prepare_output(out, stage.overwrite)
    det = cfg.detection
    p, q = model.config.p, model.config.q
    info = layer_info(manifest)

    scored = {}
    for lid in layer_ids(manifest):
        if only_layer is not None and lid != only_layer and info[lid]["role"] != "train":
            continue
        frames = _prepared(dataset, manifest, model.normalization, lid)
        scored[lid] = score_layer(model, frames, det, lid, info[lid]["fault_lines"])
        logger.info("scored layer %d", lid)
    if only_layer is not None and only_layer not in scored:
        raise StageError(f"layer {only_layer} not in dataset", dataset / "manifest.json")
    cal = calibrate([scored[l] for l in layer_ids(manifest, "train")], det)
    _write_json(out / "calibration.json", {**cal.to_dict(), "detection": det.to_dict(), "p": p, "q": q})

    for lid, ls in scored.items():
        if only_layer is not None and lid != only_layer:
            continue
        for suffix, baseline in (("", False), ("_baseline", True)):
            table = line_table(ls, cal, det, p, q, baseline=baseline)
            (out / f"layer_{lid}{suffix}.csv").write_text(scores_csv(table), encoding="utf-8")
        grids = {"f_rec": ls.frames.f_rec, "f_reg": ls.frames.f_reg, "baseline": ls.baseline_frames}
        for name, grid in grids.items():
            (out / f"layer_{lid}_{name}.pgm").write_bytes(pgm16(grid))
            (out / f"layer_{lid}_{name}_grid.csv").write_text(grid_csv(grid), encoding="utf-8")
    stage.finish(out, [dataset, stage.dir("model")])


def _table_from_csv(path: Path, labels) -> LineTable:
    c = read_scores_csv(path)
    return LineTable(c["f_rec"], c["f_reg"], c["f_rec_detrended"], c["f_reg_detrended"], c["f_reg_normalized"],
                     c["flag"], c["mask"], tuple(labels))


def _report_dict(rep: EvalReport) -> dict:
    d = rep.to_dict()
    d.pop("extra", None)
    # the leading ROC point sits at threshold +inf, which JSON cannot carry
    d["thresholds"] = [t if np.isfinite(t) else None for t in d["thresholds"]]
    return d


def cmd_eval(stage: Stage):
    dataset = stage.dir("dataset")
    _require(dataset / "manifest.json", "dataset manifest")
    manifest = read_manifest(dataset)
    scores = stage.dir("scores")
    _require(scores / "calibration.json", "calibration file")
    info = layer_info(manifest)
    paths = {}
    for lid in layer_ids(manifest):
        for suffix in ("", "_baseline"):
            paths[(lid, suffix)] = _require(scores / f"layer_{lid}{suffix}.csv", "scores file")
    out = stage.dir("eval")
    _prepare_output(out, stage.overwrite)

    layers, train_fp = [], 0
    for lid in layer_ids(manifest):
        labels = info[lid]["fault_lines"]
        model_table = _table_from_csv(paths[(lid, "")], labels)
        if info[lid]["role"] == "train":
            train_fp += int(np.sum(model_table.flag & model_table.mask))
            continue
        base_table = _table_from_csv(paths[(lid, "_baseline")], labels)
        layers.append({
            "layer_id": lid,
            "power_deviation": info[lid]["power_deviation"],
            "model": _report_dict(evaluate_table(model_table, lid)),
            "baseline": _report_dict(evaluate_table(base_table, lid)),
        })
    _write_json(out / "report.json", {"layers": layers, "training_false_positives": train_fp})
    stage.finish(out, [dataset, scores])


def _fmt(v, digits=3):
    return "-" if v is None else f"{v:.{digits}f}"


def cmd_report(stage: Stage, reports: List[Path]):
    reports = reports or [stage.dir("eval") / "report.json"]
    rows = []
    for path in reports:
        _require(path, "evaluation report")
        with open(path, encoding="utf-8") as fh:
            rep = json.load(fh)
        for layer in rep["layers"]:
            rows.append({
                "layer": layer["layer_id"],
                "deviation": layer["power_deviation"],
                "precision": layer["model"]["precision"],
                "recall": layer["model"]["recall"],
                "auc": layer["model"]["auc"],
                "baseline_auc": layer["baseline"]["auc"],
            })
    out = stage.dir("report")
    _prepare_output(out, stage.overwrite)
    _write_json(out / "summary.json", {"rows": rows})
    lines = ["| layer | deviation | precision | recall | AUC | baseline AUC |",
             "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['layer']} | {r['deviation']} | {_fmt(r['precision'])} | {_fmt(r['recall'])} | "
                     f"{_fmt(r['auc'])} | {_fmt(r['baseline_auc'])} |")
    table = "\n".join(lines) + "\n"
    (out / "summary.md").write_text(table, encoding="utf-8")
    print(table, end="")
    stage.finish(out, [p.parent for p in reports])


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sintad", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "score", "eval", "report"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="experiment config JSON (defaults profile if omitted)")
        sp.add_argument("--out", type=Path, default=Path("experiment"), help="experiment root directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--overwrite", action="store_true", help="replace existing stage outputs")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "score":
            sp.add_argument("--layer", type=int, help="emit scores for this layer only")
        if name == "report":
            sp.add_argument("reports", nargs="*", type=Path, help="report.json files (default: <out>/eval)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        stage = Stage(args.command, cfg, args.out, args.overwrite)
        if args.command == "gen":
            cmd_gen(stage)
        elif args.command == "train":
            cmd_train(stage)
        elif args.command == "score":
            cmd_score(stage, args.layer)
        elif args.command == "eval":
            cmd_eval(stage)
        else:
            cmd_report(stage, args.reports)
    except StageError as exc:
        err = {"error": str(exc), "stage": args.command, "path": str(exc.path) if exc.path else None}
        print(json.dumps(err), file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, DatasetError, ModelFileError) as exc:
        path = getattr(exc, "filename", None)
        err = {"error": f"{type(exc).__name__}: {exc}", "stage": args.command, "path": path}
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
