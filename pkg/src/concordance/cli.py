"""Command-line driver for the teacher -> pseudo-label -> student pipeline.

Every stage writes into its own directory under the work directory together
with a ``stage.json`` record: the stage key (a hash of the config section and
the keys of the upstream stages), digests of every output file, the seeds and
the library versions.  A stage whose key is unchanged and whose outputs are
intact is skipped.  A stage refuses to read an upstream whose files no longer
match their recorded digests, or which was built from a different upstream
than the one now on disk.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import platform
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence as Seq

import numpy as np

from concordance import __version__
from concordance import config as C
from concordance.concord import (
    PseudoDataset,
    PseudoLabels,
    Sample,
    TeacherOutput,
    assemble_dataset,
    fuse_scan,
    fused_record,
    prediction_record,
    read_jsonl,
    record_to_pseudolabels,
    record_to_teacher_output,
    select,
    write_jsonl,
)
from concordance.detfuse import (
    box_from_dict,
    box_to_dict,
    detection_record,
    fused_detection_record,
    pseudo_label_frame,
)
from concordance.errors import ConcordanceError, ConfigError, DataError, MalformedFile, StaleInput
from concordance.evalkit import (
    average_precision_frames,
    compare_runs,
    dumps_report,
    miou,
    render_comparison,
    render_report,
)
from concordance.featnet import PointBatch, TrainConfig, init_model, load_model, predict, save_model, train
from concordance.pipeline import NeighborhoodCache, benchmark_report, evaluate, fit_student, split_labeled
from concordance.seqcloud import Sequence, load_kitti_sequence, write_kitti_sequence
from concordance.synthlab import CLASS_NAMES, generate_dataset, synth_teacher_detect, synth_teacher_predict

log = logging.getLogger("concordance")

MANIFEST_SCHEMA = "concordance.manifest/1"
STAGE_SCHEMA = "concordance.stage/1"
SWEEP_SCHEMA = "concordance.sweep/1"

DATA, TEACH, FUSE_SEG, FUSE_DET, SELECT, TRAIN, EVAL, SWEEP = (
    "data", "teach", "fuse_seg", "fuse_det", "select", "train", "eval", "sweep"
)


# --- content-addressed work directory ------------------------------------


def _digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _digest_file(path: Path) -> str:
    return _digest_bytes(path.read_bytes())


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def versions() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__, "concordance": __version__}


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def record(self, stage: str) -> Optional[dict]:
        p = self.dir(stage) / "stage.json"
        if not p.is_file():
            return None
        try:
            return json.loads(p.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise MalformedFile(f"{p}: {exc}") from None

    def _intact(self, stage: str, rec: Mapping) -> bool:
        d = self.dir(stage)
        for rel, digest in rec["outputs"].items():
            p = d / rel
            if not p.is_file() or _digest_file(p) != digest:
                return False
        return True

    def require(self, stage: str) -> dict:
        """Record of an upstream stage after checking it is complete and current."""
        rec = self.record(stage)
        if rec is None:
            raise DataError(f"stage {stage!r} has not been run in {self.root}")
        if not self._intact(stage, rec):
            raise StaleInput(f"outputs of stage {stage!r} changed since it ran; re-run it")
        for up, key in rec["inputs"].items():
            cur = self.record(up)
            if cur is None or cur["key"] != key:
                raise StaleInput(f"stage {stage!r} was built from an older {up!r}; re-run {stage!r}")
        return rec

    def run(
        self,
        stage: str,
        settings: Mapping,
        inputs: Seq[str],
        body: Callable[[Path], None],
        seed: Optional[int] = None,
        force: bool = False,
    ) -> dict:
        ups = {u: self.require(u)["key"] for u in inputs}
        key = _digest_bytes(_canonical({"stage": stage, "settings": settings, "inputs": ups}))
        old = self.record(stage)
        if not force and old is not None and old["key"] == key and self._intact(stage, old):
            log.info("%s: up to date (%s)", stage, key[:12])
            return old
        d = self.dir(stage)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        body(d)
        outputs = {
            p.relative_to(d).as_posix(): _digest_file(p) for p in sorted(d.rglob("*")) if p.is_file()
        }
        rec = {
            "schema": STAGE_SCHEMA,
            "stage": stage,
            "key": key,
            "inputs": ups,
            "settings": settings,
            "seed": seed,
            "versions": versions(),
            "outputs": outputs,
        }
        (d / "stage.json").write_text(json.dumps(rec, sort_keys=True, indent=2) + "\n")
        log.info("%s: wrote %d files (%s)", stage, len(outputs), key[:12])
        return rec


# --- dataset on disk ------------------------------------------------------


def _write_sequence(seq: Sequence, root: Path) -> None:
    write_kitti_sequence(seq, root)
    if seq.box_labels is not None:
        (root / "boxes.json").write_text(json.dumps([box_to_dict(b) for b in seq.box_labels], sort_keys=True) + "\n")


class Dataset:
    """The synth stage's manifest plus lazily loaded sequences."""

    def __init__(self, ws: Workspace):
        self.root = ws.dir(DATA)
        path = self.root / "manifest.json"
        try:
            self.manifest = json.loads(path.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise MalformedFile(f"{path}: {exc}") from None
        if self.manifest.get("schema") != MANIFEST_SCHEMA:
            raise MalformedFile(f"{path}: unsupported manifest schema {self.manifest.get('schema')!r}")
        self._cache: dict[str, Sequence] = {}

    @property
    def num_classes(self) -> int:
        return int(self.manifest["num_classes"])

    def ids(self, split: str) -> list[str]:
        return list(self.manifest["splits"][split])

    def load(self, sid: str) -> Sequence:
        seq = self._cache.get(sid)
        if seq is None:
            entry = self.manifest["sequences"][sid]
            d = self.root / entry["path"]
            seq = load_kitti_sequence(d, entry["center"], entry["N"], sid)
            boxes = d / "boxes.json"
            if boxes.is_file():
                try:
                    entries = json.loads(boxes.read_text())
                except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                    raise MalformedFile(f"{boxes}: {exc}") from None
                seq = dataclasses.replace(seq, box_labels=tuple(box_from_dict(b, box_index=i) for i, b in enumerate(entries)))
            self._cache[sid] = seq
        return seq

    def split(self, split: str) -> list[Sequence]:
        return [self.load(s) for s in self.ids(split)]


# --- stages ---------------------------------------------------------------


def stage_synth(cfg: Mapping, ws: Workspace, force: bool = False) -> dict:
    settings = {"seed": cfg["seed"], "data": cfg["data"]}

    def body(d: Path) -> None:
        world = C.world_config(cfg)
        dcfg = cfg["data"]
        train_seqs = generate_dataset(world, dcfg["num_sequences"], prefix="train")
        test_seqs = generate_dataset(dataclasses.replace(world, seed=world.seed + 10_000), dcfg["num_test"], prefix="test")
        labeled, unlabeled = split_labeled(train_seqs, dcfg["labeled_fraction"])
        entries = {}
        for seq in train_seqs + test_seqs:
            _write_sequence(seq, d / seq.sequence_id)
            entries[seq.sequence_id] = {"path": seq.sequence_id, "center": seq.reference_index, "N": seq.reference_index}
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "seed": cfg["seed"],
            "num_classes": world.num_classes,
            "class_names": list(CLASS_NAMES),
            "labeled_fraction": dcfg["labeled_fraction"],
            "splits": {
                "labeled": [s.sequence_id for s in labeled],
                "unlabeled": [s.sequence_id for s in unlabeled],
                "test": [s.sequence_id for s in test_seqs],
            },
            "sequences": entries,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")

    return ws.run(DATA, settings, [], body, seed=cfg["seed"], force=force)


def _synthetic_predictions(args) -> tuple[list[dict], list[dict]]:
    specs, seq = args
    preds = [prediction_record(seq.sequence_id, seq.reference.frame_index, synth_teacher_predict(t, seq)) for t in specs]
    dets = []
    if seq.box_labels is not None:
        for i, t in enumerate(specs):
            dets.append(detection_record(seq.sequence_id, t.name, synth_teacher_detect(t, seq, teacher_id=i)))
    return preds, dets


def _map(fn, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _train_teacher(spec, labeled: list[Sequence], num_classes: int, tcfg: Mapping, student: Mapping) -> object:
    n = spec.temporal_range
    model = init_model(
        n, n, num_classes, spec.seed, tuple(tcfg["hidden"]), tcfg["width"],
        C.student_config({"student": student, "seed": spec.seed}).radius, student["time_scale"], tcfg["max_neighbors"],
    )
    cache = NeighborhoodCache(model)
    parts = [
        PointBatch.from_neighborhoods(cache.get(s), s.reference.semantic_labels, None, model.time_scale) for s in labeled
    ]
    tc = TrainConfig(learning_rate=tcfg["learning_rate"], epochs=tcfg["epochs"], seed=spec.seed, schedule="cosine")
    model, _ = train(model, PointBatch.concat(parts), tc)
    return model


def stage_teach(cfg: Mapping, ws: Workspace, force: bool = False) -> dict:
    tcfg = cfg["teachers"]
    settings = {"seed": cfg["seed"], "teachers": tcfg}
    if tcfg["kind"] == "trained":
        settings["student"] = cfg["student"]

    def body(d: Path) -> None:
        ds = Dataset(ws)
        unlabeled = ds.split("unlabeled")
        if not unlabeled:
            raise DataError("the unlabelled split is empty; nothing to pseudo-label")
        specs = C.teacher_specs(cfg)
        if tcfg["kind"] == "synthetic":
            results = _map(_synthetic_predictions, [(specs, s) for s in unlabeled], int(cfg["workers"]))
            write_jsonl(d / "predictions.jsonl", (r for preds, _ in results for r in preds))
            if any(dets for _, dets in results):
                write_jsonl(d / "detections.jsonl", (r for _, dets in results for r in dets))
            return
        labeled = ds.split("labeled")
        if not labeled:
            raise DataError("trained teachers need a non-empty labelled split")
        (d / "models").mkdir()
        models = []
        for spec in specs:
            model = _train_teacher(spec, labeled, ds.num_classes, tcfg["trained"], cfg["student"])
            save_model(model, d / "models" / f"{spec.name}.json")
            models.append((spec, model))
        records = []
        for seq in unlabeled:
            for spec, model in models:
                out = TeacherOutput(spec.name, spec.temporal_range, predict(model, seq))
                records.append(prediction_record(seq.sequence_id, seq.reference.frame_index, out))
        write_jsonl(d / "predictions.jsonl", records)

    return ws.run(TEACH, settings, [DATA], body, seed=cfg["seed"], force=force)


def _grouped(records: list[dict]) -> list[tuple[str, int, list[dict]]]:
    groups: dict[tuple[str, int], list[dict]] = {}
    for r in records:
        groups.setdefault((r["sequence_id"], int(r["frame_index"])), []).append(r)
    return [(sid, fi, rs) for (sid, fi), rs in groups.items()]


def stage_fuse_seg(cfg: Mapping, ws: Workspace, force: bool = False) -> dict:
    settings = {"fusion": cfg["fusion"]}

    def body(d: Path) -> None:
        fusion = C.fusion_config(cfg)
        records = read_jsonl(ws.dir(TEACH) / "predictions.jsonl")
        if not records:
            raise DataError("no teacher predictions to fuse")
        out, n_pts, n_sel, conf = [], 0, 0, 0.0
        for sid, fi, rs in _grouped(records):
            pl = fuse_scan([record_to_teacher_output(r) for r in rs], fusion)
            out.append(fused_record(sid, fi, pl))
            n_pts += len(pl)
            n_sel += int(pl.selected.sum())
            conf += float(pl.confidences.sum())
        write_jsonl(d / "fused.jsonl", out)
        summary = {
            "frames": len(out),
            "points": n_pts,
            "selected_fraction": n_sel / n_pts if n_pts else None,
            "mean_confidence": conf / n_pts if n_pts else None,
        }
        (d / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")

    return ws.run(FUSE_SEG, settings, [TEACH], body, force=force)


def _fused_frames(ws: Workspace, cfg: Mapping) -> list[tuple[str, list]]:
    path = ws.dir(TEACH) / "detections.jsonl"
    if not path.is_file():
        raise DataError("the teach stage produced no detections (box fusion needs synthetic teachers or box predictions)")
    ccfg = C.cluster_config(cfg)
    per_frame: dict[str, list] = {}
    teacher_ids: dict[str, dict[str, int]] = {}
    for rec in read_jsonl(path):
        ids = teacher_ids.setdefault(rec["frame_id"], {})
        tid = ids.setdefault(str(rec["teacher_id"]), len(ids))
        boxes = per_frame.setdefault(rec["frame_id"], [])
        boxes.extend(box_from_dict(b, teacher_id=tid, box_index=i) for i, b in enumerate(rec["boxes"]))
    return [(fid, pseudo_label_frame(boxes, ccfg, keep_deselected=True)) for fid, boxes in per_frame.items()]


def _box_ap(ws: Workspace, frames, theta: float, match_iou: float, interpolation: str) -> Optional[float]:
    ds = Dataset(ws)
    rows = []
    for fid, clusters in frames:
        seq = ds.load(fid)
        if seq.box_labels is None:
            return None
        kept = [c for c in clusters if c.fused.confidence >= theta]
        rows.append(([c.representative for c in kept], list(seq.box_labels), [c.fused.confidence for c in kept]))
    res = average_precision_frames(rows, match_iou, interpolation)
    return None if np.isnan(res.ap) else res.ap


def stage_fuse_det(cfg: Mapping, ws: Workspace, force: bool = False) -> dict:
    settings = {"fusion": cfg["fusion"], "cluster": cfg["cluster"], "eval": cfg["eval"]}

    def body(d: Path) -> None:
        frames = _fused_frames(ws, cfg)
        theta = cfg["fusion"]["theta"]
        write_jsonl(d / "fused.jsonl", (fused_detection_record(fid, [c for c in cl if c.fused.selected]) for fid, cl in frames))
        ev = cfg["eval"]
        metrics = {
            "frames": len(frames),
            "clusters": sum(len(cl) for _, cl in frames),
            "selected": sum(1 for _, cl in frames for c in cl if c.fused.selected),
            "theta": theta,
            "ap": _box_ap(ws, frames, theta, ev["match_iou"], ev["interpolation"]),
        }
        (d / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")

    return ws.run(FUSE_DET, settings, [TEACH, DATA], body, force=force)


def _write_dataset(path: Path, dataset: PseudoDataset) -> None:
    write_jsonl(
        path,
        (
            {
                "sequence_id": s.sequence_id,
                "provenance": s.provenance,
                "labels": s.labels.tolist(),
                "confidences": s.confidences.tolist(),
                "mask": s.mask.tolist(),
            }
            for s in dataset
        ),
    )


def _read_dataset(path: Path) -> PseudoDataset:
    samples = []
    for r in read_jsonl(path):
        samples.append(
            Sample(
                r["sequence_id"],
                np.asarray(r["labels"], dtype=np.int64),
                np.asarray(r["confidences"], dtype=np.float64),
                np.asarray(r["mask"], dtype=bool),
                r["provenance"],
            )
        )
    return PseudoDataset(tuple(samples))


def _pseudo_from_fused(ws: Workspace) -> dict[str, PseudoLabels]:
    return {r["sequence_id"]: record_to_pseudolabels(r) for r in read_jsonl(ws.dir(FUSE_SEG) / "fused.jsonl")}


def _labeled_gt(ds: Dataset) -> dict[str, np.ndarray]:
    return {s.sequence_id: s.reference.semantic_labels for s in ds.split("labeled")}


def _pseudo_stats(pseudo: Mapping[str, PseudoLabels], ds: Dataset) -> dict:
    n = sum(len(p) for p in pseudo.values())
    sel = sum(int(p.selected.sum()) for p in pseudo.values())
    correct = 0
    for sid, p in pseudo.items():
        gt = ds.load(sid).reference.semantic_labels
        if gt is None:
            correct = None
            break
        correct += int(np.sum(p.labels[p.selected] == gt[p.selected]))
    return {
        "points": n,
        "selected": sel,
        "selected_fraction": sel / n if n else None,
        "selected_accuracy": (correct / sel) if (sel and correct is not None) else None,
    }


def stage_select(cfg: Mapping, ws: Workspace, force: bool = False) -> dict:
    use_pseudo = bool(cfg["select"]["use_pseudo"])
    theta = cfg["fusion"]["theta"]
    settings = {"theta": theta, "use_pseudo": use_pseudo}

    def body(d: Path) -> None:
        ds = Dataset(ws)
        pseudo = {}
        if use_pseudo:
            pseudo = {sid: select(pl, theta) for sid, pl in _pseudo_from_fused(ws).items()}
        dataset = assemble_dataset(_labeled_gt(ds), pseudo)
        if len(dataset) == 0:
            raise DataError("training set is empty")
        _write_dataset(d / "dataset.jsonl", dataset)
        summary = {"theta": theta, "use_pseudo": use_pseudo, "sequences": len(dataset), "pseudo": _pseudo_stats(pseudo, ds)}
        (d / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")

    inputs = [DATA, FUSE_SEG] if use_pseudo else [DATA]
    return ws.run(SELECT, settings, inputs, body, force=force)


def stage_train(cfg: Mapping, ws: Workspace, force: bool = False) -> dict:
    settings = {"seed": cfg["seed"], "student": cfg["student"], "train": cfg["train"]}

    def body(d: Path) -> None:
        ds = Dataset(ws)
        dataset = _read_dataset(ws.dir(SELECT) / "dataset.jsonl")
        seqs = {s.sequence_id: ds.load(s.sequence_id) for s in dataset}
        model, trace = fit_student(C.student_config(cfg), dataset, seqs, C.train_config(cfg), ds.num_classes)
        save_model(model, d / "model.json")
        (d / "trace.json").write_text(json.dumps({"loss": trace}, indent=2) + "\n")

    return ws.run(TRAIN, settings, [DATA, SELECT], body, seed=cfg["seed"], force=force)


def _test_report(model, ds: Dataset, cache=None, **extra) -> dict:
    test = ds.split("test")
    if not test:
        raise DataError("the test split is empty")
    result = miou(evaluate(model, test, ds.num_classes, cache))
    return benchmark_report(result, test_sequences=len(test), **extra)


def stage_eval(cfg: Mapping, ws: Workspace, force: bool = False) -> dict:
    def body(d: Path) -> None:
        ds = Dataset(ws)
        report = _test_report(load_model(ws.dir(TRAIN) / "model.json"), ds)
        (d / "metrics.json").write_text(dumps_report(report))
        (d / "report.txt").write_text(render_report(report))

    return ws.run(EVAL, {}, [DATA, TRAIN], body, force=force)


def stage_sweep(cfg: Mapping, ws: Workspace, force: bool = False) -> dict:
    settings = {
        "seed": cfg["seed"],
        "thetas": cfg["sweep"]["thetas"],
        "student": cfg["student"],
        "train": cfg["train"],
        "eval": cfg["eval"],
    }

    def body(d: Path) -> None:
        ds = Dataset(ws)
        fused = _pseudo_from_fused(ws)
        labeled = _labeled_gt(ds)
        student = C.student_config(cfg)
        tcfg = C.train_config(cfg)
        cache = NeighborhoodCache(student.init(ds.num_classes))
        seqs = {sid: ds.load(sid) for sid in list(labeled) + list(fused)}
        frames = None
        if (ws.dir(TEACH) / "detections.jsonl").is_file():
            frames = _fused_frames(ws, cfg)
        rows = []
        for theta in cfg["sweep"]["thetas"]:
            pseudo = {sid: select(pl, theta) for sid, pl in fused.items()}
            model, _ = fit_student(student, assemble_dataset(labeled, pseudo), seqs, tcfg, ds.num_classes, cache)
            report = _test_report(model, ds, cache)
            stats = _pseudo_stats(pseudo, ds)
            ap = None
            if frames is not None:
                ap = _box_ap(ws, frames, theta, cfg["eval"]["match_iou"], cfg["eval"]["interpolation"])
            rows.append(
                {
                    "theta": theta,
                    "miou": report["mean"],
                    "selected_fraction": stats["selected_fraction"],
                    "selected_accuracy": stats["selected_accuracy"],
                    "ap": ap,
                }
            )
            log.info("theta=%.3f mIoU=%.4f", theta, report["mean"])
        (d / "curve.json").write_text(json.dumps({"schema": SWEEP_SCHEMA, "rows": rows}, sort_keys=True, indent=2) + "\n")
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["theta"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if v is None else v for k, v in r.items()})
        (d / "curve.csv").write_text(buf.getvalue())

    return ws.run(SWEEP, settings, [DATA, FUSE_SEG], body, seed=cfg["seed"], force=force)


def flatten_report(report: Mapping) -> dict:
    """Flat ``{metric: value}`` view of a metrics report for comparison tables."""
    if "per_class" not in report:
        return dict(report.get("metrics", report))
    flat = {"mIoU": report["mean"]}
    flat.update({f"IoU/{k}": v for k, v in report["per_class"].items()})
    return flat


def compare_reports(paths: Seq[str], names: Optional[Seq[str]] = None) -> dict:
    runs = []
    for p in paths:
        try:
            runs.append({"metrics": flatten_report(json.loads(Path(p).read_text()))})
        except FileNotFoundError:
            raise DataError(f"report {p} does not exist") from None
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise MalformedFile(f"{p}: {exc}") from None
    return compare_runs(runs, list(names) if names else [Path(p).parent.parent.name or p for p in paths])


# --- argument parsing -----------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("-w", "--workdir", default="concordance-run", help="work directory holding all stage outputs")
    p.add_argument("-c", "--config", help=f"JSON config file (default: ${C.ENV_VAR})")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. fusion.theta=0.8 (repeatable)")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--force", action="store_true", help="re-run the stage even if it is up to date")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="concordance", description="Concordance-of-teachers pseudo-labelling pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled dataset")
    p.add_argument("--num-sequences", type=int)
    p.add_argument("--num-test", type=int)
    p.add_argument("--labeled-fraction", type=float)

    p = sub.add_parser("teach", parents=[common], help="run the teachers on the unlabelled split")
    p.add_argument("--mode", choices=["concordance", "ensemble"])
    p.add_argument("--kind", choices=["synthetic", "trained"])
    p.add_argument("--ranges", help="comma-separated temporal ranges, e.g. 1,2,3")
    p.add_argument("--workers", type=int)

    for name, helptext in (("fuse-seg", "fuse per-point teacher outputs"), ("fuse-det", "cluster and fuse teacher boxes")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--lam", type=float)
        p.add_argument("--theta", type=float)

    p = sub.add_parser("select", parents=[common], help="threshold pseudo-labels and assemble the training set")
    p.add_argument("--theta", type=float)
    p.add_argument("--supervised-only", action="store_true", help="train on the labelled split alone")

    sub.add_parser("train", parents=[common], help="train the student")
    sub.add_parser("eval", parents=[common], help="evaluate the student on the test split")

    p = sub.add_parser("compare", help="tabulate metric reports against the first one")
    p.add_argument("reports", nargs="+")
    p.add_argument("--names", help="comma-separated run names")
    p.add_argument("--out", help="write the table as JSON here")
    p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("sweep", parents=[common], help="student mIoU (and box AP) as a function of theta")
    p.add_argument("--thetas", help="comma-separated thresholds")
    return parser


def _overrides(args: argparse.Namespace) -> list[str]:
    out = list(getattr(args, "overrides", []) or [])
    flag_map = {
        "seed": "seed",
        "num_sequences": "data.num_sequences",
        "num_test": "data.num_test",
        "labeled_fraction": "data.labeled_fraction",
        "mode": "teachers.mode",
        "kind": "teachers.kind",
        "workers": "workers",
        "lam": "fusion.lam",
        "theta": "fusion.theta",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            out.append(f"{key}={json.dumps(v)}")
    if getattr(args, "ranges", None):
        out.append(f"teachers.ranges={json.dumps(_int_list(args.ranges))}")
    if getattr(args, "thetas", None):
        out.append(f"sweep.thetas={json.dumps(_float_list(args.thetas))}")
    if getattr(args, "supervised_only", False):
        out.append("select.use_pseudo=false")
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


STAGES = {
    "synth": stage_synth,
    "teach": stage_teach,
    "fuse-seg": stage_fuse_seg,
    "fuse-det": stage_fuse_det,
    "select": stage_select,
    "train": stage_train,
    "eval": stage_eval,
    "sweep": stage_sweep,
}

_SUMMARIES = {
    "fuse-seg": (FUSE_SEG, "summary.json"),
    "fuse-det": (FUSE_DET, "metrics.json"),
    "select": (SELECT, "summary.json"),
    "sweep": (SWEEP, "curve.csv"),
}


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "compare":
        names = [n.strip() for n in args.names.split(",")] if args.names else None
        table = compare_reports(args.reports, names)
        if args.out:
            Path(args.out).write_text(json.dumps(table, sort_keys=True, indent=2) + "\n")
        sys.stdout.write(render_comparison(table))
        return 0
    cfg = C.load_config(args.config, _overrides(args))
    ws = Workspace(args.workdir)
    ws.root.mkdir(parents=True, exist_ok=True)
    (ws.root / "config.json").write_text(C.dumps(cfg))
    STAGES[args.command](cfg, ws, force=args.force)
    if args.command == "eval":
        sys.stdout.write((ws.dir(EVAL) / "report.txt").read_text())
    elif args.command in _SUMMARIES:
        stage, fname = _SUMMARIES[args.command]
        sys.stdout.write((ws.dir(stage) / fname).read_text())
    return 0


def main(argv: Optional[Seq[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConcordanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
