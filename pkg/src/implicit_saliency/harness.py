"""Batch evaluation: saliency methods x tap layers x blur radii, scored by NSS and CC."""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .errors import DataError, DegenerateMap, InvalidConfig, IoError, NoFixations, SaliencyError
from .imaging import gaussian_blur, save_pgm
from .metrics import cc, nss
from .model import model_digest
from .saliency import METHODS, compute_saliency

CSV_HEADER = ("image", "method", "layer", "blur_radius", "nss", "cc")
DEGENERATE = "degenerate"
DEFAULT_RADII = (0, 1, 2, 3, 4)


class InvariantViolation(SaliencyError):
    """A harness self-check failed (record count or aggregate mismatch)."""


@dataclass(frozen=True)
class EvalRecord:
    image: str
    method: str
    layer: str
    blur_radius: float
    nss: Optional[float]
    cc: Optional[float]

    @property
    def degenerate(self) -> bool:
        return self.nss is None or self.cc is None


@dataclass
class EvalReport:
    records: List[EvalRecord]
    provenance: Dict[str, object] = field(default_factory=dict)
    stability: Dict[str, Dict[str, float]] = field(default_factory=dict)
    aggregates: Dict[Tuple[str, str, float], Dict[str, float]] = None

    def __post_init__(self):
        if self.aggregates is None:
            self.aggregates = aggregate(self.records)

    def verify(self, tol: float = 1e-12):
        """Raise InvariantViolation if stored aggregates disagree with the records."""
        fresh = aggregate(self.records)
        if fresh.keys() != self.aggregates.keys():
            raise InvariantViolation("aggregate groups do not match the records")
        for key, stats in fresh.items():
            for metric in ("nss", "cc"):
                a, b = stats[metric], self.aggregates[key][metric]
                if not (math.isnan(a) and math.isnan(b)) and not abs(a - b) <= tol:
                    raise InvariantViolation(f"stored mean {metric} for {key} is {b}, records give {a}")

    def mean(self, method: str, layer: str, radius: float, metric: str = "nss") -> float:
        return self.aggregates[(method, layer, radius)][metric]


def aggregate(records: Iterable[EvalRecord]) -> Dict[Tuple[str, str, float], Dict[str, float]]:
    """Mean NSS/CC per (method, layer, radius) over non-degenerate values."""
    groups: Dict[Tuple[str, str, float], Dict[str, list]] = {}
    for rec in records:
        g = groups.setdefault((rec.method, rec.layer, rec.blur_radius), {"nss": [], "cc": [], "n": 0})
        g["n"] += 1
        if rec.nss is not None:
            g["nss"].append(rec.nss)
        if rec.cc is not None:
            g["cc"].append(rec.cc)
    out = {}
    for key, g in groups.items():
        out[key] = {
            "nss": float(np.mean(g["nss"])) if g["nss"] else math.nan,
            "cc": float(np.mean(g["cc"])) if g["cc"] else math.nan,
            "count": g["n"],
            "degenerate": g["n"] - min(len(g["nss"]), len(g["cc"])),
        }
    return out


def _score(metric, saliency_map, truth) -> Optional[float]:
    try:
        return metric(saliency_map, truth)
    except (DegenerateMap, NoFixations):
        return None


def map_path(root, method: str, layer: str, radius, image: str) -> Path:
    return Path(root) / method / layer / format_radius(radius) / f"{image}.pgm"


def _evaluate_image(model, rec, methods, tap_layers, blur_radii, maps_dir, options):
    try:
        image = rec.load_image()
        fixations = rec.load_fixations()
        density = rec.load_density()
    except SaliencyError as exc:
        raise DataError(f"{rec.file}: {exc}") from exc
    rows = []
    for radius in blur_radii:
        blurred = gaussian_blur(image, radius)
        for method in methods:
            shared = None
            for layer in tap_layers:
                if method == "gbp":
                    # layer-independent; computed once per radius
                    if shared is None:
                        shared = compute_saliency("gbp", model, blurred)
                    smap = shared
                else:
                    smap = compute_saliency(method, model, blurred, layer, fixations.shape, **options)
                if maps_dir is not None:
                    path = map_path(maps_dir, method, layer, radius, rec.image_id)
                    path.parent.mkdir(parents=True, exist_ok=True)
                    save_pgm(smap.values, path)
                rows.append(
                    EvalRecord(
                        rec.image_id,
                        method,
                        layer,
                        radius,
                        _score(nss, smap.values, fixations),
                        _score(cc, smap.values, density),
                    )
                )
    return rows


def run_eval(
    model,
    dataset,
    methods: Sequence[str] = METHODS,
    tap_layers: Optional[Sequence[str]] = None,
    blur_radii: Sequence[float] = DEFAULT_RADII,
    maps_dir=None,
    workers: int = 1,
    **options,
) -> EvalReport:
    """Score every (image, method, layer, radius) combination.

    Degenerate maps become records with missing scores instead of aborting
    the run. Records are ordered by image, then method, layer and radius in
    the order given, independent of ``workers``.
    """
    if dataset.split != "eval":
        raise DataError(f"evaluation needs an eval split, got {dataset.split!r}")
    methods = list(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise InvalidConfig(f"unknown methods: {', '.join(unknown)}")
    tap_layers = list(tap_layers) if tap_layers is not None else list(model.conv_layers)
    for layer in tap_layers:
        model.layer(layer)
    blur_radii = [float(r) if not float(r).is_integer() else int(r) for r in blur_radii]
    if any(r < 0 for r in blur_radii):
        raise InvalidConfig("blur radii must be >= 0")

    def job(rec):
        return _evaluate_image(model, rec, methods, tap_layers, blur_radii, maps_dir, options)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_image = list(pool.map(job, dataset.records))
    else:
        per_image = [job(rec) for rec in dataset.records]

    order = {
        "method": {m: i for i, m in enumerate(methods)},
        "layer": {l: i for i, l in enumerate(tap_layers)},
        "radius": {r: i for i, r in enumerate(blur_radii)},
    }
    records = []
    for rows in per_image:
        rows.sort(key=lambda r: (order["method"][r.method], order["layer"][r.layer], order["radius"][r.blur_radius]))
        records.extend(rows)
    expected = len(dataset.records) * len(methods) * len(tap_layers) * len(blur_radii)
    if len(records) != expected:
        raise InvariantViolation(f"expected {expected} records, produced {len(records)}")
    provenance = {
        "model_sha256": model_digest(model),
        "dataset_seed": dataset.seed,
        "dataset_split": dataset.split,
        "tool_version": __version__,
    }
    report = EvalReport(records, provenance)
    report.verify()
    return report


def layer_sweep(model, dataset, method: str, **kwargs) -> EvalReport:
    """Radius-0 evaluation at every conv block, plus the across-layer NSS drop."""
    report = run_eval(model, dataset, [method], model.conv_layers, [0], **kwargs)
    means = [report.mean(method, layer, 0) for layer in model.conv_layers]
    best, worst = max(means), min(means)
    report.stability[method] = {
        "nss_drop": best - worst,
        "nss_relative_drop": (best - worst) / best if best > 0 else math.nan,
    }
    return report


def blur_drops(report: EvalReport, high: float = 3, low: float = 0) -> Dict[Tuple[str, str], Dict[str, float]]:
    """Mean NSS/CC lost between radius ``low`` and radius ``high`` per (method, layer)."""
    agg = report.aggregates
    out = {}
    for (method, layer, radius), stats in agg.items():
        if radius != low or (method, layer, high) not in agg:
            continue
        blurred = agg[(method, layer, high)]
        out[(method, layer)] = {
            "nss_drop": stats["nss"] - blurred["nss"],
            "cc_drop": stats["cc"] - blurred["cc"],
        }
    return out


def format_radius(radius) -> str:
    radius = float(radius)
    return str(int(radius)) if radius.is_integer() else repr(radius)


def _format_score(value: Optional[float]) -> str:
    return DEGENERATE if value is None else repr(float(value))


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in report.records:
        writer.writerow(
            (r.image, r.method, r.layer, format_radius(r.blur_radius), _format_score(r.nss), _format_score(r.cc))
        )
    return buf.getvalue()


def write_report_csv(report: EvalReport, path):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(report_to_csv(report))
    except OSError as exc:
        raise IoError(f"cannot write {os.fspath(path)}: {exc.strerror}") from exc


def _parse_score(text: str) -> Optional[float]:
    return None if text == DEGENERATE else float(text)


def read_report_csv(path) -> EvalReport:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {os.fspath(path)}: {exc.strerror}") from exc
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise DataError(f"{path}: header must be {','.join(CSV_HEADER)}")
    records = []
    for row in rows[1:]:
        image, method, layer, radius, n, c = row
        radius = float(radius)
        records.append(
            EvalRecord(image, method, layer, int(radius) if radius.is_integer() else radius, _parse_score(n), _parse_score(c))
        )
    return EvalReport(records)


def summary_lines(report: EvalReport) -> List[str]:
    lines = [f"{'method':<12}{'layer':<8}{'radius':>7}{'NSS':>9}{'CC':>9}{'degenerate':>12}"]
    for (method, layer, radius), s in report.aggregates.items():
        lines.append(
            f"{method:<12}{layer:<8}{format_radius(radius):>7}{s['nss']:>9.4f}{s['cc']:>9.4f}{s['degenerate']:>12d}"
        )
    return lines
