"""ACC / AP, per-subset evaluation reports, robustness sweeps and embedding export."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import Manifest, ReconCache, Reconstructor, Record, family_label, load_images
from .detector import ClassifierModel, InputMode, build_input, extract_features, predict
from .errors import DataError
from .imaging import PerturbSpec, quantize
from .labels import Family


def accuracy(predictions: Sequence[int], truths: Sequence[int]) -> float:
    p, t = np.asarray(predictions), np.asarray(truths)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"predictions and truths must be equal-length 1-D, got {p.shape} and {t.shape}")
    if p.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(p == t))


def average_precision(scores: Sequence[float], positives: Sequence[int | bool]) -> float:
    """Mean of precision@k over the ranks k of the positives.

    Ranking is by descending score; equal scores keep their input order.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positives).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and positives must be equal-length 1-D sequences")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.arange(1, len(hits) + 1)
    precision_at_hit = np.cumsum(hits)[hits] / ranks[hits]
    # cumsum accumulates left to right, so the result does not depend on numpy's pairwise summation
    return float(np.cumsum(precision_at_hit)[-1] / n_pos)


# --------------------------------------------------------------------------- #
# Reports


@dataclass
class ReportRow:
    subset: str
    n: int
    acc: float
    ap: float | None = None


@dataclass
class EvalReport:
    rows: list[ReportRow]
    mean_acc: float
    mean_ap: float | None
    perturbation: str = "none"
    mode: str = ""
    config_digest: str = ""
    extra: dict = field(default_factory=dict)

    def row(self, subset: str) -> ReportRow:
        for r in self.rows:
            if r.subset == subset:
                return r
        raise KeyError(subset)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["rows"] = [ReportRow(**r) for r in d["rows"]]
        return cls(**d)

    def save(self, path: str | Path) -> None:
        write_json(path, self.to_dict())


def write_json(path: str | Path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def report_from_predictions(records: Sequence[Record], probs: np.ndarray,
                            subsets: Sequence[str] | None = None, **meta) -> EvalReport:
    """Build the per-subset table from test records and their class probabilities.

    Rows: ``Real`` (ACC only) then one per synthetic subset. Synthetic AP is
    one-vs-real with the probability of the subset's family as score. Mean ACC
    covers every row including Real; mean AP covers the synthetic rows.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if len(records) == 0:
        raise DataError("no test records to evaluate")
    if probs.shape != (len(records), 3):
        raise ValueError(f"probs must be ({len(records)}, 3), got {probs.shape}")
    pred = np.argmax(probs, axis=1)
    truth = np.array([int(r.family) for r in records])
    names = np.array([r.subset for r in records])
    real_mask = names == "Real"
    if not real_mask.any():
        raise DataError("test records contain no real images")
    present = sorted({n for n in names if n != "Real"})
    if subsets is None:
        subsets = present
    else:
        subsets = [s for s in subsets if s in present]
    if not subsets:
        raise DataError("test records contain no synthetic subset")

    rows = [ReportRow("Real", int(real_mask.sum()), accuracy(pred[real_mask], truth[real_mask]))]
    for name in subsets:
        mask = names == name
        fam = int(family_label(name))
        ap_mask = mask | real_mask
        ap = average_precision(probs[ap_mask, fam], mask[ap_mask])
        rows.append(ReportRow(name, int(mask.sum()), accuracy(pred[mask], truth[mask]), ap))
    aps = [r.ap for r in rows if r.ap is not None]
    return EvalReport(rows, float(np.mean([r.acc for r in rows])), float(np.mean(aps)) if aps else None, **meta)


def _test_inputs(manifest: Manifest, records: list[Record], mode: InputMode, size: int,
                 cache: ReconCache | None = None, recon: Reconstructor | None = None,
                 perturb: PerturbSpec | None = None) -> np.ndarray:
    x = load_images(manifest, records, size)
    if perturb is not None:
        x = np.stack([quantize(perturb.apply(im)) for im in x])
    if cache is not None and perturb is None:
        x_rg, x_rd = cache.load(records, size)
    elif recon is not None:
        x_rg, x_rd = recon(x)
    else:
        raise ValueError("need a reconstruction cache or a reconstructor")
    return build_input(x, x_rg, x_rd, mode)


def per_subset_report(model: ClassifierModel, manifest: Manifest, mode: InputMode | str, size: int,
                      cache: ReconCache | None = None, recon: Reconstructor | None = None,
                      subsets: Sequence[str] | None = None, perturb: PerturbSpec | None = None,
                      records: list[Record] | None = None, **meta) -> EvalReport:
    mode = InputMode(mode)
    records = manifest.split("test") if records is None else records
    if not records:
        raise DataError("manifest has an empty test split")
    inputs = _test_inputs(manifest, records, mode, size, cache, recon, perturb)
    probs, _ = predict(model, inputs)
    tag = perturb.tag if perturb is not None else "none"
    return report_from_predictions(records, probs, subsets, perturbation=tag, mode=mode.value, **meta)


def subsample_test(manifest: Manifest, max_per_subset: int | None) -> list[Record]:
    """First ``max_per_subset`` test records of each subset, in path order."""
    recs = sorted(manifest.split("test"), key=lambda r: r.path)
    if max_per_subset is None:
        return recs
    taken: dict[str, int] = {}
    out = []
    for r in recs:
        if taken.get(r.subset, 0) < max_per_subset:
            out.append(r)
            taken[r.subset] = taken.get(r.subset, 0) + 1
    return out


def robustness_sweep(model: ClassifierModel, manifest: Manifest, grid: Sequence[PerturbSpec],
                     mode: InputMode | str, size: int, recon: Reconstructor,
                     cache: ReconCache | None = None, subsets: Sequence[str] | None = None,
                     max_per_subset: int | None = None, **meta) -> list[EvalReport]:
    """Baseline report followed by one report per grid point.

    Each perturbation hits the input image before inversion, and the perturbed
    image is snapped to 8 bits as if it had been saved. The baseline reads the
    reconstruction cache when given, otherwise reconstructs afresh.
    """
    records = subsample_test(manifest, max_per_subset)
    common = dict(size=size, recon=recon, subsets=subsets, records=records, **meta)
    reports = [per_subset_report(model, manifest, mode, cache=cache, **common)]
    for spec in grid:
        reports.append(per_subset_report(model, manifest, mode, perturb=spec, **common))
    return reports


def export_embeddings(model: ClassifierModel, manifest: Manifest, mode: InputMode | str, size: int,
                      path: str | Path, cache: ReconCache | None = None,
                      recon: Reconstructor | None = None) -> int:
    """Write one JSON line per test sample: id, true/predicted family, feature vector."""
    mode = InputMode(mode)
    records = sorted(manifest.split("test"), key=lambda r: r.path)
    if not records:
        raise DataError("manifest has an empty test split")
    inputs = _test_inputs(manifest, records, mode, size, cache, recon)
    _, pred = predict(model, inputs)
    feats = extract_features(model, inputs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r, p, v in zip(records, pred, feats):
            rec = {"id": r.path, "true": r.family.name, "pred": Family(int(p)).name,
                   "vector": [float(x) for x in v]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return len(records)


def _pct(x: float | None) -> str:
    return "-" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100 * x:.1f}"


def render_table(reports: dict[str, EvalReport]) -> str:
    """Fixed-width table in the per-subset layout: Real ACC, then ACC/AP per subset, then Avg."""
    if not reports:
        return ""
    first = next(iter(reports.values()))
    subsets = [r.subset for r in first.rows]
    header1 = ["Method", "Real"] + [s for s in subsets[1:] for _ in (0, 1)] + ["Avg", "Avg"]
    header2 = ["", "ACC"] + ["ACC", "AP"] * (len(subsets) - 1) + ["ACC", "AP"]
    body = []
    for label, rep in reports.items():
        cells = [label, _pct(rep.row("Real").acc)]
        for s in subsets[1:]:
            row = rep.row(s)
            cells += [_pct(row.acc), _pct(row.ap)]
        cells += [_pct(rep.mean_acc), _pct(rep.mean_ap)]
        body.append(cells)
    table = [header1, header2] + body
    widths = [max(len(r[i]) for r in table) for i in range(len(header1))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in table]
    lines.insert(2, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"
