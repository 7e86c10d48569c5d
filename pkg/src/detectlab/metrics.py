"""Detection metrics: greedy matching, all-point AP, mAP@0.5 and mAP@0.5:0.95.

Detections and ground truths share one record type; ground truths simply
carry no confidence.
"""
from __future__ import annotations

import json
from fractions import Fraction
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .bbox_loss import BBox, geometry

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
CLASS_NAMES = {0: "Normal", 1: "Self-explosion", 2: "Partial damage"}


@dataclass
class Detection:
    image: str
    bbox: BBox
    cls: int
    conf: float | None = None

    def __post_init__(self):
        if self.conf is not None and not 0.0 <= self.conf <= 1.0:
            raise ValueError(f"confidence {self.conf} outside [0, 1]")

    def to_json(self) -> dict:
        d = {"image": self.image, "class": int(self.cls), "cx": float(self.bbox.cx), "cy": float(self.bbox.cy),
             "w": float(self.bbox.w), "h": float(self.bbox.h)}
        if self.conf is not None:
            d["conf"] = float(self.conf)
        return d

    @classmethod
    def from_json(cls, d: dict) -> Detection:
        return cls(str(d["image"]), BBox(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"])),
                   int(d["class"]), None if d.get("conf") is None else float(d["conf"]))


def read_jsonl(path) -> list[Detection]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(Detection.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: bad record: {e}") from e
    return out


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def _rank(dets: list[Detection]) -> list[int]:
    # confidence descending, then smaller box first, then input order
    return sorted(range(len(dets)), key=lambda i: (-dets[i].conf, dets[i].bbox.area, i))


def match_detections(dets: list[Detection], gts: list[Detection], iou_thresh: float) -> list[bool]:
    """TP flag per detection (aligned with ``dets``).

    Each detection, in rank order, takes the unmatched same-class GT of the
    same image with the highest IoU, provided IoU >= iou_thresh.
    """
    by_key = defaultdict(list)
    for gi, g in enumerate(gts):
        by_key[(g.image, g.cls)].append(gi)
    used = set()
    flags = [False] * len(dets)
    for di in _rank(dets):
        d = dets[di]
        best, best_iou = None, -1.0
        for gi in by_key.get((d.image, d.cls), ()):
            if gi in used:
                continue
            v = geometry(d.bbox, gts[gi].bbox).iou
            if v > best_iou:
                best, best_iou = gi, v
        if best is not None and best_iou >= iou_thresh:
            used.add(best)
            flags[di] = True
    return flags


def _curve(flags, confidences):
    order = np.argsort(-np.asarray(confidences, dtype=np.float64), kind="stable")
    f = np.asarray(flags, dtype=bool)[order]
    tp = np.cumsum(f)
    fp = np.cumsum(~f)
    return f, tp, fp


def average_precision_exact(flags, confidences, num_gt: int) -> Fraction | None:
    """Area under the precision envelope as an exact rational; None when there is nothing to score.

    ``flags``/``confidences`` with equal confidences must already be in rank
    order (the sort is stable).
    """
    if num_gt < 0:
        raise ValueError("num_gt must be non-negative")
    if num_gt == 0:
        return Fraction(0) if len(flags) else None
    if len(flags) == 0:
        return Fraction(0)
    f, tp, fp = _curve(flags, confidences)
    prec = [Fraction(int(t), int(t + q)) for t, q in zip(tp, fp)]
    env = prec[:]
    for k in range(len(env) - 2, -1, -1):
        env[k] = max(env[k], env[k + 1])
    return sum((env[k] for k in np.flatnonzero(f)), Fraction(0)) / num_gt


def average_precision(flags, confidences, num_gt: int) -> float | None:
    ap = average_precision_exact(flags, confidences, num_gt)
    return None if ap is None else float(ap)


@dataclass
class ThresholdStats:
    ap: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    conf_threshold: float
    ap_exact: Fraction = field(default=Fraction(0), repr=False, compare=False)


@dataclass
class ClassResult:
    cls: int
    num_gt: int
    num_det: int
    per_threshold: dict[float, ThresholdStats] = field(default_factory=dict)

    @property
    def _first(self) -> ThresholdStats:
        return next(iter(self.per_threshold.values()))

    @property
    def ap50(self) -> float:
        return self._first.ap

    @property
    def ap5095(self) -> float:
        return float(np.mean([s.ap for s in self.per_threshold.values()]))

    @property
    def precision(self) -> float:
        return self._first.precision

    @property
    def recall(self) -> float:
        return self._first.recall


@dataclass
class EvalResult:
    per_class: dict[int, ClassResult]
    thresholds: tuple[float, ...]
    map50: float
    map5095: float
    precision: float
    recall: float

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "all": {"labels": sum(c.num_gt for c in self.per_class.values()), "precision": self.precision,
                    "recall": self.recall, "map50": self.map50, "map5095": self.map5095},
            "classes": {
                str(c.cls): {
                    "labels": c.num_gt, "detections": c.num_det,
                    "precision": c.precision, "recall": c.recall, "map50": c.ap50, "map5095": c.ap5095,
                    "per_threshold": {f"{t:.2f}": {k: v for k, v in vars(s).items() if k != "ap_exact"}
                                  for t, s in c.per_threshold.items()},
                } for c in self.per_class.values()
            },
        }

    def table(self, names: dict[int, str] | None = None) -> str:
        names = names or CLASS_NAMES
        rows = [("Type", "Labels", "Precision(%)", "Recall(%)", "mAP0.5(%)", "mAP0.5:0.95(%)")]
        total = sum(c.num_gt for c in self.per_class.values())
        rows.append(("All", str(total), f"{100 * self.precision:.1f}", f"{100 * self.recall:.1f}",
                     f"{100 * self.map50:.1f}", f"{100 * self.map5095:.1f}"))
        for c in sorted(self.per_class.values(), key=lambda c: c.cls):
            rows.append((names.get(c.cls, str(c.cls)), str(c.num_gt), f"{100 * c.precision:.1f}",
                         f"{100 * c.recall:.1f}", f"{100 * c.ap50:.1f}", f"{100 * c.ap5095:.1f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(r, widths)))
                         for r in rows)


def _best_f1(flags, confidences, num_gt) -> tuple[float, float, int, int, float]:
    if len(flags) == 0 or num_gt == 0:
        return 0.0, 0.0, 0, len(flags), 1.0
    f, tp, fp = _curve(flags, confidences)
    conf_sorted = np.sort(np.asarray(confidences, dtype=np.float64))[::-1]
    prec = tp / (tp + fp)
    rec = tp / num_gt
    f1 = np.where(prec + rec > 0, 2 * prec * rec / np.maximum(prec + rec, 1e-300), 0.0)
    k = int(np.argmax(f1))
    return float(prec[k]), float(rec[k]), int(tp[k]), int(fp[k]), float(conf_sorted[k])


def evaluate(dets: list[Detection], gts: list[Detection], thresholds=IOU_THRESHOLDS) -> EvalResult:
    """Per-class AP at every IoU threshold plus the aggregate "All" row.

    The aggregate averages over classes that have ground truth. Precision and
    recall are read at the confidence that maximises F1 for that threshold.
    """
    thresholds = tuple(thresholds)
    for d in dets:
        if d.conf is None:
            raise ValueError(f"detection on {d.image} has no confidence")
    classes = sorted({g.cls for g in gts} | {d.cls for d in dets})
    per_class: dict[int, ClassResult] = {}
    for c in classes:
        cd = [d for d in dets if d.cls == c]
        cg = [g for g in gts if g.cls == c]
        # pre-rank so equal confidences follow the matching tie rule
        cd = [cd[i] for i in _rank(cd)]
        confs = [d.conf for d in cd]
        res = ClassResult(c, len(cg), len(cd))
        for t in thresholds:
            flags = match_detections(cd, cg, t)
            ap = average_precision_exact(flags, confs, len(cg)) or Fraction(0)
            p, r, tp, fp, conf_t = _best_f1(flags, confs, len(cg))
            res.per_threshold[t] = ThresholdStats(float(ap), p, r, tp, fp, len(cg) - tp, conf_t, ap)
        per_class[c] = res
    scored = [per_class[c] for c in classes if per_class[c].num_gt > 0]
    if scored:
        # exact rationals until the end, so the aggregate is correctly rounded
        map50 = float(sum((c.per_threshold[thresholds[0]].ap_exact for c in scored), Fraction(0)) / len(scored))
        map5095 = float(sum((s.ap_exact for c in scored for s in c.per_threshold.values()), Fraction(0))
                        / (len(scored) * len(thresholds)))
        prec = float(np.mean([c.per_threshold[thresholds[0]].precision for c in scored]))
        rec = float(np.mean([c.per_threshold[thresholds[0]].recall for c in scored]))
    else:
        map50 = map5095 = prec = rec = 0.0
    return EvalResult(per_class, thresholds, map50, map5095, prec, rec)
