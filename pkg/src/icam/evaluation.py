"""Gap reports against exact, stored or heuristic reference objectives."""

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, SizeError
from .instances import TSP
from .oracles import MAX_EXACT_CVRP, MAX_EXACT_TSP, exact_cvrp, exact_tsp, gap, nn_2opt
from .rollout import MODE_LABELS, rollout_many, solve_augmented

REPORT_FIELDS = ["id", "method", "objective", "reference", "ref_source", "gap", "seconds"]


@dataclass
class GapReport:
    rows: list = field(default_factory=list)

    def add(self, id, method, objective, reference, ref_source, seconds):
        self.rows.append({
            "id": id,
            "method": method,
            "objective": float(objective),
            "reference": float(reference),
            "ref_source": ref_source,
            "gap": gap(objective, reference),
            "seconds": float(seconds),
        })

    @property
    def mean_objective(self):
        return float(np.mean([r["objective"] for r in self.rows]))

    @property
    def mean_gap(self):
        return float(np.mean([r["gap"] for r in self.rows]))

    @property
    def total_time(self):
        return float(sum(r["seconds"] for r in self.rows))

    def summary(self):
        return {"count": len(self.rows), "mean_objective": self.mean_objective,
                "mean_gap": self.mean_gap, "total_time": self.total_time}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, REPORT_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})

    @classmethod
    def read_csv(cls, path):
        rep = cls()
        with open(path) as fh:
            for r in csv.DictReader(fh):
                for k in ("objective", "reference", "gap", "seconds"):
                    r[k] = float(r[k])
                rep.rows.append(r)
        return rep


def markdown_table(sections):
    """``sections``: {scale label: {method: GapReport}} -> Obj. / Gap / Time table."""
    scales = list(sections)
    methods = []
    for per in sections.values():
        methods += [m for m in per if m not in methods]
    head = "| Method | " + " | ".join(f"{s} Obj. | {s} Gap | {s} Time" for s in scales) + " |"
    rule = "|---" * (1 + 3 * len(scales)) + "|"
    lines = [head, rule]
    for m in methods:
        cells = []
        for s in scales:
            rep = sections[s].get(m)
            if rep is None:
                cells += ["-", "-", "-"]
            else:
                cells += [f"{rep.mean_objective:.4f}", f"{rep.mean_gap:.3f}%", _fmt_time(rep.total_time)]
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _fmt_time(s):
    if s < 60:
        return f"{s:.1f}s"
    if s < 3600:
        return f"{s / 60:.1f}m"
    return f"{s / 3600:.1f}h"


# ---------------------------------------------------------------- references

def exact_objective(inst):
    if inst.problem == TSP:
        return exact_tsp(inst)[0]
    return exact_cvrp(inst)[0]


def exact_feasible(inst):
    return inst.num_nodes <= MAX_EXACT_TSP if inst.problem == TSP else inst.n <= MAX_EXACT_CVRP


def load_reference_file(path):
    """``{id: objective}`` from JSON object, JSON lines with id/length, or ``id,objective`` CSV."""
    with open(path) as fh:
        text = fh.read()
    text_s = text.strip()
    if text_s.startswith("{") and "\n{" not in text_s:
        return {k: float(v) for k, v in json.loads(text_s).items()}
    if text_s.startswith("{"):
        out = {}
        for line in text_s.splitlines():
            rec = json.loads(line)
            out[rec["id"]] = float(rec.get("length", rec.get("objective")))
        return out
    out = {}
    for row in csv.reader(text_s.splitlines()):
        if len(row) >= 2 and row[0] != "id":
            out[row[0]] = float(row[1])
    return out


def reference_objective(inst, ref="auto", table=None):
    """(objective in original units, provenance).

    ``auto`` tries the exact oracle, then ``table``, then NN + 2-opt.
    """
    if ref in ("exact", "auto") and exact_feasible(inst):
        return exact_objective(inst) * inst.scale, "exact"
    if ref == "exact":
        raise SizeError(f"instance {inst.id!r} is too large for the exact oracle")
    if ref in ("file", "auto") and table is not None and inst.id in table:
        return table[inst.id], "file"
    if ref == "file":
        raise ContractError(f"no reference objective for {inst.id!r}")
    if inst.problem == TSP:
        return nn_2opt(inst)[0] * inst.scale, "nn2opt"
    raise ContractError(f"no reference available for CVRP instance {inst.id!r}")


# ---------------------------------------------------------------- methods

def solve_method(instances, method, model=None, mode="multi", threads=1):
    """Objectives (original units) and per-instance seconds for a list of instances."""
    if method == "icam":
        if model is None:
            raise ContractError("method icam needs a model checkpoint")
        if mode == "aug8":
            out = []
            for inst in instances:
                t0 = time.perf_counter()
                best, _, _ = solve_augmented(model, inst)
                out.append((best.length * inst.scale, time.perf_counter() - t0, best.order))
            return out
        return [(rb.best().length * inst.scale, rb.seconds, rb.best().order)
                for inst, rb in zip(instances, rollout_many(model, instances, mode))]

    def one(inst):
        t0 = time.perf_counter()
        if method == "exact":
            length, order = exact_tsp(inst) if inst.problem == TSP else exact_cvrp(inst)
        elif method == "nn2opt":
            length, order = nn_2opt(inst)
        else:
            raise ContractError(f"unknown method {method!r}")
        return length * inst.scale, time.perf_counter() - t0, order

    if method == "exact":
        for inst in instances:
            if not exact_feasible(inst):
                raise SizeError(f"instance {inst.id!r} (N={inst.n}) is too large for the exact oracle")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(one, instances))


def evaluate(instances, method, model=None, mode="multi", ref="auto", table=None, threads=1):
    label = method if method != "icam" else f"icam {MODE_LABELS[mode]}"
    results = solve_method(instances, method, model, mode, threads)
    report = GapReport()
    for inst, (obj, secs, _) in zip(instances, results):
        value, source = reference_objective(inst, ref, table)
        report.add(inst.id, label, obj, value, source, secs)
    return report
