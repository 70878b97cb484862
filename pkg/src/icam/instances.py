"""TSP / CVRP instances: sampling, geometry, dihedral augmentation and file IO."""

import json
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, ParseError

TSP = "tsp"
CVRP = "cvrp"
PROBLEMS = (TSP, CVRP)

# capacity used for CVRP test sets of a given size (Kool et al. for <= 100,
# the larger sizes as in the BQ / LEHD test protocol)
DEFAULT_CAPACITY = ((10, 20), (20, 30), (50, 40), (100, 50), (200, 80), (500, 100), (1000, 250))


def default_capacity(n):
    for limit, cap in DEFAULT_CAPACITY:
        if n <= limit:
            return cap
    return DEFAULT_CAPACITY[-1][1]


@dataclass
class Instance:
    """One routing problem.

    For CVRP row 0 of ``coords`` is the depot and ``demands[0] == 0``.
    ``scale`` and ``origin`` map coordinates back to the units of the file the
    instance was read from (identity for generated data).
    """

    problem: str
    coords: np.ndarray
    demands: np.ndarray = None
    capacity: int = None
    id: str = ""
    scale: float = 1.0
    origin: tuple = (0.0, 0.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.problem not in PROBLEMS:
            raise ContractError(f"unknown problem {self.problem!r}")
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ContractError(f"coords must be (N, 2), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ContractError("coordinates must be finite")
        if self.problem == TSP:
            if len(self.coords) < 2:
                raise ContractError("a TSP instance needs at least 2 nodes")
            return
        if len(self.coords) < 2:
            raise ContractError("a CVRP instance needs a depot and at least 1 customer")
        self.demands = np.asarray(self.demands, dtype=np.int64)
        if self.demands.shape != (len(self.coords),):
            raise ContractError("demands must have one entry per node")
        if self.demands[0] != 0:
            raise ContractError("depot demand must be 0")
        if self.capacity is None or int(self.capacity) <= 0:
            raise ContractError("capacity must be a positive integer")
        self.capacity = int(self.capacity)
        if np.any(self.demands < 0) or np.any(self.demands > self.capacity):
            raise ContractError("every demand must lie in [0, capacity]")

    @property
    def n(self):
        """Problem scale: cities for TSP, customers for CVRP."""
        return len(self.coords) - (self.problem == CVRP)

    @property
    def num_nodes(self):
        return len(self.coords)

    def to_dict(self):
        out = {"problem": self.problem, "id": self.id, "coords": self.coords.tolist()}
        if self.problem == CVRP:
            out["demands"] = self.demands.tolist()
            out["capacity"] = self.capacity
        if self.scale != 1.0 or tuple(self.origin) != (0.0, 0.0):
            out["scale"] = self.scale
            out["origin"] = list(self.origin)
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(
            problem=d["problem"],
            coords=d["coords"],
            demands=d.get("demands"),
            capacity=d.get("capacity"),
            id=d.get("id", ""),
            scale=d.get("scale", 1.0),
            origin=tuple(d.get("origin", (0.0, 0.0))),
        )


def _capacity(rule, n, rng):
    if rule is None:
        return default_capacity(n)
    if isinstance(rule, (tuple, list)):
        lo, hi = rule
        return int(rng.integers(lo, hi + 1))
    return int(rule)


def generate_uniform(problem, n, capacity=None, seed=0, id=None):
    """Uniform instance in the unit square; a pure function of its arguments.

    ``capacity`` is a fixed integer, an inclusive ``(lo, hi)`` range sampled
    once per instance, or None for the size-dependent default.
    """
    if n < (2 if problem == TSP else 1):
        raise ContractError(f"scale n={n} too small for {problem}")
    rng = np.random.default_rng(seed)
    if problem == TSP:
        return Instance(TSP, rng.random((n, 2)), id=id or f"tsp{n}-{seed}")
    coords = rng.random((n + 1, 2))
    demands = np.concatenate([[0], rng.integers(1, 10, size=n)])
    cap = _capacity(capacity, n, rng)
    return Instance(CVRP, coords, demands, cap, id=id or f"cvrp{n}-{seed}")


def generate_set(problem, n, count, seed, capacity=None):
    """``count`` instances; instance ``i`` is seeded by ``(seed, i)``."""
    return [
        generate_uniform(problem, n, capacity, seed=[seed, i], id=f"{problem}{n}-{seed}-{i}")
        for i in range(count)
    ]


def pairwise_distances(coords):
    diff = coords[..., :, None, :] - coords[..., None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def distance_matrix(inst):
    return pairwise_distances(inst.coords)


_DIHEDRAL = (
    lambda x, y: (x, y),
    lambda x, y: (y, x),
    lambda x, y: (x, 1 - y),
    lambda x, y: (1 - y, x),
    lambda x, y: (1 - x, y),
    lambda x, y: (y, 1 - x),
    lambda x, y: (1 - x, 1 - y),
    lambda x, y: (1 - y, 1 - x),
)


def dihedral_images(coords):
    """(8, ..., 2) stack of the unit-square symmetries; image 0 is the input."""
    x, y = coords[..., 0], coords[..., 1]
    return np.stack([np.stack(f(x, y), axis=-1) for f in _DIHEDRAL])


def augment_x8(inst):
    if np.any(inst.coords < 0.0) or np.any(inst.coords > 1.0):
        raise ContractError("augmentation assumes coordinates inside the unit square")
    return [
        replace(inst, coords=img, id=f"{inst.id}#aug{k}", meta=dict(inst.meta))
        for k, img in enumerate(dihedral_images(inst.coords))
    ]


# ---------------------------------------------------------------- JSON lines

def write_jsonl(instances, path):
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_dict()) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [Instance.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------- CVRPLib / TSPLIB

_SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION")


def parse_cvrplib(text, id=None):
    """Parse TSPLIB-style ``.vrp`` text (EUC_2D only) into an unscaled Instance.

    A file without DEMAND_SECTION / CAPACITY whose TYPE is TSP yields a TSP
    instance. The depot is moved to row 0; other nodes keep file order.
    """
    header = {}
    header_line = {}
    sections = {}
    current = None
    lines = text.splitlines()
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        key = line.split(":")[0].strip().upper()
        if key in _SECTIONS:
            current = key
            sections[key] = []
            continue
        if ":" in line and not re.match(r"^-?\d", line):
            k, v = line.split(":", 1)
            header[k.strip().upper()] = v.strip()
            header_line[k.strip().upper()] = lineno
            current = None
            continue
        if current is None:
            raise ParseError(f"unexpected content {line!r}", lineno)
        sections[current].append((lineno, line.split()))

    end = len(lines)
    name = header.get("NAME", id or "")
    kind = header.get("TYPE", "CVRP").upper()
    problem = TSP if kind.startswith("TSP") else CVRP
    if "DIMENSION" not in header:
        raise ParseError("missing DIMENSION", end)
    dim = int(header["DIMENSION"])
    ewt = header.get("EDGE_WEIGHT_TYPE")
    if ewt is None:
        raise ParseError("missing EDGE_WEIGHT_TYPE", end)
    if ewt.upper() != "EUC_2D":
        raise ParseError(f"unsupported EDGE_WEIGHT_TYPE {ewt}", header_line["EDGE_WEIGHT_TYPE"])
    if "NODE_COORD_SECTION" not in sections:
        raise ParseError("missing NODE_COORD_SECTION", end)

    coords = np.zeros((dim, 2))
    seen = set()
    for lineno, tok in sections["NODE_COORD_SECTION"]:
        if len(tok) != 3:
            raise ParseError("coordinate line needs 'id x y'", lineno)
        i = int(tok[0]) - 1
        if not 0 <= i < dim:
            raise ParseError(f"node id {i + 1} outside 1..{dim}", lineno)
        coords[i] = float(tok[1]), float(tok[2])
        seen.add(i)
    if len(seen) != dim:
        raise ParseError(f"expected {dim} coordinates, found {len(seen)}", end)

    if problem == TSP:
        return Instance(TSP, coords, id=name, meta={"header": header})

    for sec in ("DEMAND_SECTION", "DEPOT_SECTION"):
        if sec not in sections:
            raise ParseError(f"missing {sec}", end)
    if "CAPACITY" not in header:
        raise ParseError("missing CAPACITY", end)
    capacity = int(header["CAPACITY"])
    demands = np.zeros(dim, dtype=np.int64)
    for lineno, tok in sections["DEMAND_SECTION"]:
        i, q = int(tok[0]) - 1, int(tok[1])
        if q > capacity:
            raise ParseError(f"demand {q} of node {i + 1} exceeds capacity {capacity}", lineno)
        if q < 0:
            raise ParseError("negative demand", lineno)
        demands[i] = q
    depots = [int(tok[0]) for _, tok in sections["DEPOT_SECTION"] if int(tok[0]) != -1]
    if len(depots) != 1:
        raise ParseError("exactly one depot required", sections["DEPOT_SECTION"][0][0] if sections["DEPOT_SECTION"] else end)
    d = depots[0] - 1
    order = [d] + [i for i in range(dim) if i != d]
    if demands[d] != 0:
        raise ParseError("depot demand must be 0", end)
    return Instance(CVRP, coords[order], demands[order], capacity, id=name,
                    meta={"header": header, "node_ids": [i + 1 for i in order]})


def _num(v):
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def serialize_cvrplib(inst):
    """Inverse of :func:`parse_cvrplib` for unscaled instances (depot written as node 1)."""
    n = inst.num_nodes
    out = [f"NAME : {inst.id}"]
    if inst.problem == TSP:
        out += ["TYPE : TSP", f"DIMENSION : {n}", "EDGE_WEIGHT_TYPE : EUC_2D"]
    else:
        out += ["TYPE : CVRP", f"DIMENSION : {n}", "EDGE_WEIGHT_TYPE : EUC_2D", f"CAPACITY : {inst.capacity}"]
    out.append("NODE_COORD_SECTION")
    out += [f"{i + 1}\t{_num(x)}\t{_num(y)}" for i, (x, y) in enumerate(inst.coords)]
    if inst.problem == CVRP:
        out.append("DEMAND_SECTION")
        out += [f"{i + 1}\t{q}" for i, q in enumerate(inst.demands)]
        out += ["DEPOT_SECTION", "\t1", "\t-1"]
    out.append("EOF")
    return "\n".join(out) + "\n"


def scale_cvrplib(inst):
    """Map coordinates into the unit square by the bounding square (aspect preserved).

    Lengths measured on the result times ``result.scale`` are lengths in the
    original units.
    """
    lo = inst.coords.min(axis=0)
    extent = float((inst.coords.max(axis=0) - lo).max())
    if extent <= 0.0:
        raise ContractError("all nodes coincide; cannot normalise")
    coords = (inst.coords - lo) / extent
    return replace(
        inst,
        coords=np.clip(coords, 0.0, 1.0),
        scale=inst.scale * extent,
        origin=tuple(float(v) for v in lo),
        meta=dict(inst.meta),
    )


def read_sol_cost(text):
    """Reference objective from a CVRPLib ``.sol`` file (the ``Cost`` line)."""
    m = re.search(r"^\s*cost\s+([-+0-9.eE]+)", text, re.IGNORECASE | re.MULTILINE)
    if not m:
        raise ParseError("no 'Cost' line in solution file")
    return float(m.group(1))


def load_instances(path):
    """JSON lines, or a single ``.vrp`` / ``.tsp`` file normalised to the unit square."""
    path = str(path)
    if path.endswith((".vrp", ".tsp")):
        with open(path) as fh:
            return [scale_cvrplib(parse_cvrplib(fh.read()))]
    return read_jsonl(path)


def original_length(inst, length):
    return length * inst.scale

