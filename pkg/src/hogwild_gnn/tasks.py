"""Synthetic datasets, MNIST IDX ingestion and dataset directories.

Every generator is a pure function of its arguments and seed.  Targets are
stored per node in ``Graph.y``: class labels (n, 1) for classification,
values (n, 1) for regression and true positions (n, 2) for coordinates.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform

from .errors import ConfigError, ParseError
from .graph import Graph, chain

CLASSIFICATION, REGRESSION, COORDINATES = "classification", "regression", "coordinates"
TASK_IDS = ("chains", "count", "sum", "coordinates", "mnist-terrain")

IDX_IMAGES, IDX_LABELS = 0x00000803, 0x00000801


@dataclass(frozen=True)
class TaskInfo:
    task: str
    kind: str
    p: int
    r: int
    J: int
    classes: int = 0


@dataclass(frozen=True)
class DatasetSpec:
    task: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    train_frac: float = 0.8
    test_frac: float = 0.2
    folds: int = 10

    def __post_init__(self):
        if self.task not in TASK_IDS:
            raise ConfigError(f"unknown task '{self.task}' (choose from {', '.join(TASK_IDS)})")
        if self.folds < 1:
            raise ConfigError("need at least one fold")
        if min(self.train_frac, self.test_frac) < 0 or abs(self.train_frac + self.test_frac - 1.0) > 1e-12:
            raise ConfigError("split fractions must be nonnegative and sum to 1")
        for k, v in self.params.items():
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 1 and k != "radius":
                raise ConfigError(f"size parameter {k} must be >= 1, got {v}")


@dataclass(frozen=True)
class SplitManifest:
    fold: int
    train: tuple
    test: tuple

    def to_dict(self) -> dict:
        return {"fold": self.fold, "train": list(self.train), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(int(d["fold"]), tuple(d["train"]), tuple(d["test"]))


@dataclass
class Dataset:
    info: TaskInfo
    graphs: list
    spec: DatasetSpec | None = None
    splits: list = field(default_factory=list)
    transductive: bool = False

    def __len__(self) -> int:
        return len(self.graphs)

    def subset(self, ids) -> list:
        return [self.graphs[i] for i in ids]


# ------------------------------------------------------------------ generators

def gen_chains(p: int = 2, l: int = 100) -> Dataset:
    """One path graph per class; only node 0 carries the class (one-hot)."""
    if p < 2 or l < 2:
        raise ConfigError("chains need p >= 2 classes and length l >= 2")
    graphs = []
    for k in range(p):
        x = np.zeros((l, p))
        x[0, k] = 1.0
        graphs.append(chain(l, x=x, y=np.full((l, 1), float(k))))
    info = TaskInfo("chains", CLASSIFICATION, p, 0, 1 if p == 2 else p, p)
    return Dataset(info, graphs, transductive=True)


def degree_one_hot(g: Graph, width: int = 3) -> np.ndarray:
    deg = g.degrees()
    if deg.size and deg.max() >= width:
        raise ConfigError(f"degree {deg.max()} does not fit a one-hot of width {width}")
    return np.eye(width)[deg]


def gen_count(sizes=range(1, 51)) -> Dataset:
    """Chains of every size in ``sizes``; target is the node count."""
    graphs = []
    for n in sizes:
        g = chain(int(n))
        graphs.append(Graph.build(g.n, g.edges, degree_one_hot(g), y=np.full((g.n, 1), float(n))))
    return Dataset(TaskInfo("count", REGRESSION, 3, 0, 1), graphs)


def gen_sum(count: int = 2000, n: int = 50, seed: int = 0) -> Dataset:
    """Chains of ``n`` nodes with Bernoulli(1/2) features; target is their sum."""
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(count):
        x = rng.integers(0, 2, size=(n, 1)).astype(np.float64)
        graphs.append(chain(n, x=x, y=np.full((n, 1), x.sum())))
    return Dataset(TaskInfo("sum", REGRESSION, 1, 0, 1), graphs)


def radius_edges(pos: np.ndarray, radius: float) -> tuple:
    """Directed edge list (both directions) and distances for dist <= radius."""
    dist = squareform(pdist(pos)) if len(pos) > 1 else np.zeros((1, 1))
    adj = dist <= radius
    np.fill_diagonal(adj, False)
    src, dst = np.nonzero(adj)
    return np.stack([src, dst], 1), dist[src, dst]


def is_connected(n: int, edges: np.ndarray) -> bool:
    if n == 1:
        return True
    A = csr_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    return connected_components(A, directed=False)[0] == 1


def gen_coordinates(count: int = 1500, n: int = 20, radius: float = 0.5, seed: int = 0,
                    max_tries: int = 1000) -> Dataset:
    """Uniform points in the unit square joined within ``radius``.

    Layouts whose radius graph is disconnected are redrawn.  Features are
    one-hot node ids, edge features the distances, targets the positions.
    """
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(count):
        for _ in range(max_tries):
            pos = rng.uniform(0.0, 1.0, size=(n, 2))
            edges, dist = radius_edges(pos, radius)
            if is_connected(n, edges):
                break
        else:
            raise ConfigError(f"no connected layout after {max_tries} draws (n={n}, radius={radius})")
        graphs.append(Graph.build(n, edges, np.eye(n), e=dist[:, None], y=pos))
    return Dataset(TaskInfo("coordinates", COORDINATES, n, 1, 2), graphs)


def resize_area(img: np.ndarray, size: int = 10) -> np.ndarray:
    """Box-filter resize of a square image (fractional pixel coverage)."""
    src = img.shape[0]
    R = np.zeros((size, src))
    scale = src / size
    for a in range(size):
        lo, hi = a * scale, (a + 1) * scale
        for b in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            R[a, b] = (min(hi, b + 1) - max(lo, b)) / scale
    return R @ img @ R.T


def terrain_graph(img10: np.ndarray, label: float, rng, agents: int = 10, reach: float = 5.0) -> Graph:
    side = img10.shape[0]
    rc = rng.integers(0, side, size=(agents, 2))
    x = np.column_stack([rc.astype(np.float64), img10[rc[:, 0], rc[:, 1]]])
    edges, _ = radius_edges(rc.astype(np.float64), reach)
    return Graph.build(agents, edges, x, y=np.full((agents, 1), float(label)))


def gen_mnist_terrain(images_path, labels_path, seed: int = 0, limit: int | None = None,
                      keep=(0, 1), agents: int = 10, size: int = 10) -> Dataset:
    """Agents at random pixels of 0/1 digits, resized to ``size`` x ``size``."""
    images = parse_idx(images_path)
    labels = parse_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise ParseError(f"image/label files disagree: {images.shape} vs {labels.shape}")
    rng = np.random.default_rng(seed)
    graphs = []
    for img, lab in zip(images, labels):
        if int(lab) not in keep:
            continue
        small = resize_area(img.astype(np.float64) / 255.0, size)
        graphs.append(terrain_graph(small, keep.index(int(lab)), rng, agents))
        if limit is not None and len(graphs) >= limit:
            break
    return Dataset(TaskInfo("mnist-terrain", CLASSIFICATION, 3, 0, 1, len(keep)), graphs)


# ------------------------------------------------------------------ IDX

def parse_idx_bytes(buf: bytes, expect: int | None = None) -> np.ndarray:
    """Decode an unsigned-byte IDX container (big endian header)."""
    if len(buf) < 4:
        raise ParseError(f"truncated magic: need 4 bytes at byte offset 0, file has {len(buf)}")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise ParseError(f"bad magic 0x{magic:08x} at byte offset 0")
    if expect is not None and magic != expect:
        raise ParseError(f"magic 0x{magic:08x} at byte offset 0, expected 0x{expect:08x}")
    ndim = magic & 0xFF
    dims = []
    for d in range(ndim):
        off = 4 + 4 * d
        if len(buf) < off + 4:
            raise ParseError(f"truncated header: dimension {d} at byte offset {off}")
        dims.append(struct.unpack(">I", buf[off:off + 4])[0])
    start = 4 + 4 * ndim
    need = int(np.prod(dims))
    have = len(buf) - start
    if have < need:
        raise ParseError(f"truncated payload at byte offset {start + have}: expected {need} bytes, found {have}")
    if have > need:
        raise ParseError(f"{have - need} trailing bytes after payload at byte offset {start + need}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(dims).copy()


def parse_idx(path, expect: int | None = None) -> np.ndarray:
    return parse_idx_bytes(Path(path).read_bytes(), expect)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    magic = {1: IDX_LABELS, 3: IDX_IMAGES}.get(arr.ndim)
    if magic is None:
        raise ConfigError(f"IDX writer supports 1-D or 3-D arrays, got {arr.ndim}-D")
    head = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


# ------------------------------------------------------------------ splits and IO

def make_splits(num: int, spec: DatasetSpec, transductive: bool = False) -> list:
    """Per fold: a seeded permutation, first ``train_frac`` of it for training."""
    out = []
    for f in range(spec.folds):
        if transductive:
            ids = tuple(range(num))
            out.append(SplitManifest(f, ids, ids))
            continue
        perm = np.random.default_rng([spec.seed, f]).permutation(num)
        cut = int(round(spec.train_frac * num))
        if num > 1:
            cut = min(max(cut, 1), num - 1)
        out.append(SplitManifest(f, tuple(sorted(map(int, perm[:cut]))),
                                 tuple(sorted(map(int, perm[cut:])))))
    return out


def generate(spec: DatasetSpec) -> Dataset:
    P = dict(spec.params)
    if spec.task == "chains":
        ds = gen_chains(int(P.get("p", 2)), int(P.get("l", 100)))
    elif spec.task == "count":
        ds = gen_count(range(1, int(P.get("max_n", 50)) + 1))
    elif spec.task == "sum":
        ds = gen_sum(int(P.get("count", 2000)), int(P.get("n", 50)), spec.seed)
    elif spec.task == "coordinates":
        ds = gen_coordinates(int(P.get("count", 1500)), int(P.get("n", 20)),
                             float(P.get("radius", 0.5)), spec.seed)
    else:
        if "images" not in P or "labels" not in P:
            raise ConfigError("mnist-terrain needs 'images' and 'labels' IDX paths")
        ds = gen_mnist_terrain(P["images"], P["labels"], spec.seed, P.get("limit"))
    ds.spec = spec
    ds.splits = make_splits(len(ds.graphs), spec, ds.transductive)
    return ds


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    (root / "graphs").mkdir(parents=True, exist_ok=True)
    (root / "splits").mkdir(exist_ok=True)
    width = max(4, len(str(len(ds.graphs))))
    for i, g in enumerate(ds.graphs):
        g.save(root / "graphs" / f"{i:0{width}d}.json")
    for s in ds.splits:
        (root / "splits" / f"{s.fold}.json").write_text(json.dumps(s.to_dict()))
    meta = {"info": asdict(ds.info), "spec": asdict(ds.spec) if ds.spec else None,
            "count": len(ds.graphs), "transductive": ds.transductive}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise ConfigError(f"no dataset at {root} (missing meta.json)")
    meta = json.loads(meta_path.read_text())
    files = sorted((root / "graphs").glob("*.json"))
    if len(files) != meta["count"]:
        raise ConfigError(f"{root}: meta lists {meta['count']} graphs, found {len(files)}")
    graphs = [Graph.load(f) for f in files]
    splits = [SplitManifest.from_dict(json.loads(f.read_text()))
              for f in sorted((root / "splits").glob("*.json"), key=lambda f: int(f.stem))]
    spec = DatasetSpec(**meta["spec"]) if meta.get("spec") else None
    return Dataset(TaskInfo(**meta["info"]), graphs, spec, splits, bool(meta.get("transductive")))
