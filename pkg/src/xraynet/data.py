"""Dataset manifests, image loading, and fixed-length feature files."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import resize_bilinear

FEATURE_MAGIC = b"FVS1"
FEATURE_DIM = 4096


class DataError(ValueError):
    """Malformed input data (manifests, images, feature files)."""


class EmptyDatasetError(DataError):
    pass


class FeatureFileError(DataError):
    pass


class FeatureDimensionError(FeatureFileError):
    pass


class FeatureCountError(FeatureFileError):
    pass


class FeatureHeaderError(FeatureFileError):
    pass


@dataclass(frozen=True)
class Record:
    path: str
    label_code: str
    class_id: int | None = None
    split: str | None = None

    def __post_init__(self):
        if not self.label_code:
            raise DataError(f"record {self.path!r} has an empty label code")


@dataclass
class DatasetManifest:
    records: list[Record]
    classes: list[str]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        k = len(self.classes)
        for r in self.records:
            if r.class_id is None or not 0 <= r.class_id < k:
                raise DataError(f"record {r.path!r} has class id {r.class_id} outside [0, {k})")
            if self.classes[r.class_id] != r.label_code:
                raise DataError(f"record {r.path!r}: class id {r.class_id} is {self.classes[r.class_id]!r}, "
                                f"label code is {r.label_code!r}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def subset(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    def counts(self, split: str | None = None) -> list[int]:
        out = [0] * self.num_classes
        for r in self.records:
            if split is None or r.split == split:
                out[r.class_id] += 1
        return out

    def resolve(self, record: Record) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p


# --------------------------------------------------------------------------
# manifest pipeline
# --------------------------------------------------------------------------

def read_records(path) -> list[Record]:
    """Read a ``path,label_code[,class_id,split]`` CSV."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"path", "label_code"} <= set(reader.fieldnames):
                raise DataError(f"{path}: manifest header must contain 'path,label_code'")
            return [Record(row["path"], row["label_code"]) for row in reader]
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc.strerror})") from None


def write_records(path, records: list[Record]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label_code"])
        for r in records:
            w.writerow([r.path, r.label_code])


def flatten_labels(records: list[Record]) -> dict[str, int]:
    """Each distinct full label code is one class; ids follow sorted code order."""
    return {code: i for i, code in enumerate(sorted({r.label_code for r in records}))}


def assign_classes(records: list[Record], mapping: dict[str, int] | None = None) -> list[Record]:
    mapping = flatten_labels(records) if mapping is None else mapping
    return [replace(r, class_id=mapping[r.label_code]) for r in records]


def filter_min_count(records: list[Record], min_count: int = 50) -> list[Record]:
    """Drop every class with fewer than ``min_count`` records and recompact ids."""
    counts: dict[str, int] = {}
    for r in records:
        counts[r.label_code] = counts.get(r.label_code, 0) + 1
    keep = sorted(code for code, n in counts.items() if n >= min_count)
    if not keep:
        raise EmptyDatasetError(f"no classes survive min_count={min_count}")
    mapping = {code: i for i, code in enumerate(keep)}
    return [replace(r, class_id=mapping[r.label_code]) for r in records if r.label_code in mapping]


def train_count(n: int, train_frac: float) -> int:
    """Per-class train size: round-half-up of ``train_frac * n``, leaving >= 1 test record."""
    return min(max(int(math.floor(train_frac * n + 0.5)), 1), n - 1)


def stratified_split(records: list[Record], train_frac: float = 0.9, seed: int = 0,
                     root=None) -> DatasetManifest:
    """Per-class shuffled split; records need class ids (see :func:`filter_min_count`)."""
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must be in (0, 1)")
    by_class: dict[str, list[Record]] = {}
    for r in records:
        if r.class_id is None:
            raise DataError(f"record {r.path!r} has no class id; run filter_min_count first")
        by_class.setdefault(r.label_code, []).append(r)
    classes = sorted(by_class)
    out: list[Record] = []
    for code in classes:
        members = sorted(by_class[code], key=lambda r: r.path)
        if len(members) < 2:
            raise DataError(f"class {code!r} has {len(members)} record(s); cannot stratify")
        rng = np.random.default_rng([seed, _code_key(code)])
        order = rng.permutation(len(members))
        n_train = train_count(len(members), train_frac)
        for rank, idx in enumerate(order):
            out.append(replace(members[idx], split="train" if rank < n_train else "test"))
    out.sort(key=lambda r: r.path)
    return DatasetManifest(out, classes, Path(root) if root is not None else Path())


def _code_key(code: str) -> int:
    # stable across processes, unlike hash()
    return int.from_bytes(code.encode()[:16].ljust(16, b"\0"), "little") % (2 ** 63)


def prepare(records: list[Record], min_count: int = 50, train_frac: float = 0.9, seed: int = 0,
            root=None) -> tuple[DatasetManifest, list[tuple[str, int]]]:
    """Flatten, filter and split. Returns the manifest and the removed (code, size) pairs."""
    counts: dict[str, int] = {}
    for r in records:
        counts[r.label_code] = counts.get(r.label_code, 0) + 1
    kept = filter_min_count(records, min_count)
    removed = sorted((c, n) for c, n in counts.items() if n < min_count)
    return stratified_split(kept, train_frac, seed, root), removed


def write_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label_code", "class_id", "split"])
        for r in manifest.records:
            w.writerow([r.path, r.label_code, r.class_id, r.split])


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"path", "label_code", "class_id", "split"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise DataError(f"{path}: split manifest needs columns {sorted(need)}")
            records = [Record(row["path"], row["label_code"], int(row["class_id"]), row["split"])
                       for row in reader]
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc.strerror})") from None
    except ValueError as exc:
        raise DataError(f"{path}: bad manifest row ({exc})") from None
    k = 1 + max((r.class_id for r in records), default=-1)
    classes = [""] * k
    for r in records:
        classes[r.class_id] = r.label_code
    return DatasetManifest(records, classes, path.parent)


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def load_image(path, target=(128, 128)) -> np.ndarray:
    """Load a PNG/PGM as a float32 [1, H, W] tensor in [0, 1].

    Non-matching sizes are scaled so the shorter side equals the target,
    then center-cropped.
    """
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                peak = 65535.0
            else:
                arr = np.asarray(im.convert("L"), dtype=np.float64)
                peak = 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from None
    arr = np.clip(arr / peak, 0.0, 1.0)
    th, tw = target
    h, w = arr.shape
    if (h, w) != (th, tw):
        s = max(th / h, tw / w)
        nh, nw = max(th, round(h * s)), max(tw, round(w * s))
        arr = resize_bilinear(arr, (nh, nw))
        top, left = (nh - th) // 2, (nw - tw) // 2
        arr = arr[top:top + th, left:left + tw]
    return np.clip(arr, 0.0, 1.0).astype(np.float32)[None]


def save_image(path, img: np.ndarray) -> None:
    a = np.asarray(img)
    if a.ndim == 3:
        a = a[0]
    Image.fromarray(np.round(np.clip(a, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def load_split(manifest: DatasetManifest, split: str, target=(128, 128)) -> tuple[np.ndarray, np.ndarray]:
    recs = manifest.subset(split)
    if not recs:
        return np.zeros((0, 1, *target), np.float32), np.zeros(0, np.int64)
    imgs = np.stack([load_image(manifest.resolve(r), target) for r in recs])
    return imgs, np.array([r.class_id for r in recs], dtype=np.int64)


# --------------------------------------------------------------------------
# feature vectors
# --------------------------------------------------------------------------

@dataclass
class FeatureSet:
    vectors: np.ndarray
    class_ids: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise FeatureDimensionError(f"feature matrix must be 2-D, got shape {self.vectors.shape}")
        if len(self.vectors) != len(self.class_ids):
            raise FeatureCountError(f"{len(self.vectors)} feature rows but {len(self.class_ids)} labels")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.class_ids)

    def take(self, idx) -> "FeatureSet":
        return FeatureSet(self.vectors[idx], self.class_ids[idx], self.source)


def write_feature_set(path, fs: FeatureSet) -> None:
    m, d = fs.vectors.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", m, d))
        fh.write(np.ascontiguousarray(fs.vectors, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(fs.class_ids, dtype="<u4").tobytes())


def load_feature_set(path, expected_dim: int | None = FEATURE_DIM) -> FeatureSet:
    """Read a binary ``FVS1`` file or a ``label,f0,...`` CSV.

    Binary files carry their dimension in the header, which takes precedence
    over ``expected_dim``. CSV rows must all have ``expected_dim`` values
    (any consistent width when ``expected_dim`` is None).
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FeatureFileError(f"{path}: cannot read feature file ({exc.strerror})") from None
    if raw[:4] == FEATURE_MAGIC:
        return _load_binary(path, raw)
    return _load_csv(path, raw, expected_dim)


def _load_binary(path, raw: bytes) -> FeatureSet:
    if len(raw) < 12:
        raise FeatureHeaderError(f"{path}: header truncated ({len(raw)} bytes)")
    m, d = struct.unpack("<II", raw[4:12])
    if d == 0:
        raise FeatureHeaderError(f"{path}: header declares dimension 0")
    need = 12 + 4 * m * d + 4 * m
    if len(raw) != need:
        raise FeatureCountError(f"{path}: header declares {m} rows x {d} dims ({need} bytes), file has {len(raw)} bytes")
    vec = np.frombuffer(raw, dtype="<f4", count=m * d, offset=12).reshape(m, d).astype(np.float32)
    ids = np.frombuffer(raw, dtype="<u4", count=m, offset=12 + 4 * m * d).astype(np.int64)
    return FeatureSet(vec, ids, str(path))


def _load_csv(path, raw: bytes, expected_dim: int | None) -> FeatureSet:
    try:
        text = raw.decode()
    except UnicodeDecodeError:
        raise FeatureHeaderError(f"{path}: neither an FVS1 binary nor a text CSV") from None
    rows = list(csv.reader(text.splitlines()))
    if rows and rows[0] and rows[0][0].strip().lower() == "label":
        rows = rows[1:]
    rows = [r for r in rows if r]
    if not rows:
        raise FeatureCountError(f"{path}: no feature rows")
    dim = expected_dim if expected_dim is not None else len(rows[0]) - 1
    vecs = np.empty((len(rows), dim), dtype=np.float32)
    ids = np.empty(len(rows), dtype=np.int64)
    for i, r in enumerate(rows):
        if len(r) - 1 != dim:
            raise FeatureDimensionError(f"{path}: row {i} has {len(r) - 1} features, expected {dim}")
        try:
            ids[i] = int(r[0])
            vecs[i] = [float(v) for v in r[1:]]
        except ValueError as exc:
            raise FeatureFileError(f"{path}: row {i} is not numeric ({exc})") from None
    return FeatureSet(vecs, ids, str(path))


def write_feature_csv(path, fs: FeatureSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(fs.dim)])
        for label, row in zip(fs.class_ids, fs.vectors):
            w.writerow([int(label)] + [repr(float(v)) for v in row])
