"""Dataset ingestion, metadata encoding, splits, correlation ranking and the
synthetic corpus generator."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

MISSING = {"", "nan", "na", "n/a", "unk", "none", "null"}
_TRUE = {"true", "t", "1", "yes", "y"}
_FALSE = {"false", "f", "0", "no", "n"}
IMAGE_EXTS = (".ppm", ".png", ".jpg", ".jpeg", ".bmp")


class DataError(Exception):
    """Raised for unreadable or inconsistent dataset input."""


# ---------------------------------------------------------------------- schema

@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str  # binary | categorical | continuous
    levels: tuple[str, ...] = ()
    min: float = 0.0
    max: float = 1.0

    def __post_init__(self):
        if self.kind not in ("binary", "categorical", "continuous"):
            raise ValueError(f"field {self.name}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and not self.levels:
            raise ValueError(f"field {self.name}: categorical field needs levels")
        if self.kind == "continuous" and not self.min < self.max:
            raise ValueError(f"field {self.name}: need min < max")

    @property
    def width(self) -> int:
        return {"binary": 2, "categorical": len(self.levels), "continuous": 1}[self.kind]

    def parse(self, raw: str):
        s = raw.strip()
        if self.kind == "binary":
            low = s.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise DataError(f"field {self.name}: {raw!r} is not a binary value")
        if self.kind == "categorical":
            if s not in self.levels:
                raise DataError(f"field {self.name}: unknown level {raw!r}")
            return s
        try:
            return float(s)
        except ValueError:
            raise DataError(f"field {self.name}: {raw!r} is not a number") from None

    def format(self, value) -> str:
        if self.kind == "binary":
            return "True" if value else "False"
        if self.kind == "continuous":
            return repr(float(value))
        return str(value)

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == "categorical":
            d["levels"] = list(self.levels)
        if self.kind == "continuous":
            d["min"], d["max"] = self.min, self.max
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FieldSpec:
        return cls(
            name=d["name"],
            kind=d["kind"],
            levels=tuple(d.get("levels", ())),
            min=float(d.get("min", 0.0)),
            max=float(d.get("max", 1.0)),
        )


@dataclass(frozen=True)
class MetadataSchema:
    fields: tuple[FieldSpec, ...]
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError("metadata field names must be unique")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def num_slots(self) -> int:
        return len(self.fields)

    @property
    def slot_width(self) -> int:
        return max((f.width for f in self.fields), default=1)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def subset(self, names) -> MetadataSchema:
        """Schema restricted to ``names``, keeping schema order."""
        wanted = set(names)
        missing = wanted - set(self.names)
        if missing:
            raise ValueError(f"unknown metadata fields: {sorted(missing)}")
        return MetadataSchema(tuple(f for f in self.fields if f.name in wanted), self.classes)

    def to_dict(self) -> dict:
        return {"fields": [f.to_dict() for f in self.fields], "classes": list(self.classes)}

    @classmethod
    def from_dict(cls, d: dict) -> MetadataSchema:
        return cls(tuple(FieldSpec.from_dict(f) for f in d["fields"]), tuple(d.get("classes", ())))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> MetadataSchema:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (ch, H, W) in [0, 1]
    metadata: dict
    label: int


@dataclass
class Dataset:
    samples: list[Sample]
    schema: MetadataSchema
    class_names: list[str]
    dropped: int = 0

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


# -------------------------------------------------------------------- encoding

def encode_metadata(sample, schema: MetadataSchema) -> np.ndarray:
    """(M, w) slot encoding: binary [1,0]/[0,1], one-hot levels, scaled scalars."""
    values = sample.metadata if isinstance(sample, Sample) else sample
    w = schema.slot_width
    out = np.zeros((schema.num_slots, w))
    for i, f in enumerate(schema.fields):
        v = values[f.name]
        if f.kind == "binary":
            out[i, 0 if v else 1] = 1.0
        elif f.kind == "categorical":
            out[i, f.levels.index(v)] = 1.0
        else:
            x = (float(v) - f.min) / (f.max - f.min)
            if not 0.0 <= x <= 1.0:
                warnings.warn(f"field {f.name}: value {v} outside [{f.min}, {f.max}], clamped")
                x = min(max(x, 0.0), 1.0)
            out[i, 0] = x
    return out


def encode_batch(samples, schema: MetadataSchema) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack images, metadata encodings and labels for a list of samples."""
    images = np.stack([s.image for s in samples])
    meta = np.stack([encode_metadata(s, schema) for s in samples]) if schema.fields else np.zeros(
        (len(samples), 0, 1)
    )
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, meta, labels


# --------------------------------------------------------------------- images

def read_image(path, image_size: int | None = None) -> np.ndarray:
    """Decode, center-crop to square, resize (bilinear) and scale to [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        side = min(w, h)
        if w != h:
            left, top = (w - side) // 2, (h - side) // 2
            im = im.crop((left, top, left + side, top + side))
        if image_size is not None and side != image_size:
            im = im.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_image(path, image: np.ndarray) -> np.ndarray:
    """Write a (3, H, W) [0,1] image as 8-bit; returns the quantized uint8 HWC array."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path)
    return arr


def _find_image(image_dir: Path, sample_id: str) -> Path:
    direct = image_dir / sample_id
    if direct.is_file():
        return direct
    for ext in IMAGE_EXTS:
        p = image_dir / (sample_id + ext)
        if p.is_file():
            return p
    raise DataError(f"image for sample {sample_id!r} not found in {image_dir}")


# --------------------------------------------------------------------- loading

def load_dataset(csv_path, image_dir, schema: MetadataSchema, image_size: int | None = None,
                 id_column: str = "id", label_column: str = "diagnostic") -> Dataset:
    """Read a lesion CSV and its images; rows with any missing field are dropped."""
    csv_path, image_dir = Path(csv_path), Path(image_dir)
    if not csv_path.is_file():
        raise DataError(f"CSV not found: {csv_path}")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: empty file") from None
        needed = [id_column, label_column, *schema.names]
        absent = [c for c in needed if c not in header]
        if absent:
            raise DataError(f"{csv_path}: missing columns {absent}")
        col = {name: header.index(name) for name in needed}
        rows = []
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{csv_path}: malformed row {lineno} ({len(row)} columns, expected {len(header)})")
            if any(row[col[c]].strip().lower() in MISSING for c in needed):
                dropped += 1
                continue
            rows.append((lineno, row))

    class_names = list(schema.classes) or sorted({row[col[label_column]] for _, row in rows})
    samples = []
    for lineno, row in rows:
        label_name = row[col[label_column]]
        if label_name not in class_names:
            raise DataError(f"{csv_path}: row {lineno}: unknown diagnostic {label_name!r}")
        try:
            meta = {f.name: f.parse(row[col[f.name]]) for f in schema.fields}
        except DataError as e:
            raise DataError(f"{csv_path}: row {lineno}: {e}") from None
        sid = row[col[id_column]]
        image = read_image(_find_image(image_dir, sid), image_size)
        samples.append(Sample(sid, image, meta, class_names.index(label_name)))
    if dropped:
        log.info("dropped %d of %d rows with undefined metadata", dropped, dropped + len(samples))
    return Dataset(samples, schema, class_names, dropped)


def write_dataset(dataset: Dataset, out_dir, image_ext: str = ".ppm") -> None:
    """Write ``dataset.csv``, ``schema.json`` and one image per sample under ``images/``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    schema = dataset.schema
    with open(out / "dataset.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "diagnostic", *schema.names])
        for s in dataset.samples:
            w.writerow(
                [s.id, dataset.class_names[s.label], *(f.format(s.metadata[f.name]) for f in schema.fields)]
            )
    for s in dataset.samples:
        write_image(out / "images" / f"{s.id}{image_ext}", s.image)
    MetadataSchema(schema.fields, tuple(dataset.class_names)).save(out / "schema.json")


def load_dataset_dir(path, image_size: int | None = None) -> Dataset:
    """Load a directory produced by :func:`write_dataset`."""
    p = Path(path)
    if not (p / "schema.json").is_file():
        raise DataError(f"{p}: schema.json not found")
    return load_dataset(p / "dataset.csv", p / "images", MetadataSchema.load(p / "schema.json"), image_size)


# ---------------------------------------------------------------------- splits

def _allocate(n: int, ratios) -> list[int]:
    raw = [n * r for r in ratios]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    # keep every split non-empty when the class is large enough
    if n >= len(ratios):
        for i, r in enumerate(ratios):
            if counts[i] == 0 and r > 0:
                donor = max(range(len(counts)), key=lambda j: counts[j])
                counts[donor] -= 1
                counts[i] += 1
    return counts


def stratified_split(samples, ratios=(0.5, 0.15, 0.35), seed: int = 0):
    """Per-class proportional split into (train, val, test)."""
    ratios = tuple(float(r) for r in ratios)
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    rng = np.random.default_rng(seed)
    labels = np.array([s.label for s in samples])
    parts: list[list[int]] = [[] for _ in ratios]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < len(ratios):
            warnings.warn(f"class {c} has {len(idx)} samples for {len(ratios)} splits")
        idx = idx[rng.permutation(len(idx))]
        start = 0
        for k, n in enumerate(_allocate(len(idx), ratios)):
            parts[k].extend(idx[start:start + n].tolist())
            start += n
    return tuple([samples[i] for i in sorted(p)] for p in parts)


# ------------------------------------------------------------------ correlation

@dataclass
class CorrelationReport:
    names: list[str]
    coefficients: np.ndarray
    ranking: list[int]  # field indices, descending coefficient

    def ranked_names(self) -> list[str]:
        return [self.names[i] for i in self.ranking]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "field", "coefficient"])
            for r, i in enumerate(self.ranking, start=1):
                w.writerow([r, self.names[i], repr(float(self.coefficients[i]))])


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; 0 when either column has zero variance."""
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def field_columns(samples, f: FieldSpec) -> np.ndarray:
    """Numeric columns for one field: (n, 1) or (n, levels) for categoricals."""
    vals = [s.metadata[f.name] for s in samples]
    if f.kind == "binary":
        return np.array([[1.0 if v else 0.0] for v in vals])
    if f.kind == "categorical":
        return np.array([[1.0 if v == lv else 0.0 for lv in f.levels] for v in vals])
    return np.array([[float(v)] for v in vals])


def correlation_ranking(samples, schema: MetadataSchema) -> CorrelationReport:
    """Max |Pearson| between each field's columns and the one-hot class columns."""
    labels = np.array([s.label for s in samples])
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("correlation_ranking needs at least two classes")
    targets = [(labels == c).astype(np.float64) for c in classes]
    coef = np.zeros(schema.num_slots)
    for i, f in enumerate(schema.fields):
        cols = field_columns(samples, f)
        coef[i] = max(abs(pearson(cols[:, j], t)) for j in range(cols.shape[1]) for t in targets)
    ranking = sorted(range(len(coef)), key=lambda i: (-coef[i], i))
    return CorrelationReport(schema.names, coef, ranking)


def select_metadata(report: CorrelationReport, mode: str, k: int) -> list[str]:
    """Top-k (``HC``) or bottom-k (``LC``) fields; ties keep schema order."""
    mode = mode.upper()
    n = len(report.names)
    if not 0 <= k <= n:
        raise ValueError(f"k={k} outside [0, {n}]")
    if mode == "HC":
        order = sorted(range(n), key=lambda i: (-report.coefficients[i], i))
    elif mode == "LC":
        order = sorted(range(n), key=lambda i: (report.coefficients[i], i))
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return [report.names[i] for i in order[:k]]


def parse_subset(spec: str) -> tuple[str, int] | None:
    """'all' -> None, 'HC-5' -> ('HC', 5)."""
    if spec.lower() == "all":
        return None
    mode, _, k = spec.partition("-")
    if mode.upper() not in ("HC", "LC") or not k.isdigit():
        raise ValueError(f"bad metadata subset {spec!r}; expected all, HC-k or LC-k")
    return mode.upper(), int(k)


# -------------------------------------------------------------------- synthetic

_PALETTE = [
    (0.85, 0.10, 0.10),
    (0.10, 0.55, 0.15),
    (0.15, 0.20, 0.85),
    (0.90, 0.80, 0.10),
    (0.60, 0.10, 0.70),
    (0.10, 0.75, 0.80),
    (0.95, 0.50, 0.05),
    (0.30, 0.30, 0.30),
]
_BACKGROUND = (0.80, 0.62, 0.52)


@dataclass
class SynthSpec:
    """Recipe for a synthetic image + metadata corpus.

    ``fusion_necessity`` pairs up classes: the image blob encodes ``label // 2``
    and a binary ``key`` field encodes ``label % 2``, so neither modality alone
    decides the label. Otherwise each class gets its own blob when
    ``image_signal`` is set, and random blobs when it is not.
    """

    num_classes: int = 3
    samples_per_class: int | list[int] = 50
    image_size: int = 32
    image_signal: bool = True
    informative_fields: int = 0
    noise_fields: int = 0
    fusion_necessity: bool = False
    metadata_flip: float = 0.1
    pixel_noise: float = 0.05
    blob_radius: float | None = None
    shuffle_fields: bool = True
    seed: int = 0
    class_names: list[str] | None = None

    def __post_init__(self):
        if self.fusion_necessity and self.num_classes % 2:
            raise ValueError("fusion_necessity needs an even number of classes")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    def counts(self) -> list[int]:
        if isinstance(self.samples_per_class, int):
            return [self.samples_per_class] * self.num_classes
        if len(self.samples_per_class) != self.num_classes:
            raise ValueError("samples_per_class length must equal num_classes")
        return list(self.samples_per_class)

    @classmethod
    def from_dict(cls, d: dict) -> SynthSpec:
        return cls(**d)


def _blob_layout(n_groups: int, size: int, radius: float):
    out = []
    for g in range(n_groups):
        ang = 2 * math.pi * g / n_groups + math.pi / 4
        cx = size / 2 + 0.28 * size * math.cos(ang)
        cy = size / 2 + 0.28 * size * math.sin(ang)
        out.append({"cx": cx, "cy": cy, "radius": radius, "color": list(_PALETTE[g % len(_PALETTE)])})
    return out


def _render(rng, size, blob, noise):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    img = np.empty((3, size, size))
    for ch in range(3):
        img[ch] = _BACKGROUND[ch]
    cx = blob["cx"] + rng.uniform(-1, 1)
    cy = blob["cy"] + rng.uniform(-1, 1)
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= blob["radius"] ** 2
    for ch in range(3):
        img[ch][mask] = blob["color"][ch]
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.round(img * 255.0), 0, 255) / 255.0


def generate_synthetic(spec: SynthSpec) -> tuple[Dataset, dict]:
    """Deterministic planted-signal dataset plus a ground-truth manifest."""
    rng = np.random.default_rng(spec.seed)
    C = spec.num_classes
    size = spec.image_size
    radius = spec.blob_radius if spec.blob_radius is not None else size / 7
    names = spec.class_names or [f"class_{c}" for c in range(C)]
    n_groups = C // 2 if spec.fusion_necessity else C
    blobs = _blob_layout(n_groups, size, radius)

    fields: list[tuple[FieldSpec, str, int | None]] = []  # (spec, role, associated class)
    if spec.fusion_necessity:
        fields.append((FieldSpec("key", "binary"), "key", None))
    for j in range(spec.informative_fields):
        if j % 3 == 2:
            f = FieldSpec(f"inf_{j}", "continuous", min=0.0, max=100.0)
        else:
            f = FieldSpec(f"inf_{j}", "binary")
        fields.append((f, "informative", j % C))
    for j in range(spec.noise_fields):
        kind = ("binary", "categorical", "continuous")[j % 3]
        if kind == "categorical":
            f = FieldSpec(f"noise_{j}", kind, levels=("a", "b", "c"))
        elif kind == "continuous":
            f = FieldSpec(f"noise_{j}", kind, min=0.0, max=100.0)
        else:
            f = FieldSpec(f"noise_{j}", kind)
        fields.append((f, "noise", None))
    if spec.shuffle_fields and fields:
        fields = [fields[i] for i in rng.permutation(len(fields))]

    labels = np.concatenate([np.full(n, c) for c, n in enumerate(spec.counts())])
    labels = labels[rng.permutation(len(labels))]
    samples = []
    for i, y in enumerate(labels):
        y = int(y)
        if spec.fusion_necessity:
            blob = blobs[y // 2]
        elif spec.image_signal:
            blob = blobs[y]
        else:
            blob = blobs[int(rng.integers(n_groups))]
        image = _render(rng, size, blob, spec.pixel_noise)
        meta = {}
        for f, role, assoc in fields:
            if role == "key":
                meta[f.name] = bool(y % 2)
            elif role == "informative":
                hit = y == assoc
                if f.kind == "binary":
                    meta[f.name] = bool(hit ^ (rng.random() < spec.metadata_flip))
                else:
                    meta[f.name] = float(np.clip(rng.normal(70.0 if hit else 30.0, 10.0), 0.0, 100.0))
            elif f.kind == "binary":
                meta[f.name] = bool(rng.random() < 0.5)
            elif f.kind == "categorical":
                meta[f.name] = f.levels[int(rng.integers(len(f.levels)))]
            else:
                meta[f.name] = float(rng.uniform(0.0, 100.0))
        samples.append(Sample(f"synth_{i:05d}", image, meta, y))

    schema = MetadataSchema(tuple(f for f, _, _ in fields), tuple(names))
    manifest = {
        "spec": asdict(spec),
        "class_names": names,
        "fields": [
            {**f.to_dict(), "role": role, "associated_class": assoc} for f, role, assoc in fields
        ],
        "informative": [f.name for f, role, _ in fields if role in ("informative", "key")],
        "noise": [f.name for f, role, _ in fields if role == "noise"],
        "blobs": blobs,
        "blob_group": "label // 2" if spec.fusion_necessity else ("label" if spec.image_signal else "random"),
        "num_samples": len(samples),
    }
    return Dataset(samples, schema, names), manifest


def write_synthetic(spec: SynthSpec, out_dir) -> dict:
    dataset, manifest = generate_synthetic(spec)
    write_dataset(dataset, out_dir)
    manifest["files"] = sorted(f"images/{s.id}.ppm" for s in dataset.samples)
    Path(out_dir, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
