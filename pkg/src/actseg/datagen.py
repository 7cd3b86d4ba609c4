"""Synthetic cross-domain segmentation scenes, dataset splits and file ingestion.

A scene is a nested lesion (edema around a tumour core around an enhancing
focus) on a background.  The same geometry can be rendered in two domains
that differ in class contrast, gamma, a smooth bias field and noise.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import check_label_mask

log = logging.getLogger(__name__)

__all__ = [
    "BACKGROUND",
    "CORE",
    "ENHANCING",
    "EDEMA",
    "ShapeParams",
    "Scene",
    "DomainStyle",
    "DataConfig",
    "DatasetSplits",
    "SOURCE_STYLE",
    "TARGET_STYLE",
    "generate_scene",
    "render",
    "make_splits",
    "load_dataset",
    "read_pgm",
    "write_pgm",
    "write_manifest",
]

BACKGROUND, CORE, ENHANCING, EDEMA = 0, 1, 2, 3
MANIFEST_ROLES = ("source", "target_labeled", "target_unlabeled", "target_test")


@dataclass(frozen=True)
class ShapeParams:
    """Geometry of the nested lesion, radii given as fractions of min(H, W).

    ``min_radius`` and ``max_radius`` bound the outer (whole lesion) ellipse
    semi-axes.  Inner levels shrink by a random factor in ``shrink``.
    """

    min_radius: float = 0.14
    max_radius: float = 0.30
    shrink: tuple = (0.45, 0.75)
    max_levels: int = 3
    require_all_classes: bool = True
    max_retries: int = 32


@dataclass(frozen=True)
class Scene:
    gt: np.ndarray
    seed: int

    @property
    def shape(self):
        return self.gt.shape


@dataclass(frozen=True)
class DomainStyle:
    class_intensities: tuple
    noise_sigma: float = 0.0
    gamma: float = 1.0
    bias_amplitude: float = 0.0

    def __post_init__(self):
        if not all(0.0 <= v <= 1.0 for v in self.class_intensities):
            raise ValueError("class_intensities must lie in [0, 1]")
        if not 0.2 < self.gamma < 5.0:
            raise ValueError(f"gamma must lie in (0.2, 5.0), got {self.gamma}")
        if not 0.0 <= self.noise_sigma <= 0.5:
            raise ValueError(f"noise_sigma must lie in [0, 0.5], got {self.noise_sigma}")
        if self.bias_amplitude < 0:
            raise ValueError("bias_amplitude must be >= 0")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["class_intensities"] = tuple(float(v) for v in d["class_intensities"])
        return cls(**d)


# Source contrast: dark background, bright enhancing focus.  The target
# domain lifts the background onto the source background/core boundary and
# adds a stronger bias field, so source-trained cues are unreliable there
# while no target class shares a source intensity with a different label.
SOURCE_STYLE = DomainStyle((0.10, 0.45, 0.90, 0.65), noise_sigma=0.05, gamma=1.0, bias_amplitude=0.10)
TARGET_STYLE = DomainStyle((0.36, 0.58, 0.95, 0.78), noise_sigma=0.07, gamma=1.0, bias_amplitude=0.20)


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    n_source: int = 40
    n_target_labeled: int = 1
    n_target_unlabeled: int = 32
    n_test: int = None
    num_classes: int = 4
    source_style: DomainStyle = SOURCE_STYLE
    target_style: DomainStyle = TARGET_STYLE
    shape: ShapeParams = field(default_factory=ShapeParams)
    # size of the held-out source test set (domain gap diagnostics only)
    n_source_test: int = None

    def resolved_n_test(self):
        if self.n_test is not None:
            return self.n_test
        # 25% of all target scenes
        return max(1, round((self.n_target_labeled + self.n_target_unlabeled) / 3))


@dataclass
class DatasetSplits:
    """Labeled source, labeled target, unlabeled target and target test sets.

    ``target_unlabeled_labels`` holds ground truth for the unlabeled images when
    it is known (synthetic data); only the fully supervised "joint" reference
    is allowed to read it.
    """

    source_labeled: list
    target_labeled: list
    target_unlabeled: list
    target_test: list
    num_classes: int = 4
    target_unlabeled_labels: list = None
    source_test: list = None
    seeds: dict = None

    @property
    def image_shape(self):
        for pairs in (self.source_labeled, self.target_labeled, self.target_test):
            if pairs:
                return np.shape(pairs[0][0])
        return np.shape(self.target_unlabeled[0])

    def sizes(self):
        return {
            "source_labeled": len(self.source_labeled),
            "target_labeled": len(self.target_labeled),
            "target_unlabeled": len(self.target_unlabeled),
            "target_test": len(self.target_test),
        }


def _ellipse(h, w, cy, cx, ry, rx, angle):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _draw_lesion(rng, h, w, shape_params):
    size = min(h, w)
    ry, rx = rng.uniform(shape_params.min_radius, shape_params.max_radius, 2) * size
    margin_y, margin_x = ry + 1, rx + 1
    cy = rng.uniform(margin_y, h - 1 - margin_y) if h - 1 > 2 * margin_y else (h - 1) / 2
    cx = rng.uniform(margin_x, w - 1 - margin_x) if w - 1 > 2 * margin_x else (w - 1) / 2
    n_levels = int(rng.integers(1, shape_params.max_levels + 1))

    gt = np.zeros((h, w), dtype=np.int64)
    region = np.ones((h, w), dtype=bool)
    # outer to inner: edema, core, enhancing; each level clipped to its parent
    for label in (EDEMA, CORE, ENHANCING)[:n_levels]:
        angle = rng.uniform(0, math.pi)
        region = region & _ellipse(h, w, cy, cx, ry, rx, angle)
        gt[region] = label
        k = rng.uniform(*shape_params.shrink)
        # keep inner centre inside the current ellipse
        cy += rng.uniform(-0.2, 0.2) * ry
        cx += rng.uniform(-0.2, 0.2) * rx
        ry, rx = ry * k, rx * k
    return gt


def generate_scene(seed, height=64, width=64, shape_params=None):
    """Draw one nested-lesion scene; bit-identical for a given seed."""
    shape_params = shape_params or ShapeParams()
    if height < 32 or width < 32:
        raise ValueError(f"scene must be at least 32x32, got {height}x{width}")
    if shape_params.min_radius <= 0 or shape_params.max_radius < shape_params.min_radius:
        raise ValueError("degenerate lesion radius: need 0 < min_radius <= max_radius")
    if not 1 <= shape_params.max_levels <= 3:
        raise ValueError("max_levels must be in 1..3")
    if shape_params.min_radius * min(height, width) < 1:
        raise ValueError("degenerate lesion radius: lesion would have zero area")

    seq = np.random.SeedSequence(int(seed))
    for attempt in range(shape_params.max_retries):
        rng = np.random.default_rng(seq.spawn(1)[0] if attempt else seq)
        gt = _draw_lesion(rng, height, width, shape_params)
        if np.count_nonzero(gt) < 16:
            continue
        if shape_params.require_all_classes and len(np.unique(gt)) < 4:
            continue
        return Scene(gt=gt, seed=int(seed))
    raise RuntimeError(f"seed {seed}: no valid scene after {shape_params.max_retries} attempts")


def _bias_field(rng, h, w, amplitude):
    if amplitude == 0:
        return np.ones((h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    fy, fx = rng.uniform(0.3, 0.9, 2)
    py, px = rng.uniform(0, 2 * math.pi, 2)
    field_ = np.cos(2 * math.pi * fy * yy / h + py) * np.cos(2 * math.pi * fx * xx / w + px)
    return 1.0 + amplitude * field_


def render(scene, style, seed):
    """Render a scene: clamp(bias * intensity[gt] ** gamma + noise, 0, 1)."""
    gt = scene.gt
    n_classes = len(style.class_intensities)
    if gt.max() >= n_classes:
        raise ValueError(f"style defines {n_classes} intensities, scene uses label {gt.max()}")
    rng = np.random.default_rng([int(scene.seed), int(seed)])
    h, w = gt.shape
    base = np.asarray(style.class_intensities, dtype=float) ** style.gamma
    bias = _bias_field(rng, h, w, style.bias_amplitude)
    img = bias * base[gt]
    if style.noise_sigma > 0:
        img = img + rng.normal(0.0, style.noise_sigma, size=(h, w))
    return np.clip(img, 0.0, 1.0)


def make_splits(config, seed):
    """Generate disjoint, seeded scene sets rendered in their domain's style."""
    c = config
    if c.n_source < 1 or c.n_target_unlabeled < 0 or c.n_target_labeled < 0:
        raise ValueError("split sizes must be non-negative and n_source >= 1")
    if c.n_target_labeled > c.n_source / 10:
        raise ValueError("target-labeled budget exceeds SSDA regime")
    n_test = c.resolved_n_test()
    n_src_test = c.n_source_test if c.n_source_test is not None else n_test
    counts = {
        "source_labeled": c.n_source,
        "target_labeled": c.n_target_labeled,
        "target_unlabeled": c.n_target_unlabeled,
        "target_test": n_test,
        "source_test": n_src_test,
    }
    total = sum(counts.values())
    state = np.random.SeedSequence(int(seed)).generate_state(total, dtype=np.uint64)
    scene_seeds = [int(s) for s in state]
    if len(set(scene_seeds)) != total:
        raise RuntimeError("scene seed collision")

    seeds, pos = {}, 0
    for name, n in counts.items():
        seeds[name] = scene_seeds[pos:pos + n]
        pos += n

    if not 2 <= c.num_classes <= 4:
        raise ValueError(f"synthetic scenes support 2..4 classes, got {c.num_classes}")

    def build(name, style):
        out = []
        for s in seeds[name]:
            scene = generate_scene(s, c.height, c.width, c.shape)
            # fewer classes merge the innermost labels into the last one
            out.append((render(scene, style, seed), np.minimum(scene.gt, c.num_classes - 1)))
        return out

    unlabeled = build("target_unlabeled", c.target_style)
    return DatasetSplits(
        source_labeled=build("source_labeled", c.source_style),
        target_labeled=build("target_labeled", c.target_style),
        target_unlabeled=[img for img, _ in unlabeled],
        target_test=build("target_test", c.target_style),
        num_classes=c.num_classes,
        target_unlabeled_labels=[gt for _, gt in unlabeled],
        source_test=build("source_test", c.source_style),
        seeds=seeds,
    )


# ---------------------------------------------------------------------------
# PGM and manifest I/O


def _read_token(data, pos):
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_pgm(path):
    """Read a binary (P5) PGM; returns raw integer pixel values and maxval."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    data = path.read_bytes()
    magic, pos = _read_token(data, 0)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    try:
        w_tok, pos = _read_token(data, pos)
        h_tok, pos = _read_token(data, pos)
        m_tok, pos = _read_token(data, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header") from None
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    count = width * height
    body = data[pos:pos + count * dtype.itemsize]
    if len(body) != count * dtype.itemsize:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=dtype).reshape(height, width).astype(np.int64), maxval


def write_pgm(path, values, maxval=255):
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("PGM payload must be 2-D")
    if values.min() < 0 or values.max() > maxval:
        raise ValueError(f"pixel values must lie in [0, {maxval}]")
    dtype = "u1" if maxval < 256 else ">u2"
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(values.astype(dtype).tobytes())


def _image_to_pgm(path, img, maxval=65535):
    write_pgm(path, np.rint(np.clip(img, 0, 1) * maxval).astype(np.int64), maxval)


def write_manifest(splits, directory):
    """Dump splits as PGM files plus a tab-separated manifest; returns its path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []

    def emit(role, idx, img, mask):
        img_path = directory / f"{role}_{idx:03d}.pgm"
        _image_to_pgm(img_path, img)
        mask_field = "-"
        if mask is not None:
            mask_path = directory / f"{role}_{idx:03d}_mask.pgm"
            write_pgm(mask_path, mask, 255)
            mask_field = mask_path.name
        lines.append(f"{role}\t{img_path.name}\t{mask_field}")

    for i, (img, m) in enumerate(splits.source_labeled):
        emit("source", i, img, m)
    for i, (img, m) in enumerate(splits.target_labeled):
        emit("target_labeled", i, img, m)
    for i, img in enumerate(splits.target_unlabeled):
        emit("target_unlabeled", i, img, None)
    for i, (img, m) in enumerate(splits.target_test):
        emit("target_test", i, img, m)
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_dataset(manifest_path, num_classes=4):
    """Build splits from a ``role<TAB>image<TAB>mask`` manifest of PGM files.

    Relative paths resolve against the manifest's directory.  Images are scaled
    to [0, 1] by their PGM maxval; mask pixel values are class indices.  A mask
    given for a ``target_unlabeled`` entry is kept aside as revealed labels.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing file: {manifest_path}")
    root = manifest_path.parent
    groups = {role: [] for role in MANIFEST_ROLES}
    revealed = []
    shape = None

    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{manifest_path}:{lineno}: expected 3 tab-separated fields")
        role, img_field, mask_field = parts
        if role not in groups:
            raise ValueError(f"{manifest_path}:{lineno}: unknown role {role!r}")
        img_path = root / img_field
        raw, maxval = read_pgm(img_path)
        img = raw / float(maxval)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ValueError(
                f"{manifest_path}:{lineno}: {img_path} is {img.shape[0]}x{img.shape[1]}, "
                f"expected {shape[0]}x{shape[1]}"
            )
        mask = None
        if mask_field != "-":
            mask_path = root / mask_field
            mask, _ = read_pgm(mask_path)
            if mask.shape != shape:
                raise ValueError(f"{manifest_path}:{lineno}: mask {mask_path} has shape {mask.shape}")
            try:
                mask = check_label_mask(mask, num_classes)
            except ValueError as exc:
                raise ValueError(f"{manifest_path}:{lineno}: {mask_path}: {exc}") from None
        elif role != "target_unlabeled":
            raise ValueError(f"{manifest_path}:{lineno}: role {role} requires a mask")

        if role == "target_unlabeled":
            groups[role].append(img)
            revealed.append(mask)
        else:
            groups[role].append((img, mask))

    has_revealed = bool(revealed) and all(m is not None for m in revealed)
    log.debug("loaded %s", {k: len(v) for k, v in groups.items()})
    return DatasetSplits(
        source_labeled=groups["source"],
        target_labeled=groups["target_labeled"],
        target_unlabeled=groups["target_unlabeled"],
        target_test=groups["target_test"],
        num_classes=num_classes,
        target_unlabeled_labels=revealed if has_revealed else None,
    )


def data_config_from_dict(d):
    d = dict(d)
    for key in ("source_style", "target_style"):
        if key in d and not isinstance(d[key], DomainStyle):
            d[key] = DomainStyle.from_dict(d[key])
    if "shape" in d and not isinstance(d["shape"], ShapeParams):
        s = dict(d["shape"])
        if "shrink" in s:
            s["shrink"] = tuple(s["shrink"])
        d["shape"] = ShapeParams(**s)
    known = set(DataConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown data config keys: {sorted(unknown)}")
    return DataConfig(**d)

