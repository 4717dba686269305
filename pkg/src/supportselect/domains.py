"""Seeded synthetic source/target domain pairs with controllable shift.

The source domain is a mixture of Gaussian class blobs. The target domain
draws fresh samples from the same blobs and pushes them through an affine
shift (a rotation inside a seeded random 2-D plane, a global scale, a
translation) plus additive Gaussian noise. The shift is invertible, so
per-class correspondence can always be verified.

Target labels exist but stay hidden: selection code only ever sees
``UnlabeledDataset.features``. The two sanctioned doors are ``annotate``
(reveals labels for an explicit index set, logged) and ``evaluation_labels``
(scoring only, logged separately). Nothing else in this package touches
``_hidden_labels``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError

FLOAT_FMT = "%.17g"  # lossless float64 round trip


@dataclass(frozen=True)
class DomainSpec:
    """Shape of one classification domain: C Gaussian blobs in R^input_dim."""

    num_classes: int
    input_dim: int
    samples_per_class: int
    class_center_spread: float
    within_class_std: float
    seed: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.input_dim < 2:
            raise ValidationError("input_dim must be >= 2")
        if self.samples_per_class < 1:
            raise ValidationError("samples_per_class must be >= 1")
        if self.class_center_spread <= 0 or self.within_class_std <= 0:
            raise ValidationError("spread and std must be positive")


@dataclass(frozen=True)
class ShiftSpec:
    """Affine covariate shift: rotation, global scale, translation, additive noise.

    ``rotation_mode='plane'`` rotates by the angle inside one seeded random
    2-D plane; ``'mix'`` rotates every one of ``dim // 2`` random orthogonal
    planes by the angle (a full orthogonal mix), which perturbs all feature
    directions instead of two.
    """

    rotation_angle: float = 0.0
    translation: tuple = ()
    noise_std: float = 0.0
    scale: float = 1.0
    rotation_mode: str = "plane"

    def __post_init__(self):
        if self.scale <= 0:
            raise ValidationError("scale must be positive")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")
        if self.rotation_mode not in ("plane", "mix"):
            raise ValidationError(f"unknown rotation_mode {self.rotation_mode!r}")
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    def translation_vector(self, dim):
        if not self.translation:
            return np.zeros(dim)
        t = np.asarray(self.translation, dtype=float)
        if t.shape != (dim,):
            raise ValidationError(
                f"translation has length {t.shape[0]}, expected {dim}"
            )
        return t


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    spec: DomainSpec | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValidationError("features and labels disagree on row count")

    def __len__(self):
        return self.features.shape[0]


class UnlabeledDataset:
    """Target-domain features whose true labels sit behind explicit doors.

    ``annotation_log`` and ``evaluation_log`` record every reveal, so a
    harness can audit that selection never peeked.
    """

    def __init__(self, features, hidden_labels, spec=None, shift=None):
        self.features = np.asarray(features, dtype=float)
        labels = np.asarray(hidden_labels, dtype=int)
        if self.features.shape[0] != labels.shape[0]:
            raise ValidationError("features and hidden labels disagree on row count")
        self._hidden_labels = labels
        self.spec = spec
        self.shift = shift
        self.annotation_log: list[tuple[int, ...]] = []
        self.evaluation_log: list[tuple[int, ...]] = []
        self.access_log: list[tuple[str, tuple[int, ...]]] = []  # ordered audit trail

    def __len__(self):
        return self.features.shape[0]

    @property
    def labels_available(self):
        return self._hidden_labels.min(initial=0) >= 0


def annotate(data: UnlabeledDataset, indices):
    """Reveal (feature, true label) pairs for a distinct index set.

    The only label door meant for selection-time use; every call is logged.
    """
    idx = np.asarray(list(indices), dtype=int)
    if idx.size != np.unique(idx).size:
        raise ValidationError("annotate requires distinct indices")
    if idx.size and (idx.min() < 0 or idx.max() >= len(data)):
        raise ValidationError("annotate index out of range")
    if idx.size and data._hidden_labels[idx].min() < 0:
        raise ValidationError("dataset was saved without labels; cannot annotate")
    revealed = tuple(int(i) for i in idx)
    data.annotation_log.append(revealed)
    data.access_log.append(("annotate", revealed))
    return data.features[idx].copy(), data._hidden_labels[idx].copy()


def evaluation_labels(data: UnlabeledDataset, indices=None):
    """Reveal labels for scoring/diagnostics only; logged separately."""
    if indices is None:
        idx = np.arange(len(data))
    else:
        idx = np.asarray(list(indices), dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= len(data)):
            raise ValidationError("evaluation index out of range")
    if idx.size and data._hidden_labels[idx].min() < 0:
        raise ValidationError("dataset was saved without labels; cannot evaluate")
    revealed = tuple(int(i) for i in idx)
    data.evaluation_log.append(revealed)
    data.access_log.append(("evaluate", revealed))
    return data._hidden_labels[idx].copy()


def true_class_indices(data: UnlabeledDataset, ground_truth_ok=False):
    """Group target indices by true class. Requires the explicit flag.

    Used only by the class-balanced ablation and the class-balanced random
    baseline; the flag guards the source-free contract.
    """
    if not ground_truth_ok:
        raise ValidationError(
            "grouping by true labels requires ground_truth_ok=True"
        )
    labels = evaluation_labels(data)
    classes = sorted(int(c) for c in np.unique(labels))
    return {c: np.flatnonzero(labels == c) for c in classes}


def _rotation_in_random_plane(dim, angle, rng):
    """Orthogonal matrix rotating by ``angle`` inside a seeded random 2-D plane."""
    u = rng.normal(size=dim)
    u /= np.linalg.norm(u)
    v = rng.normal(size=dim)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    outer_uu = np.outer(u, u)
    outer_vv = np.outer(v, v)
    outer_uv = np.outer(u, v)
    rot = np.eye(dim)
    rot += (np.cos(angle) - 1.0) * (outer_uu + outer_vv)
    rot += np.sin(angle) * (outer_uv.T - outer_uv)
    return rot


def _rotation_full_mix(dim, angle, rng):
    """Rotate every plane of a random orthogonal basis by ``angle``."""
    basis = np.linalg.qr(rng.normal(size=(dim, dim)))[0]
    block = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for j in range(0, dim - 1, 2):
        block[j, j] = c
        block[j + 1, j + 1] = c
        block[j, j + 1] = -s
        block[j + 1, j] = s
    return basis @ block @ basis.T


def shift_rotation(dim, shift: ShiftSpec, rng):
    if shift.rotation_mode == "mix":
        return _rotation_full_mix(dim, shift.rotation_angle, rng)
    return _rotation_in_random_plane(dim, shift.rotation_angle, rng)


def class_centers(spec: DomainSpec):
    """The blob centers shared by both domains, deterministic in the spec seed."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    return rng.normal(0.0, spec.class_center_spread, size=(spec.num_classes, spec.input_dim))


def _sample_blobs(spec, centers, rng):
    n = spec.samples_per_class
    feats = np.vstack(
        [c + rng.normal(0.0, spec.within_class_std, size=(n, spec.input_dim)) for c in centers]
    )
    labels = np.repeat(np.arange(spec.num_classes), n)
    perm = rng.permutation(len(labels))
    return feats[perm], labels[perm]


def generate_pair(spec: DomainSpec, shift: ShiftSpec):
    """Build (labeled source, unlabeled target) with the requested shift.

    Both domains draw fresh samples from the same class blobs; the target
    draw is then mapped through ``scale * R x + t`` and gets additive noise.
    Fully deterministic in ``spec.seed``.
    """
    centers = class_centers(spec)
    src_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    tgt_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2]))
    shift_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 3]))

    src_feats, src_labels = _sample_blobs(spec, centers, src_rng)
    tgt_feats, tgt_labels = _sample_blobs(spec, centers, tgt_rng)

    rot = shift_rotation(spec.input_dim, shift, shift_rng)
    t = shift.translation_vector(spec.input_dim)
    tgt_feats = shift.scale * (tgt_feats @ rot.T) + t
    if shift.noise_std > 0:
        tgt_feats = tgt_feats + tgt_rng.normal(0.0, shift.noise_std, size=tgt_feats.shape)

    source = LabeledDataset(src_feats, src_labels, spec=spec)
    target = UnlabeledDataset(tgt_feats, tgt_labels, spec=spec, shift=shift)
    return source, target


# ------------------------------------------------------------------ file I/O
#
# Plain-text format, UTF-8, LF endings, '.' decimals, 17 significant digits:
#
#   supportselect-dataset v1
#   kind: labeled|unlabeled
#   rows: M
#   dims: D
#   num_classes: C
#   seed: S
#   shift: angle,scale,noise_std,t0,...   (unlabeled only; '-' if none)
#   spread: ...
#   within_std: ...
#   samples_per_class: ...
#   data:
#   f0,f1,...,fD-1,label      (label -1 when saved with strip_labels)


def save_dataset(data, path, strip_labels=False):
    """Write a dataset to ``path``. Round trip is lossless unless labels are stripped."""
    is_unlabeled = isinstance(data, UnlabeledDataset)
    spec = data.spec
    lines = ["supportselect-dataset v1"]
    lines.append(f"kind: {'unlabeled' if is_unlabeled else 'labeled'}")
    lines.append(f"rows: {len(data)}")
    lines.append(f"dims: {data.features.shape[1]}")
    lines.append(f"num_classes: {spec.num_classes if spec else -1}")
    lines.append(f"seed: {spec.seed if spec else -1}")
    shift = getattr(data, "shift", None)
    if shift is not None:
        parts = [
            shift.rotation_mode,
            FLOAT_FMT % shift.rotation_angle,
            FLOAT_FMT % shift.scale,
            FLOAT_FMT % shift.noise_std,
        ]
        parts += [FLOAT_FMT % t for t in shift.translation]
        lines.append("shift: " + ",".join(parts))
    else:
        lines.append("shift: -")
    lines.append(f"spread: {FLOAT_FMT % spec.class_center_spread if spec else '-'}")
    lines.append(f"within_std: {FLOAT_FMT % spec.within_class_std if spec else '-'}")
    lines.append(f"samples_per_class: {spec.samples_per_class if spec else -1}")
    lines.append("data:")
    labels = data._hidden_labels if is_unlabeled else data.labels
    for row, label in zip(data.features, labels):
        cells = [FLOAT_FMT % v for v in row]
        cells.append(str(-1 if strip_labels else int(label)))
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _header_value(lines, lineno, key, path):
    if lineno >= len(lines):
        raise ParseError("truncated header", path=path, line=lineno + 1)
    line = lines[lineno]
    if not line.startswith(key + ":"):
        raise ParseError(f"expected '{key}:' header", path=path, line=lineno + 1)
    return line[len(key) + 1 :].strip()


def load_dataset(path):
    """Read a dataset written by ``save_dataset``; refuses partial files."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != "supportselect-dataset v1":
        raise ParseError("not a supportselect dataset file", path=path, line=1)
    kind = _header_value(lines, 1, "kind", path)
    if kind not in ("labeled", "unlabeled"):
        raise ParseError(f"unknown kind {kind!r}", path=path, line=2)
    try:
        rows = int(_header_value(lines, 2, "rows", path))
        dims = int(_header_value(lines, 3, "dims", path))
        num_classes = int(_header_value(lines, 4, "num_classes", path))
        seed = int(_header_value(lines, 5, "seed", path))
    except ValueError as exc:
        raise ParseError(f"bad header value: {exc}", path=path) from exc
    shift_raw = _header_value(lines, 6, "shift", path)
    spread_raw = _header_value(lines, 7, "spread", path)
    within_raw = _header_value(lines, 8, "within_std", path)
    spc = int(_header_value(lines, 9, "samples_per_class", path))
    if _header_value(lines, 10, "data", path) != "":
        raise ParseError("malformed data marker", path=path, line=11)

    body = lines[11:]
    if len(body) < rows:
        raise ParseError(
            f"truncated file: expected {rows} data rows, found {len(body)}",
            path=path,
            line=len(lines),
        )
    feats = np.empty((rows, dims))
    labels = np.empty(rows, dtype=int)
    for i in range(rows):
        cells = body[i].split(",")
        if len(cells) != dims + 1:
            raise ParseError(
                f"expected {dims + 1} columns, found {len(cells)}",
                path=path,
                line=12 + i,
            )
        try:
            feats[i] = [float(c) for c in cells[:-1]]
            labels[i] = int(cells[-1])
        except ValueError as exc:
            raise ParseError(f"bad cell: {exc}", path=path, line=12 + i) from exc
    if num_classes > 0 and labels.max(initial=-1) >= num_classes:
        raise ValidationError(f"label {labels.max()} out of range for C={num_classes}")

    spec = None
    if num_classes > 0 and spread_raw != "-":
        spec = DomainSpec(
            num_classes=num_classes,
            input_dim=dims,
            samples_per_class=spc,
            class_center_spread=float(spread_raw),
            within_class_std=float(within_raw),
            seed=seed,
        )
    shift = None
    if shift_raw != "-":
        cells = shift_raw.split(",")
        vals = [float(v) for v in cells[1:]]
        shift = ShiftSpec(
            rotation_mode=cells[0],
            rotation_angle=vals[0],
            scale=vals[1],
            noise_std=vals[2],
            translation=tuple(vals[3:]),
        )
    if kind == "labeled":
        if labels.min(initial=0) < 0:
            raise ValidationError("labeled dataset contains the -1 sentinel")
        return LabeledDataset(feats, labels, spec=spec)
    return UnlabeledDataset(feats, labels, spec=spec, shift=shift)
