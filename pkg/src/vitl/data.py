"""Trajectory observations, style embedding, and training-set construction.

A trajectory dataset holds, for each of n identities, m observed
(style point, output vector) pairs plus an optional binary mask saying which
pairs may be used for learning.  Training sets are built from it in two ways:
with a fixed reference style as the input (t = n) or with every observed pair
as an input (t = n*m).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from .exceptions import ConfigError, DataError

THETA0_MATCH_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """Per-identity style observations.

    identities: n identity ids (order defines the identity index).
    emotions:   (n, m, p) observed style locations.
    landmarks:  (n, m, d) observed output vectors.
    labels:     optional (n, m) style labels.
    mask:       optional (n, m) array in {0, 1}; 1 = usable for learning.
    """

    identities: tuple
    emotions: np.ndarray
    landmarks: np.ndarray
    labels: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        emotions = np.asarray(self.emotions, dtype=float)
        landmarks = np.asarray(self.landmarks, dtype=float)
        if emotions.ndim != 3 or landmarks.ndim != 3:
            raise DataError("emotions must be (n, m, p) and landmarks (n, m, d)")
        if emotions.shape[:2] != landmarks.shape[:2]:
            raise DataError("emotions and landmarks disagree on (n, m)")
        if len(self.identities) != emotions.shape[0]:
            raise DataError("identity count does not match data arrays")
        if not np.all(np.isfinite(emotions)) or not np.all(np.isfinite(landmarks)):
            raise DataError("non-finite coordinates in dataset")
        object.__setattr__(self, "identities", tuple(self.identities))
        object.__setattr__(self, "emotions", emotions)
        object.__setattr__(self, "landmarks", landmarks)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=object)
            if labels.shape != emotions.shape[:2]:
                raise DataError("labels must be (n, m)")
            object.__setattr__(self, "labels", labels)
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape != emotions.shape[:2]:
                raise DataError("mask must be (n, m)")
            if not np.all((mask == 0) | (mask == 1)):
                raise DataError("mask entries must be 0 or 1")
            object.__setattr__(self, "mask", mask.astype(np.int8))

    @property
    def n(self):
        return self.emotions.shape[0]

    @property
    def m(self):
        return self.emotions.shape[1]

    @property
    def p(self):
        return self.emotions.shape[2]

    @property
    def d(self):
        return self.landmarks.shape[2]

    def mask_as_bool(self):
        if self.mask is None:
            return np.ones((self.n, self.m), dtype=bool)
        return self.mask.astype(bool)


@dataclass(frozen=True, eq=False)
class TripletDataset:
    """Training triplets: inputs, output blocks, and per-input style lists.

    X:        (t, d) input vectors.
    Y:        (t, m, d) output blocks; row i, column j holds y_{i,j}.
    thetas:   (t, m, p) style locations matching Y.
    observed: (t, m) bool; False pairs are excluded from fitting and risks.

    The flat pair ordering is identity-major: pair (i, j) <-> row i*m + j.
    """

    X: np.ndarray
    Y: np.ndarray
    thetas: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        thetas = np.asarray(self.thetas, dtype=float)
        observed = np.asarray(self.observed, dtype=bool)
        if X.ndim != 2 or Y.ndim != 3 or thetas.ndim != 3:
            raise DataError("X must be (t, d), Y (t, m, d), thetas (t, m, p)")
        t, m, d = Y.shape
        if X.shape != (t, d) or thetas.shape[:2] != (t, m) or observed.shape != (t, m):
            raise DataError("inconsistent triplet shapes")
        for name, arr in (("X", X), ("Y", Y), ("thetas", thetas)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in {name}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "observed", observed)

    @property
    def t(self):
        return self.Y.shape[0]

    @property
    def m(self):
        return self.Y.shape[1]

    @property
    def d(self):
        return self.Y.shape[2]

    @property
    def p(self):
        return self.thetas.shape[2]

    @property
    def n_observed(self):
        return int(self.observed.sum())


def pair_to_row(i, j, m):
    """Flat row index of pair (i, j) under identity-major ordering."""
    return i * m + j


def row_to_pair(row, m):
    """Inverse of pair_to_row."""
    return divmod(row, m)


def _find_theta0(data, i, theta0):
    if isinstance(theta0, str):
        if data.labels is None:
            raise DataError("theta0 given as a label but the dataset has no labels")
        matches = np.flatnonzero(data.labels[i] == theta0)
    else:
        target = np.asarray(theta0, dtype=float).ravel()
        if target.shape[0] != data.p:
            raise DataError(f"theta0 has dimension {target.shape[0]}, expected {data.p}")
        dist = np.max(np.abs(data.emotions[i] - target), axis=1)
        matches = np.flatnonzero(dist <= THETA0_MATCH_TOL)
    return int(matches[0]) if matches.size else None


def build_single(data, theta0):
    """Training set whose inputs all come from the reference style ``theta0``.

    ``theta0`` is a label (matched exactly against the dataset's labels) or a
    coordinate vector (matched within 1e-10).  Every identity must carry such
    an observation; the mask gates output pairs only.
    """
    n, m = data.n, data.m
    j0 = np.empty(n, dtype=int)
    for i in range(n):
        j = _find_theta0(data, i, theta0)
        if j is None:
            raise DataError(
                f"identity {data.identities[i]!r} has no observation at the reference style"
            )
        j0[i] = j
    X = data.landmarks[np.arange(n), j0].copy()
    return TripletDataset(
        X=X,
        Y=data.landmarks.copy(),
        thetas=data.emotions.copy(),
        observed=data.mask_as_bool(),
    )


def build_joint(data):
    """Training set using every observed (identity, style) pair as an input.

    Row i*m + l takes the pair (i, l) as its input; its output block is
    identity i's full trajectory.  A row is usable only when its own input
    pair is unmasked, and each output pair additionally requires its own
    mask bit.
    """
    n, m, d = data.n, data.m, data.d
    X = data.landmarks.reshape(n * m, d).copy()
    Y = np.repeat(data.landmarks, m, axis=0)
    thetas = np.repeat(data.emotions, m, axis=0)
    eta = data.mask_as_bool()
    observed = np.repeat(eta, m, axis=0) & eta.reshape(n * m, 1)
    return TripletDataset(X=X, Y=Y, thetas=thetas, observed=observed)


def apply_mask(data, observed_fraction, seed):
    """Randomly keep round(observed_fraction * n * m) observations.

    Deterministic in ``seed``.  An existing mask is intersected with the
    fresh draw, so masking with fraction 1.0 leaves the dataset unchanged.
    """
    if not 0.0 <= observed_fraction <= 1.0:
        raise ValueError("observed_fraction must lie in [0, 1]")
    total = data.n * data.m
    n_keep = int(round(observed_fraction * total))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    drawn = np.zeros(total, dtype=np.int8)
    drawn[rng.permutation(total)[:n_keep]] = 1
    drawn = drawn.reshape(data.n, data.m)
    if data.mask is not None:
        drawn = drawn * data.mask
    return replace(data, mask=drawn)


def subset_identities(data, indices):
    """New dataset restricted to the given identity indices (in order)."""
    indices = np.asarray(indices, dtype=int)
    return TrajectoryDataset(
        identities=tuple(data.identities[i] for i in indices),
        emotions=data.emotions[indices].copy(),
        landmarks=data.landmarks[indices].copy(),
        labels=None if data.labels is None else data.labels[indices].copy(),
        mask=None if data.mask is None else data.mask[indices].copy(),
    )


def _parse_embedding_rows(rows, origin):
    table = {}
    p = None
    for lineno, row in rows:
        if not row or all(not cell.strip() for cell in row):
            continue
        label = row[0].strip()
        try:
            coords = np.array([float(v) for v in row[1:]], dtype=float)
        except ValueError as exc:
            raise ConfigError(f"{origin}: bad coordinates on line {lineno}") from exc
        if coords.size == 0:
            raise ConfigError(f"{origin}: no coordinates on line {lineno}")
        if p is None:
            p = coords.size
        elif coords.size != p:
            raise ConfigError(f"{origin}: inconsistent dimension on line {lineno}")
        if label in table:
            raise ConfigError(f"{origin}: duplicate label {label!r}")
        table[label] = coords
    if not table:
        raise ConfigError(f"{origin}: empty embedding table")
    return table


def load_embedding(path):
    """Read a style-label table: one CSV row per label, ``label,c1,...,cp``."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(enumerate(csv.reader(fh), start=1))
    except OSError as exc:
        raise ConfigError(f"cannot read embedding file {path}: {exc}") from exc
    return _parse_embedding_rows(rows, str(path))


def builtin_embedding():
    """Packaged valence-arousal table: unit vectors, neutral at the origin.

    The entries are editable placeholders at qualitatively sensible angles;
    substitute a table derived from your own annotation data via
    load_embedding for serious use.
    """
    text = resources.files("vitl").joinpath("resources/emotions_va.csv").read_text("utf-8")
    rows = list(enumerate(csv.reader(text.splitlines()), start=1))
    return _parse_embedding_rows(rows, "builtin embedding")


def embed_labels(labels, table=None):
    """Map style labels to coordinates; unknown labels raise ConfigError."""
    if table is None:
        table = builtin_embedding()
    out = []
    for label in labels:
        if label not in table:
            raise ConfigError(f"unknown emotion label {label!r}")
        out.append(table[label])
    return np.array(out, dtype=float)


def _dataset_header(p, d):
    return (
        ["identity_id", "emotion_label"]
        + [f"theta_{k + 1}" for k in range(p)]
        + [f"lm_{k + 1}" for k in range(d)]
    )


def read_dataset(path):
    """Read a trajectory dataset from delimiter-separated text.

    One row per observation: identity_id, emotion_label, p style coordinates
    (columns named theta_*), d output coordinates.  A header row is required;
    every identity must appear with the same number of observations.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        if header[:2] != ["identity_id", "emotion_label"]:
            raise DataError(f"{path}: header must start with identity_id,emotion_label")
        p = sum(1 for h in header[2:] if h.startswith("theta_"))
        d = len(header) - 2 - p
        if p < 1 or d < 1:
            raise DataError(f"{path}: header must list theta_* then output columns")
        groups = {}
        order = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            ident = row[0].strip()
            label = row[1].strip()
            try:
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise DataError(f"{path}: bad number on line {lineno}") from exc
            if ident not in groups:
                groups[ident] = []
                order.append(ident)
            groups[ident].append((label, values[:p], values[p:]))
    if not order:
        raise DataError(f"{path}: no observations")
    m = len(groups[order[0]])
    for ident in order:
        if len(groups[ident]) != m:
            raise DataError(
                f"{path}: identity {ident!r} has {len(groups[ident])} observations, expected {m}"
            )
    n = len(order)
    emotions = np.empty((n, m, p))
    landmarks = np.empty((n, m, d))
    labels = np.empty((n, m), dtype=object)
    for i, ident in enumerate(order):
        for j, (label, theta, lm) in enumerate(groups[ident]):
            labels[i, j] = label
            emotions[i, j] = theta
            landmarks[i, j] = lm
    return TrajectoryDataset(
        identities=tuple(order), emotions=emotions, landmarks=landmarks, labels=labels
    )


def write_dataset(data, path):
    """Write a trajectory dataset in the format accepted by read_dataset."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_dataset_header(data.p, data.d))
        for i, ident in enumerate(data.identities):
            for j in range(data.m):
                label = "" if data.labels is None else str(data.labels[i, j])
                writer.writerow(
                    [ident, label]
                    + [repr(v) for v in data.emotions[i, j]]
                    + [repr(v) for v in data.landmarks[i, j]]
                )
