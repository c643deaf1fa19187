"""Synthetic labelled data, client partitioning and the partition file format."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence, Union

import numpy as np

from .errors import ConfigError, ParseError

FORMAT_TAG = "cmfl-partitions v1"


class Sample(NamedTuple):
    id: int
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Columnar list of samples: row ``i`` is sample ``ids[i]``."""

    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ConfigError(f"features must be 2-D, got shape {x.shape}")
        if not (len(ids) == len(x) == len(y)):
            raise ConfigError("ids, features and labels must have equal length")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(int(self.ids[i]), self.features[i], int(self.labels[i]))

    def subset(self, index) -> "SampleSet":
        return SampleSet(self.ids[index], self.features[index], self.labels[index])

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    @classmethod
    def concat(cls, parts: Sequence["SampleSet"]) -> "SampleSet":
        return cls(
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )

    def same_as(self, other: "SampleSet") -> bool:
        return (
            np.array_equal(self.ids, other.ids)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True, eq=False)
class Partition:
    client_id: int
    samples: SampleSet

    @property
    def n_k(self) -> int:
        return len(self.samples)


@dataclass(eq=False)
class FederatedDataset:
    partitions: list
    num_classes: int
    d_in: int
    test: Union[SampleSet, None] = field(default=None)

    def __post_init__(self):
        if not self.partitions:
            raise ConfigError("a federated dataset needs at least one partition")
        for k, part in enumerate(self.partitions):
            if part.client_id != k:
                raise ConfigError(f"partition {k} carries client_id {part.client_id}")
            if part.n_k < 1:
                raise ConfigError(f"client {k} owns no samples")
            if part.samples.d_in != self.d_in:
                raise ConfigError(f"client {k} has d_in={part.samples.d_in}, expected {self.d_in}")
            labels = part.samples.labels
            if labels.min() < 0 or labels.max() >= self.num_classes:
                raise ConfigError(f"client {k} has a label outside [0, {self.num_classes})")

    @property
    def K(self) -> int:
        return len(self.partitions)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([p.n_k for p in self.partitions], dtype=np.int64)

    @property
    def weights(self) -> np.ndarray:
        """p_k = n_k / sum_j n_j."""
        n = self.sizes.astype(np.float64)
        return n / n.sum()

    def all_samples(self) -> SampleSet:
        return SampleSet.concat([p.samples for p in self.partitions])

    def same_as(self, other: "FederatedDataset") -> bool:
        return (
            self.K == other.K
            and self.num_classes == other.num_classes
            and self.d_in == other.d_in
            and all(a.samples.same_as(b.samples) for a, b in zip(self.partitions, other.partitions))
        )


# --- generation -------------------------------------------------------------


def generate_synthetic(num_classes, d_in, samples_per_class, class_separation, seed) -> SampleSet:
    """Gaussian blobs with unit-variance noise around class means placed on a sphere.

    When ``num_classes <= d_in`` the means are a random orthonormal frame scaled
    to the radius, so every pair sits exactly ``sqrt(2) * class_separation``
    apart; otherwise they are independent uniform directions. Sample ids are
    sequential in generation order (class-major).
    """
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if d_in < 1:
        raise ConfigError("d_in must be >= 1")
    if samples_per_class < 1:
        raise ConfigError("samples_per_class must be >= 1")
    if not class_separation > 0:
        raise ConfigError("class_separation must be > 0")
    rng = np.random.default_rng(seed)
    if num_classes <= d_in:
        q, r = np.linalg.qr(rng.standard_normal((d_in, num_classes)))
        directions = (q * np.sign(np.diag(r))).T
    else:
        directions = rng.standard_normal((num_classes, d_in))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        directions = directions / norms
    means = class_separation * directions
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    x = means[labels] + rng.standard_normal((len(labels), d_in))
    return SampleSet(np.arange(len(labels)), x, labels)


def train_test_split(samples: SampleSet, test_fraction: float, seed) -> tuple:
    """Stratified split; every class keeps at least one training sample."""
    if not 0 <= test_fraction < 1:
        raise ConfigError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    test_idx = []
    for label in np.unique(samples.labels):
        idx = np.flatnonzero(samples.labels == label)
        n_test = min(int(round(test_fraction * len(idx))), len(idx) - 1)
        test_idx.extend(rng.permutation(idx)[:n_test])
    mask = np.zeros(len(samples), dtype=bool)
    mask[np.asarray(test_idx, dtype=np.int64)] = True
    return samples.subset(~mask), samples.subset(mask)


# --- partitioning -----------------------------------------------------------


@dataclass(frozen=True)
class IID:
    pass


@dataclass(frozen=True)
class LabelShard:
    shards_per_client: int = 2


@dataclass(frozen=True)
class Dirichlet:
    concentration: float = 0.5


def partition(samples: SampleSet, K, scheme, seed, num_classes=None, test=None) -> FederatedDataset:
    N = len(samples)
    if K < 1:
        raise ConfigError("K must be >= 1")
    if K > N:
        raise ConfigError(f"cannot split {N} samples across K={K} clients")
    if num_classes is None:
        num_classes = int(samples.labels.max()) + 1
    rng = np.random.default_rng(seed)

    if isinstance(scheme, IID):
        groups = np.array_split(rng.permutation(N), K)
    elif isinstance(scheme, LabelShard):
        s = scheme.shards_per_client
        if s < 1 or K * s > N:
            raise ConfigError(f"cannot cut {N} samples into {K}x{s} shards")
        order = np.lexsort((samples.ids, samples.labels))
        shards = np.array_split(order, K * s)
        deal = rng.permutation(K * s)
        groups = [np.concatenate([shards[j] for j in deal[k * s:(k + 1) * s]]) for k in range(K)]
    elif isinstance(scheme, Dirichlet):
        if not scheme.concentration > 0:
            raise ConfigError("Dirichlet concentration must be > 0")
        groups = _dirichlet_groups(samples.labels, K, num_classes, scheme.concentration, rng)
    else:
        raise ConfigError(f"unknown partition scheme {scheme!r}")

    parts = []
    for k, g in enumerate(groups):
        g = np.asarray(g, dtype=np.int64)
        g = g[np.argsort(samples.ids[g], kind="stable")]
        parts.append(Partition(k, samples.subset(g)))
    return FederatedDataset(parts, num_classes, samples.d_in, test=test)


def _dirichlet_groups(labels, K, num_classes, concentration, rng):
    props = rng.dirichlet(np.full(num_classes, concentration), size=K)  # (K, c)
    owner = np.empty(len(labels), dtype=np.int64)
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        col = props[:, c]
        total = col.sum()
        p = col / total if total > 0 else np.full(K, 1.0 / K)
        owner[idx] = rng.choice(K, size=len(idx), p=p)
    groups = [sorted(np.flatnonzero(owner == k).tolist()) for k in range(K)]
    # empty clients steal the highest-index sample of the current largest client
    for k in range(K):
        if not groups[k]:
            sizes = [len(g) for g in groups]
            donor = int(np.argmax(sizes))
            groups[k].append(groups[donor].pop())
    return groups


# --- persistence ------------------------------------------------------------


def save_partitions(dataset: FederatedDataset, path) -> None:
    """Write one header line then ``client_id,label,f1,...,fd`` per sample.

    Floats use ``repr`` so they parse back bit-exactly. Written via a temp file
    and rename so readers never observe a half-written file.
    """
    path = Path(path)
    lines = [f"{FORMAT_TAG} K={dataset.K} classes={dataset.num_classes} din={dataset.d_in}"]
    for part in dataset.partitions:
        s = part.samples
        for i in range(len(s)):
            feats = ",".join(repr(float(v)) for v in s.features[i])
            lines.append(f"{part.client_id},{int(s.labels[i])},{feats}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_partitions(path) -> FederatedDataset:
    """Parse a partition file. Sample ids are reassigned sequentially in file order."""
    with open(path) as fh:
        text = fh.read()
    rows = text.splitlines()
    if not rows or not rows[0].strip():
        raise ParseError("empty partition file", line=1)
    K, num_classes, d_in = _parse_header(rows[0])

    clients, labels, feats = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row.strip():
            continue
        cells = row.split(",")
        if len(cells) != d_in + 2:
            raise ParseError(f"expected {d_in + 2} fields, found {len(cells)}", line=lineno)
        try:
            cid, lab = int(cells[0]), int(cells[1])
            vec = [float(c) for c in cells[2:]]
        except ValueError as exc:
            raise ParseError(f"bad number ({exc})", line=lineno) from None
        if not 0 <= cid < K:
            raise ParseError(f"client_id {cid} outside [0, {K})", line=lineno)
        if not 0 <= lab < num_classes:
            raise ParseError(f"label {lab} outside [0, {num_classes})", line=lineno)
        if not np.all(np.isfinite(vec)):
            raise ParseError("non-finite feature value", line=lineno)
        clients.append(cid)
        labels.append(lab)
        feats.append(vec)

    clients = np.asarray(clients, dtype=np.int64)
    x = np.asarray(feats, dtype=np.float64).reshape(len(clients), d_in)
    y = np.asarray(labels, dtype=np.int64)
    ids = np.arange(len(clients))
    parts = []
    for k in range(K):
        idx = np.flatnonzero(clients == k)
        if len(idx) == 0:
            raise ParseError(f"client {k} has no samples", line=len(rows))
        parts.append(Partition(k, SampleSet(ids[idx], x[idx], y[idx])))
    return FederatedDataset(parts, num_classes, d_in)


def _parse_header(line):
    if not line.startswith(FORMAT_TAG):
        raise ParseError(f"header must start with {FORMAT_TAG!r}", line=1)
    fields = {}
    for token in line[len(FORMAT_TAG):].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ParseError(f"malformed header token {token!r}", line=1)
        fields[key] = value
    try:
        K, c, d = int(fields["K"]), int(fields["classes"]), int(fields["din"])
    except (KeyError, ValueError):
        raise ParseError("header needs integer K=, classes= and din=", line=1) from None
    if K < 1 or c < 2 or d < 1:
        raise ParseError("header values out of range", line=1)
    return K, c, d
