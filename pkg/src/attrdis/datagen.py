"""Synthetic multi-attribute data with controllable label co-occurrence.

Labels come from a Gaussian copula: a latent ``z ~ N(0, corr)`` is
thresholded per attribute at the quantile that reproduces the requested
marginal.  Inputs are a label-gated sum of fixed per-attribute style
directions, each scaled by a log-normal norm jitter, plus isotropic noise.

Train/test splits that share everything except the latent correlation
matrix act as a stand-in for zero-shot identity splits: the per-attribute
evidence is unchanged, only which attributes tend to appear together moves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import norm


class SpecError(ValueError):
    """Invalid scene specification."""


@dataclass(frozen=True)
class SceneSpec:
    marginals: tuple[float, ...]
    target_corr: np.ndarray
    input_dim: int
    style_seed: int = 0
    noise_sigma: float = 0.0
    norm_jitter: float = 0.0
    # each group is a set of mutually exclusive attributes, exactly one of
    # which is active per sample; the group follows the latent of its first member
    exclusive_groups: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        marg = tuple(float(p) for p in self.marginals)
        object.__setattr__(self, "marginals", marg)
        corr = np.array(self.target_corr, dtype=np.float64)
        corr.setflags(write=False)
        object.__setattr__(self, "target_corr", corr)
        groups = tuple(tuple(int(i) for i in g) for g in self.exclusive_groups)
        object.__setattr__(self, "exclusive_groups", groups)
        self.validate()

    @property
    def C(self) -> int:
        return len(self.marginals)

    def validate(self) -> None:
        C = self.C
        if C < 1:
            raise SpecError("need at least one attribute")
        if not all(0.0 < p < 1.0 for p in self.marginals):
            raise SpecError(f"marginals must lie in (0, 1): {self.marginals}")
        corr = self.target_corr
        if corr.shape != (C, C):
            raise SpecError(f"target_corr must be {C}x{C}, got {corr.shape}")
        if not np.array_equal(corr, corr.T):
            raise SpecError("target_corr must be symmetric")
        if not np.all(np.diag(corr) == 1.0):
            raise SpecError("target_corr diagonal must be exactly 1")
        off = corr[~np.eye(C, dtype=bool)]
        if np.any(np.abs(off) >= 1.0):
            raise SpecError("target_corr off-diagonals must lie in (-1, 1)")
        eig = np.linalg.eigvalsh(corr)
        if eig[0] <= 0.0:
            raise SpecError(f"latent correlation is not positive definite (min eigenvalue {eig[0]:.6g})")
        if self.input_dim < 1:
            raise SpecError("input_dim must be positive")
        if self.noise_sigma < 0 or self.norm_jitter < 0:
            raise SpecError("noise_sigma and norm_jitter must be nonnegative")
        seen: set[int] = set()
        for g in self.exclusive_groups:
            if len(g) < 2 or len(set(g)) != len(g):
                raise SpecError(f"exclusive group needs >= 2 distinct attributes: {g}")
            if any(not 0 <= i < C for i in g) or seen & set(g):
                raise SpecError(f"exclusive group out of range or overlapping: {g}")
            seen |= set(g)
            total = sum(self.marginals[i] for i in g)
            if abs(total - 1.0) > 1e-9:
                raise SpecError(f"marginals of exclusive group {g} must sum to 1, got {total}")

    def same_except_corr(self, other: "SceneSpec") -> bool:
        return (self.marginals == other.marginals and self.input_dim == other.input_dim
                and self.style_seed == other.style_seed and self.noise_sigma == other.noise_sigma
                and self.norm_jitter == other.norm_jitter
                and self.exclusive_groups == other.exclusive_groups)


@dataclass
class Dataset:
    x: np.ndarray        # (n, D) float64
    labels: np.ndarray   # (n, C) uint8 in {0, 1}
    split: str
    spec: SceneSpec | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.x) == 0:
            raise SpecError("dataset must be nonempty")
        if len(self.x) != len(self.labels):
            raise SpecError("x and labels disagree on sample count")
        if not np.isin(self.labels, (0, 1)).all():
            raise SpecError("labels must be exactly 0 or 1")

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def C(self) -> int:
        return self.labels.shape[1]

    @property
    def D(self) -> int:
        return self.x.shape[1]


def sample_labels(spec: SceneSpec, n: int, seed) -> np.ndarray:
    if n < 1:
        raise SpecError("n must be >= 1")
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(spec.target_corr)
    z = rng.standard_normal((n, spec.C)) @ L.T
    cut = norm.ppf(np.asarray(spec.marginals))
    labels = (z < cut).astype(np.uint8)
    for group in spec.exclusive_groups:
        # inverse CDF of the categorical on the first member's uniform
        u = norm.cdf(z[:, group[0]])
        edges = np.cumsum([spec.marginals[i] for i in group])[:-1]
        choice = np.searchsorted(edges, u, side="right")
        labels[:, list(group)] = 0
        labels[np.arange(n), np.asarray(group)[choice]] = 1
    return labels


def style_vectors(spec: SceneSpec) -> np.ndarray:
    """Fixed unit style directions, one row per attribute."""
    rng = np.random.default_rng([spec.style_seed, 0x5717])
    v = rng.standard_normal((spec.C, spec.input_dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def render_input(a: Sequence[int], spec: SceneSpec, seed, styles: np.ndarray | None = None,
                 return_parts: bool = False):
    """x = sum_s a_s * g_s * style_s + noise for one label vector.

    ``g_s`` is a LogNormal(0, norm_jitter) magnitude.  With
    ``return_parts`` the per-attribute contributions are returned as well.
    """
    a = np.asarray(a)
    if a.shape != (spec.C,):
        raise SpecError(f"label vector must have length {spec.C}")
    styles = style_vectors(spec) if styles is None else styles
    rng = np.random.default_rng(seed)
    gain = rng.lognormal(0.0, spec.norm_jitter, size=spec.C) if spec.norm_jitter > 0 else np.ones(spec.C)
    noise = rng.standard_normal(spec.input_dim) * spec.noise_sigma
    parts = (a * gain)[:, None] * styles
    x = np.zeros(spec.input_dim)
    for s in range(spec.C):
        if a[s]:
            x += parts[s]
    x += noise
    if return_parts:
        return x, parts
    return x


def make_dataset(spec: SceneSpec, n: int, seed: int, split: str = "train") -> Dataset:
    labels = sample_labels(spec, n, [seed, 0])
    styles = style_vectors(spec)
    x = np.empty((n, spec.input_dim))
    for i in range(n):
        x[i] = render_input(labels[i], spec, [seed, 1, i], styles)
    return Dataset(x, labels, split, spec)


def make_shifted_splits(train_spec: SceneSpec, test_spec: SceneSpec, n_train: int, n_test: int,
                        seed: int) -> tuple[Dataset, Dataset]:
    if not train_spec.same_except_corr(test_spec) or train_spec.C != test_spec.C:
        raise SpecError("train and test specs may differ only in target_corr")
    train = make_dataset(train_spec, n_train, seed * 2 + 0, "train")
    test = make_dataset(test_spec, n_test, seed * 2 + 1, "test")
    return train, test


# -- correlation diagnostics ----------------------------------------------------

def pearson_matrix(labels: np.ndarray, return_flags: bool = False):
    """Sample Pearson correlation of label columns.

    Constant columns have no defined correlation; their rows/columns are set
    to 0 (diagonal included) and reported through the flag vector.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 2:
        raise SpecError("pearson_matrix needs an (n >= 2, C) array")
    yc = y - y.mean(axis=0)
    sd = np.sqrt((yc * yc).sum(axis=0))
    constant = sd == 0
    safe = np.where(constant, 1.0, sd)
    r = (yc.T @ yc) / np.outer(safe, safe)
    r = np.clip(r, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    r[constant, :] = 0.0
    r[:, constant] = 0.0
    if return_flags:
        return r, constant
    return r


class PairShift(NamedTuple):
    i: int
    j: int
    value: float


def correlation_shift(m_train: np.ndarray, m_test: np.ndarray) -> list[PairShift]:
    """|m_train - m_test| over unique off-diagonal pairs, ascending."""
    a, b = np.asarray(m_train), np.asarray(m_test)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        from .numcore import DimensionError
        raise DimensionError(f"correlation_shift: {a.shape} vs {b.shape}")
    iu, ju = np.triu_indices(a.shape[0], k=1)
    diff = np.abs(a[iu, ju] - b[iu, ju])
    order = np.argsort(diff, kind="stable")
    return [PairShift(int(iu[k]), int(ju[k]), float(diff[k])) for k in order]


def fraction_shifted(shifts: Sequence[PairShift], threshold: float = 0.1) -> float:
    if not shifts:
        return 0.0
    return sum(1 for s in shifts if s.value >= threshold) / len(shifts)


# -- text format ----------------------------------------------------------------

def format_float(v: float) -> str:
    return format(float(v), ".17g")


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{ds.C} {ds.D} {ds.n} {ds.split}\n")
        for lab, row in zip(ds.labels, ds.x):
            bits = "".join("1" if b else "0" for b in lab)
            fh.write(bits + "\t" + ",".join(format_float(v) for v in row) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, encoding="ascii") as fh:
        C, D, n, split = fh.readline().split()
        C, D, n = int(C), int(D), int(n)
        labels = np.zeros((n, C), dtype=np.uint8)
        x = np.zeros((n, D))
        for i in range(n):
            bits, vals = fh.readline().rstrip("\n").split("\t")
            if len(bits) != C:
                raise SpecError(f"line {i + 2}: expected {C} label bits")
            labels[i] = [b == "1" for b in bits]
            row = vals.split(",")
            if len(row) != D:
                raise SpecError(f"line {i + 2}: expected {D} values")
            x[i] = [float(v) for v in row]
    return Dataset(x, labels, split)
