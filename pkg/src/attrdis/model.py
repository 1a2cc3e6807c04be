"""Backbone, per-attribute decomposition head and shared classifier.

Shapes (batched): x (n, D) -> hybrid (n, K) -> parts (n, C, K) -> f (n, K)
-> posteriors (n, C).  The classifier only ever sees a K-vector, so the
clean path, the substituted inputs of the posterior-invariance regularizer
and the mixed features all go through the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .datagen import format_float
from .numcore import DimensionError, Tensor

PARAM_NAMES = ("bb_w1", "bb_b1", "bb_w2", "bb_b2", "dec_w", "dec_b",
               "cls_w1", "cls_b1", "cls_w2", "cls_b2")


@dataclass(frozen=True)
class Dims:
    D: int = 64
    C: int = 8
    K: int = 32
    H: int = 64
    Hc: int = 32

    def shapes(self) -> dict[str, tuple[int, ...]]:
        D, C, K, H, Hc = self.D, self.C, self.K, self.H, self.Hc
        return {
            "bb_w1": (D, H), "bb_b1": (H,), "bb_w2": (H, K), "bb_b2": (K,),
            "dec_w": (C, K, K), "dec_b": (C, K),
            "cls_w1": (K, Hc), "cls_b1": (Hc,), "cls_w2": (Hc, C), "cls_b2": (C,),
        }


@dataclass
class ModelParams:
    dims: Dims
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        for name, shape in self.dims.shapes().items():
            if self.arrays[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {self.arrays[name].shape}")

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def leaves(self) -> dict[str, Tensor]:
        """Fresh gradient-tracking leaves for one taped forward pass."""
        return {k: Tensor(v, requires_grad=True) for k, v in self.arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.arrays.items()}


@dataclass
class FeatureBundle:
    parts: Tensor  # (n, C, K)
    sum: Tensor    # (n, K)


def init_params(dims: Dims, seed) -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in dims.shapes().items():
        if name.split("_")[1].startswith("b"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = shape[-2]
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(dims, arrays)


def extract(x, p: dict[str, Tensor]) -> Tensor:
    """Backbone MLP: D -> H (ReLU) -> K."""
    h = nc.op_relu(nc.op_linear(x, p["bb_w1"], p["bb_b1"]))
    return nc.op_linear(h, p["bb_w2"], p["bb_b2"])


def decompose(hybrid, p: dict[str, Tensor]) -> FeatureBundle:
    parts = nc.op_relu(nc.op_branch_linear(hybrid, p["dec_w"], p["dec_b"]))
    return FeatureBundle(parts, nc.op_sum_parts(parts))


def classify(f, p: dict[str, Tensor]) -> Tensor:
    """Posteriors in [PROB_EPS, 1 - PROB_EPS] for a batch of K-vectors."""
    h = nc.op_relu(nc.op_linear(f, p["cls_w1"], p["cls_b1"]))
    out = nc.op_sigmoid(nc.op_linear(h, p["cls_w2"], p["cls_b2"]))
    return nc.op_clamp(out, nc.PROB_EPS, 1.0 - nc.PROB_EPS)


def bundle(x, p: dict[str, Tensor]) -> FeatureBundle:
    return decompose(extract(x, p), p)


def predict(x: np.ndarray, params: ModelParams, batch: int = 4096) -> np.ndarray:
    """Clean-path posteriors for an (n, D) array, no tape."""
    p = params.constants()
    out = [classify(bundle(x[i:i + batch], p).sum, p).data for i in range(0, len(x), batch)]
    return np.concatenate(out, axis=0)


def features(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Attribute-specific parts (n, C, K) for an (n, D) array, no tape."""
    return bundle(x, params.constants()).parts.data


def anchor_cosine_matrix(params: ModelParams, return_flags: bool = False):
    """Pairwise cosine similarity of the classifier's final-layer weight rows.

    Row ``s`` is the weight vector feeding output ``s``.  A zero row has
    cosine 0 against everything (its diagonal included) and is flagged.
    """
    A = params.arrays["cls_w2"].T
    norms = np.linalg.norm(A, axis=1)
    zero = norms == 0
    U = A / np.where(zero, 1.0, norms)[:, None]
    M = np.clip(U @ U.T, -1.0, 1.0)
    np.fill_diagonal(M, 1.0)
    M[zero, :] = 0.0
    M[:, zero] = 0.0
    if return_flags:
        return M, zero
    return M


def mean_abs_offdiag(M: np.ndarray) -> float:
    C = M.shape[0]
    if C < 2:
        return 0.0
    return float(np.abs(M[~np.eye(C, dtype=bool)]).mean())


# -- checkpoint text format ---------------------------------------------------------

def save_checkpoint(params: ModelParams, path, seed: int = 0, step: int = 0) -> None:
    d = params.dims
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"dims D={d.D} C={d.C} K={d.K} H={d.H} Hc={d.Hc}\n")
        fh.write(f"seed {seed}\nstep {step}\n")
        for name in PARAM_NAMES:
            arr = params.arrays[name]
            fh.write(f"param {name} {' '.join(str(s) for s in arr.shape)}\n")
            fh.write(",".join(format_float(v) for v in arr.ravel()) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, int, int]:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    head = dict(kv.split("=") for kv in lines[0].split()[1:])
    dims = Dims(**{k: int(v) for k, v in head.items()})
    seed = int(lines[1].split()[1])
    step = int(lines[2].split()[1])
    arrays = {}
    for i in range(3, len(lines), 2):
        _, name, *shape = lines[i].split()
        vals = np.array([float(v) for v in lines[i + 1].split(",")])
        arrays[name] = vals.reshape(tuple(int(s) for s in shape))
    return ModelParams(dims, arrays), seed, step
