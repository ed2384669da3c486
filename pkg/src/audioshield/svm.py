"""Kernel SVMs: SMO training, decision gradients, one-vs-rest multiclass.

The binary solver is a maximal-violating-pair SMO over the soft-margin dual
with box constraint [0, cost] and the usual equality constraint; it stops when
the KKT gap drops below `tol`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KERNEL_LINEAR = "linear"
KERNEL_POLY = "poly"
KERNEL_RBF = "rbf"

_KERNEL_TAGS = {KERNEL_LINEAR: 0, KERNEL_POLY: 1, KERNEL_RBF: 2}
_KERNEL_FROM_TAG = {v: k for k, v in _KERNEL_TAGS.items()}


@dataclass(frozen=True)
class KernelSpec:
    kind: str = KERNEL_LINEAR
    degree: int = 2         # poly
    offset: float = 1.0     # poly
    sigma: float = 1.0      # rbf
    gamma: float = 1.0      # poly inner-product scaling; 1.0 keeps the plain form

    def __post_init__(self):
        if self.kind not in _KERNEL_TAGS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.degree < 1:
            raise ValueError("poly degree must be >= 1")
        if self.sigma <= 0:
            raise ValueError("rbf sigma must be positive")


def kernel_matrix(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gram matrix K[i, j] = K(a[i], b[j])."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if spec.kind == KERNEL_LINEAR:
        return a @ b.T
    if spec.kind == KERNEL_POLY:
        return (spec.gamma * (a @ b.T) + spec.offset) ** spec.degree
    sq = np.sum(a**2, axis=1)[:, None] + np.sum(b**2, axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.exp(-0.5 * np.maximum(sq, 0.0) / spec.sigma**2)


def kernel_gradient(spec: KernelSpec, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Gradient of K(x, xi) with respect to x."""
    x = np.asarray(x, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    if x.shape != xi.shape:
        raise ValueError("x and xi must share a shape")
    if spec.kind == KERNEL_LINEAR:
        return xi.copy()
    if spec.kind == KERNEL_POLY:
        base = spec.gamma * float(x @ xi) + spec.offset
        return spec.degree * spec.gamma * base ** (spec.degree - 1) * xi
    diff = x - xi
    k = np.exp(-0.5 * float(diff @ diff) / spec.sigma**2)
    return -(k / spec.sigma**2) * diff


def hinge_loss(y: int, f: float) -> float:
    if y not in (-1, 1):
        raise ValueError("label must be -1 or +1")
    return max(0.0, 1.0 - y * f)


@dataclass
class SvmModel:
    """Binary decision function f(x) = sum_i alphas[i]*K(x, sv[i]) + bias.

    `alphas` are the signed dual coefficients (alpha_i * y_i folded in).
    """

    support_vectors: np.ndarray
    alphas: np.ndarray
    bias: float
    kernel: KernelSpec
    cost: float
    kkt_gap: float = 0.0

    def __post_init__(self):
        self.support_vectors = np.atleast_2d(np.asarray(self.support_vectors, dtype=np.float64))
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if self.alphas.shape[0] != self.support_vectors.shape[0]:
            raise ValueError("one alpha per support vector required")

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]

    def linear_weights(self) -> np.ndarray:
        if self.kernel.kind != KERNEL_LINEAR:
            raise ValueError("explicit weights exist only for the linear kernel")
        return self.alphas @ self.support_vectors


def svm_train(
    x: np.ndarray,
    y: np.ndarray,
    kernel: KernelSpec,
    cost: float,
    tol: float = 1e-3,
    max_iter: int | None = None,
    gram: np.ndarray | None = None,
) -> SvmModel:
    """Solve the soft-margin dual by pairwise (SMO) optimization.

    `gram` may carry a precomputed kernel matrix of the training data, which
    the poisoning loop uses to avoid recomputing it per retrain.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.shape[0]
    if y.shape[0] != n:
        raise ValueError("one label per row required")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1/+1")
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain both classes")
    if cost <= 0:
        raise ValueError("cost must be positive")
    k = kernel_matrix(kernel, x, x) if gram is None else np.asarray(gram, dtype=np.float64)
    q = k * np.outer(y, y)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 1/2 a'Qa - e'a at a = 0
    if max_iter is None:
        max_iter = max(20000, 200 * n)
    gap = np.inf
    for _ in range(max_iter):
        yg = -y * grad
        up = ((y > 0) & (alpha < cost - 1e-12)) | ((y < 0) & (alpha > 1e-12))
        low = ((y < 0) & (alpha < cost - 1e-12)) | ((y > 0) & (alpha > 1e-12))
        if not up.any() or not low.any():
            gap = 0.0
            break
        i = int(np.argmax(np.where(up, yg, -np.inf)))
        j = int(np.argmin(np.where(low, yg, np.inf)))
        gap = yg[i] - yg[j]
        if gap < tol:
            break
        quad = max(q[i, i] + q[j, j] - 2.0 * y[i] * y[j] * q[i, j], 1e-12)
        delta = gap / quad
        ai_old, aj_old = alpha[i], alpha[j]
        alpha[i] += y[i] * delta
        alpha[j] -= y[j] * delta
        # project the pair back onto the box while keeping sum(y*alpha) fixed
        total = y[i] * ai_old + y[j] * aj_old
        alpha[i] = min(max(alpha[i], 0.0), cost)
        alpha[j] = y[j] * (total - y[i] * alpha[i])
        alpha[j] = min(max(alpha[j], 0.0), cost)
        alpha[i] = y[i] * (total - y[j] * alpha[j])
        grad += q[:, i] * (alpha[i] - ai_old) + q[:, j] * (alpha[j] - aj_old)

    yg = -y * grad
    free = (alpha > 1e-9) & (alpha < cost - 1e-9)
    if free.any():
        bias = float(np.mean(yg[free]))
    else:
        up = ((y > 0) & (alpha < cost - 1e-12)) | ((y < 0) & (alpha > 1e-12))
        low = ((y < 0) & (alpha < cost - 1e-12)) | ((y > 0) & (alpha > 1e-12))
        hi = np.max(np.where(up, yg, -np.inf)) if up.any() else 0.0
        lo = np.min(np.where(low, yg, np.inf)) if low.any() else 0.0
        bias = float((hi + lo) / 2.0)
    sv = alpha > 1e-9
    if not sv.any():  # degenerate but possible for tiny cost; keep everything
        sv = np.ones(n, dtype=bool)
    return SvmModel(x[sv], alpha[sv] * y[sv], bias, kernel, cost, kkt_gap=float(max(gap, 0.0)))


def svm_decision(model: SvmModel, x: np.ndarray) -> float | np.ndarray:
    """Decision value(s); a 1-D input returns a scalar."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    vals = kernel_matrix(model.kernel, np.atleast_2d(arr), model.support_vectors) @ model.alphas
    vals = vals + model.bias
    return float(vals[0]) if single else vals


def decision_gradient(model: SvmModel, x: np.ndarray) -> np.ndarray:
    """Gradient of the decision function at x."""
    x = np.asarray(x, dtype=np.float64)
    sv = model.support_vectors
    a = model.alphas
    spec = model.kernel
    if spec.kind == KERNEL_LINEAR:
        return a @ sv
    if spec.kind == KERNEL_POLY:
        base = spec.gamma * (sv @ x) + spec.offset
        coef = a * spec.degree * spec.gamma * base ** (spec.degree - 1)
        return coef @ sv
    diff = x[None, :] - sv
    k = np.exp(-0.5 * np.sum(diff**2, axis=1) / spec.sigma**2)
    return (a * k / spec.sigma**2 * -1.0) @ diff


@dataclass
class MulticlassSvm:
    """One-vs-rest wrapper; prediction is the argmax decision, ties to the lowest id."""

    models: list[SvmModel]
    class_names: list[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.models)

    def decision_matrix(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.stack([svm_decision(m, x) for m in self.models], axis=1)

    def predict(self, x: np.ndarray) -> int | np.ndarray:
        arr = np.asarray(x, dtype=np.float64)
        labels = np.argmax(self.decision_matrix(arr), axis=1)
        return int(labels[0]) if arr.ndim == 1 else labels


def multiclass_train(
    x: np.ndarray,
    labels: np.ndarray,
    kernel: KernelSpec,
    cost: float,
    class_names: list[str] | None = None,
    gram: np.ndarray | None = None,
) -> MulticlassSvm:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels, dtype=int).ravel()
    n_classes = int(labels.max()) + 1
    models = []
    for c in range(n_classes):
        y = np.where(labels == c, 1.0, -1.0)
        if len(np.unique(y)) < 2:
            raise ValueError(f"class {c} missing or alone in the training data")
        models.append(svm_train(x, y, kernel, cost, gram=gram))
    names = class_names if class_names is not None else [str(c) for c in range(n_classes)]
    return MulticlassSvm(models, names)


def multiclass_predict(model: MulticlassSvm, x: np.ndarray) -> int | np.ndarray:
    return model.predict(x)


# -- SVM1 binary model file ---------------------------------------------------
# magic "SVM1", u8 kernel tag, u32 degree, f64 offset, f64 sigma, f64 gamma,
# f64 cost, u32 n_sv, u32 dim, then alphas (f64), support vectors (f64,
# row-major), bias (f64). Little-endian throughout. A multiclass container
# ("SVMM", u32 count) simply concatenates SVM1 blocks.


def save_svm(model: SvmModel, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_svm_block(model))


def load_svm(path: str | Path) -> SvmModel:
    with open(path, "rb") as fh:
        return _read_svm_block(fh)


def save_multiclass(model: MulticlassSvm, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"SVMM")
        fh.write(struct.pack("<I", len(model.models)))
        for m in model.models:
            fh.write(_svm_block(m))
        names = "\n".join(model.class_names).encode("utf-8")
        fh.write(struct.pack("<I", len(names)))
        fh.write(names)


def load_multiclass(path: str | Path) -> MulticlassSvm:
    with open(path, "rb") as fh:
        if fh.read(4) != b"SVMM":
            raise ValueError(f"{path}: not a multiclass SVM file")
        (count,) = struct.unpack("<I", fh.read(4))
        models = [_read_svm_block(fh) for _ in range(count)]
        (nlen,) = struct.unpack("<I", fh.read(4))
        names = fh.read(nlen).decode("utf-8").split("\n") if nlen else []
    return MulticlassSvm(models, names)


def _svm_block(model: SvmModel) -> bytes:
    n_sv, dim = model.support_vectors.shape
    head = struct.pack(
        "<4sBIdddd",
        b"SVM1",
        _KERNEL_TAGS[model.kernel.kind],
        model.kernel.degree,
        model.kernel.offset,
        model.kernel.sigma,
        model.kernel.gamma,
        model.cost,
    )
    body = struct.pack("<II", n_sv, dim)
    return (
        head
        + body
        + model.alphas.astype("<f8").tobytes()
        + model.support_vectors.astype("<f8").tobytes()
        + struct.pack("<d", model.bias)
    )


def _read_svm_block(fh) -> SvmModel:
    head = fh.read(4 + 1 + 4 + 8 * 4)
    magic, tag, degree, offset, sigma, gamma, cost = struct.unpack("<4sBIdddd", head)
    if magic != b"SVM1":
        raise ValueError("not an SVM1 block")
    n_sv, dim = struct.unpack("<II", fh.read(8))
    alphas = np.frombuffer(fh.read(8 * n_sv), dtype="<f8").copy()
    sv = np.frombuffer(fh.read(8 * n_sv * dim), dtype="<f8").reshape(n_sv, dim).copy()
    (bias,) = struct.unpack("<d", fh.read(8))
    spec = KernelSpec(_KERNEL_FROM_TAG[tag], degree=degree, offset=offset, sigma=sigma, gamma=gamma)
    return SvmModel(sv, alphas, bias, spec, cost)
