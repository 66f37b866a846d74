"""The function-valued kernel ridge estimator and model persistence."""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import TripletDataset
from .exceptions import DataError, DimensionError, ModelFormatError, NumericalError
from .kernels import (
    PSD_RTOL,
    ExplicitA,
    KernelSpec,
    build_gram_dense,
    gaussian_gram,
    is_shared_grid,
)
from .solvers import (
    build_lowrank_A,
    kron_apply,
    solve_kron,
    solve_ridge_identity,
    solve_sylvester,
)

MODEL_MAGIC = b"VITLMODL"
MODEL_VERSION = 1


class VitlRegressor(BaseEstimator):
    """Kernel ridge regression from input vectors to style-indexed functions.

    Learns a map h with values h(x)(theta) in R^d from triplets
    (x_i, (theta_ij)_j, (y_ij)_j) by minimizing the mean squared loss plus a
    squared-RKHS-norm penalty; training is a single exact linear solve.
    Predictions are the kernel expansion
    sum_ij k_X(x, x_i) k_Theta(theta, theta_ij) A c_ij over the observed
    training pairs, so the fitted object is a smooth function of theta and
    can be queried anywhere in the style space.

    Parameters
    ----------
    gamma_x : float
        Bandwidth of the Gaussian kernel on the input space.
    gamma_theta : float
        Bandwidth of the Gaussian kernel on the style space.
    lam : float
        Regularization weight; must be positive.
    a_structure : {"identity", "lowrank", "explicit"}
        Coupling of output coordinates: "identity" treats them as
        independent, "lowrank" projects onto the top ``rank`` eigenvectors
        of Y^T Y learned from the training outputs, "explicit" uses the
        matrix ``A`` as given.
    rank : int, optional
        Projection rank for a_structure="lowrank".
    A : ndarray, optional
        Symmetric PSD matrix for a_structure="explicit".
    force_dense : bool
        Never use the Kronecker-factored training path.

    Attributes
    ----------
    dual_coef_ : ndarray of shape (n_observed, d)
        Solve coefficients, one row per observed training pair, in
        identity-major order (pair (i, j) precedes (i, j+1)).
    X_fit_, theta_fit_, observed_ : training anchors and observation flags.
    A_ : ndarray or None
        Materialized output structure (None means identity).
    basis_ : ndarray or None
        Full eigenbasis of Y^T Y when a_structure="lowrank".
    solver_path_ : {"kron", "ridge", "sylvester"}
    """

    def __init__(
        self,
        gamma_x=1.0,
        gamma_theta=1.0,
        lam=1e-3,
        a_structure="identity",
        rank=None,
        A=None,
        force_dense=False,
    ):
        self.gamma_x = gamma_x
        self.gamma_theta = gamma_theta
        self.lam = lam
        self.a_structure = a_structure
        self.rank = rank
        self.A = A
        self.force_dense = force_dense

    def fit(self, X, Y=None, thetas=None, observed=None):
        """Fit on triplets; X may also be a TripletDataset.

        X : (t, d) inputs; Y : (t, m, d) output blocks; thetas : (t, m, p)
        style locations; observed : optional (t, m) bool mask.
        """
        if isinstance(X, TripletDataset):
            if Y is not None or thetas is not None or observed is not None:
                raise ValueError("pass either a TripletDataset or arrays, not both")
            X, Y, thetas, observed = X.X, X.Y, X.thetas, X.observed
        if Y is None or thetas is None:
            raise ValueError("Y and thetas are required")
        X = check_array(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        thetas = np.asarray(thetas, dtype=np.float64)
        if Y.ndim != 3 or thetas.ndim != 3:
            raise ValueError("Y must be (t, m, d) and thetas (t, m, p)")
        t, m, d = Y.shape
        if X.shape != (t, d):
            raise ValueError(f"X is {X.shape}, expected ({t}, {d})")
        if thetas.shape[:2] != (t, m):
            raise ValueError(f"thetas is {thetas.shape}, expected ({t}, {m}, p)")
        p = thetas.shape[2]
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        KernelSpec(self.gamma_x, self.gamma_theta)
        if observed is None:
            observed = np.ones((t, m), dtype=bool)
        else:
            observed = np.asarray(observed, dtype=bool)
            if observed.shape != (t, m):
                raise ValueError(f"observed is {observed.shape}, expected ({t}, {m})")
        keep = np.flatnonzero(observed.ravel())
        if keep.size == 0:
            raise DataError("no observed training pairs")

        A, basis, rank_A = self._materialize_structure(Y.reshape(t * m, d)[keep], d)
        Y_flat = Y.reshape(t * m, d)
        if observed.all() and is_shared_grid(thetas) and not self.force_dense:
            kx = gaussian_gram(X, X, self.gamma_x)
            ktheta = gaussian_gram(thetas[0], thetas[0], self.gamma_theta)
            C = solve_kron(kx, ktheta, Y_flat, A=A, lam=self.lam)
            self.solver_path_ = "kron"
        else:
            spec = KernelSpec(self.gamma_x, self.gamma_theta)
            K = build_gram_dense(X, thetas, spec)[np.ix_(keep, keep)]
            if A is None:
                C = solve_ridge_identity(K, Y_flat[keep], self.lam)
                self.solver_path_ = "ridge"
            else:
                C = solve_sylvester(K, Y_flat[keep], A, self.lam)
                self.solver_path_ = "sylvester"

        self.X_fit_ = X
        self.theta_fit_ = thetas
        self.observed_ = observed
        self.dual_coef_ = C
        self.A_ = A
        self.basis_ = basis
        self.rank_ = rank_A
        self.t_, self.m_, self.d_, self.p_ = t, m, d, p
        self.n_observed_ = int(keep.size)
        self._anchor_rows = keep
        self._anchor_identity = keep // m
        self._anchor_thetas = thetas.reshape(t * m, p)[keep]
        self.effective_coef_ = C if A is None else C @ A
        return self

    def _materialize_structure(self, Y_obs, d):
        if self.a_structure == "identity":
            return None, None, d
        if self.a_structure == "lowrank":
            if self.rank is None:
                raise ValueError("a_structure='lowrank' requires rank")
            A, basis = build_lowrank_A(Y_obs, self.rank)
            return A, basis, int(self.rank)
        if self.a_structure == "explicit":
            if self.A is None:
                raise ValueError("a_structure='explicit' requires A")
            A = ExplicitA(self.A).matrix
            if A.shape[0] != d:
                raise ValueError(f"A is {A.shape}, expected ({d}, {d})")
            w = np.linalg.eigvalsh(A)
            rank_A = int(np.sum(w > PSD_RTOL * max(1.0, float(np.max(np.abs(w))))))
            return A, None, rank_A
        raise ValueError(f"unknown a_structure {self.a_structure!r}")

    def _cross_matrix(self, X, thetas):
        kxq = gaussian_gram(X, self.X_fit_, self.gamma_x)
        ktq = gaussian_gram(thetas, self._anchor_thetas, self.gamma_theta)
        return kxq[:, self._anchor_identity] * ktq

    def predict(self, X, thetas):
        """Predict outputs for paired queries (x_k, theta_k).

        X : (q, d) or (d,); thetas : (q, p) or (p,).  Returns (q, d), or a
        single (d,) vector when both arguments are one-dimensional.
        """
        check_is_fitted(self, "dual_coef_")
        X = np.asarray(X, dtype=float)
        thetas = np.asarray(thetas, dtype=float)
        single = X.ndim == 1 and thetas.ndim == 1
        X2 = np.atleast_2d(X)
        T2 = np.atleast_2d(thetas)
        if X2.shape[1] != self.d_:
            raise DimensionError(f"query inputs have dimension {X2.shape[1]}, expected {self.d_}")
        if T2.shape[1] != self.p_:
            raise DimensionError(f"query styles have dimension {T2.shape[1]}, expected {self.p_}")
        if X2.shape[0] != T2.shape[0]:
            raise DimensionError("queries must pair one input with one style point")
        out = self._cross_matrix(X2, T2) @ self.effective_coef_
        return out[0] if single else out

    def predict_curve(self, x, thetas):
        """Predict along a style path for one input; row k matches thetas[k]."""
        check_is_fitted(self, "dual_coef_")
        x = np.asarray(x, dtype=float)
        thetas = np.asarray(thetas, dtype=float)
        if thetas.size == 0:
            return np.zeros((0, self.d_))
        return np.vstack([self.predict(x, th) for th in np.atleast_2d(thetas)])

    def _pairwise(self, data):
        idx = np.flatnonzero(data.observed.ravel())
        if idx.size == 0:
            raise DataError("no observed pairs to evaluate")
        Xq = data.X[idx // data.m]
        Tq = data.thetas.reshape(-1, data.p)[idx]
        preds = self.predict(Xq, Tq)
        targets = data.Y.reshape(-1, data.d)[idx]
        return preds, targets

    def empirical_risk(self, data):
        """Mean over observed pairs of (1/2) ||prediction - target||^2."""
        preds, targets = self._pairwise(data)
        return float(0.5 * np.mean(np.sum((preds - targets) ** 2, axis=1)))

    def rkhs_norm_sq(self):
        """Squared RKHS norm Tr(K C A C^T) of the fitted function."""
        check_is_fitted(self, "dual_coef_")
        C = self.dual_coef_
        E = self.effective_coef_
        if self.solver_path_ == "kron":
            kx = gaussian_gram(self.X_fit_, self.X_fit_, self.gamma_x)
            kt = gaussian_gram(self.theta_fit_[0], self.theta_fit_[0], self.gamma_theta)
            W = kron_apply(kx, kt, C)
        else:
            spec = KernelSpec(self.gamma_x, self.gamma_theta)
            K = build_gram_dense(self.X_fit_, self.theta_fit_, spec)
            K = K[np.ix_(self._anchor_rows, self._anchor_rows)]
            W = K @ C
        value = float(np.sum(W * E))
        tol = 1e-10 * max(1.0, float(np.linalg.norm(W)) * float(np.linalg.norm(E)))
        if value < -tol:
            raise NumericalError(f"negative squared norm {value:.3e} beyond tolerance")
        return max(value, 0.0)

    def regularized_risk(self, data):
        """Empirical risk plus (lam/2) times the squared RKHS norm."""
        return self.empirical_risk(data) + 0.5 * self.lam * self.rkhs_norm_sq()

    def reparameterize(self, A_new):
        """Equivalent model under a different invertible output structure.

        Each coefficient maps to A_new^{-1} A_old c, so A_new c_new equals
        A_old c_old and predictions are unchanged; the RKHS norm is measured
        in the new space and generally differs.  Both structures must be
        invertible.
        """
        check_is_fitted(self, "dual_coef_")
        A_new = ExplicitA(A_new).matrix
        if A_new.shape[0] != self.d_:
            raise ValueError(f"A_new is {A_new.shape}, expected ({self.d_}, {self.d_})")
        _require_invertible(A_new, "A_new")
        A_old = np.eye(self.d_) if self.A_ is None else self.A_
        _require_invertible(A_old, "the fitted output structure")
        model = VitlRegressor(
            gamma_x=self.gamma_x,
            gamma_theta=self.gamma_theta,
            lam=self.lam,
            a_structure="explicit",
            A=A_new,
            force_dense=self.force_dense,
        )
        # rows are c^T, so c -> A_new^{-1} A_old c reads C -> C A_old A_new^{-1}
        C_new = np.linalg.solve(A_new, (self.dual_coef_ @ A_old).T).T
        _copy_fit_state(self, model, C_new, A_new, basis=None, rank_A=self.d_)
        return model


def _require_invertible(A, label):
    w = np.linalg.eigvalsh(A)
    norm2 = float(np.max(np.abs(w)))
    if norm2 == 0 or w[0] <= PSD_RTOL * norm2:
        raise ValueError(f"{label} is singular or nearly singular")


def _copy_fit_state(src, dst, C, A, basis, rank_A):
    dst.X_fit_ = src.X_fit_
    dst.theta_fit_ = src.theta_fit_
    dst.observed_ = src.observed_
    dst.dual_coef_ = C
    dst.A_ = A
    dst.basis_ = basis
    dst.rank_ = rank_A
    dst.t_, dst.m_, dst.d_, dst.p_ = src.t_, src.m_, src.d_, src.p_
    dst.n_observed_ = src.n_observed_
    dst._anchor_rows = src._anchor_rows
    dst._anchor_identity = src._anchor_identity
    dst._anchor_thetas = src._anchor_thetas
    dst.solver_path_ = src.solver_path_
    dst.effective_coef_ = C if A is None else C @ A


def metrics_summary(model, data):
    """JSON-ready metrics of a fitted model evaluated on ``data``.

    ``mse`` is the mean squared error without the 1/2 factor, ``mse_half``
    with it; both conventions are reported because published numbers vary.
    """
    half = model.empirical_risk(data)
    return {
        "mse": 2.0 * half,
        "mse_half": half,
        "rkhs_norm_sq": model.rkhs_norm_sq(),
        "n_observed": int(np.sum(data.observed)),
        "lambda": float(model.lam),
        "gamma_x": float(model.gamma_x),
        "gamma_theta": float(model.gamma_theta),
        "rank_A": int(model.rank_),
    }


def _array_entries(model):
    entries = [
        ("X_fit", model.X_fit_, "<f8"),
        ("theta_fit", model.theta_fit_, "<f8"),
        ("observed", model.observed_.astype(np.uint8), "<u1"),
        ("dual_coef", model.dual_coef_, "<f8"),
    ]
    if model.A_ is not None:
        entries.append(("A", model.A_, "<f8"))
    if model.basis_ is not None:
        entries.append(("basis", model.basis_, "<f8"))
    return entries


def save_model(model, path):
    """Serialize a fitted model to the versioned binary container.

    Layout: 8-byte magic, little-endian uint32 version, uint32 header
    length, ASCII JSON header (dims, kernel parameters, array manifest),
    then the raw little-endian arrays in manifest order.  Coefficient rows
    follow the identity-major pair ordering.
    """
    check_is_fitted(model, "dual_coef_")
    entries = _array_entries(model)
    header = {
        "format": "vitl-model",
        "version": MODEL_VERSION,
        "lambda": float(model.lam),
        "gamma_x": float(model.gamma_x),
        "gamma_theta": float(model.gamma_theta),
        "a_structure": model.a_structure,
        "rank": int(model.rank_),
        "dims": [model.t_, model.m_, model.d_, model.p_],
        "solver_path": model.solver_path_,
        "arrays": [
            {"name": name, "dtype": dtype, "shape": list(arr.shape)}
            for name, arr, dtype in entries
        ],
    }
    payload = json.dumps(header, sort_keys=True).encode("ascii")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<I", MODEL_VERSION))
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            for _, arr, dtype in entries:
                fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise ModelFormatError(f"truncated model file while reading {what}")
    return data


def load_model(path):
    """Load a model saved by save_model; refuses unknown versions."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(MODEL_MAGIC), "magic")
        if magic != MODEL_MAGIC:
            raise ModelFormatError("not a model file (bad magic)")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        header_len = struct.unpack("<I", _read_exact(fh, 4, "header length"))[0]
        try:
            header = json.loads(_read_exact(fh, header_len, "header").decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ModelFormatError(f"corrupt model header: {exc}") from exc
        if header.get("format") != "vitl-model" or header.get("version") != MODEL_VERSION:
            raise ModelFormatError("corrupt model header: bad format or version field")
        arrays = {}
        for entry in header.get("arrays", []):
            shape = tuple(int(v) for v in entry["shape"])
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(shape)) * dtype.itemsize
            raw = _read_exact(fh, count, entry["name"])
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if fh.read(1):
            raise ModelFormatError("trailing bytes after model payload")
    try:
        t, m, d, p = (int(v) for v in header["dims"])
        model = VitlRegressor(
            gamma_x=header["gamma_x"],
            gamma_theta=header["gamma_theta"],
            lam=header["lambda"],
            a_structure=header["a_structure"],
            rank=header["rank"] if header["a_structure"] == "lowrank" else None,
            A=arrays.get("A") if header["a_structure"] == "explicit" else None,
        )
        X_fit = arrays["X_fit"]
        theta_fit = arrays["theta_fit"]
        observed = arrays["observed"].astype(bool)
        C = arrays["dual_coef"]
    except KeyError as exc:
        raise ModelFormatError(f"model header missing field {exc}") from exc
    if X_fit.shape != (t, d) or theta_fit.shape != (t, m, p) or observed.shape != (t, m):
        raise ModelFormatError("model arrays disagree with declared dimensions")
    keep = np.flatnonzero(observed.ravel())
    if C.shape != (keep.size, d):
        raise ModelFormatError(
            f"coefficients are {C.shape}, expected ({keep.size}, {d}) from the observation flags"
        )
    A = arrays.get("A")
    if A is None and "basis" in arrays and header["a_structure"] == "lowrank":
        basis = arrays["basis"]
        Vr = basis[:, : int(header["rank"])]
        A = Vr @ Vr.T
    elif header["a_structure"] == "identity":
        A = None
    if A is not None and A.shape != (d, d):
        raise ModelFormatError("output-structure matrix disagrees with declared dimension")
    model.X_fit_ = X_fit
    model.theta_fit_ = theta_fit
    model.observed_ = observed
    model.dual_coef_ = C
    model.A_ = A
    model.basis_ = arrays.get("basis")
    model.rank_ = int(header["rank"])
    model.t_, model.m_, model.d_, model.p_ = t, m, d, p
    model.n_observed_ = int(keep.size)
    model._anchor_rows = keep
    model._anchor_identity = keep // m
    model._anchor_thetas = theta_fit.reshape(t * m, p)[keep]
    model.solver_path_ = header.get("solver_path", "ridge")
    model.effective_coef_ = C if A is None else C @ A
    return model
