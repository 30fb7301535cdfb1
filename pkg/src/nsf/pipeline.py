"""Dataset ingestion, preprocessing, evaluation protocol, and archives.

Counts arrive as dense CSV (header row of feature names) or 1-based
sparse triplet text; coordinates as CSV. Loaded coordinates are rescaled
per dimension to zero mean and unit max absolute value so kernel
lengthscale defaults are unit-free, and observations with tiny totals are
dropped. Normalization stats (median total, column means) are computed
once on a full dataset and inherited by its train/validation children so
both splits live in the same normalized space.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateDataError, ParameterError, ParseError, ShapeError
from .likelihoods import (
    GAUSSIAN,
    MEAN_FLOOR,
    LikelihoodSpec,
    poisson_deviance,
    size_factors,
)
from .models import FactorModel, MeanFieldState, ModelSpec, SpatialBlockState, predict_mean

ARCHIVE_FORMAT_VERSION = 1
DEFAULT_MIN_TOTAL = 100


@dataclass
class CountDataset:
    """Counts, coordinates, and per-observation size factors.

    row_indices track positions in the source this dataset was derived
    from (identity for a freshly loaded set). norm_median/norm_col_means
    pin the normalization stats; when absent they are computed from this
    dataset on first use and cached.
    """

    Y: np.ndarray
    X: np.ndarray
    nu: np.ndarray
    feature_names: list
    row_indices: np.ndarray
    norm_median: float | None = None
    norm_col_means: np.ndarray | None = None
    _normalized: np.ndarray | None = field(default=None, repr=False)

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def J(self):
        return self.Y.shape[1]

    @property
    def D(self):
        return self.X.shape[1]

    def _ensure_stats(self):
        totals = self.Y.sum(axis=1).astype(np.float64)
        if self.norm_median is None:
            self.norm_median = float(np.median(totals))
        # a zero-total row stays zero after scaling, whatever the scale
        safe = np.where(totals > 0, totals, 1.0)
        Z = np.log1p(self.Y * (self.norm_median / safe)[:, None])
        if self.norm_col_means is None:
            self.norm_col_means = Z.mean(axis=0)
        return Z

    def normalized(self):
        """Median-total scaled, log1p, column-centered view of the counts."""
        if self._normalized is None:
            Z = self._ensure_stats()
            self._normalized = Z - self.norm_col_means
        return self._normalized

    def subset(self, rows):
        """Row subset sharing this dataset's size factors and norm stats."""
        rows = np.asarray(rows, dtype=np.intp)
        self._ensure_stats()
        return CountDataset(
            Y=self.Y[rows],
            X=self.X[rows],
            nu=self.nu[rows],
            feature_names=list(self.feature_names),
            row_indices=self.row_indices[rows],
            norm_median=self.norm_median,
            norm_col_means=self.norm_col_means.copy(),
        )


def dataset_from_arrays(Y, X, feature_names=None, min_total=None, rescale_coords=True):
    """Validate raw arrays into a CountDataset.

    min_total, when given, drops observations whose total count falls
    below it. Size factors are computed after filtering.
    """
    Y = np.asarray(Y)
    X = np.asarray(X, dtype=np.float64)
    if Y.ndim != 2 or X.ndim != 2:
        raise ShapeError("counts and coordinates must be 2-d")
    if Y.shape[0] != X.shape[0]:
        raise ShapeError(
            f"counts have {Y.shape[0]} rows but coordinates have {X.shape[0]}"
        )
    if X.shape[1] < 1:
        raise ShapeError("coordinates need at least one dimension")
    if not np.isfinite(Y).all():
        raise ParameterError("counts must be finite")
    if (Y < 0).any() or np.any(Y != np.floor(Y)):
        raise ParameterError("counts must be nonnegative integers")
    Y = Y.astype(np.int64)
    if feature_names is None:
        width = max(4, len(str(Y.shape[1])))
        feature_names = [f"f{j + 1:0{width}d}" for j in range(Y.shape[1])]
    elif len(feature_names) != Y.shape[1]:
        raise ShapeError("feature_names length must match the column count")

    keep = np.arange(Y.shape[0])
    if min_total is not None:
        keep = np.nonzero(Y.sum(axis=1) >= min_total)[0]
        if keep.size == 0:
            raise DegenerateDataError(
                f"no observation reaches the minimum total count {min_total}"
            )
        Y, X = Y[keep], X[keep]
    if rescale_coords:
        Xc = X - X.mean(axis=0)
        span = np.abs(Xc).max(axis=0)
        X = Xc / np.where(span == 0, 1.0, span)
    nu = size_factors(Y)
    return CountDataset(
        Y=Y,
        X=np.ascontiguousarray(X),
        nu=nu,
        feature_names=list(feature_names),
        row_indices=keep,
    )


def _data_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("%") or line.startswith("#"):
                continue
            yield lineno, line


def _parse_dense_counts(path):
    names = None
    rows = []
    for lineno, line in _data_lines(path):
        parts = [p.strip() for p in line.split(",")]
        if names is None:
            names = parts
            continue
        if len(parts) != len(names):
            raise ParseError(
                f"{path}: line {lineno}: expected {len(names)} entries, got {len(parts)}"
            )
        try:
            rows.append(np.array(parts, dtype=np.float64))
        except ValueError:
            for k, p in enumerate(parts):
                try:
                    float(p)
                except ValueError:
                    raise ParseError(
                        f"{path}: line {lineno}: entry {k + 1}: {p!r} is not a number"
                    ) from None
            raise
    if names is None or not rows:
        raise ParseError(f"{path}: no count data found")
    return np.vstack(rows), names


def _parse_triplet_counts(path):
    it = _data_lines(path)
    try:
        lineno, header = next(it)
    except StopIteration:
        raise ParseError(f"{path}: no count data found") from None
    parts = header.split()
    if len(parts) != 3:
        raise ParseError(
            f"{path}: line {lineno}: size line must be 'N J NNZ', got {len(parts)} entries"
        )
    try:
        N, J, nnz = (int(p) for p in parts)
    except ValueError:
        raise ParseError(f"{path}: line {lineno}: size line must hold integers") from None
    if N < 1 or J < 1 or nnz < 0:
        raise ParseError(f"{path}: line {lineno}: invalid sizes N={N} J={J} NNZ={nnz}")
    Y = np.zeros((N, J), dtype=np.int64)
    count = 0
    for lineno, line in it:
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(
                f"{path}: line {lineno}: expected 'row col value', got {len(parts)} entries"
            )
        try:
            i, j, v = int(parts[0]), int(parts[1]), int(float(parts[2]))
        except ValueError:
            raise ParseError(
                f"{path}: line {lineno}: entries must be numeric, got {line!r}"
            ) from None
        if not 1 <= i <= N:
            raise ParseError(
                f"{path}: line {lineno}: row index {i} out of range [1, {N}]"
            )
        if not 1 <= j <= J:
            raise ParseError(
                f"{path}: line {lineno}: column index {j} out of range [1, {J}]"
            )
        if v < 0:
            raise ParseError(f"{path}: line {lineno}: negative count {v}")
        Y[i - 1, j - 1] += v
        count += 1
    if count != nnz:
        raise ParseError(f"{path}: size line promised {nnz} entries, found {count}")
    return Y, None


def _parse_coords(path):
    rows = []
    header_seen = False
    for lineno, line in _data_lines(path):
        parts = [p.strip() for p in line.replace(",", " ").split()]
        try:
            rows.append(np.array(parts, dtype=np.float64))
        except ValueError:
            if not header_seen and not rows:
                header_seen = True
                continue
            raise ParseError(
                f"{path}: line {lineno}: could not parse coordinates {line!r}"
            ) from None
    if not rows:
        raise ParseError(f"{path}: no coordinate data found")
    try:
        return np.vstack(rows)
    except ValueError:
        raise ParseError(f"{path}: coordinate rows have inconsistent lengths") from None


def _sniff_counts_format(path):
    for _, line in _data_lines(path):
        return "dense" if "," in line else "triplet"
    raise ParseError(f"{path}: no count data found")


def load_dataset(counts_path, coords_path, format=None, min_total=DEFAULT_MIN_TOTAL):
    """Read counts + coordinates files into a validated CountDataset.

    format: "dense" (CSV, header row of feature names) or "triplet"
    (size line 'N J NNZ', then 1-based 'row col value' lines); None
    sniffs by the presence of commas. Observations with total count
    below min_total are dropped.
    """
    fmt = format or _sniff_counts_format(counts_path)
    if fmt == "dense":
        Y, names = _parse_dense_counts(counts_path)
    elif fmt == "triplet":
        Y, names = _parse_triplet_counts(counts_path)
    else:
        raise ParameterError(f"unknown counts format {fmt!r}")
    if (Y < 0).any() or np.any(Y != np.floor(Y)):
        raise ParseError(f"{counts_path}: counts must be nonnegative integers")
    X = _parse_coords(coords_path)
    if X.shape[0] != Y.shape[0]:
        raise ShapeError(
            f"{counts_path} has {Y.shape[0]} observations but "
            f"{coords_path} has {X.shape[0]}"
        )
    return dataset_from_arrays(Y, X, names, min_total=min_total)


def _feature_deviances(data):
    Y = data.Y.astype(np.float64)
    nu = data.nu
    rate = Y.sum(axis=0) / nu.sum()
    Mhat = nu[:, None] * rate[None, :]
    dev = np.zeros(data.J)
    pos_rate = rate > 0
    Yp = Y[:, pos_rate]
    Mp = Mhat[:, pos_rate]
    with np.errstate(divide="ignore", invalid="ignore"):
        ylog = np.where(Yp > 0, Yp * np.log(np.where(Yp > 0, Yp, 1.0) / Mp), 0.0)
    dev[pos_rate] = 2.0 * (ylog - Yp + Mp).sum(axis=0)
    return dev


def select_features(data, n_top):
    """Keep the n_top features with the largest deviance from a null rate.

    The null predicts mu_ij = nu_i * (sum_i y_ij / sum_i nu_i); features
    proportional to the size factors saturate it and rank last. Selected
    features keep their original column order.
    """
    if n_top < 1:
        raise ParameterError(f"n_top must be >= 1, got {n_top}")
    if n_top >= data.J:
        return data
    dev = _feature_deviances(data)
    order = np.argsort(-dev, kind="stable")
    keep = np.sort(order[:n_top])
    names = [data.feature_names[j] for j in keep]
    return CountDataset(
        Y=data.Y[:, keep].copy(),
        X=data.X,
        nu=data.nu,
        feature_names=names,
        row_indices=data.row_indices,
    )


def normalize_log(data):
    """Normalized matrix view used by gaussian-likelihood models."""
    return data.normalized()


def train_val_split(data, frac=0.95, seed=0):
    """Disjoint random row split; both children inherit the parent stats."""
    if not 0 < frac < 1:
        raise ParameterError(f"frac must lie in (0, 1), got {frac}")
    if data.N < 2:
        raise DegenerateDataError("need at least 2 observations to split")
    n_train = int(round(frac * data.N))
    n_train = min(max(n_train, 1), data.N - 1)
    perm = np.random.default_rng(seed).permutation(data.N)
    train_rows = np.sort(perm[:n_train])
    val_rows = np.sort(perm[n_train:])
    return data.subset(train_rows), data.subset(val_rows)


def _inverse_normalize(data, pred_norm):
    """Map normalized-scale predictions back to the count scale."""
    data._ensure_stats()
    totals = data.Y.sum(axis=1).astype(np.float64)
    counts = np.expm1(pred_norm + data.norm_col_means[None, :])
    counts = np.maximum(counts, 0.0) * (totals / data.norm_median)[:, None]
    return counts


def loadings_sparsity(model):
    """Fraction of exactly-zero entries across both loadings blocks."""
    B = np.hstack([model.W, model.V])
    return float(np.mean(B == 0.0)) if B.size else 0.0


def predicted_counts(model, data, rows=None):
    """Count-scale mean predictions for a dataset, plus protocol flags.

    rows given: in-sample predictions at those training rows (data must
    be the matching subset). rows None: out-of-sample predictions at
    data's coordinates, extrapolating nonspatial factors through their
    prior means. Gaussian models predict on the normalized scale and are
    mapped back through the inverse transform.
    """
    flags = {}
    if rows is not None:
        pred = predict_mean(model, rows=rows)
    else:
        pred = predict_mean(
            model,
            coords=data.X,
            size_factors=data.nu,
            extrapolate_nonspatial=True,
        )
        if model.T == 0:
            flags["nonspatial_extrapolation"] = True
        elif model.T < model.L:
            flags["nonspatial_prior_means"] = True
    if model.spec.likelihood.family == GAUSSIAN:
        flags["deviance_via_inverse_transform"] = True
        pred = _inverse_normalize(data, pred)
    return np.maximum(pred, MEAN_FLOOR), flags


def evaluate(model, val_data):
    """Held-out Poisson deviance and loadings sparsity for a fitted model."""
    if val_data.J != model.J:
        raise ShapeError(
            f"validation data has {val_data.J} features, model has {model.J}"
        )
    Mhat, flags = predicted_counts(model, val_data)
    dev = poisson_deviance(val_data.Y, Mhat)
    return {
        "validation_deviance_total": dev,
        "validation_deviance_mean": dev / val_data.N,
        "sparsity": loadings_sparsity(model),
        "n_validation": val_data.N,
        "flags": flags,
    }


def training_deviance(model, train_data):
    """In-sample Poisson deviance at the training rows."""
    Mhat, _ = predicted_counts(model, train_data, rows=np.arange(train_data.N))
    dev = poisson_deviance(train_data.Y, Mhat)
    return {"training_deviance_total": dev, "training_deviance_mean": dev / train_data.N}


@dataclass
class RunReport:
    """Everything a run writes to report.json."""

    command: str
    seed: int
    config: dict
    metrics: dict
    timing: dict

    def to_dict(self):
        return {
            "format_version": 1,
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "metrics": self.metrics,
            "timing": self.timing,
        }

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def save_model(model, path, val_indices=None, norm_median=None, norm_col_means=None):
    """Write a fitted model (and split/normalization context) to one file."""
    config = model.config_dict()
    config["format_version"] = ARCHIVE_FORMAT_VERSION
    arrays = {
        "config_json": np.frombuffer(
            json.dumps(config, sort_keys=True).encode("utf-8"), dtype=np.uint8
        ),
        "W": model.W,
        "V": model.V,
        "X_train": model.X,
        "nu_train": model.nu,
    }
    if model.feature_names is not None:
        arrays["feature_names"] = np.array(model.feature_names, dtype=np.str_)
    if model.spatial is not None:
        sp = model.spatial
        arrays.update(
            sp_Z=sp.Z,
            sp_delta=sp.delta,
            sp_omega_raw=sp.omega_raw,
            sp_beta0=sp.beta0,
            sp_beta1=sp.beta1,
            sp_log_amp=sp.log_amp,
            sp_log_len=sp.log_len,
        )
    if model.meanfield is not None:
        mf = model.meanfield
        arrays.update(
            mf_delta=mf.delta,
            mf_log_omega=mf.log_omega,
            mf_prior_mean=mf.prior_mean,
            mf_prior_log_var=mf.prior_log_var,
        )
    if model.log_aux is not None:
        arrays["log_aux"] = model.log_aux
    if val_indices is not None:
        arrays["val_indices"] = np.asarray(val_indices, dtype=np.int64)
    if norm_median is not None:
        arrays["norm_median"] = np.array(norm_median, dtype=np.float64)
    if norm_col_means is not None:
        arrays["norm_col_means"] = np.asarray(norm_col_means, dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_model(path):
    """Rebuild (FactorModel, info dict) from a save_model archive."""
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    try:
        config = json.loads(bytes(arrays["config_json"]).decode("utf-8"))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: not a model archive ({exc})") from None
    version = config.get("format_version")
    if version != ARCHIVE_FORMAT_VERSION:
        raise ParseError(
            f"{path}: archive format {version} is not supported (expected {ARCHIVE_FORMAT_VERSION})"
        )
    spec = ModelSpec(
        L=config["L"],
        T=config["T"],
        nonnegative=config["nonnegative"],
        likelihood=LikelihoodSpec(config["likelihood"]),
        kernel=config["kernel"],
        M=config["M"],
        S=config["S"],
    )
    spatial = None
    if "sp_Z" in arrays:
        spatial = SpatialBlockState(
            Z=arrays["sp_Z"],
            delta=arrays["sp_delta"],
            omega_raw=arrays["sp_omega_raw"],
            beta0=arrays["sp_beta0"],
            beta1=arrays["sp_beta1"],
            log_amp=arrays["sp_log_amp"],
            log_len=arrays["sp_log_len"],
            kernel_kind=config["kernel"],
        )
    meanfield = None
    if "mf_delta" in arrays:
        meanfield = MeanFieldState(
            delta=arrays["mf_delta"],
            log_omega=arrays["mf_log_omega"],
            prior_mean=arrays["mf_prior_mean"],
            prior_log_var=arrays["mf_prior_log_var"],
        )
    names = (
        [str(s) for s in arrays["feature_names"]] if "feature_names" in arrays else None
    )
    model = FactorModel(
        spec=spec,
        X=arrays["X_train"],
        nu=arrays["nu_train"],
        W=arrays["W"],
        V=arrays["V"],
        spatial=spatial,
        meanfield=meanfield,
        log_aux=arrays.get("log_aux"),
        feature_names=names,
    )
    info = {"config": config}
    if "val_indices" in arrays:
        info["val_indices"] = arrays["val_indices"]
    if "norm_median" in arrays:
        info["norm_median"] = float(arrays["norm_median"])
    if "norm_col_means" in arrays:
        info["norm_col_means"] = arrays["norm_col_means"]
    return model, info
