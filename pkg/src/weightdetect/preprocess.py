"""Turn model weights into aligned feature rows.

Per model, in this order: keep the signature tensors (optionally a
whitelist of them), subtract the reference model, divide each tensor by its
standard deviation, sort each tensor, flatten, and optionally divide the
flat vector by its standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_models
from .weight_store import (
    ArchitectureError,
    ArchitectureSignature,
    ModelWeights,
    WeightTensor,
    common_architecture,
)

NORM_METHODS = ("tensor", "model", "none")
STD_EPS = 1e-12


class DegenerateTensorError(ValueError):
    """Standard deviation too small to normalize by."""


@dataclass(frozen=True)
class PreprocessConfig:
    reference: ModelWeights | None = None
    norm_method: str = "tensor"
    sorted: bool = False
    tensor_whitelist: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.norm_method not in NORM_METHODS:
            raise ValueError(f"norm_method must be one of {NORM_METHODS}, got {self.norm_method!r}")
        if self.tensor_whitelist is not None:
            object.__setattr__(self, "tensor_whitelist", tuple(self.tensor_whitelist))
        if self.reference is not None and self.tensor_whitelist is not None:
            for name in self.tensor_whitelist:
                if name not in self.reference:
                    raise ArchitectureError(f"reference model lacks whitelisted tensor {name!r}")

    def with_whitelist(self, names) -> "PreprocessConfig":
        return replace(self, tensor_whitelist=None if names is None else tuple(names))


@dataclass(frozen=True)
class FeatureIndex:
    tensor_name: str
    position: int


@dataclass
class FeatureMatrix:
    ids: list[str]
    columns: list[FeatureIndex]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.values.shape != (len(self.ids), len(self.columns)):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.ids)} rows x {len(self.columns)} columns"
            )

    @property
    def shape(self):
        return self.values.shape

    def take_columns(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=int)
        return FeatureMatrix(list(self.ids), [self.columns[i] for i in idx], self.values[:, idx])

    def take_rows(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=int)
        return FeatureMatrix([self.ids[i] for i in idx], list(self.columns), self.values[idx])


def _as_flat(t) -> np.ndarray:
    data = t.data if isinstance(t, WeightTensor) else t
    return np.asarray(data, dtype=np.float64).reshape(-1)


def _population_std(x: np.ndarray) -> float:
    # summing in sorted order makes the result independent of element order
    return float(np.std(np.sort(x)))


def subtract_reference(
    model: ModelWeights, reference: ModelWeights, signature: ArchitectureSignature
) -> dict[str, np.ndarray]:
    """Elementwise ``model - reference`` over the signature tensors, as float64 arrays."""
    out = {}
    for name, shape in signature.tensor_specs:
        a, r = model.get(name), reference.get(name)
        if a.shape != shape or r.shape != shape:
            raise ArchitectureError(
                f"tensor {name!r}: model {a.shape} / reference {r.shape} vs signature {shape}"
            )
        out[name] = a.data.astype(np.float64) - r.data.astype(np.float64)
    return out


def tensor_norm(t) -> np.ndarray:
    """Flat tensor values divided by their population standard deviation."""
    x = _as_flat(t)
    std = _population_std(x)
    if not std > STD_EPS:
        raise DegenerateTensorError(f"standard deviation {std:g} <= {STD_EPS:g}")
    return x / std


def model_norm(flat) -> np.ndarray:
    """The flattened feature vector divided by its population standard deviation."""
    return tensor_norm(flat)


def sort_tensor(t) -> np.ndarray:
    """Ascending flat values; invariant to any reordering of the tensor's elements."""
    return np.sort(_as_flat(t), kind="stable")


def resolve_signature(models: Sequence[ModelWeights], config: PreprocessConfig) -> ArchitectureSignature:
    """Common architecture of ``models`` (and the reference), restricted to the whitelist."""
    pool = list(models) + ([config.reference] if config.reference is not None else [])
    sig = common_architecture(pool)
    if config.tensor_whitelist is not None:
        missing = [n for n in config.tensor_whitelist if n not in sig.names]
        if missing:
            raise ArchitectureError(f"whitelisted tensors not shared by all models: {missing}")
        sig = sig.restrict(config.tensor_whitelist)
    return sig


def feature_columns(signature: ArchitectureSignature) -> list[FeatureIndex]:
    cols = []
    for name, shape in signature.tensor_specs:
        n = int(np.prod(shape))
        cols.extend(FeatureIndex(name, p) for p in range(n))
    return cols


def model_row(model: ModelWeights, config: PreprocessConfig, signature: ArchitectureSignature) -> np.ndarray:
    """One model's feature row (see the module docstring for the step order)."""
    signature.check(model)
    if config.reference is not None:
        blocks = subtract_reference(model, config.reference, signature)
    else:
        blocks = {n: model.get(n).data.astype(np.float64) for n in signature.names}
    parts = []
    for name in signature.names:
        x = blocks[name]
        if config.norm_method == "tensor":
            try:
                x = tensor_norm(x)
            except DegenerateTensorError:
                x = np.zeros_like(x)
        if config.sorted:
            x = sort_tensor(x)
        parts.append(x)
    row = np.concatenate(parts) if parts else np.zeros(0)
    if config.norm_method == "model":
        row = model_norm(row)
    return row


def build_feature_matrix(
    models: Sequence[ModelWeights],
    config: PreprocessConfig,
    signature: ArchitectureSignature | None = None,
    ids: Sequence[str] | None = None,
) -> FeatureMatrix:
    """Stack :func:`model_row` for every model, keeping input order.

    Column provenance is (tensor, position); with ``sorted`` the position is
    the rank within the sorted tensor.
    """
    models = list(models)
    if signature is None:
        signature = resolve_signature(models, config)
    elif config.tensor_whitelist is not None:
        signature = signature.restrict(config.tensor_whitelist)
    if ids is None:
        ids = [str(i) for i in range(len(models))]
    cols = feature_columns(signature)
    values = np.empty((len(models), len(cols)))
    for i, m in enumerate(models):
        values[i] = model_row(m, config, signature)
    return FeatureMatrix(list(ids), cols, values)


class WeightFlattener(TransformerMixin, BaseEstimator):
    """Transformer from a list of models to the preprocessed feature matrix.

    ``fit`` only pins the architecture signature; there is nothing learned
    from the values themselves.

    Parameters
    ----------
    reference : ModelWeights or None
        Model subtracted tensor-by-tensor before anything else.
    norm_method : {"tensor", "model", "none"}
    sorted : bool
        Sort each tensor's values, discarding their positions.
    tensor_whitelist : sequence of str or None
        Tensors to keep; None keeps the whole common architecture.
    """

    def __init__(self, reference=None, norm_method="tensor", sorted=False, tensor_whitelist=None):
        self.reference = reference
        self.norm_method = norm_method
        self.sorted = sorted
        self.tensor_whitelist = tensor_whitelist

    def _config(self) -> PreprocessConfig:
        return PreprocessConfig(self.reference, self.norm_method, self.sorted, self.tensor_whitelist)

    def fit(self, X, y=None):
        models = check_models(X)
        self.config_ = self._config()
        self.signature_ = resolve_signature(models, self.config_)
        self.columns_ = feature_columns(self.signature_)
        self.n_features_out_ = len(self.columns_)
        return self

    def transform(self, X):
        check_is_fitted(self, "signature_")
        models = check_models(X)
        return build_feature_matrix(models, self.config_, self.signature_).values

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "columns_")
        return np.array([f"{c.tensor_name}[{c.position}]" for c in self.columns_], dtype=object)
