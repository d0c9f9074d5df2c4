"""Modality encoders, attention pooling and the two fusion architectures.

Late fusion (the main model)::

    window_m --MLP--> [L_m, E] --biLSTM--> [2H] --linear--> z_m      (one branch per modality)
    a_m = g(z_m)                 importance head, E -> 16 -> 1
    alpha = softmax(a)           per instance, over modalities
    z = sum_m alpha_m * z_m      aggregate in the shared space
    p = softmax(W z + b)

Early fusion concatenates every modality's features per time step (coarse
modalities are forward-filled onto the finest grid) and runs one branch of the
same architecture straight into the classifier.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .timeline import Episode, ModalitySchema, Normalizer, stack_windows

CHECKPOINT_FORMAT = "mmstress-checkpoint/1"


@dataclass(frozen=True)
class ModelDims:
    embed: int = 32
    mlp_hidden: int = 32
    lstm_hidden: int = 64
    importance_hidden: int = 16
    projection_hidden: int = 32
    n_classes: int = 2


SMALL_DIMS = ModelDims(embed=6, mlp_hidden=6, lstm_hidden=8, importance_hidden=4,
                       projection_hidden=6)


class ModelParams:
    """Ordered collection of named trainable tensors."""

    def __init__(self, tensors: Optional[dict] = None):
        self.tensors: dict = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        t = ad.parameter(value, name=name)
        self.tensors[name] = t
        return t

    def count(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self.tensors.items() if n.startswith(prefix))

    def group(self, prefix: str) -> dict:
        return {n: t for n, t in self.tensors.items() if n.startswith(prefix)}

    def snapshot(self) -> dict:
        return {n: t.value.copy() for n, t in self.tensors.items()}

    def load_snapshot(self, snap: dict) -> None:
        for n, v in snap.items():
            self.tensors[n].value[...] = v


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _init_dense(params: ModelParams, prefix: str, fan_in: int, fan_out: int, rng) -> None:
    params.add(f"{prefix}.w", glorot(rng, fan_in, fan_out))
    params.add(f"{prefix}.b", np.zeros(fan_out))


def _init_encoder(params: ModelParams, prefix: str, width: int, dims: ModelDims, rng) -> None:
    H = dims.lstm_hidden
    _init_dense(params, f"{prefix}.in1", width, dims.mlp_hidden, rng)
    _init_dense(params, f"{prefix}.in2", dims.mlp_hidden, dims.embed, rng)
    for direction in ("fwd", "bwd"):
        params.add(f"{prefix}.{direction}.wx", glorot(rng, dims.embed, 4 * H))
        params.add(f"{prefix}.{direction}.wh", glorot(rng, H, 4 * H))
        bias = np.zeros(4 * H)
        bias[H: 2 * H] = 1.0  # forget gate
        params.add(f"{prefix}.{direction}.b", bias)
    _init_dense(params, f"{prefix}.out", 2 * H, dims.embed, rng)


def init_classifier(params: ModelParams, dims: ModelDims, rng) -> None:
    _init_dense(params, "cls", dims.embed, dims.n_classes, rng)


def init_projection(params: ModelParams, dims: ModelDims, rng) -> None:
    _init_dense(params, "proj.l1", dims.embed, dims.projection_hidden, rng)
    _init_dense(params, "proj.l2", dims.projection_hidden, dims.embed, rng)


def dense(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ad.matmul(x, params[f"{prefix}.w"]) + params[f"{prefix}.b"]


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def encode_modality(window, params: ModelParams, prefix: str) -> Tensor:
    """Encode a batch of windows ``[B, L, w]`` (or a single ``[L, w]``) to ``[B, E]``."""
    x = window if isinstance(window, Tensor) else ad.constant(window)
    if x.value.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    if x.value.ndim != 3:
        raise ad.ShapeError(f"encode_modality: expected [B, L, w], got {x.shape}")
    n, steps, width = x.shape
    expected = params[f"{prefix}.in1.w"].shape[0]
    if width != expected:
        raise ad.ShapeError(f"{prefix}: window width {width} does not match encoder input {expected}")
    flat = ad.reshape(x, (n * steps, width))
    hidden = ad.tanh(dense(flat, params, f"{prefix}.in1"))
    proj = dense(hidden, params, f"{prefix}.in2")
    seq = ad.reshape(proj, (n, steps, proj.shape[1]))
    h_fwd = ad.lstm(seq, params[f"{prefix}.fwd.wx"], params[f"{prefix}.fwd.wh"],
                    params[f"{prefix}.fwd.b"])
    h_bwd = ad.lstm(seq, params[f"{prefix}.bwd.wx"], params[f"{prefix}.bwd.wh"],
                    params[f"{prefix}.bwd.b"], reverse=True)
    return dense(ad.concat([h_fwd, h_bwd], axis=1), params, f"{prefix}.out")


@dataclass
class SharedLatent:
    embeddings: list
    scores: Tensor
    alpha: Tensor
    z: Tensor


def importance_scores(embeddings: Sequence[Tensor], params: ModelParams) -> Tensor:
    cols = []
    for z_m in embeddings:
        hidden = ad.tanh(dense(z_m, params, "imp.l1"))
        cols.append(dense(hidden, params, "imp.l2"))
    return ad.concat(cols, axis=1)


def pool(embeddings: Sequence[Tensor], scores: Tensor) -> SharedLatent:
    """Softmax the ``[B, M]`` scores and mix the embeddings with the result."""
    if not embeddings:
        raise ValueError("attention pooling needs at least one modality embedding")
    alpha = ad.softmax_row(scores)
    z = None
    for m, z_m in enumerate(embeddings):
        term = ad.row_scale(z_m, ad.take(alpha, m, axis=1))
        z = term if z is None else z + term
    return SharedLatent(list(embeddings), scores, alpha, z)


def attention_pool(embeddings: Sequence[Tensor], params: ModelParams) -> SharedLatent:
    if not embeddings:
        raise ValueError("attention pooling needs at least one modality embedding")
    embeddings = [e if e.value.ndim == 2 else ad.reshape(e, (1, e.size)) for e in embeddings]
    return pool(embeddings, importance_scores(embeddings, params))


def classify(z: Tensor, params: ModelParams) -> Tensor:
    return ad.softmax_row(dense(z, params, "cls"))


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def _schema_to_list(schema) -> list:
    return [{"name": m.name, "features": list(m.features), "resample_step": m.resample_step,
             "window_steps": m.window_steps} for m in schema]


def _schema_from_list(items) -> tuple:
    return tuple(ModalitySchema(d["name"], tuple(d["features"]), float(d["resample_step"]),
                                int(d["window_steps"])) for d in items)


class LateFusionModel:
    kind = "late"

    def __init__(self, schema: Sequence[ModalitySchema], dims: ModelDims = ModelDims(),
                 seed: int = 0, params: Optional[ModelParams] = None):
        self.schema = tuple(schema)
        self.dims = dims
        if params is None:
            rng = np.random.default_rng([seed, 0])
            params = ModelParams()
            for m in self.schema:
                _init_encoder(params, f"enc.{m.name}", m.width, dims, rng)
            _init_dense(params, "imp.l1", dims.embed, dims.importance_hidden, rng)
            _init_dense(params, "imp.l2", dims.importance_hidden, 1, rng)
            init_classifier(params, dims, rng)
            init_projection(params, dims, rng)
        self.params = params

    @property
    def modalities(self) -> list:
        return [m.name for m in self.schema]

    def encode(self, windows: dict) -> list:
        missing = [m for m in self.modalities if m not in windows]
        if missing:
            raise ValueError(f"missing modality windows: {missing}")
        return [encode_modality(windows[m], self.params, f"enc.{m}") for m in self.modalities]

    def forward(self, windows: dict) -> tuple:
        """Return ``(SharedLatent, class probabilities [B, C])``."""
        latent = attention_pool(self.encode(windows), self.params)
        return latent, classify(latent.z, self.params)

    def predict(self, windows: dict, chunk: int = 256) -> tuple:
        """Probabilities ``[N, C]`` and attention weights ``[N, M]`` as plain arrays."""
        n = len(next(iter(windows.values())))
        probs, alphas = [], []
        for lo in range(0, n, chunk):
            part = {k: v[lo: lo + chunk] for k, v in windows.items()}
            latent, p = self.forward(part)
            probs.append(p.value)
            alphas.append(latent.alpha.value)
        if not probs:
            return np.zeros((0, self.dims.n_classes)), np.zeros((0, len(self.schema)))
        return np.concatenate(probs), np.concatenate(alphas)


def fuse_windows(windows: dict, schema: Sequence[ModalitySchema]) -> np.ndarray:
    """Concatenate modalities per time step on the finest grid ``[B, L, sum(w_m)]``.

    Coarser modalities are forward-filled by repeating their rows.
    """
    L = max(m.window_steps for m in schema)
    parts = []
    for m in schema:
        w = windows[m.name]
        if w.ndim == 2:
            w = w[None]
        idx = (np.arange(L) * m.window_steps) // L
        parts.append(w[:, idx, :])
    return np.concatenate(parts, axis=2)


class EarlyFusionModel:
    kind = "early"

    def __init__(self, schema: Sequence[ModalitySchema], dims: ModelDims = ModelDims(),
                 seed: int = 0, params: Optional[ModelParams] = None):
        self.schema = tuple(schema)
        self.dims = dims
        if params is None:
            rng = np.random.default_rng([seed, 0])
            params = ModelParams()
            _init_encoder(params, "enc.early", sum(m.width for m in self.schema), dims, rng)
            init_classifier(params, dims, rng)
        self.params = params

    @property
    def modalities(self) -> list:
        return [m.name for m in self.schema]

    def forward_fused(self, fused: np.ndarray) -> Tensor:
        return classify(encode_modality(fused, self.params, "enc.early"), self.params)

    def forward(self, windows: dict) -> tuple:
        """Return ``(None, class probabilities)``; there is no attention path."""
        return None, self.forward_fused(fuse_windows(windows, self.schema))

    def predict(self, windows: dict, chunk: int = 256) -> tuple:
        fused = fuse_windows(windows, self.schema)
        probs = [self.forward_fused(fused[lo: lo + chunk]).value
                 for lo in range(0, len(fused), chunk)]
        if not probs:
            return np.zeros((0, self.dims.n_classes)), None
        return np.concatenate(probs), None


def forward_late_fusion(episode: Episode, model: LateFusionModel) -> tuple:
    return model.forward({m: w[None] for m, w in episode.windows.items()})


def forward_early_fusion(episode: Episode, model: EarlyFusionModel) -> Tensor:
    return model.forward({m: w[None] for m, w in episode.windows.items()})[1]


@dataclass
class AttentionReport:
    modalities: list
    alpha: np.ndarray
    means: np.ndarray = field(init=False)

    def __post_init__(self):
        self.means = self.alpha.mean(axis=0)

    def as_dict(self) -> dict:
        return {m: float(v) for m, v in zip(self.modalities, self.means)}


def attention_report(model: LateFusionModel, episodes: Sequence[Episode],
                     chunk: int = 256) -> AttentionReport:
    if not episodes:
        raise ValueError("attention report needs at least one episode")
    _, alpha = model.predict(stack_windows(episodes, model.schema), chunk=chunk)
    return AttentionReport(model.modalities, alpha)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model, normalizer: Optional[Normalizer] = None,
                    meta: Optional[dict] = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "schema": _schema_to_list(model.schema),
        "dims": asdict(model.dims),
        "params": {n: {"shape": list(t.shape), "values": t.value.reshape(-1).tolist()}
                   for n, t in model.params.items()},
        "normalizer": normalizer.to_dict() if normalizer is not None else None,
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> tuple:
    """Return ``(model, normalizer or None, meta)``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint (format {doc.get('format')!r})")
    schema = _schema_from_list(doc["schema"])
    dims = ModelDims(**doc["dims"])
    params = ModelParams()
    for name, entry in doc["params"].items():
        params.add(name, np.array(entry["values"], dtype=np.float64).reshape(entry["shape"]))
    cls = LateFusionModel if doc["kind"] == "late" else EarlyFusionModel
    model = cls(schema, dims, params=params)
    normalizer = Normalizer.from_dict(doc["normalizer"]) if doc["normalizer"] else None
    return model, normalizer, doc.get("meta", {})
