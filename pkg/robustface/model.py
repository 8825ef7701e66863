"""
The embedding network f.

A small dense encoder on flattened images produces L2-normalized embeddings.
A two-layer projection head maps embeddings into the space where the
contrastive loss is computed; it is only trained during pre-training.

With ``use_dual_norm`` every hidden layer gets a layer normalization whose
scale/shift comes from one of two parameter sets, selected by the branch
argument (``clean`` -> theta, ``adversarial`` -> theta_adv). Without it there
are no normalization layers and the branch argument is ignored.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Mapping, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

BRANCHES = ("clean", "adversarial")
EMBED_EPS = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 256
    hidden_dims: Tuple[int, ...] = (256, 128)
    embed_dim: int = 64
    project_dim: int = 32
    use_dual_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must name at least one layer")
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim, self.project_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {dims}")
        if self.embed_dim > self.hidden_dims[-1]:
            raise ValueError(
                f"embed_dim ({self.embed_dim}) exceeds the last hidden dim ({self.hidden_dims[-1]})"
            )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["hidden_dims"] = list(self.hidden_dims)
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "EncoderConfig":
        return cls(**data)


def param_shapes(config: EncoderConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Parameter names and shapes in declaration order."""
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    fan_in = config.input_dim
    for i, width in enumerate(config.hidden_dims):
        shapes.append((f"hidden.{i}.weight", (fan_in, width)))
        shapes.append((f"hidden.{i}.bias", (width,)))
        if config.use_dual_norm:
            for branch in BRANCHES:
                shapes.append((f"hidden.{i}.norm.{branch}.scale", (width,)))
                shapes.append((f"hidden.{i}.norm.{branch}.shift", (width,)))
        fan_in = width
    shapes.append(("embed.weight", (fan_in, config.embed_dim)))
    shapes.append(("embed.bias", (config.embed_dim,)))
    shapes.append(("project.0.weight", (config.embed_dim, config.embed_dim)))
    shapes.append(("project.0.bias", (config.embed_dim,)))
    shapes.append(("project.1.weight", (config.embed_dim, config.project_dim)))
    shapes.append(("project.1.bias", (config.project_dim,)))
    return shapes


class EncoderParams:
    """Every trainable weight of the network, keyed by name in declaration order."""

    def __init__(self, config: EncoderConfig, tensors: Mapping[str, Union[Tensor, np.ndarray]]):
        expected = param_shapes(config)
        missing = [name for name, _ in expected if name not in tensors]
        extra = sorted(set(tensors) - {name for name, _ in expected})
        if missing or extra:
            raise ContractError(f"parameter set mismatch: missing {missing}, unexpected {extra}")

        self.config = config
        self._tensors: Dict[str, Tensor] = {}
        for name, shape in expected:
            value = tensors[name]
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            if tuple(arr.shape) != shape:
                raise ShapeError(f"parameter '{name}'", arr.shape, shape)
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"parameter '{name}' has non-finite values")
            # Tensors are kept as given so a substituted leaf stays on its tape.
            if isinstance(value, Tensor):
                self._tensors[name] = value
            else:
                self._tensors[name] = Tensor._wrap(np.array(arr, dtype=np.float32), True)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> List[str]:
        return list(self._tensors)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    @property
    def has_adversarial_norm(self) -> bool:
        return self.config.use_dual_norm

    def trainable_names(self, include_projector: bool = True) -> List[str]:
        return [n for n in self._tensors if include_projector or not n.startswith("project.")]

    def replace(self, updates: Mapping[str, Union[Tensor, np.ndarray]]) -> "EncoderParams":
        merged: Dict[str, Union[Tensor, np.ndarray]] = dict(self._tensors)
        merged.update(updates)
        return EncoderParams(self.config, merged)

    def same_as(self, other: "EncoderParams") -> bool:
        if self.config != other.config:
            return False
        return all(
            np.array_equal(self[name].data, other[name].data) and self[name].dtype == other[name].dtype
            for name in self._tensors
        )


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """
    Weights ~ N(0, 1/fan_in), biases zero, normalization scale one / shift zero.
    Deterministic given seed.
    """
    rng = np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config):
        if name.endswith(".weight"):
            std = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
        elif name.endswith(".scale"):
            arrays[name] = np.ones(shape, dtype=np.float32)
        else:
            arrays[name] = np.zeros(shape, dtype=np.float32)
    logger.debug("initialized %d parameter arrays (seed=%d)", len(arrays), seed)
    return EncoderParams(config, arrays)


def forward_embed(params: EncoderParams, x: Tensor, branch: str = "clean") -> Tensor:
    """Map a [batch x input_dim] batch to unit-norm [batch x embed_dim] embeddings."""
    if branch not in BRANCHES:
        raise ContractError(f"unknown branch '{branch}', expected one of {BRANCHES}")
    cfg = params.config
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeError("forward_embed input", x.shape, (-1, cfg.input_dim))

    h = x
    for i in range(len(cfg.hidden_dims)):
        h = T.linear(h, params[f"hidden.{i}.weight"], params[f"hidden.{i}.bias"])
        if cfg.use_dual_norm:
            prefix = f"hidden.{i}.norm.{branch}"
            h = T.affine(T.layer_norm(h), params[f"{prefix}.scale"], params[f"{prefix}.shift"])
        h = T.relu(h)
    e = T.linear(h, params["embed.weight"], params["embed.bias"])
    return T.l2_normalize(e, eps=EMBED_EPS)


def forward_project(params: EncoderParams, embed: Tensor) -> Tensor:
    """Two dense layers with relu between; unit-norm rows for NT-Xent."""
    cfg = params.config
    if embed.ndim != 2 or embed.shape[1] != cfg.embed_dim:
        raise ShapeError("forward_project input", embed.shape, (-1, cfg.embed_dim))
    h = T.relu(T.linear(embed, params["project.0.weight"], params["project.0.bias"]))
    z = T.linear(h, params["project.1.weight"], params["project.1.bias"])
    return T.l2_normalize(z, eps=EMBED_EPS)
