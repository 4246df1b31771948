"""Capsule network: conv feature extractor, primary capsules, routing, decoder.

Primary capsule ``i`` of an unpruned model is capsule type ``i // P`` at grid
position ``i % P`` (row-major over the ``g x g`` primary grid, ``P = g*g``); its
components are output channels ``type*pc_dim ... type*pc_dim + pc_dim - 1`` of
the second convolution.  Only surviving capsules are ever evaluated, so a pruned
model skips the second convolution at removed (type, position) pairs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ArgumentError, DimensionError, InvariantError
from .tensor import Tensor

EPS = 1e-9


def pc_count(image_size: int, capsule_types: int = 32, kernel: int = 9) -> int:
    """Number of primary capsules produced for a square input of ``image_size``."""
    if image_size < 19:
        raise ArgumentError(f"image_size must be >= 19, got {image_size}")
    return primary_grid(image_size, kernel) ** 2 * capsule_types


def primary_grid(image_size: int, kernel: int = 9) -> int:
    g1 = image_size - kernel + 1
    return (g1 - kernel) // 2 + 1


@dataclass(frozen=True)
class CapsNetConfig:
    image_size: int = 28
    image_channels: int = 1
    conv1_filters: int = 256
    kernel: int = 9
    conv2_capsule_types: int = 32
    pc_dim: int = 8
    out_caps_dim: int = 16
    num_classes: int = 10
    routing_iters: int = 3
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5
    recon_weight: float = 0.0005
    decoder_widths: Optional[tuple] = None
    # "final": gradients flow through the last routing iteration only;
    # "all": through every iteration (exact gradient of the routed output).
    routing_grad: str = "final"

    def __post_init__(self):
        if self.image_size < 19:
            raise ArgumentError(f"image_size must be >= 19, got {self.image_size}")
        if not 0 <= self.m_minus < self.m_plus <= 1:
            raise ArgumentError("need 0 <= m_minus < m_plus <= 1")
        if self.routing_iters < 1:
            raise ArgumentError("routing_iters must be >= 1")
        if self.routing_grad not in ("final", "all"):
            raise ArgumentError(f"routing_grad must be 'final' or 'all', got {self.routing_grad!r}")
        if self.decoder_widths is None:
            object.__setattr__(self, "decoder_widths", (512, 1024, self.pixels))
        else:
            widths = tuple(int(w) for w in self.decoder_widths)
            if widths[-1] != self.pixels:
                raise ArgumentError(f"last decoder width must be {self.pixels}, got {widths[-1]}")
            object.__setattr__(self, "decoder_widths", widths)

    @property
    def pixels(self) -> int:
        return self.image_size * self.image_size * self.image_channels

    @property
    def grid(self) -> int:
        return primary_grid(self.image_size, self.kernel)

    @property
    def pc_count(self) -> int:
        return pc_count(self.image_size, self.conv2_capsule_types, self.kernel)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CapsNetConfig":
        d = dict(d)
        if d.get("decoder_widths") is not None:
            d["decoder_widths"] = tuple(d["decoder_widths"])
        return cls(**d)


@dataclass
class CapsNetModel:
    """Parameters plus the ordered list of surviving primary-capsule indices."""

    config: CapsNetConfig
    params: dict
    survivors: np.ndarray

    def __post_init__(self):
        self.survivors = np.asarray(self.survivors, dtype=np.int64)
        self.check()

    def check(self) -> None:
        s = self.survivors
        if s.ndim != 1 or len(s) == 0:
            raise InvariantError("survivors must be a non-empty 1-D sequence")
        if np.any(np.diff(s) <= 0) or s[0] < 0 or s[-1] >= self.config.pc_count:
            raise InvariantError("survivors must be strictly increasing within [0, pc_count)")
        bank = self.params["transform"]
        if bank.shape[0] != len(s):
            raise InvariantError(f"transform bank has {bank.shape[0]} rows for {len(s)} survivors")

    @property
    def n_surviving(self) -> int:
        return len(self.survivors)

    def copy(self) -> "CapsNetModel":
        # tensors are immutable, so sharing them is safe
        return CapsNetModel(self.config, dict(self.params), self.survivors.copy())

    def parameters(self) -> dict:
        return self.params


def init_model(config: CapsNetConfig, seed: int = 0) -> CapsNetModel:
    """Fresh model; every parameter is uniform in ``[-r, r]`` with ``r = sqrt(1/fan_in)``."""
    rng = np.random.Generator(np.random.Philox(seed))
    c = config
    pc_channels = c.conv2_capsule_types * c.pc_dim
    shapes = {
        "conv1_w": ((c.conv1_filters, c.image_channels, c.kernel, c.kernel), c.image_channels * c.kernel ** 2),
        "conv1_b": ((c.conv1_filters,), c.image_channels * c.kernel ** 2),
        "pc_w": ((pc_channels, c.conv1_filters, c.kernel, c.kernel), c.conv1_filters * c.kernel ** 2),
        "pc_b": ((pc_channels,), c.conv1_filters * c.kernel ** 2),
        "transform": ((c.pc_count, c.num_classes, c.out_caps_dim, c.pc_dim), c.pc_dim),
    }
    fan = c.num_classes * c.out_caps_dim
    for i, width in enumerate(c.decoder_widths, start=1):
        shapes[f"dec{i}_w"] = ((fan, width), fan)
        shapes[f"dec{i}_b"] = ((width,), fan)
        fan = width
    params = {}
    for name, (shape, fan_in) in shapes.items():
        r = np.sqrt(1.0 / fan_in)
        params[name] = Tensor._wrap(rng.uniform(-r, r, size=shape).astype(np.float32), requires_grad=True)
    return CapsNetModel(config, params, np.arange(c.pc_count))


def decoder_layers(config: CapsNetConfig) -> int:
    return len(config.decoder_widths)


# ---------------------------------------------------------------- capsule ops


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """``v = |s|^2/(1+|s|^2) * s/|s|`` with the norm guarded by ``EPS``."""
    sq = T.tsum(s * s, axis=axis, keepdims=True)
    scale = sq / ((1.0 + sq) * T.sqrt(sq + EPS))
    return s * scale


def primary_capsules(model: CapsNetModel, images) -> Tensor:
    """Squashed primary capsules ``[N, n_surviving, pc_dim]`` for the survivors."""
    c = model.config
    x = T.as_tensor(images)
    if x.ndim != 4 or x.shape[1:] != (c.image_channels, c.image_size, c.image_size):
        raise DimensionError(
            f"expected images [N,{c.image_channels},{c.image_size},{c.image_size}], got {x.shape}"
        )
    p = model.params
    h = T.conv2d(x, p["conv1_w"], 1) + T.reshape(p["conv1_b"], (1, -1, 1, 1))
    h = T.relu(h)
    u = _pc_conv(model, h)
    return squash(u)


def _pc_conv(model: CapsNetModel, h: Tensor) -> Tensor:
    c = model.config
    p = model.params
    N = h.shape[0]
    P = c.grid ** 2
    types = c.conv2_capsule_types
    surv = model.survivors
    if len(surv) == c.pc_count:
        u = T.conv2d(h, p["pc_w"], 2) + T.reshape(p["pc_b"], (1, -1, 1, 1))
        u = T.reshape(u, (N, types, c.pc_dim, P))
        return T.reshape(T.transpose(u, (0, 1, 3, 2)), (N, types * P, c.pc_dim))
    # evaluate the second convolution only at surviving (type, position) pairs
    pc_type, pc_pos = np.divmod(surv, P)
    order = np.lexsort((pc_type, pc_pos))  # position-major
    positions, channels = [], []
    for i in order:
        if not positions or positions[-1] != pc_pos[i]:
            positions.append(pc_pos[i])
            channels.append([])
        channels[-1].extend(range(pc_type[i] * c.pc_dim, (pc_type[i] + 1) * c.pc_dim))
    flat_channels = np.concatenate([np.asarray(ch) for ch in channels])
    u = T.conv2d_at(h, p["pc_w"], 2, positions, channels) + T.take(p["pc_b"], flat_channels, axis=0)
    u = T.reshape(u, (N, len(surv), c.pc_dim))
    return T.take(u, np.argsort(order), axis=1)


@dataclass
class RoutingState:
    logits: np.ndarray     # b   [N, n, K]
    couplings: np.ndarray  # c   [N, n, K]
    output: Tensor         # v   [N, K, d]
    coupling_history: list = field(default_factory=list)


def routing_step(u_hat: Tensor, logits) -> tuple[Tensor, Tensor]:
    """One routing pass for fixed logits: couplings and squashed outputs."""
    N, n, K, d = u_hat.shape
    b = T.as_tensor(logits, like=u_hat)
    cpl = T.softmax(b, axis=2)
    s = T.tsum(T.reshape(cpl, (N, n, K, 1)) * u_hat, axis=1)
    return cpl, squash(s)


def dynamic_routing(u_hat: Tensor, iters: int, grad: str = "final") -> RoutingState:
    """Routing-by-agreement from ``u_hat [N, n, K, d]`` to ``K`` output capsules.

    With ``grad="final"`` the logit updates of earlier iterations are treated as
    constants, so gradients reach ``u_hat`` only through the last weighted sum.
    """
    if iters < 1:
        raise ArgumentError(f"routing needs at least one iteration, got {iters}")
    if u_hat.ndim != 4:
        raise DimensionError(f"u_hat must be [N, n, K, d], got {u_hat.shape}")
    N, n, K, d = u_hat.shape
    early = u_hat if grad == "all" else T.detach(u_hat)
    b = Tensor._wrap(np.zeros((N, n, K), dtype=u_hat.dtype))
    history = []
    for it in range(iters):
        last = it == iters - 1
        src = u_hat if last else early
        cpl, v = routing_step(src, b)
        history.append(cpl.data)
        if not last:
            b = b + T.tsum(src * T.reshape(v, (N, 1, K, d)), axis=-1)
    return RoutingState(b.data, cpl.data, v, history)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= num_classes):
        raise ArgumentError("labels must be a 1-D sequence of ints in [0, num_classes)")
    return np.eye(num_classes, dtype=np.float32)[labels]


def _check_one_hot(t: np.ndarray) -> None:
    if t.ndim != 2 or not np.all((t == 0) | (t == 1)) or not np.all(t.sum(axis=1) == 1):
        raise ArgumentError("labels must be one-hot rows")


def margin_loss(v: Tensor, labels, config: CapsNetConfig) -> Tensor:
    """Batch-mean of ``sum_k T_k max(0, m+ - |v_k|)^2 + lambda (1-T_k) max(0, |v_k| - m-)^2``."""
    t = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    _check_one_hot(t)
    if t.shape != v.shape[:2]:
        raise DimensionError(f"labels {t.shape} do not match capsules {v.shape[:2]}")
    t = t.astype(v.dtype)
    lengths = T.norm(v, axis=-1)
    present = T.relu(config.m_plus - lengths)
    absent = T.relu(lengths - config.m_minus)
    per_class = present * present * t + (absent * absent) * ((1.0 - t) * config.lambda_down)
    return T.mean(T.tsum(per_class, axis=1))


def reconstruction_loss(decoded: Tensor, images) -> Tensor:
    """Batch-mean of the summed squared pixel difference (unweighted)."""
    x = T.as_tensor(images, like=decoded)
    if decoded.shape != x.shape:
        raise DimensionError(f"decoded {decoded.shape} vs images {x.shape}")
    diff = decoded - x
    return T.mean(T.tsum(diff * diff, axis=1))


def decode(model: CapsNetModel, v: Tensor, classes) -> Tensor:
    """Reconstruct images from the capsule of ``classes`` (others masked to zero)."""
    c = model.config
    N = v.shape[0]
    mask = one_hot(classes, c.num_classes).astype(v.dtype)[:, :, None]
    h = T.reshape(v * mask, (N, c.num_classes * c.out_caps_dim))
    layers = decoder_layers(c)
    for i in range(1, layers + 1):
        h = h @ model.params[f"dec{i}_w"] + model.params[f"dec{i}_b"]
        h = T.relu(h) if i < layers else T.sigmoid(h)
    return h


@dataclass
class ForwardResult:
    logits: Tensor              # |v_k| per class, [N, K]
    routing: RoutingState
    pc_activations: Tensor      # post-squash primary capsules [N, n, pc_dim]
    loss: Optional[Tensor] = None
    margin: Optional[Tensor] = None
    reconstruction: Optional[Tensor] = None
    decoded: Optional[Tensor] = None

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=1)


def forward(
    model: CapsNetModel,
    images,
    labels: Optional[Sequence[int]] = None,
    *,
    pc_mask: Optional[np.ndarray] = None,
    reconstruct: bool = False,
) -> ForwardResult:
    """Run the network.

    With ``labels`` the total loss is computed and the decoder reconstructs
    from the true-class capsule; otherwise the decoder (when ``reconstruct``)
    uses the predicted class.  ``pc_mask`` multiplies each surviving capsule's
    prediction vectors, which is how masking-based pruning is emulated.
    """
    c = model.config
    u = primary_capsules(model, images)
    if T.active_tape() is not None:
        u.retain_grad()
    u_hat = T.matvec_bank(model.params["transform"], u)
    if pc_mask is not None:
        mask = np.asarray(pc_mask, dtype=u_hat.dtype)
        if mask.shape != (model.n_surviving,):
            raise DimensionError(f"pc_mask must have shape ({model.n_surviving},)")
        u_hat = u_hat * mask[None, :, None, None]
    routing = dynamic_routing(u_hat, c.routing_iters, c.routing_grad)
    v = routing.output
    logits = T.norm(v, axis=-1)
    result = ForwardResult(logits=logits, routing=routing, pc_activations=u)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        t = one_hot(labels, c.num_classes)
        result.margin = margin_loss(v, t, c)
        result.decoded = decode(model, v, labels)
        flat = np.asarray(images.data if isinstance(images, Tensor) else images).reshape(len(labels), -1)
        result.reconstruction = reconstruction_loss(result.decoded, flat)
        result.loss = result.margin + result.reconstruction * c.recon_weight
    elif reconstruct:
        result.decoded = decode(model, v, result.predictions)
    return result


def predict(model: CapsNetModel, images, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(model, images[i:i + batch_size]).predictions)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: CapsNetModel, images, labels, batch_size: int = 256) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(model, images, batch_size) == labels))


def with_config(model: CapsNetModel, **changes) -> CapsNetModel:
    """Same parameters under a modified configuration (e.g. routing settings)."""
    d = model.config.to_dict()
    d.update(changes)
    return CapsNetModel(CapsNetConfig.from_dict(d), dict(model.params), model.survivors.copy())


__all__ = [
    "CapsNetConfig",
    "CapsNetModel",
    "ForwardResult",
    "RoutingState",
    "accuracy",
    "decode",
    "dynamic_routing",
    "forward",
    "init_model",
    "margin_loss",
    "one_hot",
    "pc_count",
    "predict",
    "primary_capsules",
    "reconstruction_loss",
    "routing_step",
    "squash",
    "with_config",
]
