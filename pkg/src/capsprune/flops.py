"""Analytic FLOP counts for the primary-capsule transform and dynamic routing.

Convention: one multiply or one add is one FLOP; an exponential, division or
square root also counts as one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .capsnet import CapsNetConfig, primary_grid
from .errors import ArgumentError


def flops_pc_transform(n_pcs: int, d_in: int = 8, d_out: int = 16) -> int:
    """One ``d_out x d_in`` matrix-vector product per primary capsule."""
    if n_pcs < 0:
        raise ArgumentError("n_pcs must be >= 0")
    return n_pcs * d_out * (2 * d_in - 1)


def flops_routing(n_pcs: int, classes: int, caps_dim: int, iters: int) -> int:
    """Per iteration: softmax over classes for every capsule (3K-1), weighted sums
    and agreement dot products (4dK per capsule), squash per class (3d+1)."""
    if n_pcs < 0 or classes < 1 or caps_dim < 1 or iters < 1:
        raise ArgumentError("routing FLOPs need n_pcs >= 0 and classes, caps_dim, iters >= 1")
    per_pc = 3 * classes - 1 + 4 * caps_dim * classes
    return iters * (n_pcs * per_pc + classes * (3 * caps_dim + 1))


def reduction_ratio(baseline: int, pruned: int) -> float:
    if baseline <= 0:
        raise ArgumentError("baseline FLOPs must be positive")
    return 1.0 - pruned / baseline


def conv_flops(config: CapsNetConfig) -> int:
    c = config
    g1 = c.image_size - c.kernel + 1
    g2 = primary_grid(c.image_size, c.kernel)
    conv1 = 2 * c.image_channels * c.kernel ** 2 * c.conv1_filters * g1 ** 2
    conv2 = 2 * c.conv1_filters * c.kernel ** 2 * c.conv2_capsule_types * c.pc_dim * g2 ** 2
    return conv1 + conv2


def decoder_flops(config: CapsNetConfig) -> int:
    fan, total = config.num_classes * config.out_caps_dim, 0
    for width in config.decoder_widths:
        total += 2 * fan * width
        fan = width
    return total


@dataclass
class FlopsReport:
    n_pcs: int
    baseline_pcs: int
    pc_transform_flops: int
    routing_flops: int
    routing_iters: int
    classes: int
    caps_dim: int
    pc_transform_reduction: float
    routing_reduction: float
    conv_flops: int
    decoder_flops: int

    def to_dict(self) -> dict:
        return asdict(self)

    def render(self) -> str:
        rows = [
            ("primary capsules", f"{self.n_pcs} / {self.baseline_pcs}", ""),
            ("pc transform FLOPS", f"{self.pc_transform_flops:,}", f"{self.pc_transform_reduction:.2%} drop"),
            ("routing FLOPS", f"{self.routing_flops:,}", f"{self.routing_reduction:.2%} drop"),
            ("conv FLOPS (fixed)", f"{self.conv_flops:,}", ""),
            ("decoder FLOPS (fixed)", f"{self.decoder_flops:,}", ""),
        ]
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(r[1]) for r in rows)
        return "\n".join(f"{a:<{w0}}  {b:>{w1}}  {c}".rstrip() for a, b, c in rows)


def flops_report(config: CapsNetConfig, n_pcs: int) -> FlopsReport:
    base = config.pc_count
    if not 0 <= n_pcs <= base:
        raise ArgumentError(f"n_pcs must be within [0, {base}]")
    k, d, it = config.num_classes, config.out_caps_dim, config.routing_iters
    pc_t = flops_pc_transform(n_pcs, config.pc_dim, d)
    rt = flops_routing(n_pcs, k, d, it)
    return FlopsReport(
        n_pcs=n_pcs,
        baseline_pcs=base,
        pc_transform_flops=pc_t,
        routing_flops=rt,
        routing_iters=it,
        classes=k,
        caps_dim=d,
        pc_transform_reduction=reduction_ratio(flops_pc_transform(base, config.pc_dim, d), pc_t),
        routing_reduction=reduction_ratio(flops_routing(base, k, d, it), rt),
        conv_flops=conv_flops(config),
        decoder_flops=decoder_flops(config),
    )
