"""FLOPs accounting, proxy energy model, and per-run cost ledgers.

Conventions (deliberate, documented): a multiply-add counts as 2 FLOPs and
conv biases are ignored.  Published model costs are usually quoted in
multiply-accumulates; `macs = flops // 2` bridges the two.  Energy is an
explicit parametric proxy (joules per FLOP + joules per byte moved), not a
device measurement.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources

BYTES_PER_ELEMENT = 8  # float64 throughout


class CostShapeError(ValueError):
    pass


def layer_flops(layer: dict) -> int:
    """FLOPs of one layer record.

    Required keys: kind, out_h, out_w plus in_ch/out_ch/kernel/groups for
    convs.  Masked channels are expected to be excluded from the channel
    counts by the caller.
    """
    kind = layer["kind"]
    ho, wo = int(layer["out_h"]), int(layer["out_w"])
    if ho < 1 or wo < 1:
        raise CostShapeError(f"non-positive output dims in {layer.get('name')}")
    if kind == "conv2d":
        cin, cout = int(layer["in_ch"]), int(layer["out_ch"])
        k = int(layer["kernel"])
        groups = int(layer.get("groups", 1))
        if cin % groups:
            raise CostShapeError(f"in_ch not divisible by groups in {layer.get('name')}")
        return 2 * k * k * (cin // groups) * cout * ho * wo
    if kind == "linear":
        return 2 * int(layer["in_ch"]) * int(layer["out_ch"])
    if kind == "batchnorm":
        return 2 * int(layer["out_ch"]) * ho * wo
    if kind == "relu":
        return int(layer["out_ch"]) * ho * wo
    if kind == "bilinear-upsample":
        # 4 taps: 4 multiplies + 3 adds per output element
        return 7 * int(layer["out_ch"]) * ho * wo
    if kind == "add":
        return int(layer["out_ch"]) * ho * wo
    if kind in ("concat", "avgpool", "maxpool"):
        return int(layer.get("flops", 0))
    raise CostShapeError(f"unknown layer kind {kind!r}")


def net_flops(records) -> tuple[int, dict]:
    """Sum layer_flops over shape records; returns (total, per-group subtotals)."""
    total = 0
    groups: dict[str, int] = {}
    for rec in records:
        f = layer_flops(rec)
        total += f
        tag = rec.get("group", "backbone")
        groups[tag] = groups.get(tag, 0) + f
    return total, groups


# -- declarative architecture descriptions --------------------------------

def load_arch(name_or_path) -> dict:
    """Load a bundled (by name) or on-disk (by path) architecture description."""
    text = None
    try:
        ref = resources.files("slimseg") / "data" / f"{name_or_path}.json"
        if ref.is_file():
            text = ref.read_text()
    except (TypeError, FileNotFoundError):
        pass
    if text is None:
        with open(name_or_path) as fh:
            text = fh.read()
    return json.loads(text)


def arch_flops(arch: dict, input_resolution: tuple[int, int]) -> tuple[int, dict]:
    """Total FLOPs + per-group breakdown of a declarative architecture.

    Each layer record carries `out_stride` (cumulative output stride: output
    dims are input dims / out_stride) or `fixed_size` for layers at constant
    dims (e.g. image-pooling branches).
    """
    h, w = input_resolution
    total = 0
    groups: dict[str, int] = {}
    for rec in arch["layers"]:
        if "fixed_size" in rec:
            ho, wo = rec["fixed_size"]
        elif rec["kind"] == "linear":
            ho = wo = 1
        else:
            stride = int(rec["out_stride"])
            ho, wo = h // stride, w // stride
            if ho < 1 or wo < 1:
                raise CostShapeError(
                    f"layer {rec.get('name')}: resolution {h}x{w} too small "
                    f"for stride {stride}")
        layer = dict(rec, out_h=ho, out_w=wo)
        f = layer_flops(layer)
        total += f
        tag = rec.get("group", "backbone")
        groups[tag] = groups.get(tag, 0) + f
    return total, groups


def macs(flops: int) -> float:
    """Multiply-accumulate count under the 2-FLOPs-per-MAC convention."""
    return flops / 2


def header_share(groups: dict) -> float:
    """Fraction of FLOPs outside the backbone (multi-scale head + decoder)."""
    total = sum(groups.values())
    head = total - groups.get("backbone", 0)
    return head / total if total else 0.0


def indicator_overhead(input_resolution: tuple[int, int], channels: int = 3) -> int:
    """FLOPs of the complexity indicator: grayscale + 2 Sobel convs + magnitude + mean."""
    h, w = input_resolution
    if h < 3 or w < 3:
        raise CostShapeError("indicator needs at least a 3x3 image")
    pixels = h * w
    gray = 5 * pixels if channels == 3 else 0   # 3 mul + 2 add per pixel
    sobel = 2 * (2 * 9 * pixels)                # two 3x3 single-channel convs
    magnitude = 4 * pixels                      # sq + sq + add + sqrt
    mean = pixels + 1
    return gray + sobel + magnitude + mean


# -- proxy energy ---------------------------------------------------------

@dataclass
class CostModel:
    """Parametric energy proxy; NOT a reproduction of any measured joules."""
    energy_per_flop: float = 5e-11      # J / FLOP
    energy_per_byte_moved: float = 2e-10  # J / byte

    def __post_init__(self):
        if self.energy_per_flop < 0 or self.energy_per_byte_moved < 0:
            raise ValueError("energy parameters must be non-negative")


def energy_estimate(flops: float, bytes_moved: float, model: CostModel) -> float:
    if flops < 0 or bytes_moved < 0:
        raise ValueError("flops and bytes_moved must be non-negative")
    return flops * model.energy_per_flop + bytes_moved * model.energy_per_byte_moved


def bytes_moved_estimate(records) -> int:
    """Activation + weight traffic of a forward pass over shape records."""
    total = 0
    for rec in records:
        elems = int(rec["out_ch"]) * int(rec["out_h"]) * int(rec["out_w"])
        weights = 0
        if rec["kind"] == "conv2d":
            k = int(rec["kernel"])
            weights = k * k * int(rec["in_ch"]) * int(rec["out_ch"])
        elif rec["kind"] == "batchnorm":
            weights = 2 * int(rec["out_ch"])
        total += BYTES_PER_ELEMENT * (elems + weights)
    return total


# -- ledgers --------------------------------------------------------------

TRAIN_FLOPS_PER_FORWARD = 3  # forward + backward ~ 2x forward


@dataclass
class IterationRecord:
    iteration: int
    samples_kept: int
    dims: list
    live_channels: int
    flops: int
    energy: float


@dataclass
class CostLedger:
    model: CostModel = field(default_factory=CostModel)
    records: list = field(default_factory=list)
    train_flops: int = 0
    train_energy: float = 0.0
    indicator_flops: int = 0
    infer_flops_per_image: float = 0.0
    infer_energy_per_image: float = 0.0
    infer_resolution: tuple = (0, 0)

    def add_indicator_pass(self, flops: int):
        """Indicator overhead, amortized once per image per run."""
        self.indicator_flops += flops
        self.train_flops += flops
        self.train_energy += energy_estimate(flops, 0, self.model)

    def record_training_iteration(self, iteration: int, kept_records,
                                  live_channels: int):
        """Account one iteration; kept_records is a list of (dims, fwd_flops,
        fwd_bytes) per surviving sample.  Dropped samples contribute zero."""
        flops = 0
        bytes_moved = 0
        dims = []
        for d, f, b in kept_records:
            flops += TRAIN_FLOPS_PER_FORWARD * f
            bytes_moved += TRAIN_FLOPS_PER_FORWARD * b
            dims.append(list(d))
        energy = energy_estimate(flops, bytes_moved, self.model)
        self.records.append(IterationRecord(
            iteration=iteration, samples_kept=len(dims), dims=dims,
            live_channels=live_channels, flops=flops, energy=energy))
        self.train_flops += flops
        self.train_energy += energy

    def set_inference_cost(self, flops_per_image: float, bytes_per_image: float,
                           resolution: tuple):
        self.infer_flops_per_image = flops_per_image
        self.infer_energy_per_image = energy_estimate(
            flops_per_image, bytes_per_image, self.model)
        self.infer_resolution = tuple(resolution)

    def finalize(self):
        """Recompute cumulative totals from the records and assert equality."""
        flops = self.indicator_flops + sum(r.flops for r in self.records)
        energy = (energy_estimate(self.indicator_flops, 0, self.model)
                  + sum(r.energy for r in self.records))
        if flops != self.train_flops:
            raise AssertionError(
                f"ledger inconsistent: {flops} != {self.train_flops}")
        if abs(energy - self.train_energy) > 1e-9 * max(1.0, abs(energy)):
            raise AssertionError("ledger energy inconsistent")
        return self

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "samples_kept", "dims",
                             "live_channels", "flops", "energy_j"])
            for r in self.records:
                writer.writerow([r.iteration, r.samples_kept,
                                 ";".join(f"{h}x{w}" for h, w in r.dims),
                                 r.live_channels, r.flops, f"{r.energy:.17g}"])
            writer.writerow(["indicator", "", "", "", self.indicator_flops,
                             f"{energy_estimate(self.indicator_flops, 0, self.model):.17g}"])
            writer.writerow(["total_train", "", "", "", self.train_flops,
                             f"{self.train_energy:.17g}"])
            writer.writerow(["infer_per_image", "",
                             f"{self.infer_resolution[0]}x{self.infer_resolution[1]}",
                             "", f"{self.infer_flops_per_image:.17g}",
                             f"{self.infer_energy_per_image:.17g}"])
