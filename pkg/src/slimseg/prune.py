"""Progressive channel pruning on BN scale magnitudes, plus unstructured mode.

Channels across all prunable-group BN layers are ranked globally by |gamma|;
the smallest are masked until the cumulative masked fraction of the original
prunable channel count reaches the stage target.  Masks only ever grow, and no
layer is pruned below one surviving channel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .nn import SegNet


class ScheduleError(ValueError):
    pass


@dataclass
class PruneSchedule:
    total_iterations: int
    num_stages: int
    final_ratio: float
    boundaries: list  # iteration indices where pruning fires
    targets: list     # cumulative ratio at each boundary

    def target_at(self, iteration: int):
        """Cumulative target if `iteration` is a stage boundary, else None."""
        for b, t in zip(self.boundaries, self.targets):
            if iteration == b:
                return t
        return None


def plan_schedule(total_iterations: int, num_stages: int,
                  final_ratio: float) -> PruneSchedule:
    """Equal-length stages; cumulative target ramps linearly to final_ratio."""
    if num_stages < 1:
        raise ScheduleError("need at least one stage")
    if not (0.0 <= final_ratio < 1.0):
        raise ScheduleError(f"final ratio must lie in [0, 1), got {final_ratio}")
    if total_iterations < num_stages:
        raise ScheduleError("fewer iterations than stages")
    boundaries = [round(total_iterations * (k + 1) / num_stages)
                  for k in range(num_stages)]
    targets = [final_ratio * (k + 1) / num_stages for k in range(num_stages)]
    return PruneSchedule(total_iterations=total_iterations, num_stages=num_stages,
                         final_ratio=final_ratio, boundaries=boundaries,
                         targets=targets)


@dataclass
class GroupStat:
    group: str
    channels_total: int = 0
    channels_pruned: int = 0
    weights_total: int = 0
    weights_pruned: int = 0

    @property
    def fraction(self):
        return self.channels_pruned / self.channels_total if self.channels_total else 0.0

    @property
    def weight_fraction(self):
        return self.weights_pruned / self.weights_total if self.weights_total else 0.0


@dataclass
class PruneReport:
    groups: dict = field(default_factory=dict)  # tag -> GroupStat
    target_ratio: float = 0.0
    mode: str = "channel"
    floor_shortfall: int = 0  # channels short of target due to the 1-channel floor

    def group_fraction(self, tag):
        return self.groups[tag].fraction if tag in self.groups else 0.0

    def to_rows(self):
        rows = []
        for tag in sorted(self.groups):
            g = self.groups[tag]
            if self.mode == "channel":
                rows.append({"group": tag, "total": g.channels_total,
                             "pruned": g.channels_pruned,
                             "fraction": g.fraction,
                             "ratio": self.target_ratio, "mode": self.mode})
            else:
                rows.append({"group": tag, "total": g.weights_total,
                             "pruned": g.weights_pruned,
                             "fraction": g.weight_fraction,
                             "ratio": self.target_ratio, "mode": self.mode})
        return rows

    def write_csv(self, path):
        rows = self.to_rows()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["group", "total", "pruned", "fraction", "ratio", "mode"])
            writer.writeheader()
            writer.writerows(rows)

    def render_text(self):
        lines = [f"{'group':<18}{'total':>8}{'pruned':>8}{'fraction':>10}"]
        for row in self.to_rows():
            lines.append(f"{row['group']:<18}{row['total']:>8}{row['pruned']:>8}"
                         f"{row['fraction']:>10.4f}")
        if self.floor_shortfall:
            lines.append(f"warning: {self.floor_shortfall} channels short of "
                         f"target (1-channel floor)")
        return "\n".join(lines)


def prune_channels(net: SegNet, cumulative_ratio: float) -> PruneReport:
    """Mask the globally-smallest |gamma| channels up to the cumulative target.

    Ties broken by ascending (layer index, channel index).  Previously masked
    channels stay masked; each layer keeps at least one live channel.
    """
    if not (0.0 <= cumulative_ratio < 1.0):
        raise ScheduleError(f"ratio must lie in [0, 1), got {cumulative_ratio}")
    bns = net.prunable_bns()
    if not bns:
        raise ScheduleError("no prunable BN layers")
    total = sum(bn.ch for bn in bns)
    already = sum(int((~bn.mask).sum()) for bn in bns)
    want = int(np.floor(cumulative_ratio * total + 1e-9)) - already

    candidates = []  # (|gamma|, layer_idx, ch_idx)
    for li, bn in enumerate(bns):
        for ci in np.flatnonzero(bn.mask):
            candidates.append((abs(bn.params["gamma"][ci]), li, int(ci)))
    candidates.sort()

    live_counts = [int(bn.mask.sum()) for bn in bns]
    pruned_now = 0
    shortfall = 0
    for mag, li, ci in candidates:
        if pruned_now >= want:
            break
        if live_counts[li] <= 1:
            continue
        bns[li].mask[ci] = False
        live_counts[li] -= 1
        pruned_now += 1
    if pruned_now < want:
        shortfall = want - pruned_now
    net.zero_masked_params()
    report = pruning_report(net)
    report.target_ratio = cumulative_ratio
    report.floor_shortfall = shortfall
    return report


def prune_unstructured(net: SegNet, ratio: float) -> PruneReport:
    """Global magnitude pruning of individual prunable-group conv weights.

    Returns per-group pruned-weight counts; weights are zeroed in place (a
    weight mask per conv is stored on the layer as `weight_mask`).
    """
    if not (0.0 <= ratio < 1.0):
        raise ScheduleError(f"ratio must lie in [0, 1), got {ratio}")
    convs = [c for c in net.conv_layers() if c.group in net.prunable_groups]
    if not convs:
        raise ScheduleError("no prunable conv layers")
    mags = np.concatenate([np.abs(c.params["w"]).ravel() for c in convs])
    k = int(np.floor(ratio * mags.size + 1e-9))
    report = PruneReport(mode="unstructured", target_ratio=ratio)
    # global magnitude ranking; stable sort keeps ties deterministic in
    # (layer, flat-index) order
    order = np.argsort(mags, kind="stable")
    drop = np.zeros(mags.size, dtype=bool)
    drop[order[:k]] = True
    offset = 0
    for c in convs:
        w = c.params["w"]
        flat_drop = drop[offset: offset + w.size].reshape(w.shape)
        offset += w.size
        c.weight_mask = ~flat_drop
        w[flat_drop] = 0.0
        stat = report.groups.setdefault(c.group, GroupStat(group=c.group))
        stat.weights_total += w.size
        stat.weights_pruned += int(flat_drop.sum())
    return report


def pruning_report(net: SegNet) -> PruneReport:
    """Per-group channel totals and pruned fractions from the current masks."""
    report = PruneReport(mode="channel")
    for bn in net.bn_layers():
        stat = report.groups.setdefault(bn.group, GroupStat(group=bn.group))
        stat.channels_total += bn.ch
        stat.channels_pruned += int((~bn.mask).sum())
    return report


def unstructured_sweep(net_factory, ratios=(0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)):
    """One unstructured-pruning report per ratio, each on a fresh net."""
    reports = []
    for r in ratios:
        net = net_factory()
        reports.append(prune_unstructured(net, r))
    return reports
