"""Training orchestration: indexing, slimming decisions, weighted SGD with L1
sparsity, stage-end pruning, evaluation, and cost ledger maintenance."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import cost, dataset, dataslim, nn, prune
from .complexity import spatial_complexity, to_grayscale
from .distribution import ComplexityIndex, build_index


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 12
    batch_size: int = 8
    learning_rate: float = 1e-3
    lam_l1: float = 1e-4
    num_classes: int = 4
    base_width: int = 16
    ignore_id: int = 255
    # component toggles
    ans: bool = True
    cad: bool = True
    casd: bool = True
    cal: bool = True
    rd: bool = False
    # slimming ranges
    scale_range: tuple = (0.5, 1.0)
    drop_range: tuple = (0.0, 1.0)
    weight_range: tuple = (0.0, 1.0)
    # pruning schedule
    prune_stages: int = 4
    prune_ratio: float = 0.5
    prunable_groups: tuple = ("aggregation_head", "decoder")
    # complexity indicator variant: proposed | random | inverse
    p_mode: str = "proposed"
    log_decisions: bool = True

    def __post_init__(self):
        if self.rd and self.casd:
            raise ConfigError("RD (random drop) and CASD are mutually exclusive")
        if self.p_mode not in ("proposed", "random", "inverse"):
            raise ConfigError(f"unknown p_mode {self.p_mode!r}")

    def policy(self) -> dataslim.SlimPolicy:
        return dataslim.SlimPolicy(scale_range=self.scale_range,
                                   drop_range=self.drop_range,
                                   weight_range=self.weight_range,
                                   cad=self.cad, casd=self.casd, cal=self.cal)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            cfg = json.load(fh)
        for key in ("scale_range", "drop_range", "weight_range", "prunable_groups"):
            if key in cfg:
                cfg[key] = tuple(cfg[key])
        return cls(**cfg)

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        for key in ("scale_range", "drop_range", "weight_range", "prunable_groups"):
            d[key] = list(d[key])
        return d


@dataclass
class Metrics:
    per_class_iou: list
    miou: float
    pixel_accuracy: float
    classes_evaluated: int

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "iou"])
            for c, iou in enumerate(self.per_class_iou):
                writer.writerow([c, "" if iou is None else f"{iou:.17g}"])
            writer.writerow(["miou", f"{self.miou:.17g}"])
            writer.writerow(["pixel_accuracy", f"{self.pixel_accuracy:.17g}"])
            writer.writerow(["classes_evaluated", self.classes_evaluated])


@dataclass
class RunResult:
    net: nn.SegNet
    metrics: Metrics
    ledger: cost.CostLedger
    prune_report: prune.PruneReport
    index: ComplexityIndex
    out_dir: str = ""


@dataclass
class _Sample:
    image: np.ndarray
    labels: np.ndarray
    image_id: str
    split: str
    index: int  # stable position in id order, keys the drop stream


def load_samples(manifest: dataset.CorpusManifest) -> list:
    samples = []
    records = sorted(manifest.records, key=lambda r: r.image_id)
    for i, r in enumerate(records):
        img = dataset.load_image(os.path.join(manifest.root, r.image_path))
        labels = dataset.load_labels(os.path.join(manifest.root, r.label_path))
        samples.append(_Sample(image=img, labels=labels, image_id=r.image_id,
                               split=r.split, index=i))
    return samples


def index_samples(samples) -> ComplexityIndex:
    corpus = []
    for s in samples:
        sc = spatial_complexity(to_grayscale(s.image))
        corpus.append((s.image_id, sc, s.split))
    return build_index(corpus)


def _pad_to_stride(img, labels, ignore_id):
    """Edge-pad image (and ignore-pad labels) up to a multiple of the encoder
    stride; returns (image NCHW-ready HWC, labels, original dims)."""
    h, w = img.shape[:2]
    s = nn.STRIDE_TOTAL
    ph = (s - h % s) % s
    pw = (s - w % s) % s
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
        labels = np.pad(labels, ((0, ph), (0, pw)), constant_values=ignore_id)
    return img, labels, (h, w)


def _effective_p(raw_p, cfg: RunConfig, image_index: int, epoch: int) -> float:
    if cfg.p_mode == "proposed":
        return raw_p
    if cfg.p_mode == "inverse":
        return 1.0 - raw_p
    rng = np.random.Generator(np.random.Philox(
        key=[cfg.seed, 104729], counter=[image_index, epoch, 0, 0]))
    return float(rng.random())


def _slim_decision(sample: _Sample, p: float, cfg: RunConfig,
                   policy: dataslim.SlimPolicy, epoch: int) -> dataslim.SlimDecision:
    u = dataslim.keep_draw(cfg.seed, sample.index, epoch)
    decision = dataslim.decide(sample.image_id, p, policy, u,
                               sample.image.shape[:2])
    if cfg.rd:
        decision.keep = bool(u >= 0.5)
    return decision


class _FlopsCache:
    """Per-(dims, mask-state) forward FLOPs/bytes of the live net."""

    def __init__(self, net: nn.SegNet):
        self.net = net
        self.cache = {}

    def lookup(self, dims):
        live_sig = tuple(int(bn.mask.sum()) for bn in self.net.bn_layers())
        key = (dims, live_sig)
        if key not in self.cache:
            records = self.net.live_layer_shapes(*dims)
            flops, _ = cost.net_flops(records)
            self.cache[key] = (flops, cost.bytes_moved_estimate(records))
        return self.cache[key]


def run(cfg: RunConfig, manifest: dataset.CorpusManifest, out_dir=None,
        initial_net: nn.SegNet | None = None,
        index: ComplexityIndex | None = None) -> RunResult:
    """Full co-optimization loop over an on-disk corpus."""
    samples = load_samples(manifest)
    if index is None:
        index = index_samples(samples)
    train = [s for s in samples if s.split == "train"]
    test = [s for s in samples if s.split == "test"] or \
           [s for s in samples if s.split == "val"]
    if not train:
        raise ConfigError("corpus has no training split")

    policy = cfg.policy()
    net = initial_net if initial_net is not None else nn.SegNet(
        num_classes=cfg.num_classes, base_width=cfg.base_width, seed=cfg.seed,
        prunable_groups=cfg.prunable_groups)
    ledger = cost.CostLedger()
    for s in samples:
        ledger.add_indicator_pass(cost.indicator_overhead(s.image.shape[:2]))

    iters_per_epoch = (len(train) + cfg.batch_size - 1) // cfg.batch_size
    total_iterations = cfg.epochs * iters_per_epoch
    schedule = (prune.plan_schedule(total_iterations, cfg.prune_stages,
                                    cfg.prune_ratio) if cfg.ans else None)
    flops_cache = _FlopsCache(net)
    decision_log = []
    prune_report = prune.pruning_report(net)
    iteration = 0

    for epoch in range(cfg.epochs):
        perm = dataset.epoch_shuffle(len(train), cfg.seed, epoch)
        for start in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in perm[start:start + cfg.batch_size]]
            prepared = []  # (sample, decision, image_pad, labels_pad)
            for s in batch:
                p = _effective_p(index.p_of(s.image_id), cfg, s.index, epoch)
                d = _slim_decision(s, p, cfg, policy, epoch)
                if cfg.log_decisions:
                    decision_log.append((s.image_id, epoch, p, d.scale,
                                         int(d.keep), d.weight))
                if not d.keep:
                    continue
                img = dataslim.resize_image(s.image, d.target_dims)
                lab = dataslim.resize_labels(s.labels, d.target_dims)
                img, lab, _ = _pad_to_stride(img, lab, cfg.ignore_id)
                prepared.append((s, d, img, lab))

            iteration += 1
            if prepared:
                total_w = sum(d.weight for _, d, _, _ in prepared)
                if total_w > 0:
                    _weighted_step(net, prepared, total_w, cfg)
                kept = [(img.shape[:2],) + flops_cache.lookup(img.shape[:2])
                        for _, _, img, _ in prepared]
            else:
                kept = []
            live = sum(int(bn.mask.sum()) for bn in net.prunable_bns())
            ledger.record_training_iteration(iteration, kept, live)

            if schedule is not None:
                target = schedule.target_at(iteration)
                if target is not None:
                    prune_report = prune.prune_channels(net, target)

    metrics, infer_flops, infer_bytes, infer_res = evaluate(
        net, test, index, cfg, return_cost=True)
    ledger.set_inference_cost(infer_flops, infer_bytes, infer_res)
    ledger.finalize()
    prune_report = prune.pruning_report(net)
    prune_report.target_ratio = cfg.prune_ratio if cfg.ans else 0.0

    result = RunResult(net=net, metrics=metrics, ledger=ledger,
                       prune_report=prune_report, index=index,
                       out_dir=out_dir or "")
    if out_dir:
        _write_outputs(result, cfg, decision_log, out_dir)
    return result


def _weighted_step(net: nn.SegNet, prepared, total_w, cfg: RunConfig):
    """One SGD step over micro-batches grouped by equal post-resize dims."""
    groups: dict[tuple, list] = {}
    for item in prepared:
        groups.setdefault(item[2].shape[:2], []).append(item)
    net.zero_grads()
    skipped = True
    for dims in sorted(groups):
        items = groups[dims]
        images = np.stack([img.transpose(2, 0, 1) for _, _, img, _ in items])
        labels = np.stack([lab for _, _, _, lab in items])
        coeffs = np.array([d.weight for _, d, _, _ in items]) / total_w
        if not coeffs.any():
            continue
        try:
            net.forward_loss_backward(images, labels, coeffs,
                                      ignore_id=cfg.ignore_id, train=True)
            skipped = False
        except ValueError:
            continue  # no valid pixels in this micro-batch
    if skipped:
        return
    # the sparsity penalty belongs to the pruning component; a run without
    # pruning trains unregularized
    if cfg.ans:
        net.l1_penalty_and_grad(cfg.lam_l1)
    nn.sgd_step(net, cfg.learning_rate)


def evaluate(net: nn.SegNet, samples, index: ComplexityIndex, cfg: RunConfig,
             return_cost=False):
    """Held-out evaluation; images are complexity-downsampled when CAD is on."""
    if not samples:
        raise ConfigError("empty evaluation split")
    policy = cfg.policy()
    num_classes = cfg.num_classes
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    flops_cache = _FlopsCache(net)
    flops_sum = 0
    bytes_sum = 0
    res = samples[0].image.shape[:2]
    for s in samples:
        p = _effective_p(index.p_of(s.image_id), cfg, s.index, cfg.epochs)
        if policy.cad:
            scale = dataslim.downsample_scale(p, policy)
            h, w = s.image.shape[:2]
            dims = (max(dataslim.MIN_DIM, int(round(scale * h))),
                    max(dataslim.MIN_DIM, int(round(scale * w))))
            img = dataslim.resize_image(s.image, dims)
        else:
            img = s.image
        img_p, _, orig = _pad_to_stride(img, np.zeros(img.shape[:2], dtype=int),
                                        cfg.ignore_id)
        f, b = flops_cache.lookup(img_p.shape[:2])
        flops_sum += f
        bytes_sum += b
        logits = net.forward(img_p.transpose(2, 0, 1)[None], train=False)[0]
        logits = logits[:, :orig[0], :orig[1]]
        full = dataslim.resize_image(logits.transpose(1, 2, 0),
                                     s.labels.shape[:2])
        pred = full.argmax(axis=2)
        valid = s.labels != cfg.ignore_id
        np.add.at(confusion, (s.labels[valid], pred[valid]), 1)
    metrics = metrics_from_confusion(confusion)
    if return_cost:
        n = len(samples)
        return metrics, flops_sum / n, bytes_sum / n, res
    return metrics


def metrics_from_confusion(confusion: np.ndarray) -> Metrics:
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - np.diag(confusion)
    present = union > 0
    ious = [float(tp[c] / union[c]) if present[c] else None
            for c in range(confusion.shape[0])]
    evaluated = [iou for iou in ious if iou is not None]
    miou = float(np.mean(evaluated)) if evaluated else 0.0
    total = confusion.sum()
    acc = float(tp.sum() / total) if total else 0.0
    return Metrics(per_class_iou=ious, miou=miou, pixel_accuracy=acc,
                   classes_evaluated=len(evaluated))


def _write_outputs(result: RunResult, cfg: RunConfig, decision_log, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1)
    result.metrics.write_csv(os.path.join(out_dir, "metrics.csv"))
    result.ledger.write_csv(os.path.join(out_dir, "ledger.csv"))
    result.prune_report.write_csv(os.path.join(out_dir, "prune_report.csv"))
    if decision_log:
        with open(os.path.join(out_dir, "decisions.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "epoch", "p", "scale", "keep", "weight"])
            for row in decision_log:
                writer.writerow([row[0], row[1], f"{row[2]:.17g}",
                                 f"{row[3]:.17g}", row[4], f"{row[5]:.17g}"])
    nn.save_checkpoint(result.net, os.path.join(out_dir, "checkpoint.bin"))


# -- ablation suite -------------------------------------------------------

TOGGLE_ROWS = [
    ("baseline", dict(ans=False, cad=False, casd=False, cal=False, rd=False)),
    ("ans", dict(ans=True, cad=False, casd=False, cal=False, rd=False)),
    ("ans_cad", dict(ans=True, cad=True, casd=False, cal=False, rd=False)),
    ("ans_cad_cal", dict(ans=True, cad=True, casd=False, cal=True, rd=False)),
    ("ans_rd", dict(ans=True, cad=False, casd=False, cal=False, rd=True)),
    ("ans_casd", dict(ans=True, cad=False, casd=True, cal=False, rd=False)),
    ("full", dict(ans=True, cad=True, casd=True, cal=True, rd=False)),
]


def ablation_suite(manifest: dataset.CorpusManifest, base: RunConfig,
                   out_dir) -> list:
    """Toggle rows, sequential-vs-joint comparison, and indicator variants."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []

    def record(name, result):
        rows.append({
            "run": name,
            "train_flops": result.ledger.train_flops,
            "train_energy_j": result.ledger.train_energy,
            "infer_flops": result.ledger.infer_flops_per_image,
            "infer_energy_j": result.ledger.infer_energy_per_image,
            "miou": result.metrics.miou,
            "head_pruned_fraction": result.prune_report.group_fraction(
                "aggregation_head"),
        })
        return result

    for name, toggles in TOGGLE_ROWS:
        cfg = replace(base, **toggles)
        record(name, run(cfg, manifest, os.path.join(out_dir, name)))

    # joint vs sequential
    record("joint", run(replace(base, ans=True, cad=True, casd=True, cal=True),
                        manifest, os.path.join(out_dir, "joint")))
    record("net_then_data", _net_then_data(manifest, base, out_dir))
    record("data_then_net", _data_then_net(manifest, base, out_dir))

    for mode in ("proposed", "random", "inverse"):
        cfg = replace(base, p_mode=mode)
        record(f"p_{mode}", run(cfg, manifest,
                                os.path.join(out_dir, f"p_{mode}")))

    path = os.path.join(out_dir, "ablation.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return rows


def _net_then_data(manifest, base: RunConfig, out_dir):
    """Prune with ANS only, then retrain the frozen-pruned net with slimming."""
    stage1 = run(replace(base, ans=True, cad=False, casd=False, cal=False),
                 manifest, None)
    cfg2 = replace(base, ans=False, cad=True, casd=True, cal=True)
    return run(cfg2, manifest, os.path.join(out_dir, "net_then_data"),
               initial_net=stage1.net)


def _data_then_net(manifest, base: RunConfig, out_dir):
    """Train with data slimming only, one-shot prune, brief fine-tune."""
    stage1 = run(replace(base, ans=False, cad=True, casd=True, cal=True),
                 manifest, None)
    prune.prune_channels(stage1.net, base.prune_ratio)
    cfg2 = replace(base, ans=False, cad=True, casd=True, cal=True,
                   epochs=max(1, base.epochs // 4))
    return run(cfg2, manifest, os.path.join(out_dir, "data_then_net"),
               initial_net=stage1.net)
