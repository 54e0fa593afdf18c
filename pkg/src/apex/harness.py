"""Training loop over the synthetic benchmark, seen/unseen evaluation,
ablation grid, slot sweep, and activation export.

The backbone is frozen throughout: its parameter digest is checked before
and after every run. Per default, MLPs train by plain SGD and the memory by
the explicit attention-weighted rule; both are config switches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import losses, numerics as nm, prompting, synthdata, tensorio
from .errors import ConfigError, TrainingDivergedError
from .losses import BatchPlan, LossReport
from .prompting import ApexConfig, ApexState
from .synthdata import Benchmark, FrozenBackbone


@dataclass(frozen=True)
class TrainConfig:
    apex: ApexConfig = ApexConfig()
    epochs: int = 2
    domains_per_batch: int = 2
    samples_per_domain: int = 4
    optimizer: str = "sgd"                 # "sgd" | "adam" (MLPs only; the memory always uses plain SGD)
    mlp_learning_rate: float | None = 0.25
    feature_grad_clip: float | None = 5.0  # global-norm clip on encoder+head grads
    lfc_enabled: bool = True
    include_positive: bool = False
    seeds: tuple = (0, 1, 2)

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.feature_grad_clip is not None and self.feature_grad_clip <= 0:
            raise ConfigError("feature_grad_clip must be positive (or none)")
        if not self.seeds:
            raise ConfigError("seeds list must be nonempty")
        BatchPlan(self.domains_per_batch, self.samples_per_domain)  # validates P, S

    @property
    def mlp_lr(self) -> float:
        return self.mlp_learning_rate if self.mlp_learning_rate is not None \
            else self.apex.learning_rate


def _batch_arrays(samples) -> tuple[np.ndarray, np.ndarray, list]:
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])[:, :, :, None]
    labels = [s.domain_id for s in samples]
    return images, masks, labels


def train(config: TrainConfig, bench: Benchmark, backbone: FrozenBackbone,
          seed: int) -> tuple[ApexState, list[LossReport]]:
    """Optimize one APEX state on the benchmark's seen training split.

    Deterministic given (config, bench, seed). The backbone is never
    touched; its digest is asserted unchanged.
    """
    digest_before = backbone.digest()
    sample0 = bench.splits["train_seen"][0]
    h, w, c = sample0.image.shape
    state = prompting.init_state(replace(config.apex, seed=seed), h, w, c)
    cfg = state.config
    prompting.fit_input_center(
        state, np.stack([s.image for s in bench.splits["train_seen"]]))

    by_domain = bench.by_domain("train_seen")
    counts = {dom: len(samples) for dom, samples in by_domain.items()}
    plan = BatchPlan(config.domains_per_batch, config.samples_per_domain)
    total = sum(counts.values())
    steps_per_epoch = max(1, total // plan.batch_size)
    rng = np.random.default_rng([seed, 0x5EED])
    adam = nm.AdamState() if config.optimizer == "adam" else None
    mlp_params = state.mlp_parameters()
    feat_ids = {id(p) for p in state.encoder.parameters() + state.head.parameters()}
    log: list[LossReport] = []

    for _epoch in range(config.epochs):
        for _step in range(steps_per_epoch):
            drawn = losses.sample_batch(counts, plan, rng)
            batch = [by_domain[dom][i] for dom, idx in drawn.assignments for i in idx]
            images, masks, labels = _batch_arrays(batch)
            positives = losses.sample_positives(labels, rng)

            nodes = prompting.forward_batch(state, images, train=True)
            preds = synthdata.backbone_forward(backbone, nodes.output)
            dice_terms = None
            ce_terms = None
            for i in range(len(batch)):
                pred_i = nm.getitem(preds, i)
                d = losses.dice_loss(pred_i, masks[i])
                e = losses.ce_loss(pred_i, masks[i])
                dice_terms = d if dice_terms is None else nm.add(dice_terms, d)
                ce_terms = e if ce_terms is None else nm.add(ce_terms, e)
            dice_mean = nm.div(dice_terms, float(len(batch)))
            ce_mean = nm.div(ce_terms, float(len(batch)))
            seg = nm.add(dice_mean, ce_mean)

            if config.lfc_enabled:
                aux = prompting.project_aux(state.head, nodes.features)
                lfc = losses.lfc_loss(aux, labels, cfg.temperature, positives=positives,
                                      include_positive=config.include_positive)
                total_loss = nm.add(seg, lfc)
            else:
                lfc = None
                total_loss = seg

            if not np.isfinite(total_loss.item()):
                raise TrainingDivergedError(
                    f"non-finite loss at step {len(log)} (seed {seed})")

            nm.zero_grads(state.all_parameters())
            nm.backward(total_loss)

            # clip the feature path (encoder + head) so their weight norms
            # cannot run away; cosine gradients scale as 1/norm, so runaway
            # norms freeze the feature directions the addressing relies on
            grads = [p.grad for p in mlp_params]
            if config.feature_grad_clip is not None:
                gnorm = math.sqrt(sum(float((p.grad ** 2).sum())
                                      for p in mlp_params if id(p) in feat_ids))
                if gnorm > config.feature_grad_clip:
                    scale = config.feature_grad_clip / gnorm
                    grads = [g * scale if id(p) in feat_ids else g
                             for p, g in zip(mlp_params, grads)]
            if config.optimizer == "adam":
                new_vals = nm.adam_step([p.value for p in mlp_params], grads,
                                        config.mlp_lr, adam)
            else:
                new_vals = nm.sgd_step([p.value for p in mlp_params], grads,
                                       config.mlp_lr)
            for p, v in zip(mlp_params, new_vals):
                p.value = v

            if cfg.use_memory:
                if cfg.memory_grad_mode == "attention":
                    mem_grad = prompting.memory_gradient(nodes.addressing.value,
                                                         nodes.prompt_feature.grad)
                else:
                    mem_grad = nm.Tensor(state.memory.grad)
                state.memory.value = prompting.update_memory(
                    state.memory.value, mem_grad, cfg.learning_rate)

            log.append(LossReport(seg=seg.item(), dice_part=dice_mean.item(),
                                  ce_part=ce_mean.item(),
                                  lfc=lfc.item() if lfc is not None else 0.0))
            state.step += 1

    if backbone.digest() != digest_before:
        raise TrainingDivergedError("frozen backbone changed during training")
    return state, log


def write_step_log(log: list[LossReport], path) -> None:
    lines = [LossReport.CSV_HEADER]
    lines += [rep.csv_row(i) for i, rep in enumerate(log)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def dice_iou(pred_binary: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Overlap metrics in percent; an empty-vs-empty pair counts as perfect."""
    p = pred_binary.astype(bool)
    g = mask.astype(bool)
    inter = float(np.logical_and(p, g).sum())
    union = float(np.logical_or(p, g).sum())
    total = float(p.sum() + g.sum())
    dice = 100.0 * (2.0 * inter / total) if total else 100.0
    iou = 100.0 * (inter / union) if union else 100.0
    return dice, iou


@dataclass
class MetricReport:
    """Per-domain Dice/IoU (%) plus group averages."""

    split: str
    source_only: bool
    per_domain: dict          # domain_id -> {"dice", "iou", "count", "group"}

    def _group_avg(self, group: str, key: str):
        vals = [row[key] for row in self.per_domain.values() if row["group"] == group]
        return float(np.mean(vals)) if vals else None

    @property
    def avg_seen(self):
        return self._group_avg("seen", "dice")

    @property
    def avg_unseen(self):
        return self._group_avg("unseen", "dice")

    @property
    def avg_total(self):
        vals = [row["dice"] for row in self.per_domain.values()
                if row["group"] in ("seen", "unseen")]
        return float(np.mean(vals)) if vals else None

    def csv_lines(self) -> list[str]:
        lines = ["domain,group,dice,iou,count"]
        groups = {row["group"] for row in self.per_domain.values()}
        for dom in sorted(self.per_domain):
            row = self.per_domain[dom]
            lines.append(f"{dom},{row['group']},{row['dice']!r},{row['iou']!r},{row['count']}")
        pairs = [("avg_seen", self.avg_seen), ("avg_unseen", self.avg_unseen)]
        if {"seen", "unseen"} <= groups:
            pairs.append(("avg_total", self.avg_total))
        for name, val in pairs:
            if val is not None:
                lines.append(f"{name},,{val!r},,")
        return lines


def _predict(state: ApexState | None, backbone: FrozenBackbone,
             images: np.ndarray, chunk: int = 25) -> np.ndarray:
    preds = []
    for lo in range(0, len(images), chunk):
        part = images[lo:lo + chunk]
        if state is None:
            out = part
        else:
            out = prompting.forward_batch(state, part, train=False).output.array
        preds.append(synthdata.backbone_forward(backbone, nm.as_node(out)).array)
    return np.concatenate(preds, axis=0)


SPLIT_NAMES = {"seen": "test_seen", "unseen": "test_unseen", "source": "source_test"}


def evaluate(state: ApexState | None, backbone: FrozenBackbone, bench: Benchmark,
             split: str, source_only: bool = False) -> MetricReport:
    """Dice/IoU at threshold 0.5 on one test split.

    ``source_only`` (or ``state=None``) skips prompting entirely: the raw
    image goes straight to the backbone.
    """
    if split not in SPLIT_NAMES:
        raise ConfigError(f"unknown split {split!r}; use seen, unseen, or source")
    samples = bench.splits[SPLIT_NAMES[split]]
    if not samples:
        raise ConfigError(f"split {split!r} is empty")
    if source_only:
        state = None
    group_of = {d.domain_id: "seen" for d in bench.config.seen}
    group_of.update({d.domain_id: "unseen" for d in bench.config.unseen})
    group_of[bench.config.source.domain_id] = "source"

    images = np.stack([s.image for s in samples])
    preds = _predict(state, backbone, images)
    scores: dict = {}
    for s, pred in zip(samples, preds):
        dice, iou = dice_iou(pred[:, :, 0] > 0.5, s.mask)
        scores.setdefault(s.domain_id, []).append((dice, iou))
    per_domain = {}
    for dom, pairs in scores.items():
        arr = np.asarray(pairs)
        per_domain[dom] = {"dice": float(arr[:, 0].mean()), "iou": float(arr[:, 1].mean()),
                           "count": len(pairs), "group": group_of[dom]}
    return MetricReport(split=split, source_only=state is None, per_domain=per_domain)


def mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    state: ApexState
    log: list
    seen: MetricReport
    unseen: MetricReport

    @property
    def avg_total(self) -> float:
        both = [self.seen.avg_seen, self.unseen.avg_unseen]
        return float(np.mean(both))


def train_and_eval(config: TrainConfig, bench: Benchmark, backbone: FrozenBackbone,
                   seed: int) -> RunResult:
    state, log = train(config, bench, backbone, seed)
    return RunResult(seed=seed, state=state, log=log,
                     seen=evaluate(state, backbone, bench, "seen"),
                     unseen=evaluate(state, backbone, bench, "unseen"))


ABLATION_CELLS = (("on", "on"), ("on", "off"), ("off", "on"), ("off", "off"))


def run_ablation(config: TrainConfig, bench: Benchmark, backbone: FrozenBackbone) -> list[str]:
    """Memory on/off x contrastive on/off, every seed; Table-shaped CSV rows.

    Memory-off routes the encoder feature straight to the decoder and never
    touches the slot matrix.
    """
    lines = ["memory,lfc,seed,avg_seen_dice,avg_unseen_dice,avg_total_dice"]
    cell_totals: dict = {}
    for mem_flag, lfc_flag in ABLATION_CELLS:
        variant = replace(config,
                          apex=replace(config.apex, use_memory=mem_flag == "on"),
                          lfc_enabled=lfc_flag == "on")
        for seed in config.seeds:
            res = train_and_eval(variant, bench, backbone, seed)
            lines.append(f"{mem_flag},{lfc_flag},{seed},{res.seen.avg_seen!r},"
                         f"{res.unseen.avg_unseen!r},{res.avg_total!r}")
            cell_totals.setdefault((mem_flag, lfc_flag), []).append(
                (res.seen.avg_seen, res.unseen.avg_unseen, res.avg_total))
    for (mem_flag, lfc_flag), triples in cell_totals.items():
        arr = np.asarray(triples)
        means = [mean_std(arr[:, i]) for i in range(3)]
        lines.append(f"{mem_flag},{lfc_flag},mean," + ",".join(f"{m!r}" for m, _ in means))
        lines.append(f"{mem_flag},{lfc_flag},std," + ",".join(f"{s!r}" for _, s in means))
    return lines


def slot_sweep(config: TrainConfig, bench: Benchmark, backbone: FrozenBackbone,
               j_list=(1, 5, 25, 75, 150, 300)) -> list[str]:
    """One trained run per slot count per seed; CSV of J vs mean Dice."""
    lines = ["slots,seed,avg_total_dice"]
    for j in j_list:
        apex_cfg = replace(config.apex, slot_count=j,
                           allow_block_init=j > config.apex.feature_dim)
        variant = replace(config, apex=apex_cfg)
        per_seed = []
        for seed in config.seeds:
            res = train_and_eval(variant, bench, backbone, seed)
            per_seed.append(res.avg_total)
            lines.append(f"{j},{seed},{res.avg_total!r}")
        m, s = mean_std(per_seed)
        lines.append(f"{j},mean,{m!r}")
        lines.append(f"{j},std,{s!r}")
    return lines


def top_slot_sets(state: ApexState, samples, fraction: float = 0.10):
    """Per sample: addressing vector and the top-fraction activated slots."""
    images = np.stack([s.image for s in samples])
    rows = []
    k = max(1, int(np.floor(state.config.slot_count * fraction + 0.5)))
    for lo in range(0, len(images), 25):
        part = images[lo:lo + 25]
        addr = prompting.forward_batch(state, part, train=False).addressing.array
        for i, s in enumerate(samples[lo:lo + 25]):
            a = addr[i]
            top = np.argsort(-a, kind="stable")[:k]
            rows.append((s, a, frozenset(int(t) for t in top)))
    return rows


def jaccard(a: frozenset, b: frozenset) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 1.0


def slot_overlap_summary(rows) -> tuple[float, float]:
    """(mean within-domain, mean cross-domain) Jaccard of top-slot sets."""
    within, cross = [], []
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            val = jaccard(rows[i][2], rows[j][2])
            (within if rows[i][0].domain_id == rows[j][0].domain_id else cross).append(val)
    return float(np.mean(within)), float(np.mean(cross))


def export_activations(state: ApexState, samples, out_dir,
                       fraction: float = 0.10) -> tuple[float, float]:
    """CSV of per-sample top slots, a domain-pair overlap matrix, and a PGM
    heatmap of addressing magnitudes; returns (within, cross) mean Jaccard."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = top_slot_sets(state, samples, fraction)

    lines = ["sample_id,domain_id,top_slots"]
    for s, _a, top in rows:
        lines.append(f"{s.sample_id},{s.domain_id},{'|'.join(str(t) for t in sorted(top))}")
    (out / "activations.csv").write_text("\n".join(lines) + "\n", encoding="ascii")

    domains = sorted({s.domain_id for s, _, _ in rows})
    matrix = ["domain," + ",".join(domains)]
    for da in domains:
        vals = []
        for db in domains:
            pair_vals = [jaccard(ra[2], rb[2])
                         for ia, ra in enumerate(rows) if ra[0].domain_id == da
                         for ib, rb in enumerate(rows)
                         if rb[0].domain_id == db and (da != db or ib > ia)]
            vals.append(repr(float(np.mean(pair_vals))) if pair_vals else "")
        matrix.append(f"{da}," + ",".join(vals))
    (out / "overlap_matrix.csv").write_text("\n".join(matrix) + "\n", encoding="ascii")

    heat = np.stack([np.abs(a) for _s, a, _t in rows])
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    tensorio.write_pgm(out / "activations.pgm", heat)
    return slot_overlap_summary(rows)
