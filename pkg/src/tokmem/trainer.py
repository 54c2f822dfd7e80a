"""Training modes, continual schedules, replay, and the compositional adaptation phase."""
from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .errors import DataError, NonFiniteError, ScheduleError, ValidationError
from .memory import MemoryBank, create_bank, extend_bank, renormalize, write_bank
from .metrics import MetricsReport
from .model import Backbone, backbone_checksum, loss_and_grad, merge_adapters, save_checkpoint
from .optim import AdamWState, OptimHyper, adamw_step, clip_grad_norm
from .suites import MODES, TaskGroup, uses_memory

log = logging.getLogger(__name__)

__all__ = [
    "AdaptationConfig",
    "Checkpoint",
    "ContinualSchedule",
    "OptimHyper",
    "ReplayBuffer",
    "RunResult",
    "TrainOptions",
    "adamw_step",
    "adaptation_phase",
    "continual_evaluate",
    "replay_mix",
    "train_run",
]


@dataclass
class ReplayBuffer:
    capacity: int = 500
    refresh_every: int = 10
    ratio: float = 0.2
    items: list = field(default_factory=list)

    def refresh(self, pool: Sequence, rng: random.Random) -> None:
        """Full resample from ``pool`` (every example seen so far)."""
        pool = list(pool)
        self.items = rng.sample(pool, min(self.capacity, len(pool)))

    def __len__(self) -> int:
        return len(self.items)


def replay_mix(buffer: ReplayBuffer, fresh_batch: Sequence, ratio: float, rng: random.Random) -> list:
    """Replace ``round(ratio * len(batch))`` trailing slots with uniform draws from the buffer."""
    fresh = list(fresh_batch)
    if not buffer.items or ratio <= 0:
        return fresh
    n = min(round(ratio * len(fresh)), len(fresh))
    replayed = [buffer.items[rng.randrange(len(buffer.items))] for _ in range(n)]
    return fresh[: len(fresh) - n] + replayed


@dataclass
class ContinualSchedule:
    """Task groups introduced in order; a checkpoint is taken after the listed cumulative group counts."""

    groups: list[TaskGroup]
    checkpoints: list[int] | None = None
    mode: str = "tokmem"
    renormalize: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ScheduleError(f"unknown mode {self.mode!r}")
        if not self.groups:
            raise ScheduleError("schedule has no task groups")
        for g in self.groups:
            if not g.members:
                raise ScheduleError(f"task group {g.name!r} is empty")
        if self.checkpoints is None:
            self.checkpoints = list(range(1, len(self.groups) + 1))
        bad = [c for c in self.checkpoints if not 1 <= c <= len(self.groups)]
        if bad:
            raise ScheduleError(f"checkpoint indices {bad} are not group boundaries")


@dataclass
class AdaptationConfig:
    aux_suite: object
    lr_backbone: float = 1e-3
    lr_memory: float = 5e-3
    epochs: int = 1
    rank: int = 8
    targets: tuple[str, ...] = ("q", "k")
    batch_size: int = 4
    max_steps: int | None = None
    eval_cues: frozenset = frozenset()
    seed: int = 0


@dataclass
class TrainOptions:
    """Knobs outside the optimizer hyperparameters."""

    seed: int = 0
    eval_interval: int = 100
    renorm_fallback: str = "init"
    decoupled: bool = False
    adapter_rank: int = 8
    adapter_targets: tuple[str, ...] = ("q", "k")
    backbone_hyper: OptimHyper | None = None
    replay: ReplayBuffer | None = None
    eval_max_len: int = 40
    out_dir: Path | None = None
    jitter: float = 1e-3


@dataclass
class Checkpoint:
    index: int
    label: str
    backbone: Backbone
    bank: MemoryBank | None
    report: MetricsReport
    backbone_sha: str


@dataclass
class RunResult:
    mode: str
    checkpoints: list[Checkpoint]
    curve: list[tuple[int, float]]
    initial_backbone_sha: str

    @property
    def reports(self) -> list[MetricsReport]:
        return [c.report for c in self.checkpoints]

    def metrics_json(self) -> dict:
        return {"mode": self.mode, "checkpoints": [c.report.to_dict() for c in self.checkpoints]}


def _active_slices(bank: MemoryBank) -> tuple[torch.Tensor, list[torch.Tensor]]:
    idx = torch.tensor(bank.active_indices, dtype=torch.long)
    return idx, [t.index_select(0, idx) for t in bank.parameters()]


def _bank_grad_names(bank: MemoryBank) -> list[str]:
    return ["bank.addr", "bank.steer"] if bank.decoupled else ["bank"]


class _Stepper:
    """Applies one optimizer step for a given mode, owning all AdamW state."""

    def __init__(self, mode: str, backbone: Backbone, hyper: OptimHyper, opts: TrainOptions):
        self.mode = mode
        self.backbone = backbone
        self.hyper = hyper
        self.opts = opts
        self.bank_state = AdamWState()
        self.net_state = AdamWState()
        self.net_hyper = opts.backbone_hyper or OptimHyper.finetune()

    def reset_bank_state(self):
        self.bank_state = AdamWState()

    def selector(self) -> str:
        return {"tokmem": "bank-only", "tokmem-unfrozen": "bank+backbone", "lora": "adapters-only", "replay": "adapters-only"}[
            self.mode
        ]

    def step(self, bank: MemoryBank | None, batch) -> float:
        if self.backbone.frozen and self.mode == "tokmem-unfrozen":
            raise ValidationError("tokmem-unfrozen needs an unfrozen backbone")
        loss, grads = loss_and_grad(self.backbone, bank, batch, self.selector())
        if not math.isfinite(float(loss)):
            raise NonFiniteError(f"non-finite loss {float(loss)}")
        bank_grads, idx = [], None
        if uses_memory(self.mode):
            idx = torch.tensor(bank.active_indices, dtype=torch.long)
            bank_grads = [grads[n].index_select(0, idx) for n in _bank_grad_names(bank)]
        net_names = [n for n in grads if not n.startswith("bank")]
        net_grads = [grads[n] for n in net_names]
        clip_grad_norm(bank_grads + net_grads, self.hyper.clip_norm)
        if bank_grads:
            params = [t.index_select(0, idx) for t in bank.parameters()]
            adamw_step(params, bank_grads, self.bank_state, self.hyper)
            with torch.no_grad():
                for t, p in zip(bank.parameters(), params):
                    t.index_copy_(0, idx, p)
        if net_grads:
            named = dict(self.backbone.named_parameters())
            hyper = self.hyper if self.mode in ("lora", "replay") else self.net_hyper
            adamw_step([named[n] for n in net_names], net_grads, self.net_state, hyper)
        return float(loss)


def _batches(items: list, batch_size: int):
    for i in range(0, len(items), batch_size):
        yield items[i : i + batch_size]


def train_run(
    mode: str,
    suite,
    schedule: ContinualSchedule,
    hyper: OptimHyper,
    backbone: Backbone,
    opts: TrainOptions | None = None,
) -> RunResult:
    """Run a continual schedule and evaluate every seen group at each checkpoint.

    ``backbone`` is never modified: frozen modes use it directly (and assert it
    is unchanged), other modes train a private copy.
    """
    opts = opts or TrainOptions()
    if mode != schedule.mode:
        raise ScheduleError(f"mode {mode!r} does not match schedule mode {schedule.mode!r}")
    if mode not in MODES:
        raise ScheduleError(f"unknown mode {mode!r}")
    initial_sha = backbone_checksum(backbone)
    torch.manual_seed(opts.seed)
    rng = random.Random(opts.seed)

    if mode == "tokmem":
        net = backbone if backbone.frozen else copy.deepcopy(backbone).freeze()
    elif mode == "tokmem-unfrozen":
        net = copy.deepcopy(backbone).unfreeze()
    else:
        net = copy.deepcopy(backbone).freeze()
        net.attach_adapters(opts.adapter_rank, opts.adapter_targets, seed=opts.seed)
    frozen_sha = backbone_checksum(net) if mode == "tokmem" else None

    stepper = _Stepper(mode, net, hyper, opts)
    variant = "decoupled" if opts.decoupled else "coupled"
    bank: MemoryBank | None = None
    replay = opts.replay if mode == "replay" else None
    seen_pool: list = []
    tasks_seen = 0
    next_refresh = replay.refresh_every if replay is not None else None
    checkpoints: list[Checkpoint] = []
    curve: list[tuple[int, float]] = []
    window: list[float] = []
    step = 0

    for gi, group in enumerate(schedule.groups, start=1):
        if uses_memory(mode):
            labels = suite.memory_labels(group)
            if bank is None:
                bank = create_bank(net.cfg.d_model, len(labels), net, seed=opts.seed, variant=variant, labels=labels, jitter=opts.jitter)
            else:
                bank, _ = extend_bank(bank, len(labels), net, labels=labels, seed=opts.seed, jitter=opts.jitter)
            stepper.reset_bank_state()
        items = suite.train_items(group)
        if not items:
            raise ScheduleError(f"task group {group.name!r} has no training data")
        seqs = [suite.encode(it, mode, bank) for it in items]
        n_replay = round(replay.ratio * hyper.batch_size) if replay is not None and replay.items else 0
        fresh_per_batch = hyper.batch_size - n_replay
        steps_this_group = 0
        for epoch in range(hyper.epochs):
            order = list(range(len(seqs)))
            rng.shuffle(order)
            for chunk in _batches(order, fresh_per_batch):
                if hyper.max_steps is not None and steps_this_group >= hyper.max_steps:
                    break
                batch = [seqs[i] for i in chunk]
                if replay is not None and replay.items:
                    batch = replay_mix(replay, batch + [None] * n_replay, replay.ratio, rng)
                    batch = [b for b in batch if b is not None]
                loss = stepper.step(bank, batch)
                if uses_memory(mode) and schedule.renormalize:
                    renormalize(bank, fallback=opts.renorm_fallback)
                step += 1
                steps_this_group += 1
                window.append(loss)
                if step % opts.eval_interval == 0:
                    curve.append((step, sum(window) / len(window)))
                    window = []
        tasks_seen += len(group.members)
        if replay is not None:
            seen_pool.extend(seqs)
            if tasks_seen >= next_refresh:
                replay.refresh(seen_pool, rng)
                while next_refresh <= tasks_seen:
                    next_refresh += replay.refresh_every
        if mode == "tokmem":
            assert backbone_checksum(net) == frozen_sha, "frozen backbone changed during training"
        if gi in schedule.checkpoints:
            ck_backbone = copy.deepcopy(net)
            ck_bank = bank.clone() if bank is not None else None
            report = continual_evaluate(
                ck_backbone, ck_bank, suite, schedule.groups, schedule.groups[:gi], mode, f"after_{gi}", opts.eval_max_len
            )
            ck = Checkpoint(gi, f"after_{gi}", ck_backbone, ck_bank, report, backbone_checksum(ck_backbone))
            checkpoints.append(ck)
            log.info("%s checkpoint %d: %s", mode, gi, {g: s for g, s in report.groups.items() if report.seen[g]})
            if opts.out_dir is not None:
                _write_checkpoint(opts.out_dir, ck)
    result = RunResult(mode, checkpoints, curve, initial_sha)
    if opts.out_dir is not None:
        write_run_artifacts(opts.out_dir, result)
    return result


def continual_evaluate(
    backbone: Backbone,
    bank: MemoryBank | None,
    suite,
    groups: Sequence[TaskGroup],
    seen_groups: Sequence[TaskGroup],
    mode: str,
    label: str = "eval",
    max_len: int = 40,
) -> MetricsReport:
    """Score every requested group; groups not yet trained are evaluated too but flagged unseen.

    TokMem modes evaluate with the full bank, so unseen groups (whose memory
    rows do not exist yet) get zero scores.
    """
    seen_names = {g.name for g in seen_groups}
    report = MetricsReport(label)
    for g in groups:
        try:
            if uses_memory(mode) and (bank is None or not all(l in bank.labels for l in suite.memory_labels(g))):
                scores = _zero_scores(suite, mode)
            else:
                scores = suite.evaluate(backbone, bank, g, mode, max_len)
        except ValueError as exc:
            raise DataError(f"group {g.name}: {exc}") from exc
        report.groups[g.name] = scores
        report.seen[g.name] = g.name in seen_names
    return report


def _zero_scores(suite, mode: str) -> dict:
    if suite.kind == "atomic":
        out = {"exact_match": 0.0, "rouge_l": 0.0}
        if uses_memory(mode):
            out["routing_acc"] = 0.0
        return out
    return {"tool_f1": 0.0, "arg_f1": 0.0, "exact_match": 0.0}


def _write_checkpoint(out_dir: Path, ck: Checkpoint) -> None:
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    save_checkpoint(ck.backbone, out_dir / "checkpoints" / f"{ck.label}.tkmckpt")
    if ck.bank is not None:
        (out_dir / "banks").mkdir(parents=True, exist_ok=True)
        write_bank(ck.bank, out_dir / "banks" / f"{ck.label}.tkmbank")


def write_run_artifacts(out_dir: Path, result: RunResult) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(result.metrics_json(), indent=2, sort_keys=True) + "\n")
    lines = ["step,loss,ppl"] + [f"{s},{l:.6f},{math.exp(min(l, 50)):.6f}" for s, l in result.curve]
    (out_dir / "curves.csv").write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------------- adaptation


def adaptation_phase(backbone: Backbone, cfg: AdaptationConfig) -> Backbone:
    """Jointly train adapters and a temporary bank on auxiliary tools, then merge and freeze.

    The temporary bank is discarded; the returned backbone carries no adapters
    and no trace of the auxiliary memory ids.
    """
    suite = cfg.aux_suite
    aux_cues = {t.cue for t in suite.data.tools}
    overlap = aux_cues & set(cfg.eval_cues)
    if overlap:
        raise ValidationError(f"auxiliary tools overlap evaluation tools (cues {sorted(overlap)})")
    net = copy.deepcopy(backbone).freeze()
    net.attach_adapters(cfg.rank, cfg.targets, seed=cfg.seed)
    labels = [l for g in suite.groups for l in suite.memory_labels(g)]
    temp = create_bank(net.cfg.d_model, len(labels), net, seed=cfg.seed, labels=labels)
    items = [q for g in suite.groups for q in suite.train_items(g)]
    seqs = [suite.encode(q, "tokmem", temp) for q in items]
    mem_hyper = OptimHyper(lr=cfg.lr_memory, weight_decay=0.0)
    net_hyper = OptimHyper(lr=cfg.lr_backbone, weight_decay=0.0)
    mem_state, net_state = AdamWState(), AdamWState()
    rng = random.Random(cfg.seed)
    steps = 0
    for _ in range(cfg.epochs):
        order = list(range(len(seqs)))
        rng.shuffle(order)
        for chunk in _batches(order, cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            loss, grads = loss_and_grad(net, temp, [seqs[i] for i in chunk], "bank+adapters")
            if not math.isfinite(float(loss)):
                raise NonFiniteError(f"non-finite adaptation loss {float(loss)}")
            names = [n for n in grads if n.startswith("adapters.")]
            g_net = [grads[n] for n in names]
            g_mem = [grads["bank"]]
            clip_grad_norm(g_net + g_mem, 1.0)
            adamw_step([temp.addr], g_mem, mem_state, mem_hyper)
            named = dict(net.named_parameters())
            adamw_step([named[n] for n in names], g_net, net_state, net_hyper)
            steps += 1
    del temp
    return merge_adapters(net).freeze()
