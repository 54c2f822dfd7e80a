"""Config-driven experiments that emit the run-directory artifacts.

Configs are JSON files validated by :class:`ExperimentConfig`.  Every run is
reconstructible from the copied config: all randomness flows from ``seed``.
"""
from __future__ import annotations

import json
import logging
import traceback
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import TokMemError
from .layout import INFIX, PREFIX
from .metrics import MetricsReport, forgetting_matrix
from .model import ModelConfig, init_backbone
from .optim import OptimHyper
from .placement import placement_run
from .pretrain import PretrainConfig, pretrained_backbone
from .suites import AtomicSuite, ToolSuite
from .taskgen import VOCAB_SIZE, gen_atomic_tasks, gen_tool_tasks
from .trainer import AdaptationConfig, ContinualSchedule, ReplayBuffer, TrainOptions, adaptation_phase, train_run

log = logging.getLogger(__name__)

KINDS = ("atomic-continual", "compositional", "placement", "adaptation-ablation", "unfrozen-ablation")

MIRRORS = {
    "atomic-continual": "Tables 1-2 and Figure 4 (atomic recall under sequential task addition)",
    "unfrozen-ablation": "the unfrozen-backbone ablation (frozen vs trainable backbone)",
    "compositional": "Tables 3-4 and Figures 5-7 (compositional tool calls)",
    "adaptation-ablation": "Table 3 (with and without the adaptation phase)",
    "placement": "Table 5 (memory placement: Steps@90%Best and perplexity)",
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PretrainSection(_Strict):
    steps: int = Field(20000, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    warmup: int = Field(200, ge=1)
    seed: int = 0
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 48
    cache_dir: str | None = None

    def config(self) -> PretrainConfig:
        return PretrainConfig(self.steps, self.batch_size, self.lr, self.warmup, self.seed,
                              self.d_model, self.n_layers, self.n_heads, self.max_seq_len)


class OptimSection(_Strict):
    lr: float = Field(gt=0)
    weight_decay: float = Field(0.0, ge=0)
    batch_size: int = Field(4, ge=1)
    epochs: int = Field(1, ge=1)
    max_steps: int | None = Field(None, ge=0)

    def hyper(self) -> OptimHyper:
        return OptimHyper(lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                          epochs=self.epochs, max_steps=self.max_steps)


def _default_optim() -> dict[str, OptimSection]:
    return {
        "tokmem": OptimSection(lr=5e-3, epochs=20),
        "tokmem-unfrozen": OptimSection(lr=5e-3, epochs=20),
        "lora": OptimSection(lr=1.5e-3, weight_decay=1e-2, epochs=20),
        "replay": OptimSection(lr=1.5e-3, weight_decay=1e-2, epochs=20),
    }


class TrainSection(_Strict):
    renormalize: bool = True
    renorm_fallback: Literal["init", "none"] = "none"
    decoupled: bool = True
    adapter_rank: int = Field(16, ge=1)
    adapter_targets: list[Literal["q", "k", "v", "o"]] = ["q", "k", "v", "o"]
    backbone_lr: float = Field(5e-5, gt=0)
    eval_interval: int = Field(100, ge=1)
    eval_max_len: int = Field(40, ge=1)


class AtomicSection(_Strict):
    n_tasks: int = Field(50, ge=1)
    train_per_task: int = Field(100, ge=1)
    test_per_task: int = Field(10, ge=1)
    group_size: int = Field(10, ge=1)


class ReplaySection(_Strict):
    capacity: int = Field(500, ge=1)
    refresh_every: int = Field(10, ge=1)
    ratio: float = Field(0.2, ge=0, le=1)


class ToolSection(_Strict):
    n_tools: int = Field(10, ge=1)
    train_counts: list[int] = [1]
    test_counts: list[int] = [2]
    n_train: int = Field(400, ge=1)
    n_test: int = Field(100, ge=1)


class AdaptationSection(_Strict):
    n_tools: int = Field(10, ge=1)
    tool_offset: int = Field(10, ge=0)
    call_counts: list[int] = [1, 2, 3, 4]
    n_train: int = Field(2000, ge=0)
    lr_backbone: float = Field(2e-3, gt=0)
    lr_memory: float = Field(5e-3, gt=0)
    epochs: int = Field(10, ge=1)
    rank: int = Field(16, ge=1)
    targets: list[Literal["q", "k", "v", "o"]] = ["q", "k", "v", "o"]
    batch_size: int = Field(4, ge=1)
    max_steps: int | None = Field(None, ge=0)


class PlacementSection(_Strict):
    tokens: list[int] = [1, 2, 5]
    budgets: list[int] = [1024, 2048, 4096]
    placements: list[Literal["infix", "prefix"]] = [INFIX, PREFIX]
    seq_len: int = Field(32, ge=1)
    marker_len: int = Field(4, ge=1)
    steps: int = Field(300, ge=1)
    eval_interval: int = Field(10, ge=1)
    lr: float = Field(2e-2, gt=0)
    skew: float = Field(1.0, ge=0)
    seeds: list[int] | None = None
    backbone: Literal["pretrained", "random"] = "pretrained"


class ExperimentConfig(_Strict):
    """One experiment.  ``seed`` is mandatory; sections irrelevant to ``kind`` may be omitted."""

    kind: Literal["atomic-continual", "compositional", "placement", "adaptation-ablation", "unfrozen-ablation"]
    seed: int
    name: str = "experiment"
    pretrain: PretrainSection = PretrainSection()
    modes: list[Literal["tokmem", "tokmem-unfrozen", "lora", "replay"]] | None = None
    optim: dict[str, OptimSection] = Field(default_factory=_default_optim)
    train: TrainSection = TrainSection()
    atomic: AtomicSection | None = None
    replay: ReplaySection = ReplaySection()
    tools: ToolSection | None = None
    adaptation: AdaptationSection | None = None
    placement: PlacementSection | None = None

    @model_validator(mode="after")
    def _kind_fields(self):
        need = {
            "atomic-continual": "atomic",
            "unfrozen-ablation": "atomic",
            "compositional": "tools",
            "adaptation-ablation": "tools",
            "placement": "placement",
        }[self.kind]
        if getattr(self, need) is None:
            raise ValueError(f"kind {self.kind!r} requires the {need!r} section")
        if self.kind == "adaptation-ablation" and self.adaptation is None:
            raise ValueError("kind 'adaptation-ablation' requires the 'adaptation' section")
        for m in self.resolved_modes():
            if m not in self.optim:
                raise ValueError(f"optim has no entry for mode {m!r}")
        return self

    def resolved_modes(self) -> list[str]:
        if self.modes is not None:
            return list(self.modes)
        return {
            "atomic-continual": ["tokmem", "lora", "replay"],
            "unfrozen-ablation": ["tokmem", "tokmem-unfrozen"],
            "compositional": ["tokmem", "lora"],
            "adaptation-ablation": ["tokmem"],
            "placement": [],
        }[self.kind]


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.model_validate(json.load(fh))


# ------------------------------------------------------------------ runners


def _options(cfg: ExperimentConfig, seed: int, out: Path | None) -> TrainOptions:
    t = cfg.train
    replay = ReplayBuffer(cfg.replay.capacity, cfg.replay.refresh_every, cfg.replay.ratio)
    return TrainOptions(
        seed=seed,
        eval_interval=t.eval_interval,
        renorm_fallback=t.renorm_fallback,
        decoupled=t.decoupled,
        adapter_rank=t.adapter_rank,
        adapter_targets=tuple(t.adapter_targets),
        backbone_hyper=OptimHyper.finetune(lr=t.backbone_lr),
        replay=replay,
        eval_max_len=t.eval_max_len,
        out_dir=out,
    )


def _backbone(cfg: ExperimentConfig):
    p = cfg.pretrain
    return pretrained_backbone(p.config(), Path(p.cache_dir) if p.cache_dir else None)


def run_atomic(cfg: ExperimentConfig, out: Path | None, seed: int) -> dict:
    a = cfg.atomic
    backbone = _backbone(cfg)
    tasks = gen_atomic_tasks(a.n_tasks, a.train_per_task, a.test_per_task, seed)
    suite = AtomicSuite(tasks, a.group_size, backbone.cfg.max_seq_len)
    results = {}
    for mode in cfg.resolved_modes():
        sub = out / mode if out is not None else None
        schedule = ContinualSchedule(list(suite.groups), mode=mode, renormalize=cfg.train.renormalize)
        res = train_run(mode, suite, schedule, cfg.optim[mode].hyper(), backbone, _options(cfg, seed, sub))
        matrix = forgetting_matrix(res.reports, "exact_match")
        if sub is not None:
            (sub / "matrix.csv").write_text(matrix.to_csv())
        results[mode] = {
            "reports": [r.to_dict() for r in res.reports],
            "forgetting": matrix.diagonal_deltas(),
            "backbone_sha": [c.backbone_sha for c in res.checkpoints],
            "initial_backbone_sha": res.initial_backbone_sha,
        }
    return results


def _tool_suites(cfg: ExperimentConfig, seed: int, max_seq_len: int):
    t = cfg.tools
    data = gen_tool_tasks(t.n_tools, set(t.train_counts) | set(t.test_counts), t.n_train, t.n_test, seed)
    suite = ToolSuite(data, None, t.train_counts, t.test_counts, max_seq_len)
    aux = None
    if cfg.adaptation is not None and cfg.adaptation.n_train:
        ad = cfg.adaptation
        aux_data = gen_tool_tasks(ad.n_tools, ad.call_counts, ad.n_train, 1, seed + 7919, tool_offset=ad.tool_offset)
        aux = ToolSuite(aux_data, None, ad.call_counts, None, max_seq_len)
    return suite, aux


def _adapt(cfg: ExperimentConfig, backbone, aux, suite, seed: int):
    ad = cfg.adaptation
    acfg = AdaptationConfig(
        aux, ad.lr_backbone, ad.lr_memory, ad.epochs, ad.rank, tuple(ad.targets), ad.batch_size, ad.max_steps,
        frozenset(t.cue for t in suite.data.tools), seed,
    )
    return adaptation_phase(backbone, acfg)


def _compositional_mode(cfg, mode, suite, backbone, seed, out: Path | None) -> dict:
    schedule = ContinualSchedule(list(suite.groups), mode=mode, renormalize=cfg.train.renormalize)
    res = train_run(mode, suite, schedule, cfg.optim[mode].hyper(), backbone, _options(cfg, seed, out))
    return res.reports[-1].to_dict()


def run_compositional(cfg: ExperimentConfig, out: Path | None, seed: int) -> dict:
    base = _backbone(cfg)
    suite, aux = _tool_suites(cfg, seed, base.cfg.max_seq_len)
    results = {}
    adapted = None
    for mode in cfg.resolved_modes():
        backbone = base
        if mode == "tokmem" and aux is not None:
            adapted = adapted or _adapt(cfg, base, aux, suite, seed)
            backbone = adapted
        sub = out / mode if out is not None else None
        results[mode] = _compositional_mode(cfg, mode, suite, backbone, seed, sub)
    return results


def run_adaptation_ablation(cfg: ExperimentConfig, out: Path | None, seed: int) -> dict:
    base = _backbone(cfg)
    suite, aux = _tool_suites(cfg, seed, base.cfg.max_seq_len)
    if aux is None:
        raise TokMemError("adaptation-ablation needs auxiliary training data (adaptation.n_train > 0)")
    adapted = _adapt(cfg, base, aux, suite, seed)
    results = {}
    for label, backbone in (("adapted", adapted), ("no-adapt", base)):
        sub = out / label if out is not None else None
        results[label] = _compositional_mode(cfg, "tokmem", suite, backbone, seed, sub)
    return results


def run_placement(cfg: ExperimentConfig, out: Path | None, seed: int) -> dict:
    p = cfg.placement
    need = p.marker_len + max(p.tokens) + p.seq_len + 1
    if p.backbone == "pretrained":
        backbone = _backbone(cfg)
    else:
        mc = ModelConfig(VOCAB_SIZE, cfg.pretrain.d_model, cfg.pretrain.n_layers, cfg.pretrain.n_heads, need, seed)
        backbone = init_backbone(mc).freeze()
    seeds = p.seeds if p.seeds is not None else [seed]
    cells = []
    for n in p.tokens:
        for budget in p.budgets:
            for placement in p.placements:
                for s in seeds:
                    r = placement_run(backbone, n, budget, placement, s, p.steps, p.eval_interval, p.seq_len,
                                      p.marker_len, p.lr, p.skew)
                    cells.append(r.to_dict())
    if out is not None:
        lines = ["n_tokens,budget,placement,seed,steps_at_90,final_ppl"]
        lines += [f"{c['n_tokens']},{c['budget']},{c['placement']},{c['seed']},{c['steps_at_90']},{c['final_ppl']:.6f}"
                  for c in cells]
        (out / "placement.csv").write_text("\n".join(lines) + "\n")
        curve = ["n_tokens,budget,placement,seed,step,ppl"]
        for c in cells:
            curve += [f"{c['n_tokens']},{c['budget']},{c['placement']},{c['seed']},{s},{v:.6f}"
                      for s, v in zip(c["curve"]["steps"], c["curve"]["ppl"])]
        (out / "curves.csv").write_text("\n".join(curve) + "\n")
    return {"cells": cells}


RUNNERS = {
    "atomic-continual": run_atomic,
    "unfrozen-ablation": run_atomic,
    "compositional": run_compositional,
    "adaptation-ablation": run_adaptation_ablation,
    "placement": run_placement,
}


def run_experiment(cfg: ExperimentConfig, out: str | Path, seed: int | None = None) -> Path:
    """Run ``cfg`` into ``out``; on failure the partial artifacts stay and ``error.json`` records why."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    (out / "config.json").write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    try:
        results = RUNNERS[cfg.kind](cfg, out, cfg.seed)
    except Exception as exc:
        manifest = {"error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}
        (out / "error.json").write_text(json.dumps(manifest, indent=2) + "\n")
        raise
    payload = {"kind": cfg.kind, "seed": cfg.seed, "results": results}
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_matrix(out, cfg, results)
    (out / "summary.md").write_text(summarize(cfg.kind, results))
    return out


def _write_matrix(out: Path, cfg: ExperimentConfig, results: dict) -> None:
    if cfg.kind not in ("atomic-continual", "unfrozen-ablation"):
        return
    parts = []
    for mode, r in results.items():
        m = forgetting_matrix([MetricsReport.from_dict(d) for d in r["reports"]], "exact_match")
        parts += [f"# {mode}", m.to_csv().rstrip("\n")]
    (out / "matrix.csv").write_text("\n".join(parts) + "\n")


def _fmt(x: float) -> str:
    return f"{100 * x:.1f}"


def summarize(kind: str, results: dict) -> str:
    """Markdown tables for a finished run."""
    lines = [f"# {kind}", "", f"Mirrors {MIRRORS[kind]}.", ""]
    if kind in ("atomic-continual", "unfrozen-ablation"):
        lines += ["| mode | first-group EM (own ckpt) | first-group EM (final) | final mean EM | final routing |",
                  "|---|---|---|---|---|"]
        for mode, r in results.items():
            reps = [MetricsReport.from_dict(d) for d in r["reports"]]
            first = next(iter(reps[0].groups))
            route = reps[-1].aggregate("routing_acc")
            route_s = "-" if route != route else _fmt(route)
            lines.append(f"| {mode} | {_fmt(reps[0].groups[first]['exact_match'])} | "
                         f"{_fmt(reps[-1].groups[first]['exact_match'])} | {_fmt(reps[-1].aggregate('exact_match'))} | {route_s} |")
        if kind == "unfrozen-ablation":
            lines += ["", "| mode | backbone changed during run |", "|---|---|"]
            for mode, r in results.items():
                changed = any(s != r["initial_backbone_sha"] for s in r["backbone_sha"])
                lines.append(f"| {mode} | {'yes' if changed else 'no'} |")
    elif kind in ("compositional", "adaptation-ablation"):
        lines += ["| setting | tool F1 | arg F1 | exact match |", "|---|---|---|---|"]
        for label, rep in results.items():
            r = MetricsReport.from_dict(rep)
            lines.append(f"| {label} | {_fmt(r.aggregate('tool_f1'))} | {_fmt(r.aggregate('arg_f1'))} | "
                         f"{_fmt(r.aggregate('exact_match'))} |")
    else:
        lines += ["| tokens | budget | placement | seed | Steps@90%Best | final ppl |", "|---|---|---|---|---|---|"]
        for c in results["cells"]:
            lines.append(f"| {c['n_tokens']} | {c['budget']} | {c['placement']} | {c['seed']} | "
                         f"{c['steps_at_90']} | {c['final_ppl']:.3f} |")
    return "\n".join(lines) + "\n"


def report(run_dir: str | Path) -> str:
    run_dir = Path(run_dir)
    payload = json.loads((run_dir / "metrics.json").read_text())
    return summarize(payload["kind"], payload["results"])
