"""Run configuration, training loop, evaluation and the ablation harness."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np
import torch

from .layout import BBox, Document, load_dataset
from .metrics import EvalReport, build_report, exact_match
from .model import Batch, EncoderFeatures, Tilt, TiltConfig, collate, featurize
from .numerics import SCHEDULES, OptimizerState, adamw_step, backward
from .objectives import Seq2SeqExample, case_copies, pretrain_example, to_seq2seq
from .spatial_bias import sample_scale_factors
from .synth import TASK_GENERATORS, synth_corpus
from .vision import AffineParams, transform_boxes, warp_image

log = logging.getLogger(__name__)

# finetuning hyperparameters per downstream dataset: batch, steps, lr, schedule
PRESETS: dict[str, dict] = {
    "sroie-like": {"batch_size": 8, "steps": 6200, "lr": 1e-4, "scheduler": "constant"},
    "wikiops-like": {"batch_size": 64, "steps": 4200, "lr": 1e-4, "scheduler": "constant"},
    "docvqa-like": {"batch_size": 64, "steps": 100_000, "lr": 2e-4, "scheduler": "linear"},
    "cord-like": {"batch_size": 8, "steps": 36_000, "lr": 2e-4, "scheduler": "linear"},
    "rvlcdip-like": {"batch_size": 1024, "steps": 12_000, "lr": 1e-3, "scheduler": "linear"},
}

PRETRAIN_DEFAULTS = {"batch_size": 64, "steps": 100_000, "lr": 2e-4, "scheduler": "linear"}


@dataclass
class RunConfig:
    model: TiltConfig = field(default_factory=TiltConfig)
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    scheduler: str = "linear"
    steps: int = 100
    batch_size: int = 8
    max_grad_norm: float | None = 1.0
    case_augment: bool = False
    spatial_augment: bool = False
    affine_augment: bool = False
    affine_p: float = 0.9
    image_mask_p: float = 0.8
    disable_spatial_bias: bool = False
    disable_vision: bool = False
    seed: int = 0
    train_paths: list[str] = field(default_factory=list)
    eval_paths: list[str] = field(default_factory=list)
    init_checkpoint: str | None = None
    metric: str = "accuracy"
    early_stop_em: float | None = None
    eval_every: int = 100

    def __post_init__(self) -> None:
        if isinstance(self.model, dict):
            self.model = TiltConfig.from_dict(self.model)
        self.betas = tuple(self.betas)
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.scheduler not in SCHEDULES:
            raise ValueError(f"unknown scheduler {self.scheduler!r}; choose from {sorted(SCHEDULES)}")
        for name in ("case_augment", "spatial_augment", "affine_augment", "disable_spatial_bias", "disable_vision"):
            if not isinstance(getattr(self, name), bool):
                raise ValueError(f"{name} must be a boolean")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RunConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> RunConfig:
        """Load JSON; relative dataset and checkpoint paths resolve against the file's folder."""
        path = Path(path)
        d = json.loads(path.read_text())
        base = path.parent

        def rel(p: str) -> str:
            return str(p if Path(p).is_absolute() else base / p)

        for key in ("train_paths", "eval_paths"):
            if key in d:
                d[key] = [rel(p) for p in d[key]]
        if d.get("init_checkpoint"):
            d["init_checkpoint"] = rel(d["init_checkpoint"])
        return cls.from_dict(d)


def apply_preset(cfg: RunConfig, name: str, scale: float = 1.0) -> RunConfig:
    """Overlay a named preset; ``scale`` shrinks steps and batch size together."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = dict(PRESETS[name])
    p["steps"] = max(1, int(round(p["steps"] * scale)))
    p["batch_size"] = max(1, int(round(p["batch_size"] * scale)))
    return replace(cfg, **p)


def build_model(cfg: RunConfig, dtype: torch.dtype = torch.float32) -> Tilt:
    torch.manual_seed(cfg.seed)
    model = Tilt(cfg.model, spatial_bias=not cfg.disable_spatial_bias, vision=not cfg.disable_vision)
    return model.to(dtype)


# ---------------------------------------------------------------------------
# data


def load_documents(paths: Iterable[str | Path]) -> list[Document]:
    docs: list[Document] = []
    for p in paths:
        docs.extend(load_dataset(p))
    return docs


def affine_example(ex: Seq2SeqExample, rng: np.random.Generator, p: float) -> Seq2SeqExample:
    """Warp the page and move every on-page token with it."""
    if rng.random() >= p:
        return ex
    page = ex.page
    m = AffineParams.sample(rng).matrix(page.width, page.height)
    on_page = [i for i, t in enumerate(ex.source) if t.kind in ("word", "sentinel", "image_anchor")]
    boxes = np.array([ex.source[i].bbox.as_list() for i in on_page], dtype=np.float64).reshape(-1, 4)
    moved = transform_boxes(boxes, m, page.width, page.height)
    source = list(ex.source)
    for i, b in zip(on_page, moved.tolist()):
        source[i] = replace(source[i], bbox=BBox(*b))
    image = None if page.image is None else warp_image(page.image, m)
    return replace(ex, source=tuple(source), page=replace(page, image=image))


class ExampleSource:
    """Yields training batches; deterministic in (seed, step)."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._cache: dict[int, EncoderFeatures] = {}

    @property
    def stochastic(self) -> bool:
        return self.cfg.spatial_augment or self.cfg.affine_augment

    def examples(self, step: int, rng: np.random.Generator) -> list[tuple[int, Seq2SeqExample]]:
        raise NotImplementedError

    def batch(self, step: int, dtype: torch.dtype = torch.float32) -> Batch:
        rng = np.random.default_rng([self.cfg.seed, step])
        feats, targets = [], []
        for key, ex in self.examples(step, rng):
            if self.cfg.affine_augment:
                ex = affine_example(ex, rng, self.cfg.affine_p)
            scale = sample_scale_factors(rng) if self.cfg.spatial_augment else None
            if key >= 0 and not self.stochastic:
                f = self._cache.get(key)
                if f is None:
                    f = self._cache[key] = featurize(ex, self.cfg.model)
            else:
                f = featurize(ex, self.cfg.model, scale)
            feats.append(f)
            targets.append(ex.target)
        return collate(feats, targets, self.cfg.model, dtype)


class SupervisedSource(ExampleSource):
    """Cycles through a fixed example list in seeded, reshuffled epochs."""

    def __init__(self, cfg: RunConfig, examples: Sequence[Seq2SeqExample]):
        super().__init__(cfg)
        if not examples:
            raise ValueError("no supervised training examples")
        self.items = list(examples)
        self._order: list[int] = []

    def _index(self, k: int) -> int:
        n = len(self.items)
        epoch, pos = divmod(k, n)
        while len(self._order) < (epoch + 1) * n:
            e = len(self._order) // n
            self._order.extend(np.random.default_rng([self.cfg.seed, 7, e]).permutation(n).tolist())
        return self._order[k]

    def examples(self, step, rng):
        b = self.cfg.batch_size
        idx = [self._index((step - 1) * b + j) for j in range(b)]
        return [(i, self.items[i]) for i in idx]


class PretrainSource(ExampleSource):
    """Fresh span corruption of randomly drawn documents every step."""

    def __init__(self, cfg: RunConfig, docs: Sequence[Document]):
        super().__init__(cfg)
        if not docs:
            raise ValueError("pretraining corpus is empty")
        self.docs = list(docs)

    def examples(self, step, rng):
        out = []
        for _ in range(self.cfg.batch_size):
            doc = self.docs[int(rng.integers(len(self.docs)))]
            ex = pretrain_example(_fit(doc, self.cfg.model.max_src_len), rng, self.cfg.image_mask_p)
            if self.cfg.case_augment:
                ex = case_copies(ex)[int(rng.integers(3))]
            out.append((-1, ex))
        return out


class SyntheticSource(ExampleSource):
    """Fresh synthetic documents every step, so nothing can be memorised."""

    def __init__(self, cfg: RunConfig, kind: str, data_seed: int = 0):
        super().__init__(cfg)
        if kind not in TASK_GENERATORS:
            raise ValueError(f"unknown synthetic family {kind!r}")
        self.gen = TASK_GENERATORS[kind]
        self.kind = kind
        self.data_seed = data_seed

    def examples(self, step, rng):
        out = []
        for j in range(self.cfg.batch_size):
            doc = self.gen(np.random.default_rng([self.data_seed, step, j]), f"{self.kind}-{step}-{j}")
            for ex in supervised_set([doc], self.cfg):
                out.append((-1, ex))
        return out[: self.cfg.batch_size]


def _fit(doc: Document, max_src_len: int) -> Document:
    """Drop trailing words so the corrupted source stays within budget."""
    used, keep = 0, []
    for t in doc.tokens:
        used += len(t.text.encode("utf-8")) + 1
        if used > max_src_len:
            break
        keep.append(t)
    return doc if len(keep) == len(doc.tokens) else doc.with_tokens(keep)


def supervised_set(docs: Sequence[Document], cfg: RunConfig) -> list[Seq2SeqExample]:
    out = []
    for doc in docs:
        for task in doc.annotations:
            ex = to_seq2seq(doc, task, cfg.model.max_src_len)
            out.extend(case_copies(ex) if cfg.case_augment else [ex])
    return out


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    history: list[dict]
    steps_run: int
    optimizer: OptimizerState
    seconds: float


def train(
    model: Tilt,
    source: ExampleSource,
    cfg: RunConfig,
    log_stream: TextIO | None = None,
    optimizer: OptimizerState | None = None,
    on_eval: Callable[[Tilt, int], float] | None = None,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """AdamW with the configured schedule; one JSON log line per step.

    With ``cfg.early_stop_em`` set, ``on_eval`` is called every
    ``cfg.eval_every`` steps and training stops once it reaches the target.
    """
    torch.manual_seed(cfg.seed)
    params = {n: p for n, p in model.named_parameters()}
    if not cfg.disable_vision:
        trainable = params
    else:
        trainable = {n: p for n, p in params.items() if not n.startswith(("unet.", "vision_proj."))}
    state = optimizer or OptimizerState(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    schedule = SCHEDULES[cfg.scheduler]
    history: list[dict] = []
    start = time.perf_counter()
    model.train()
    step = 0
    for step in range(1, cfg.steps + 1):
        batch = source.batch(step, dtype)
        loss = model.loss(batch)
        grads = backward(loss, trainable)
        if cfg.max_grad_norm:
            norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
            if norm > cfg.max_grad_norm:
                grads = {n: g * (cfg.max_grad_norm / norm).to(g.dtype) for n, g in grads.items()}
        state.lr = schedule(step - 1, cfg.steps, cfg.lr)
        adamw_step(trainable, grads, state)
        rec = {"step": step, "loss": float(loss.detach()), "lr": state.lr}
        history.append(rec)
        if log_stream is not None:
            log_stream.write(json.dumps(rec) + "\n")
        if cfg.early_stop_em is not None and on_eval is not None and step % cfg.eval_every == 0:
            model.eval()
            score = on_eval(model, step)
            model.train()
            history[-1]["train_em"] = score
            if log_stream is not None:
                log_stream.write(json.dumps({"step": step, "train_em": score}) + "\n")
            if score >= cfg.early_stop_em:
                break
    model.eval()
    return TrainResult(history, step, state, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# inference and evaluation


def predict(
    model: Tilt, examples: Sequence[Seq2SeqExample], batch_size: int = 32, max_len: int | None = None
) -> list[str]:
    model.eval()
    out: list[str] = []
    dtype = model.embed.weight.dtype
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        feats = [featurize(ex, model.cfg) for ex in chunk]
        out.extend(model.generate(collate(feats, None, model.cfg, dtype), max_len))
    return out


def evaluate(model: Tilt, docs: Sequence[Document], metric: str, batch_size: int = 32) -> EvalReport:
    """Greedy answers for every annotation, scored with ``metric``."""
    pairs = [(d, a) for d in docs for a in d.annotations]
    examples = [to_seq2seq(d, a, model.cfg.max_src_len) for d, a in pairs]
    preds = predict(model, examples, batch_size)
    records = [
        {
            "doc": d.id,
            "field": a.prompt,
            "pred": p,
            "golds": list(a.answers) or (["None"] if a.task == "kie" else []),
        }
        for (d, a), p in zip(pairs, preds)
    ]
    return build_report(metric, records)


def exact_match_rate(model: Tilt, examples: Sequence[Seq2SeqExample], batch_size: int = 32) -> float:
    preds = predict(model, examples, batch_size)
    return float(np.mean([exact_match(p, ex.target) for p, ex in zip(preds, examples)]))


# ---------------------------------------------------------------------------
# ablation


ABLATION_DESK_MODEL = {
    "image_width": 64,
    "image_height": 48,
    "unet_channels": (4, 8, 16),
    "max_src_len": 64,
    "max_tgt_len": 8,
}

# task family -> (switch whose removal it probes, training steps)
ABLATION_TASKS = {
    "layout-qa": ("disable_spatial_bias", 1500),
    "font-style": ("disable_vision", 600),
}


@dataclass
class AblationRun:
    task: str
    variant: str
    seed: int
    exact_match: float
    seconds: float
    final_loss: float


def ablation_config(base: RunConfig | None = None) -> RunConfig:
    """Desk-sized model and optimiser for the ablation harness."""
    base = base or RunConfig()
    return replace(
        base, model=replace(base.model, **ABLATION_DESK_MODEL), batch_size=32, lr=2e-3, scheduler="linear"
    )


def run_variant(cfg: RunConfig, task: str, n_test: int, data_seed: int = 1000) -> tuple[float, TrainResult]:
    """Train on a stream of fresh documents, score exact match on a held-out set."""
    model = build_model(cfg)
    result = train(model, SyntheticSource(cfg, task, data_seed), cfg)
    test_docs = synth_corpus(task, n_test, data_seed + 1)
    test_set = supervised_set(test_docs, replace(cfg, case_augment=False))
    return exact_match_rate(model, test_set), result


def ablate(
    cfg: RunConfig,
    seeds: Sequence[int] = (0, 1),
    n_test: int = 300,
    tasks: dict[str, tuple[str, int]] | None = None,
    progress: Callable[[AblationRun], None] | None = None,
) -> dict:
    """Paired full-vs-ablated runs per task family and seed.

    Returns per-run records plus, per (task, variant), the mean over seeds
    and the half-range as spread.
    """
    tasks = tasks or ABLATION_TASKS
    runs: list[AblationRun] = []
    for task, (switch, steps) in tasks.items():
        for variant in ("full", switch):
            for seed in seeds:
                run_cfg = replace(cfg, seed=seed, steps=steps, **({} if variant == "full" else {switch: True}))
                em, res = run_variant(run_cfg, task, n_test)
                run = AblationRun(task, variant, seed, em, res.seconds, res.history[-1]["loss"])
                runs.append(run)
                if progress:
                    progress(run)
    summary = []
    for task, (switch, _) in tasks.items():
        for variant in ("full", switch):
            ems = [r.exact_match for r in runs if r.task == task and r.variant == variant]
            summary.append(
                {
                    "task": task,
                    "variant": variant,
                    "mean": float(np.mean(ems)),
                    "spread": float((max(ems) - min(ems)) / 2),
                    "runs": ems,
                }
            )
    return {"runs": [asdict(r) for r in runs], "summary": summary}
