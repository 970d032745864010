"""Domain-generalization training and leave-one-domain-out evaluation.

Two protocols share one two-stream code path. Stream A is always pooled
real source training data and carries the classification loss. Stream B
is what it is compared against through the feature-space discrepancy:
GAN-translated synthetics under `synthetic_augmented` (whose copied
labels also join the classification loss), or the held-out 30%
validation pool under `split_70_30` (whose labels are never read).
Both streams pass through the shared-weight feature extractor; the
discrepancy acts on the 128-dim penultimate embedding.

Setting lambda_d to 0 under split_70_30 disables stream B entirely and
is the no-adaptation baseline the leave-one-out report compares against.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from .autodiff import NonFiniteError, Tensor, no_grad, softmax_cross_entropy
from .datagen import DomainDataset, DomainSplit, ImageSpec
from .discrepancy import DiscrepancyConfig, discrepancy
from .nets import DGModel, build_classifier, param_tensors
from .optim import SGD
from .translation import (
    TranslationConfig,
    TranslatorModel,
    load_translator,
    train_translator,
    translate_dataset,
)

PROTOCOL_KINDS = ("synthetic_augmented", "split_70_30")


@dataclass(frozen=True)
class Protocol:
    kind: str
    translator_ckpt: str | None = None   # synthetic_augmented only
    train_fraction: float = 0.7          # split_70_30 only

    def __post_init__(self):
        if self.kind not in PROTOCOL_KINDS:
            raise ValueError(f"protocol kind must be one of {PROTOCOL_KINDS}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")

    @classmethod
    def synthetic(cls, translator_ckpt: str | None = None) -> "Protocol":
        return cls("synthetic_augmented", translator_ckpt=translator_ckpt)

    @classmethod
    def split(cls, train_fraction: float = 0.7) -> "Protocol":
        return cls("split_70_30", train_fraction=train_fraction)

    def to_json(self) -> dict:
        return {"kind": self.kind, "translator_ckpt": self.translator_ckpt,
                "train_fraction": self.train_fraction}

    @classmethod
    def from_json(cls, obj: dict) -> "Protocol":
        return cls(kind=obj["kind"], translator_ckpt=obj.get("translator_ckpt"),
                   train_fraction=obj.get("train_fraction", 0.7))


@dataclass(frozen=True)
class ExperimentConfig:
    sources: tuple[str, ...]
    target: str
    protocol: Protocol
    discrepancy: DiscrepancyConfig = field(default_factory=DiscrepancyConfig)
    lambda_d: float = 1.0
    lr: float = 1e-4
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 15
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if self.target in self.sources:
            raise ValueError(f"target {self.target!r} must not be a source")
        if not self.sources:
            raise ValueError("need at least one source domain")
        if self.lambda_d < 0:
            raise ValueError("lambda_d must be >= 0 (0 is the baseline)")
        if self.lr <= 0 or self.batch_size < 2 or self.epochs < 1:
            raise ValueError("invalid optimizer settings")

    def to_json(self) -> dict:
        return {"sources": list(self.sources), "target": self.target,
                "protocol": self.protocol.to_json(),
                "discrepancy": self.discrepancy.to_json(),
                "lambda_d": self.lambda_d, "lr": self.lr,
                "batch_size": self.batch_size, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "epochs": self.epochs,
                "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        return cls(sources=tuple(obj["sources"]), target=obj["target"],
                   protocol=Protocol.from_json(obj["protocol"]),
                   discrepancy=DiscrepancyConfig.from_json(obj["discrepancy"]),
                   lambda_d=obj.get("lambda_d", 1.0), lr=obj.get("lr", 1e-4),
                   batch_size=obj.get("batch_size", 32),
                   momentum=obj.get("momentum", 0.9),
                   weight_decay=obj.get("weight_decay", 5e-4),
                   epochs=obj.get("epochs", 15), seed=obj.get("seed", 0))


# ---------------------------------------------------------------------------
# protocol pieces

def split_70_30(dataset: DomainDataset, fraction: float, seed: int
                ) -> tuple[DomainDataset, DomainDataset]:
    """Stratified per-class split: round(fraction * n) of each class trains."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    rng = seeding.stream(seed, seeding.SPLIT)
    train_idx, val_idx = [], []
    for cls in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == cls)
        if len(members) < 2:
            raise ValueError(f"class {cls} has {len(members)} sample(s); need >= 2")
        members = members[rng.permutation(len(members))]
        n_train = int(len(members) * fraction + 0.5)
        n_train = min(max(n_train, 1), len(members) - 1)
        train_idx.extend(members[:n_train])
        val_idx.extend(members[n_train:])
    return dataset.subset(np.sort(np.asarray(train_idx))), \
        dataset.subset(np.sort(np.asarray(val_idx)))


def classification_loss(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy."""
    return softmax_cross_entropy(logits, labels)


def total_loss(l_c: Tensor, l_d: Tensor | None, lambda_d: float) -> Tensor:
    """L_T = L_C + lambda_d * L_D; reduces to plain classification at 0."""
    if l_d is None or lambda_d == 0.0:
        return l_c
    return l_c + lambda_d * l_d


# ---------------------------------------------------------------------------
# pooled sample streams

class _Pool:
    """Concatenated datasets with per-sample origin tags and a seeded
    reshuffling batch cursor."""

    def __init__(self, datasets: list[DomainDataset], seed: int, tag: int):
        self.images = np.concatenate([ds.images for ds in datasets])
        self.labels = np.concatenate([ds.labels for ds in datasets])
        origin_table: list[str] = []
        ids = []
        for ds in datasets:
            key = tuple(sorted(ds.provenance.origins))
            if key not in origin_table:
                origin_table.append(key)
            ids.append(np.full(len(ds), origin_table.index(key)))
        self.origin_table = origin_table
        self.origin_ids = np.concatenate(ids)
        self._rng = seeding.stream(seed, tag)
        self._order = self._rng.permutation(len(self.images))
        self._cursor = 0

    def __len__(self):
        return len(self.images)

    def origins(self) -> set[str]:
        return {d for key in self.origin_table for d in key}

    def next_batch(self, size: int) -> tuple[np.ndarray, np.ndarray, set[str]]:
        idx = []
        while len(idx) < size:
            take = min(size - len(idx), len(self._order) - self._cursor)
            idx.extend(self._order[self._cursor:self._cursor + take])
            self._cursor += take
            if self._cursor == len(self._order):
                self._order = self._rng.permutation(len(self.images))
                self._cursor = 0
        idx = np.asarray(idx)
        batch_origins = {d for key in
                         (self.origin_table[i] for i in np.unique(self.origin_ids[idx]))
                         for d in key}
        return self.images[idx], self.labels[idx], batch_origins


@dataclass
class DGStepRecord:
    epoch: int
    step: int
    l_c: float
    l_d: float
    l_t: float


@dataclass
class DGHistory:
    steps: list[DGStepRecord] = field(default_factory=list)
    origins_seen: set[str] = field(default_factory=set)
    target_violations: int = 0

    def epoch_means(self) -> list[dict]:
        out = []
        by_epoch: dict[int, list[DGStepRecord]] = {}
        for s in self.steps:
            by_epoch.setdefault(s.epoch, []).append(s)
        for epoch in sorted(by_epoch):
            recs = by_epoch[epoch]
            out.append({"epoch": epoch,
                        "l_c": float(np.mean([r.l_c for r in recs])),
                        "l_d": float(np.mean([r.l_d for r in recs])),
                        "l_t": float(np.mean([r.l_t for r in recs]))})
        return out


def _build_streams(cfg: ExperimentConfig, sources: list[DomainDataset],
                   synthetic: list[DomainDataset] | None
                   ) -> tuple[_Pool, _Pool | None, bool]:
    """Returns (stream_a, stream_b, b_labels_in_lc)."""
    proto = cfg.protocol
    if proto.kind == "split_70_30":
        trains, vals = [], []
        for i, ds in enumerate(sorted(sources, key=lambda d: d.domain)):
            tr, va = split_70_30(ds, proto.train_fraction,
                                 seeding.child_seed(cfg.seed, 40, i))
            trains.append(tr)
            vals.append(va)
        pool_a = _Pool(trains, cfg.seed, seeding.BATCH_A)
        pool_b = None
        if cfg.lambda_d > 0.0:
            pool_b = _Pool(vals, cfg.seed, seeding.BATCH_B)
        return pool_a, pool_b, False

    # synthetic_augmented: full real sources in stream A, synthetics in B
    if synthetic is None:
        if proto.translator_ckpt is None:
            raise ValueError("synthetic_augmented needs a translator checkpoint "
                             "or pre-translated datasets")
        model = load_translator(proto.translator_ckpt)
        if set(model.domains) != set(cfg.sources):
            raise ValueError(f"checkpoint domains {sorted(model.domains)} != "
                             f"sources {sorted(cfg.sources)}")
        synthetic = []
        for ds in sources:
            synthetic.extend(translate_dataset(model, ds))
    for ds in synthetic:
        if ds.provenance.kind != "synthetic":
            raise ValueError(f"stream-B dataset {ds.domain!r} is not synthetic")
        bad = set(ds.provenance.origins) - set(cfg.sources)
        if bad or ds.provenance.style_domain not in cfg.sources:
            raise ValueError(f"synthetic dataset {ds.domain!r} involves non-source "
                             "domains")
    pool_a = _Pool(sources, cfg.seed, seeding.BATCH_A)
    pool_b = _Pool(synthetic, cfg.seed, seeding.BATCH_B)
    return pool_a, pool_b, True


def train_dg(cfg: ExperimentConfig, sources: list[DomainDataset],
             synthetic: list[DomainDataset] | None = None
             ) -> tuple[DGModel, DGHistory]:
    """Train the two-stream classifier; returns model and per-step history."""
    names = sorted(ds.domain for ds in sources)
    if names != sorted(cfg.sources):
        raise ValueError(f"datasets {names} do not match cfg.sources {sorted(cfg.sources)}")
    for ds in sources:
        if cfg.target in ds.provenance.origins:
            raise ValueError(f"source dataset {ds.domain!r} derives from the target")

    pool_a, pool_b, b_in_lc = _build_streams(cfg, list(sources), synthetic)
    num_classes = int(pool_a.labels.max()) + 1
    spec = ImageSpec(pool_a.images.shape[1], pool_a.images.shape[2])
    model = build_classifier(spec, num_classes, seed=seeding.child_seed(cfg.seed, 30))
    opt = SGD(param_tensors(model), cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)

    history = DGHistory()
    steps_per_epoch = max(1, len(pool_a) // cfg.batch_size)
    for epoch in range(cfg.epochs):
        for step in range(steps_per_epoch):
            xa, ya, origins = pool_a.next_batch(cfg.batch_size)
            if pool_b is not None:
                xb, yb, origins_b = pool_b.next_batch(cfg.batch_size)
                origins = origins | origins_b

            feats_a = model.features(Tensor(xa))
            l_c = classification_loss(model.head(feats_a), ya)
            l_d = None
            if pool_b is not None:
                feats_b = model.features(Tensor(xb))
                if b_in_lc:
                    l_c = 0.5 * (l_c + classification_loss(model.head(feats_b), yb))
                if cfg.lambda_d > 0.0:
                    l_d = discrepancy(feats_a, feats_b, cfg.discrepancy)
            l_t = total_loss(l_c, l_d, cfg.lambda_d)

            opt.zero_grad()
            try:
                l_t.backward()
            except NonFiniteError as err:
                raise RuntimeError(f"training diverged at epoch {epoch} step {step}: "
                                   f"{err}") from err
            opt.step()

            history.origins_seen |= origins
            if cfg.target in origins:
                history.target_violations += 1
            history.steps.append(DGStepRecord(
                epoch, step, l_c.item(),
                0.0 if l_d is None else l_d.item(), l_t.item()))
    return model, history


def fit_classifier(datasets: list[DomainDataset], epochs: int = 20,
                   lr: float = 0.03, batch_size: int = 32, seed: int = 0,
                   momentum: float = 0.9, weight_decay: float = 5e-4) -> DGModel:
    """Plain supervised training on pooled labeled data; no stream B.

    Used for within-domain probes and as the frozen oracle classifier
    when scoring label preservation of translated images.
    """
    pool = _Pool(datasets, seed, seeding.BATCH_A)
    num_classes = int(pool.labels.max()) + 1
    spec = ImageSpec(pool.images.shape[1], pool.images.shape[2])
    model = build_classifier(spec, num_classes, seed=seeding.child_seed(seed, 30))
    opt = SGD(param_tensors(model), lr, momentum=momentum, weight_decay=weight_decay)
    steps = max(1, len(pool) // batch_size)
    for _ in range(epochs):
        for _ in range(steps):
            x, y, _ = pool.next_batch(batch_size)
            loss = classification_loss(model.logits(Tensor(x)), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    accuracy: float                 # top-1 fraction in [0, 1]
    per_class: dict[int, float]
    n: int


def evaluate(model: DGModel, dataset: DomainDataset, batch_size: int = 128
             ) -> EvalResult:
    """Top-1 accuracy of argmax logits plus a per-class breakdown."""
    correct = np.zeros(model.num_classes)
    counts = np.zeros(model.num_classes)
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            x = Tensor(dataset.images[lo:lo + batch_size])
            y = dataset.labels[lo:lo + batch_size]
            pred = np.argmax(model.logits(x).data, axis=1)
            for cls in range(model.num_classes):
                mask = y == cls
                counts[cls] += mask.sum()
                correct[cls] += (pred[mask] == cls).sum()
    per_class = {cls: float(correct[cls] / counts[cls])
                 for cls in range(model.num_classes) if counts[cls] > 0}
    return EvalResult(float(correct.sum() / counts.sum()), per_class, int(counts.sum()))


# ---------------------------------------------------------------------------
# leave-one-domain-out experiment

@dataclass(frozen=True)
class MethodSpec:
    """One column of the report: a protocol plus discrepancy settings."""
    name: str
    protocol_kind: str              # "synthetic_augmented" | "split_70_30"
    discrepancy: DiscrepancyConfig = field(default_factory=DiscrepancyConfig)
    lambda_d: float = 1.0

    def __post_init__(self):
        if self.protocol_kind not in PROTOCOL_KINDS:
            raise ValueError(f"protocol_kind must be one of {PROTOCOL_KINDS}")


def default_methods() -> list[MethodSpec]:
    return [
        MethodSpec("baseline", "split_70_30", DiscrepancyConfig(), lambda_d=0.0),
        MethodSpec("synthetic+mmd", "synthetic_augmented", DiscrepancyConfig(kind="mmd")),
        MethodSpec("synthetic+coral", "synthetic_augmented", DiscrepancyConfig(kind="coral")),
        MethodSpec("split+mmd", "split_70_30", DiscrepancyConfig(kind="mmd")),
    ]


@dataclass
class ReportRow:
    task: str
    method: str
    seed: int
    accuracy: float                 # percent
    per_class: dict[int, float]


@dataclass
class Report:
    rows: list[ReportRow] = field(default_factory=list)
    target_violations: int = 0

    def method_average(self, method: str) -> float:
        accs = [r.accuracy for r in self.rows if r.method == method]
        return float(np.mean(accs)) if accs else float("nan")

    def methods(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def method_mean_sd(self, method: str) -> tuple[float, float]:
        accs = [r.accuracy for r in self.rows if r.method == method]
        return float(np.mean(accs)), float(np.std(accs))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("task,method,seed,accuracy\n")
        for r in self.rows:
            buf.write(f"{r.task},{r.method},{r.seed},{r.accuracy:.6f}\n")
        for method in self.methods():
            buf.write(f"average,{method},,{self.method_average(method):.6f}\n")
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"rows": [{"task": r.task, "method": r.method, "seed": r.seed,
                          "accuracy": r.accuracy,
                          "per_class": {str(k): v for k, v in r.per_class.items()}}
                         for r in self.rows],
                "averages": {m: self.method_average(m) for m in self.methods()},
                "target_violations": self.target_violations}


def task_name(sources: tuple[str, ...], target: str) -> str:
    return f"{','.join(sources)} -> {target}"


def run_leave_one_out(suite: list[DomainSplit], methods: list[MethodSpec],
                      seeds: list[int],
                      base_cfg: ExperimentConfig | None = None,
                      translation_cfg: TranslationConfig | None = None,
                      translator_seed: int = 0,
                      log=None) -> Report:
    """Hold out each suite domain in turn; train every method at every seed.

    Synthetic-protocol methods share one translator per task (trained on
    that task's source train pools only) across seeds; translation is
    deterministic given the trained model.
    """
    if len(suite) < 2:
        raise ValueError("need at least 2 domains for leave-one-out")
    needs_translator = any(m.protocol_kind == "synthetic_augmented" for m in methods)
    report = Report()

    for held_out in range(len(suite)):
        target_split = suite[held_out]
        source_splits = [s for i, s in enumerate(suite) if i != held_out]
        sources = tuple(s.domain for s in source_splits)
        source_train = [s.train for s in source_splits]
        task = task_name(sources, target_split.domain)

        synthetic = None
        if needs_translator:
            tcfg = translation_cfg or TranslationConfig()
            tcfg = replace(tcfg, seed=seeding.child_seed(translator_seed, 50, held_out))
            if log:
                log(f"[{task}] training translator on {sources}")
            translator, _ = train_translator(source_train, tcfg)
            synthetic = []
            for ds in source_train:
                synthetic.extend(translate_dataset(translator, ds))

        for method in methods:
            for seed in seeds:
                proto = (Protocol.synthetic() if method.protocol_kind ==
                         "synthetic_augmented" else Protocol.split())
                base = base_cfg or ExperimentConfig(sources, target_split.domain, proto)
                cfg = replace(base, sources=sources, target=target_split.domain,
                              protocol=proto, discrepancy=method.discrepancy,
                              lambda_d=method.lambda_d, seed=seed)
                model, history = train_dg(
                    cfg, source_train,
                    synthetic=synthetic if method.protocol_kind == "synthetic_augmented"
                    else None)
                result = evaluate(model, target_split.test)
                report.rows.append(ReportRow(task, method.name, seed,
                                             100.0 * result.accuracy,
                                             result.per_class))
                report.target_violations += history.target_violations
                if log:
                    log(f"[{task}] {method.name} seed={seed}: "
                        f"{100.0 * result.accuracy:.2f}%")
    return report
