"""Fine-tuning: target-domain LM adaptation and the pooled-LSTM classifier.

Schedules are slanted triangular (short linear warm-up, long linear decay),
scaled per layer group by a discriminative factor, and the classifier is
unfrozen one layer group per epoch from the head downwards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .corpus import PAD, CleanTweet, Label, Vocabulary, clean_text, numericalize, tokenize
from .errors import ConfigError, DataError, LabelError, NumericsError
from .lm import (BASE_DROPOUTS, astuple_dropouts, DROPOUT_MULT, Checkpoint, DropoutConfig, LanguageModel, LMConfig,
                 encode, train_lm)
from .numerics import (OptimizerState, RngStream, Tensor, adam_step, affine, concat_pool,
                       dropout_mask, mul, relu, softmax_cross_entropy)
from .numerics.tensor import check_finite


@dataclass(frozen=True)
class StlrConfig:
    lr_max: float = 0.01
    cut_frac: float = 0.1
    ratio: float = 32.0
    total_steps: int = 100

    def validate(self) -> None:
        if not self.lr_max > 0:
            raise ConfigError(f"lr_max must be positive, got {self.lr_max}")
        if not 0 < self.cut_frac < 1:
            raise ConfigError(f"cut_frac must be in (0, 1), got {self.cut_frac}")
        if not self.ratio > 1:
            raise ConfigError(f"ratio must be > 1, got {self.ratio}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")

    @property
    def cut(self) -> int:
        return math.floor(self.cut_frac * self.total_steps)


def stlr(t: int, cfg: StlrConfig) -> float:
    """Slanted triangular learning rate at step t of cfg.total_steps.

    Rises linearly from lr_max/ratio to lr_max at step cut = floor(cut_frac*T),
    then falls linearly back to lr_max/ratio at step T.
    """
    cfg.validate()
    T = cfg.total_steps
    if not 0 <= t <= T:
        raise ConfigError(f"step {t} outside [0, {T}]")
    cut = cfg.cut
    if t < cut:
        p = t / cut
    else:
        # decay length T - cut; equals cut*(1/cut_frac - 1) whenever cut_frac*T is whole
        p = 1 - (t - cut) / (T - cut)
    return cfg.lr_max * (1 + p * (cfg.ratio - 1)) / cfg.ratio


def discriminative_lrs(base_lr: float, n_groups: int, factor: float) -> list[float]:
    """Per-group rates ordered head first: base_lr / factor**k."""
    if n_groups < 1:
        raise ConfigError(f"n_groups must be >= 1, got {n_groups}")
    if not factor > 1:
        raise ConfigError(f"discriminative factor must be > 1, got {factor}")
    if not base_lr > 0:
        raise ConfigError(f"base_lr must be positive, got {base_lr}")
    return [base_lr / factor ** k for k in range(n_groups)]


def layer_groups(param_names: Sequence[str], n_layers: int) -> list[list[str]]:
    """Partition parameter names, deepest first: [embedding+layer0, layer1, ..., head].

    The head group holds every name not under ``encoder.`` (decoder or
    classifier head).
    """
    groups: list[list[str]] = [[] for _ in range(n_layers + 1)]
    for name in param_names:
        if name == "encoder.embedding":
            groups[0].append(name)
        elif name.startswith("encoder.layer"):
            groups[int(name.split(".")[1][len("layer"):])].append(name)
        else:
            groups[-1].append(name)
    return groups


@dataclass(frozen=True)
class FineTunePlan:
    stage: str = "classifier"
    stlr: StlrConfig = StlrConfig()
    disc_factor: float = 2.6
    epochs: int = 4
    unfreeze_policy: str = "gradual"
    frozen_groups_initial: Optional[int] = None  # None: all but the head
    batch_size: int = 16
    dropout_mult: float = DROPOUT_MULT

    def validate(self) -> None:
        if self.stage not in ("lm_finetune", "classifier"):
            raise ConfigError(f"unknown plan stage {self.stage!r}")
        if not self.disc_factor > 1:
            raise ConfigError(f"disc_factor must be > 1, got {self.disc_factor}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.unfreeze_policy not in ("all_at_once", "gradual"):
            raise ConfigError(f"unknown unfreeze policy {self.unfreeze_policy!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.dropout_mult < 1 / max(astuple_dropouts(BASE_DROPOUTS)):
            raise ConfigError(f"dropout_mult {self.dropout_mult} pushes a dropout to >= 1")

    def frozen_at(self, epoch: int, n_groups: int) -> int:
        """Number of deepest groups frozen during 0-based ``epoch``."""
        if self.unfreeze_policy == "all_at_once":
            return 0
        start = n_groups - 1 if self.frozen_groups_initial is None else self.frozen_groups_initial
        return max(0, min(n_groups - 1, start) - epoch)

    def schedule(self, total_steps: int) -> StlrConfig:
        return replace(self.stlr, total_steps=max(1, total_steps))


LM_FINETUNE_PLAN = FineTunePlan(stage="lm_finetune", stlr=StlrConfig(lr_max=0.01), epochs=2,
                                unfreeze_policy="all_at_once", batch_size=32)
# gradual unfreezing reaches the embedding group in epoch 4; the remaining
# epochs train everything, which small label sets need to converge
CLASSIFIER_PLAN = FineTunePlan(stage="classifier", stlr=StlrConfig(lr_max=0.03), epochs=10,
                               batch_size=8)


def group_lrs(t: int, sched: StlrConfig, n_groups: int, factor: float) -> list[float]:
    """Learning rate of each group at step t, deepest group first."""
    return discriminative_lrs(stlr(t, sched), n_groups, factor)[::-1]


# --- stage 2: language model fine-tuning -------------------------------------

def finetune_lm(pretrained: Checkpoint, target_stream, plan: FineTunePlan = LM_FINETUNE_PLAN, *,
                seed: int = 0, valid=None) -> Checkpoint:
    """Adapt a pretrained LM to target-domain text (ids under the pretrained vocab)."""
    plan.validate()
    if plan.stage != "lm_finetune":
        raise ConfigError(f"finetune_lm needs an lm_finetune plan, got {plan.stage!r}")
    if pretrained.stage not in ("pretrained", "lm_finetuned"):
        raise ConfigError(f"cannot fine-tune a {pretrained.stage!r} checkpoint as a language model")
    stream = np.asarray(target_stream, dtype=np.int64)
    if stream.size and (stream.min() < 0 or stream.max() >= pretrained.config.vocab_size):
        raise ConfigError("target ids fall outside the pretrained vocabulary; numericalize with its vocab")
    model = LanguageModel.from_checkpoint(pretrained)
    config = replace(model.config, batch_size=plan.batch_size,
                     dropouts=BASE_DROPOUTS.scaled(plan.dropout_mult))
    groups = layer_groups(list(model.params), config.n_layers)
    n_groups = len(groups)

    def schedule(t, T):
        return group_lrs(t, plan.schedule(T), n_groups, plan.disc_factor)

    ckpt = train_lm(model, stream, config, schedule, valid=valid, seed=seed, groups=groups,
                    stage="lm_finetuned", epochs=plan.epochs)
    ckpt.config = pretrained.config
    ckpt.meta = {**pretrained.meta, "lm_finetune_epochs": plan.epochs}
    return ckpt


# --- stage 3: classifier -----------------------------------------------------

class ClassifierModel:
    """LM encoder + concat pooling + two-layer head producing Unrelated/Related logits."""

    n_classes = 2

    def __init__(self, config: LMConfig, vocab: Vocabulary, params: dict, head_hidden: int,
                 dropouts: DropoutConfig):
        self.config = config
        self.vocab = vocab
        self.params = params
        self.head_hidden = head_hidden
        self.dropouts = dropouts
        self.log: dict = {"epochs": []}
        self.step_log: list = []

    @property
    def feature_dim(self) -> int:
        return 3 * self.config.top_dim

    def groups(self) -> list[list[str]]:
        return layer_groups(list(self.params), self.config.n_layers)

    def copy(self) -> "ClassifierModel":
        params = {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.params.items()}
        return ClassifierModel(self.config, self.vocab, params, self.head_hidden, self.dropouts)

    def encode_batch(self, id_lists: Sequence[Sequence[int]]):
        lengths = np.array([len(x) for x in id_lists], dtype=np.int64)
        L = int(lengths.max())
        ids = np.full((len(id_lists), L), PAD, dtype=np.int64)
        for b, x in enumerate(id_lists):
            ids[b, L - len(x):] = x
        return ids, lengths

    def forward(self, ids, lengths, train: bool = False, rng: Optional[RngStream] = None) -> Tensor:
        active = train and rng is not None
        start = ids.shape[1] - np.asarray(lengths)
        out, _ = encode(self.params, self.config, ids, None, self.dropouts if active else None, rng, start)
        x = concat_pool(out, lengths)
        p = self.dropouts.output
        if active and p > 0:
            x = mul(x, dropout_mask("standard", p, x.shape, rng, x.dtype))
        x = relu(affine(x, self.params["head.hidden.weight"], self.params["head.hidden.bias"]))
        if active and p > 0:
            x = mul(x, dropout_mask("standard", p, x.shape, rng, x.dtype))
        return affine(x, self.params["head.out.weight"], self.params["head.out.bias"])

    def batch_loss(self, records: Sequence[CleanTweet], train: bool = False,
                   rng: Optional[RngStream] = None) -> Tensor:
        ids, lengths = self.encode_batch([numericalize(r, self.vocab, add_bounds=True) for r in records])
        logits = self.forward(ids, lengths, train, rng)
        loss, _ = softmax_cross_entropy(logits, [_label_of(r).index for r in records])
        return loss

    def to_checkpoint(self, meta: Optional[dict] = None) -> Checkpoint:
        meta = {"head_hidden": self.head_hidden, "dropouts": astuple_dropouts(self.dropouts), **(meta or {})}
        return Checkpoint(self.config, self.vocab, {n: p.data.copy() for n, p in self.params.items()},
                          "classifier", {"epochs": list(self.log.get("epochs", []))}, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ClassifierModel":
        if ckpt.stage != "classifier":
            raise ConfigError(f"expected a classifier checkpoint, got stage {ckpt.stage!r}")
        names = [n for n in ckpt.params if n.startswith(("encoder.", "head."))]
        params = {n: Tensor(ckpt.params[n].copy(), requires_grad=True, name=n) for n in names}
        model = cls(ckpt.config, ckpt.vocab, params, int(ckpt.meta["head_hidden"]),
                    DropoutConfig(*ckpt.meta["dropouts"]))
        model.log = dict(ckpt.log)
        return model


def _label_of(r: CleanTweet) -> Label:
    if r.label is None:
        raise LabelError(f"record {r.id!r} has no label")
    return r.label


def build_classifier(encoder: Checkpoint, head_hidden: int = 50, seed: int = 0,
                     dropout_mult: float = DROPOUT_MULT) -> ClassifierModel:
    if encoder.stage not in ("pretrained", "lm_finetuned"):
        raise ConfigError(f"classifier encoder must come from an LM checkpoint, got stage {encoder.stage!r}")
    config = encoder.config
    needed = ["encoder.embedding"] + [f"encoder.layer{k}.{w}" for k in range(config.n_layers)
                                      for w in ("w_ih", "w_hh", "bias")]
    missing = [n for n in needed if n not in encoder.params]
    if missing:
        raise ConfigError(f"encoder checkpoint lacks tensors {missing}")
    params = {n: Tensor(encoder.params[n].copy(), requires_grad=True, name=n) for n in needed}
    rng = RngStream(seed, 2)
    fin = 3 * config.top_dim
    for name, (i, o) in (("hidden", (fin, head_hidden)), ("out", (head_hidden, ClassifierModel.n_classes))):
        k = 1 / math.sqrt(i)
        params[f"head.{name}.weight"] = Tensor(rng.uniform(-k, k, (i, o)), requires_grad=True)
        params[f"head.{name}.bias"] = Tensor(np.zeros(o, dtype=np.float32), requires_grad=True)
    return ClassifierModel(config, encoder.vocab, params, head_hidden, BASE_DROPOUTS.scaled(dropout_mult))


def _batches(n: int, batch_size: int, rng: RngStream) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train_classifier(model: ClassifierModel, train: Sequence[CleanTweet],
                     plan: FineTunePlan = CLASSIFIER_PLAN, seed: int = 0, on_epoch=None) -> ClassifierModel:
    """Fine-tune ``model`` in place on labeled tweets and return it.

    During 0-based epoch e the deepest ``plan.frozen_at(e)`` groups receive
    no updates. Group k counted from the head trains at stlr(t) / factor**k.
    Per-step (step, group, lr, loss) rows are appended to ``model.step_log``,
    with groups indexed deepest first.
    """
    plan.validate()
    if plan.stage != "classifier":
        raise ConfigError(f"train_classifier needs a classifier plan, got {plan.stage!r}")
    for r in train:
        _label_of(r)
    if not train:
        raise DataError("no labeled training records")
    model.dropouts = BASE_DROPOUTS.scaled(plan.dropout_mult)
    groups = model.groups()
    n_groups = len(groups)
    rng = RngStream(seed, 3)
    steps_per_epoch = math.ceil(len(train) / plan.batch_size)
    sched = plan.schedule(plan.epochs * steps_per_epoch)
    opt = OptimizerState()
    step = 0
    try:
        for epoch in range(plan.epochs):
            frozen = plan.frozen_at(epoch, n_groups)
            trainable = {n for g in groups[frozen:] for n in g}
            for n, p in model.params.items():
                p.requires_grad = n in trainable
            losses = []
            for idx in _batches(len(train), plan.batch_size, rng):
                lrs = group_lrs(step, sched, n_groups, plan.disc_factor)
                loss = model.batch_loss([train[i] for i in idx], train=True, rng=rng)
                loss.backward()
                grads = {n: p.grad for n, p in model.params.items() if n in trainable and p.grad is not None}
                lr_of = {n: lrs[g] for g in range(frozen, n_groups) for n in groups[g]}
                adam_step(model.params, grads, opt, {n: lr_of[n] for n in grads})
                for p in model.params.values():
                    p.grad = None
                lv = loss.item()
                losses.append(lv)
                model.step_log.extend((step, g, lrs[g], lv) for g in range(frozen, n_groups))
                step += 1
            entry = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "frozen_groups": frozen}
            model.log.setdefault("epochs", []).append(entry)
            if on_epoch is not None:
                on_epoch(entry, model)
    finally:
        for p in model.params.values():
            p.requires_grad = True
    return model


def lr_range_test(model, data: Sequence, lr_min: float = 1e-5, lr_max: float = 0.1,
                  n_points: int = 100, *, batch_size: int = 16, seed: int = 0,
                  optimizer: str = "adam", beta: float = 0.98, stop_factor: float = 4.0) -> list[tuple]:
    """Sweep a geometric LR grid, one mini-batch step per point, on a copy of ``model``.

    ``model`` needs ``copy()``, ``params`` and ``batch_loss(records, train, rng)``.
    Returns (lr, smoothed loss) per grid point. Once the smoothed loss exceeds
    ``stop_factor`` times its best value, or goes non-finite, sweeping stops and
    the remaining points are reported with loss ``inf``.
    """
    if not (0 < lr_min < lr_max):
        raise ConfigError(f"need 0 < lr_min < lr_max, got {lr_min}, {lr_max}")
    if n_points < 2:
        raise ConfigError("n_points must be >= 2")
    if optimizer not in ("adam", "sgd"):
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    if not data:
        raise DataError("lr_range_test needs data")
    lrs = lr_min * (lr_max / lr_min) ** (np.arange(n_points) / (n_points - 1))
    lrs[0], lrs[-1] = lr_min, lr_max
    work = model.copy()
    rng = RngStream(seed, 4)
    opt = OptimizerState()
    batches: list = []
    avg, best = 0.0, math.inf
    out = []
    diverged = False
    for k, lr in enumerate(lrs):
        if diverged:
            out.append((float(lr), math.inf))
            continue
        if not batches:
            batches = _batches(len(data), batch_size, rng)
        idx = batches.pop(0)
        try:
            loss = work.batch_loss([data[i] for i in idx], train=True, rng=rng)
            loss.backward()
            grads = {n: p.grad for n, p in work.params.items() if p.grad is not None}
            if optimizer == "adam":
                adam_step(work.params, grads, opt, float(lr))
            else:
                for n, g in grads.items():
                    work.params[n].data -= (lr * check_finite(g, "sgd")).astype(work.params[n].dtype)
            for p in work.params.values():
                p.grad = None
            lv = loss.item()
        except NumericsError:
            lv = math.inf
        if not math.isfinite(lv):
            diverged = True
            out.append((float(lr), math.inf))
            continue
        avg = beta * avg + (1 - beta) * lv
        smooth = avg / (1 - beta ** (k + 1))
        out.append((float(lr), smooth))
        best = min(best, smooth)
        if smooth > stop_factor * best:
            diverged = True
    return out


# --- inference ----------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    related: float
    unrelated: float
    empty_input: bool = False

    def as_dict(self) -> dict:
        return {Label.RELATED.value: self.related, Label.UNRELATED.value: self.unrelated}


def _probs(model: ClassifierModel, id_lists) -> np.ndarray:
    """P(Related) per id list. Lists are batched only with others of equal
    length, so no padding enters the encoder; batch composition changes
    results only at float32 rounding level."""
    out = np.empty(len(id_lists), dtype=np.float64)
    by_len: dict = {}
    for i, x in enumerate(id_lists):
        by_len.setdefault(len(x), []).append(i)
    saved = [p.requires_grad for p in model.params.values()]
    for p in model.params.values():
        p.requires_grad = False
    try:
        for _, idx in sorted(by_len.items()):
            for s in range(0, len(idx), 256):
                chunk = idx[s:s + 256]
                ids, lengths = model.encode_batch([id_lists[i] for i in chunk])
                logits = model.forward(ids, lengths).data.astype(np.float64)
                z = logits - logits.max(axis=1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
                out[chunk] = p[:, Label.RELATED.index]
    finally:
        for p, s in zip(model.params.values(), saved):
            p.requires_grad = s
    return out


def predict_proba(model: ClassifierModel, records: Sequence[CleanTweet]) -> np.ndarray:
    return _probs(model, [numericalize(r, model.vocab, add_bounds=True) for r in records])


def predict(model: ClassifierModel, text: str) -> Prediction:
    toks = tokenize(clean_text(text, "model"))
    p = float(_probs(model, [numericalize(toks, model.vocab, add_bounds=True)])[0])
    return Prediction(p, 1.0 - p, empty_input=not toks)


def evaluate_loss(model: ClassifierModel, records: Sequence[CleanTweet]) -> float:
    """Mean cross-entropy with dropout off."""
    p = np.clip(predict_proba(model, records), 1e-12, 1 - 1e-12)
    y = np.array([_label_of(r).index for r in records])
    return float(-np.mean(np.where(y == 1, np.log(p), np.log1p(-p))))
