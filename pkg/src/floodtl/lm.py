"""AWD-LSTM language model: config, training on a token stream, perplexity, checkpoints."""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .corpus import Vocabulary
from .errors import ConfigError, DataError, FormatError, NumericsError
from .numerics import (OptimizerState, RngStream, Tensor, adam_step, affine, clip_grad_norm,
                       dropout_mask, embedding_lookup, lstm_layer, mul, reshape,
                       softmax_cross_entropy, transpose)

MAGIC = b"ULMF"
FORMAT_VERSION = 1
STAGES = ("pretrained", "lm_finetuned", "classifier")


@dataclass(frozen=True)
class DropoutConfig:
    output: float = 0.4
    hidden: float = 0.3
    input: float = 0.6
    embedding: float = 0.1
    weight: float = 0.5

    def scaled(self, mult: float) -> "DropoutConfig":
        return DropoutConfig(*(mult * v for v in astuple_dropouts(self)))

    def validate(self) -> None:
        for name, p in asdict(self).items():
            if not 0 <= p < 1:
                raise ConfigError(f"dropout {name}={p} outside [0, 1)")


def astuple_dropouts(d: DropoutConfig) -> tuple:
    return (d.output, d.hidden, d.input, d.embedding, d.weight)


BASE_DROPOUTS = DropoutConfig()
NO_DROPOUT = DropoutConfig(0.0, 0.0, 0.0, 0.0, 0.0)
DROPOUT_MULT = 0.7


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    emb_dim: int = 64
    hidden_dim: int = 128
    n_layers: int = 3
    bptt_len: int = 35
    batch_size: int = 32
    dropouts: DropoutConfig = BASE_DROPOUTS.scaled(DROPOUT_MULT)
    tie_weights: bool = True
    epochs: int = 2
    base_lr: float = 3e-3
    # width of the top LSTM layer; None means emb_dim when tied, hidden_dim otherwise
    last_hidden_dim: Optional[int] = None
    clip: float = 0.25
    # embedding rows start as U(-emb_init, emb_init)
    emb_init: float = 0.1

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        for name in ("vocab_size", "emb_dim", "hidden_dim", "bptt_len", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.emb_init > 0:
            raise ConfigError("emb_init must be > 0")
        self.dropouts.validate()
        if self.tie_weights and self.layer_dims()[-1][1] != self.emb_dim:
            raise ConfigError(
                f"tie_weights needs the top layer width ({self.layer_dims()[-1][1]}) "
                f"to equal emb_dim ({self.emb_dim})")

    @property
    def top_dim(self) -> int:
        if self.last_hidden_dim is not None:
            return self.last_hidden_dim
        return self.emb_dim if self.tie_weights else self.hidden_dim

    def layer_dims(self) -> list[tuple[int, int]]:
        """(input width, hidden width) per LSTM layer."""
        dims = []
        for layer in range(self.n_layers):
            d_in = self.emb_dim if layer == 0 else dims[-1][1]
            h = self.top_dim if layer == self.n_layers - 1 else self.hidden_dim
            dims.append((d_in, h))
        return dims

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropouts"] = asdict(self.dropouts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LMConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown LM config keys: {sorted(unknown)}")
        if isinstance(d.get("dropouts"), dict):
            extra = set(d["dropouts"]) - set(DropoutConfig.__dataclass_fields__)
            if extra:
                raise ConfigError(f"unknown dropout keys: {sorted(extra)}")
            d["dropouts"] = DropoutConfig(**d["dropouts"])
        return cls(**d)


PRESETS = {
    # At desk scale the LM sits on a context-free plateau for many epochs with
    # small embeddings or any dropout; unit-variance rows (sqrt 3) and no
    # pretraining dropout get past it in a few epochs. Fine-tuning stages
    # apply their own dropout multiplier.
    "desk": dict(emb_dim=64, hidden_dim=128, n_layers=3, bptt_len=35, batch_size=32, epochs=6,
                 base_lr=1e-2, dropouts=NO_DROPOUT, emb_init=math.sqrt(3.0)),
    "paper": dict(emb_dim=400, hidden_dim=1150, n_layers=3, bptt_len=70, batch_size=70, epochs=15,
                  base_lr=1e-2),
}


def preset(name: str, vocab_size: int, **overrides) -> LMConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = LMConfig.from_dict({"vocab_size": vocab_size, **PRESETS[name], **overrides})
    cfg.validate()
    return cfg


def param_count(config: LMConfig) -> int:
    """Closed-form parameter count: embedding, stacked LSTMs (one bias per layer), decoder."""
    n = config.vocab_size * config.emb_dim
    for d_in, h in config.layer_dims():
        n += 4 * h * (d_in + h) + 4 * h
    n += config.vocab_size
    if not config.tie_weights:
        n += config.top_dim * config.vocab_size
    return n


# --- model ------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: LMConfig
    vocab: Vocabulary
    params: dict
    stage: str = "pretrained"
    log: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    # per-step (step, group, lr, loss) rows; kept in memory only
    step_log: list = field(default_factory=list, compare=False)


class LanguageModel:
    """Parameters plus forward pass of an AWD-LSTM language model."""

    def __init__(self, config: LMConfig, vocab: Optional[Vocabulary], params: dict):
        self.config = config
        self.vocab = vocab
        self.params = params

    def encoder_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("encoder.")]

    def state_arrays(self) -> dict:
        return {n: p.data for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def to_checkpoint(self, stage: str = "pretrained", log=None, meta=None) -> Checkpoint:
        return Checkpoint(self.config, self.vocab, {n: p.data.copy() for n, p in self.params.items()},
                          stage, dict(log or {}), dict(meta or {}))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "LanguageModel":
        names = expected_param_names(ckpt.config)
        missing = [n for n in names if n not in ckpt.params]
        if missing:
            raise ConfigError(f"checkpoint lacks tensors {missing}")
        return cls(ckpt.config, ckpt.vocab,
                   {n: Tensor(ckpt.params[n].copy(), requires_grad=True, name=n) for n in names})


def expected_param_names(config: LMConfig) -> list[str]:
    names = ["encoder.embedding"]
    for layer in range(config.n_layers):
        names += [f"encoder.layer{layer}.{w}" for w in ("w_ih", "w_hh", "bias")]
    names.append("decoder.bias")
    if not config.tie_weights:
        names.append("decoder.weight")
    return names


def init_encoder_params(config: LMConfig, rng: RngStream) -> dict:
    a = config.emb_init
    params = {"encoder.embedding": rng.uniform(-a, a, (config.vocab_size, config.emb_dim))}
    for layer, (d_in, h) in enumerate(config.layer_dims()):
        k = 1.0 / math.sqrt(h)
        params[f"encoder.layer{layer}.w_ih"] = rng.uniform(-k, k, (d_in, 4 * h))
        params[f"encoder.layer{layer}.w_hh"] = rng.uniform(-k, k, (h, 4 * h))
        params[f"encoder.layer{layer}.bias"] = rng.uniform(-k, k, (4 * h,))
    return params


def init_lm(config: LMConfig, seed: int = 0, vocab: Optional[Vocabulary] = None) -> LanguageModel:
    config.validate()
    if vocab is not None and len(vocab) != config.vocab_size:
        raise ConfigError(f"vocab has {len(vocab)} tokens, config says {config.vocab_size}")
    rng = RngStream(seed, 0)
    arrays = init_encoder_params(config, rng)
    arrays["decoder.bias"] = np.zeros(config.vocab_size, dtype=np.float32)
    if not config.tie_weights:
        arrays["decoder.weight"] = rng.uniform(-0.1, 0.1, (config.top_dim, config.vocab_size))
    return LanguageModel(config, vocab,
                         {n: Tensor(a, requires_grad=True, name=n) for n, a in arrays.items()})


def zero_state(config: LMConfig, batch: int, dtype=np.float32) -> list:
    return [(np.zeros((batch, h), dtype=dtype), np.zeros((batch, h), dtype=dtype))
            for _, h in config.layer_dims()]


def encode(params: dict, config: LMConfig, ids: np.ndarray, state: Optional[list],
           dropouts: Optional[DropoutConfig], rng: Optional[RngStream], start=None):
    """Run embedding + stacked LSTMs over ids [B, L].

    Returns (top-layer outputs [B, L, H_top] Tensor, detached new state).
    ``dropouts=None`` disables every dropout site. ``start`` gives per-row
    left-padding offsets (see ``lstm_layer``).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ConfigError(f"expected a [B, L] id block, got shape {ids.shape}")
    B = ids.shape[0]
    E = params["encoder.embedding"]
    if state is None:
        state = zero_state(config, B, E.dtype)
    active = dropouts is not None and rng is not None
    if active and dropouts.embedding > 0:
        E = mul(E, dropout_mask("embedding_row", dropouts.embedding, E.shape, rng, E.dtype))
    x = embedding_lookup(ids, E)
    if active and dropouts.input > 0:
        x = mul(x, dropout_mask("locked", dropouts.input, x.shape, rng, x.dtype))
    new_state = []
    for layer in range(config.n_layers):
        W_hh = params[f"encoder.layer{layer}.w_hh"]
        if active and dropouts.weight > 0:
            W_hh = mul(W_hh, dropout_mask("weight_drop", dropouts.weight, W_hh.shape, rng, W_hh.dtype))
        h0, c0 = state[layer]
        x, hT, cT = lstm_layer(x, Tensor(h0), Tensor(c0), params[f"encoder.layer{layer}.w_ih"], W_hh,
                               params[f"encoder.layer{layer}.bias"], start)
        new_state.append((hT.data, cT.data))
        if active and dropouts.hidden > 0 and layer < config.n_layers - 1:
            x = mul(x, dropout_mask("locked", dropouts.hidden, x.shape, rng, x.dtype))
    return x, new_state


def _decode(model: LanguageModel, out: Tensor, dropouts, rng) -> Tensor:
    B, L, H = out.shape
    if dropouts is not None and rng is not None and dropouts.output > 0:
        out = mul(out, dropout_mask("locked", dropouts.output, out.shape, rng, out.dtype))
    flat = reshape(out, (B * L, H))
    if model.config.tie_weights:
        W = transpose(model.params["encoder.embedding"])
    else:
        W = model.params["decoder.weight"]
    return affine(flat, W, model.params["decoder.bias"])


def lm_forward(model: LanguageModel, ids, state=None, train: bool = False,
               rng: Optional[RngStream] = None):
    """Next-token logits [B, L, V] and the carried (detached) recurrent state."""
    dropouts = model.config.dropouts if train else None
    out, new_state = encode(model.params, model.config, ids, state, dropouts, rng)
    B, L, _ = out.shape
    logits = _decode(model, out, dropouts, rng)
    return reshape(logits, (B, L, model.config.vocab_size)), new_state


def lm_loss(model: LanguageModel, inputs, targets, state=None, train: bool = False,
            rng: Optional[RngStream] = None):
    dropouts = model.config.dropouts if train else None
    out, new_state = encode(model.params, model.config, inputs, state, dropouts, rng)
    logits = _decode(model, out, dropouts, rng)
    loss, _ = softmax_cross_entropy(logits, np.asarray(targets).reshape(-1))
    return loss, new_state


# --- data layout --------------------------------------------------------------

def batchify(stream, batch_size: int, bptt_len: int, drop_last: bool = True) -> list:
    """Cut a token stream into ``batch_size`` contiguous lanes and step through them.

    Returns (input, target) int64 blocks of shape [batch_size, <= bptt_len]
    where target is input shifted by one token. Tokens that do not fill a lane
    are dropped; with ``drop_last`` a final short block is dropped too.
    """
    stream = np.asarray(stream, dtype=np.int64)
    n = stream.size
    if batch_size < 1 or bptt_len < 1:
        raise ConfigError("batch_size and bptt_len must be >= 1")
    if n < batch_size * (bptt_len + 1) and drop_last:
        raise DataError(f"token stream of length {n} is shorter than batch_size*(bptt_len+1) "
                        f"= {batch_size * (bptt_len + 1)}")
    lane = n // batch_size
    if lane < 2:
        raise DataError(f"token stream of length {n} too short for {batch_size} lanes")
    lanes = stream[: lane * batch_size].reshape(batch_size, lane)
    blocks = []
    for start in range(0, lane - 1, bptt_len):
        L = min(bptt_len, lane - 1 - start)
        if L < bptt_len and drop_last:
            break
        blocks.append((lanes[:, start:start + L], lanes[:, start + 1:start + 1 + L]))
    return blocks


# --- training -----------------------------------------------------------------

Schedule = Callable[[int, int], Union[float, Sequence[float]]]


def train_lm(model: LanguageModel, corpus, config: Optional[LMConfig] = None,
             schedule: Optional[Schedule] = None, *, valid=None, seed: int = 0,
             groups: Optional[Sequence[Sequence[str]]] = None, stage: str = "pretrained",
             epochs: Optional[int] = None, on_epoch=None) -> Checkpoint:
    """Truncated-BPTT training over a token-id stream.

    ``schedule(step, total_steps)`` returns one learning rate, or one per entry
    of ``groups`` (lists of parameter names). Default: constant ``base_lr``.
    Records per-epoch mean training loss and, when ``valid`` is given,
    held-out perplexity. A NumericsError is re-raised with the last completed
    epoch's checkpoint attached.
    """
    config = config or model.config
    epochs = config.epochs if epochs is None else epochs
    if groups is None:
        groups = [list(model.params)]
    blocks = batchify(corpus, config.batch_size, config.bptt_len)
    total = epochs * len(blocks)
    schedule = schedule or (lambda t, T: config.base_lr)
    rng = RngStream(seed, 1)
    opt = OptimizerState()
    log = {"epochs": []}
    if valid is not None:
        log["initial_valid_ppl"] = perplexity(model, valid)
    step_log = []
    last_good = model.to_checkpoint(stage, log)
    step = 0
    group_of = {n: g for g, names in enumerate(groups) for n in names}
    for epoch in range(epochs):
        state = None
        losses = []
        try:
            for inp, tgt in blocks:
                lrs = schedule(step, total)
                if np.isscalar(lrs):
                    lrs = [float(lrs)] * len(groups)
                loss, state = lm_loss(model, inp, tgt, state, train=True, rng=rng)
                loss.backward()
                grads = {n: p.grad for n, p in model.params.items() if n in group_of and p.grad is not None}
                clip_grad_norm(grads, config.clip)
                adam_step(model.params, grads, opt, {n: lrs[group_of[n]] for n in grads})
                model.zero_grad()
                lv = loss.item()
                losses.append(lv)
                for g, lr in enumerate(lrs):
                    step_log.append((step, g, lr, lv))
                step += 1
            entry = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
            if valid is not None:
                entry["valid_ppl"] = perplexity(model, valid)
        except NumericsError as exc:
            raise NumericsError(str(exc), checkpoint=last_good) from exc
        log["epochs"].append(entry)
        last_good = model.to_checkpoint(stage, log)
        if on_epoch is not None:
            on_epoch(entry)
    ckpt = model.to_checkpoint(stage, log)
    ckpt.step_log = step_log
    return ckpt


def perplexity(model, corpus, lanes: int = 1, bptt_len: Optional[int] = None) -> float:
    """exp(mean next-token cross-entropy) over the stream, dropouts off.

    With one lane every token after the first is scored exactly once.
    """
    if isinstance(model, Checkpoint):
        model = LanguageModel.from_checkpoint(model)
    stream = np.asarray(corpus, dtype=np.int64)
    if stream.size < 2 * lanes:
        raise DataError("perplexity needs at least two tokens per lane")
    bptt = bptt_len or model.config.bptt_len
    blocks = batchify(stream, lanes, bptt, drop_last=False)
    total, count = 0.0, 0
    state = None
    for p in model.params.values():
        p.requires_grad = False
    try:
        for inp, tgt in blocks:
            loss, state = lm_loss(model, inp, tgt, state)
            total += float(loss.data) * tgt.size
            count += tgt.size
    finally:
        for p in model.params.values():
            p.requires_grad = True
    mean = total / count
    if not mean < 709.0:  # exp overflows float64 beyond this
        raise NumericsError(f"perplexity overflow: mean cross-entropy {mean:.4g}")
    return math.exp(mean)


# --- serialization ----------------------------------------------------------

def _section(buf: io.BytesIO, payload: bytes) -> None:
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    if ckpt.stage not in STAGES:
        raise ConfigError(f"unknown checkpoint stage {ckpt.stage!r}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.format_version))
    _section(buf, _canonical({"lm": ckpt.config.to_dict(), "stage": ckpt.stage, "meta": ckpt.meta}))
    _section(buf, _canonical({"tokens": ckpt.vocab.token_of, "min_freq": ckpt.vocab.min_freq,
                              "max_size": ckpt.vocab.max_size}))
    tens = io.BytesIO()
    tens.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        tens.write(struct.pack("<H", len(raw)))
        tens.write(raw)
        tens.write(struct.pack("<B", a.ndim))
        tens.write(struct.pack(f"<{a.ndim}I", *a.shape))
        tens.write(a.tobytes())
    _section(buf, tens.getvalue())
    _section(buf, _canonical(ckpt.log))
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes, where: str):
        self.data, self.pos, self.where = data, 0, where

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.where}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def section(self) -> bytes:
        (n,) = self.unpack("<Q")
        return self.take(n)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such checkpoint: {path}")
    return checkpoint_from_bytes(path.read_bytes(), str(path))


def checkpoint_from_bytes(data: bytes, where: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, where)
    if r.take(4) != MAGIC:
        raise FormatError(f"{where}: bad magic, not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"{where}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    try:
        head = json.loads(r.section())
        voc = json.loads(r.section())
        tens = _Reader(r.section(), where)
        (count,) = tens.unpack("<I")
        params = {}
        for _ in range(count):
            (nlen,) = tens.unpack("<H")
            name = tens.take(nlen).decode("utf-8")
            (ndim,) = tens.unpack("<B")
            shape = tens.unpack(f"<{ndim}I")
            size = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(tens.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        log = json.loads(r.section())
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{where}: corrupt checkpoint ({exc})") from None
    if r.pos != len(data):
        raise FormatError(f"{where}: trailing bytes after checkpoint")
    config = LMConfig.from_dict(head["lm"])
    vocab = Vocabulary(voc["tokens"], voc["min_freq"], voc["max_size"])
    return Checkpoint(config, vocab, params, head["stage"], log, head.get("meta", {}), version)
