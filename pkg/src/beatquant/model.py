"""
Small encoder-decoder transformer for performance -> score token translation.

Pre-norm layers, fixed sinusoidal positions, one embedding matrix shared by
encoder input, decoder input and the output projection.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import BOS, EOS, PAD, VOCAB_SIZE, DecodeError, decode_score_tokens

CHECKPOINT_MAGIC = b"BQCKPT1\n"


_ftz_depth = 0


@contextmanager
def flush_denormals():
    """Denormal floats make CPU backward passes an order of magnitude slower."""
    global _ftz_depth
    if _ftz_depth == 0:
        torch.set_flush_denormal(True)
    _ftz_depth += 1
    try:
        yield
    finally:
        _ftz_depth -= 1
        if _ftz_depth == 0:
            torch.set_flush_denormal(False)


class ConfigError(ValueError):
    pass


class SequenceTooLongError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ffn: int = 256
    dropout: float = 0.1
    vocab_size: int = VOCAB_SIZE
    max_len: int = 512

    def validate(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size != VOCAB_SIZE:
            raise ConfigError(f"vocab_size must be {VOCAB_SIZE}, got {self.vocab_size}")
        if min(self.n_encoder_layers, self.n_decoder_layers) < 1 or self.d_ffn < 1 or self.max_len < 2:
            raise ConfigError("layer counts, d_ffn and max_len must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.float()


class Attention(nn.Module):
    # dropout lives on the residual branches only; mask sampling is slow on CPU
    def __init__(self, d_model, n_heads):
        super().__init__()
        self.h = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def _split(self, x):
        B, L, D = x.shape
        return x.view(B, L, self.h, D // self.h).transpose(1, 2)

    def keys_values(self, memory):
        return self._split(self.k(memory)), self._split(self.v(memory))

    def attend(self, x, k, v, mask):
        # mask: bool, broadcastable to (B, h, Lq, Lk); True = may attend
        B, Lq, D = x.shape
        q = self._split(self.q(x))
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.o(out.transpose(1, 2).reshape(B, Lq, D))

    def forward(self, x, memory, mask):
        return self.attend(x, *self.keys_values(memory), mask)


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ffn):
        super().__init__()
        self.up = nn.Linear(d_model, d_ffn)
        self.down = nn.Linear(d_ffn, d_model)

    def forward(self, x):
        return self.down(F.relu(self.up(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, mask))
        return x + self.drop(self.ffn(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.n_heads)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, self_mask, cross_mask):
        h = self.norm1(y)
        y = y + self.drop(self.self_attn(h, h, self_mask))
        y = y + self.drop(self.cross_attn(self.norm2(y), memory, cross_mask))
        return y + self.drop(self.ffn(self.norm3(y)))

    def step(self, y, cache, cross_mask):
        """One new position; ``cache`` holds this layer's past self keys/values and cross keys/values."""
        h = self.norm1(y)
        k, v = self.self_attn.keys_values(h)
        if "k" in cache:
            k = torch.cat([cache["k"], k], dim=2)
            v = torch.cat([cache["v"], v], dim=2)
        cache["k"], cache["v"] = k, v
        y = y + self.self_attn.attend(h, k, v, None)
        y = y + self.cross_attn.attend(self.norm2(y), cache["ck"], cache["cv"], cross_mask)
        return y + self.ffn(self.norm3(y))


class Seq2SeqTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.embedding = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_encoder_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_decoder_layers))
        self.encoder_norm = nn.LayerNorm(cfg.d_model)
        self.decoder_norm = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.register_buffer("positions", sinusoidal_positions(cfg.max_len, cfg.d_model), persistent=False)

    def _embed(self, tokens):
        x = self.embedding[tokens] * math.sqrt(self.cfg.d_model)
        return self.drop(x + self.positions[: tokens.shape[1]].to(x.dtype))

    def encode(self, src):
        key_ok = (src != PAD)[:, None, None, :]
        x = self._embed(src)
        for layer in self.encoder:
            x = layer(x, key_ok)
        return self.encoder_norm(x), key_ok

    def decode(self, tgt_in, memory, memory_mask):
        T = tgt_in.shape[1]
        causal = torch.ones(T, T, dtype=torch.bool, device=tgt_in.device).tril()
        self_mask = causal[None, None] & (tgt_in != PAD)[:, None, None, :]
        # a PAD query would otherwise see no key at all
        self_mask = self_mask | torch.eye(T, dtype=torch.bool)[None, None]
        y = self._embed(tgt_in)
        for layer in self.decoder:
            y = layer(y, memory, self_mask, memory_mask)
        return self.decoder_norm(y) @ self.embedding.t()

    def forward(self, src, tgt_in):
        memory, mask = self.encode(src)
        return self.decode(tgt_in, memory, mask)

    def start_cache(self, memory):
        caches = []
        for layer in self.decoder:
            ck, cv = layer.cross_attn.keys_values(memory)
            caches.append({"ck": ck, "cv": cv})
        return caches

    def decode_step(self, tokens, position, caches, memory_mask):
        """Logits for the next token given the newest token of each row (eval mode only)."""
        y = self.embedding[tokens][:, None] * math.sqrt(self.cfg.d_model)
        y = y + self.positions[position].to(y.dtype)
        for layer, cache in zip(self.decoder, caches):
            y = layer.step(y, cache, memory_mask)
        return (self.decoder_norm(y) @ self.embedding.t())[:, 0]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def init_model(cfg: ModelConfig, seed: int = 0) -> Seq2SeqTransformer:
    """Build a model with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; LayerNorms start at identity."""
    cfg.validate()
    model = Seq2SeqTransformer(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        bound = 1.0 / math.sqrt(cfg.d_model)
        model.embedding.uniform_(-bound, bound, generator=gen)
        for module in model.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)
    return model


def pad_batch(seqs: Sequence[Sequence[int]], max_len: int | None = None) -> torch.Tensor:
    longest = max(len(s) for s in seqs)
    if max_len is not None and longest > max_len:
        raise SequenceTooLongError(f"sequence of length {longest} exceeds max_len {max_len}")
    out = torch.full((len(seqs), longest), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def forward_loss(model: Seq2SeqTransformer, sources, targets):
    """Teacher-forced cross-entropy over non-PAD target positions.

    ``sources``/``targets`` are token lists or already padded LongTensors.
    Logits cover every target position; position t predicts token t+1.
    """
    src = sources if torch.is_tensor(sources) else pad_batch(sources, model.cfg.max_len)
    tgt = targets if torch.is_tensor(targets) else pad_batch(targets, model.cfg.max_len)
    if src.shape[1] > model.cfg.max_len or tgt.shape[1] > model.cfg.max_len:
        raise SequenceTooLongError("batch exceeds max_len; filter long sequences first")
    logits = model(src, tgt)
    labels = tgt[:, 1:]
    loss = F.cross_entropy(
        logits[:, :-1].reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=PAD
    )
    return loss, logits


@torch.no_grad()
def greedy_decode_batch(model: Seq2SeqTransformer, sources: Sequence[Sequence[int]], max_len: int | None = None):
    """Argmax decoding from BOS until EOS or ``max_len`` tokens, many sources at once."""
    max_len = min(max_len or model.cfg.max_len, model.cfg.max_len)
    was_training = model.training
    model.eval()
    try:
        with flush_denormals():
            src = pad_batch(sources, model.cfg.max_len)
            memory, mask = model.encode(src)
            caches = model.start_cache(memory)
            n = len(sources)
            out = [[BOS] for _ in range(n)]
            last = torch.full((n,), BOS, dtype=torch.long)
            done = torch.zeros(n, dtype=torch.bool)
            for pos in range(max_len - 1):
                logits = model.decode_step(last, pos, caches, mask)
                nxt = logits.argmax(-1)  # first maximal index, i.e. lowest id on ties
                for i in torch.nonzero(~done).flatten().tolist():
                    out[i].append(int(nxt[i]))
                done |= nxt == EOS
                if bool(done.all()):
                    break
                last = nxt
    finally:
        model.train(was_training)
    return out


def greedy_decode(model, source: Sequence[int], segment=None, max_len: int | None = None) -> list[int]:
    """Decode one source sequence. The output is not grammar-checked."""
    return greedy_decode_batch(model, [source], max_len)[0]


# -- checkpoints ---------------------------------------------------------------

def _digest(values) -> str:
    return hashlib.sha256(json.dumps(values).encode()).hexdigest()[:16]


def save_checkpoint(model: Seq2SeqTransformer, path, step: int = 0, loss_history: Sequence[float] = ()):
    tensors = []
    payload = bytearray()
    for name, param in model.state_dict().items():
        arr = param.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    header = {
        "format": 1,
        "config": asdict(model.cfg),
        "vocab_size": model.cfg.vocab_size,
        "step": step,
        "loss_digest": _digest([round(float(x), 8) for x in loss_history]),
        "tensors": tensors,
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(text)) + text + bytes(payload))


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[Seq2SeqTransformer, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ConfigError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<I", data[pos:pos + 4])
    header = json.loads(data[pos + 4:pos + 4 + n].decode("utf-8"))
    payload = data[pos + 4 + n:]
    cfg = ModelConfig(**header["config"])
    if expected is not None and asdict(expected) != asdict(cfg):
        raise ConfigError(f"checkpoint config {asdict(cfg)} does not match {asdict(expected)}")
    if header["vocab_size"] != VOCAB_SIZE:
        raise ConfigError("checkpoint vocabulary size mismatch")
    model = Seq2SeqTransformer(cfg)
    state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, header


# -- training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 32
    steps: int = 1000
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 500
    eval_examples: int = 64
    warmup_steps: int = 0
    time_limit_sec: float | None = None


@dataclass
class TrainReport:
    step_losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_valid_loss: float = math.inf
    best_step: int = 0
    elapsed_sec: float = 0.0

    def records(self):
        for i, loss in enumerate(self.step_losses, 1):
            yield {"kind": "step", "step": i, "loss": round(loss, 6)}
        for rec in self.evals:
            yield {"kind": "eval", **rec}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())


@torch.no_grad()
def evaluate(model, examples, batch_size: int = 32, f1_examples: int = 64) -> dict:
    """Validation loss over ``examples`` and onset F1 on the first ``f1_examples``."""
    from .metrics import f1_from_counts, onset_f1
    from .quantizer import snap_performance_tokens

    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for b in range(0, len(examples), batch_size):
        chunk = examples[b:b + batch_size]
        tgt = pad_batch([e.target for e in chunk])
        loss, _ = forward_loss(model, [e.source for e in chunk], tgt)
        n = int((tgt[:, 1:] != PAD).sum())
        total += float(loss) * n
        count += n
    matched = n_pred = n_ref = 0
    sample = list(examples[:f1_examples])
    fallbacks = 0
    for b in range(0, len(sample), batch_size):
        chunk = sample[b:b + batch_size]
        decoded = greedy_decode_batch(model, [e.source for e in chunk])
        for ex, tokens in zip(chunk, decoded):
            try:
                pred = decode_score_tokens(tokens, ex.segment)
            except DecodeError:
                fallbacks += 1
                pred = snap_performance_tokens(ex.source, ex.segment)
            report, _ = onset_f1(pred, decode_score_tokens(ex.target, ex.segment))
            matched += report.matched_count
            n_pred += report.pred_count
            n_ref += report.ref_count
    model.train(was_training)
    return {
        "valid_loss": total / max(count, 1),
        "onset_f1": f1_from_counts(matched, n_pred, n_ref)[2],
        "fallbacks": fallbacks,
    }


def _batch_digest(batch) -> str:
    return _digest([list(map(int, s)) for s in batch])


def train(model, train_set, valid_set=(), opt=None, checkpoint_path=None, log=None) -> TrainReport:
    """Adam training with gradient clipping; keeps the best-validation weights.

    Deterministic for a given seed when torch runs single-threaded. At the end
    the model holds the best-validation parameters (or the final ones when no
    validation set is given).
    """
    with flush_denormals():
        return _train(model, train_set, valid_set, opt, checkpoint_path, log)


def _train(
    model: Seq2SeqTransformer,
    train_set,
    valid_set=(),
    opt: TrainConfig | None = None,
    checkpoint_path=None,
    log: Callable[[dict], None] | None = None,
) -> TrainReport:
    opt = opt or TrainConfig()
    if not train_set:
        raise ValueError("empty training set")
    too_long = [i for i, e in enumerate(train_set)
                if max(len(e.source), len(e.target)) > model.cfg.max_len]
    if too_long:
        raise SequenceTooLongError(f"{len(too_long)} training example(s) exceed max_len")
    torch.manual_seed(opt.seed)
    rng = np.random.default_rng(opt.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=opt.lr, betas=tuple(opt.betas))
    if opt.warmup_steps:
        scheduler = torch.optim.lr_scheduler.LambdaLR(
            optimizer, lambda s: min(1.0, (s + 1) / opt.warmup_steps)
        )
    else:
        scheduler = None
    report = TrainReport()
    best_state = None
    start = time.monotonic()
    order: list[int] = []
    model.train()
    for step in range(1, opt.steps + 1):
        if len(order) < opt.batch_size:
            order += rng.permutation(len(train_set)).tolist()
        idx, order = order[: opt.batch_size], order[opt.batch_size:]
        batch = [train_set[i] for i in idx]
        loss, _ = forward_loss(model, [e.source for e in batch], [e.target for e in batch])
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {step} (batch {_batch_digest([e.source for e in batch])})"
            )
        optimizer.zero_grad()
        loss.backward()
        if opt.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), opt.grad_clip)
        optimizer.step()
        if scheduler is not None:
            scheduler.step()
        loss_value = loss.item()
        report.step_losses.append(loss_value)
        if log:
            log({"kind": "step", "step": step, "loss": round(loss_value, 6)})

        out_of_time = opt.time_limit_sec is not None and time.monotonic() - start > opt.time_limit_sec
        if valid_set and (step % opt.eval_every == 0 or step == opt.steps or out_of_time):
            result = evaluate(model, list(valid_set), opt.batch_size, opt.eval_examples)
            result = {"step": step, **{k: round(v, 6) if isinstance(v, float) else v for k, v in result.items()}}
            report.evals.append(result)
            if log:
                log({"kind": "eval", **result})
            if result["valid_loss"] < report.best_valid_loss:
                report.best_valid_loss = result["valid_loss"]
                report.best_step = step
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                if checkpoint_path:
                    save_checkpoint(model, checkpoint_path, step, report.step_losses)
        if out_of_time:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    elif checkpoint_path:
        save_checkpoint(model, checkpoint_path, len(report.step_losses), report.step_losses)
    report.elapsed_sec = time.monotonic() - start
    model.eval()
    return report
