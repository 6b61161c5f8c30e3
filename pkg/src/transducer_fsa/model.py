"""A desk-scale stateless transducer in numpy.

Encoder: two tanh layers applied per frame.  Decoder: embeddings of the last
two tokens combined by one tanh layer.  Joiner: projected sum, tanh, output
layer, log-softmax.  Two extra linear heads give the encoder-only and
decoder-only log-probs used by the trivial-joiner regularizer.

Dense layers accumulate over the input dimension in a fixed order so every
output row is bit-identical no matter how many rows are computed together.
Batched and single-utterance decoding depend on that.
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .loss import (
    GridGradient,
    LogProbGrid,
    UndefinedGradientError,
    Variant,
    combined_loss,
    grid_from_logprobs,
    trivial_joiner_full,
)

log = logging.getLogger(__name__)

DTYPE = np.float32
BLANK = 0


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 6
    feat_dim: int = 12
    enc_dim: int = 32
    emb_dim: int = 16
    joiner_dim: int = 32
    context_size: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (blank plus one token)")
        if self.context_size != 2:
            raise ValueError("only context_size=2 is supported")
        for name in ("feat_dim", "enc_dim", "emb_dim", "joiner_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class Context(NamedTuple):
    a: int
    b: int

    def pack(self, vocab_size: int) -> int:
        return self.a * vocab_size + self.b

    @classmethod
    def unpack(cls, packed: int, vocab_size: int) -> "Context":
        if not 0 <= packed < vocab_size * vocab_size:
            raise ValueError(f"packed context {packed} out of range for V={vocab_size}")
        return cls(*divmod(int(packed), vocab_size))


INITIAL_CONTEXT = 0  # (blank, blank)


def next_context(packed, token, vocab_size: int):
    """Context after emitting ``token``: (a, b) -> (b, token).  Works on arrays."""
    return (packed % vocab_size) * vocab_size + token


def prefix_contexts(targets: Sequence[int], vocab_size: int) -> np.ndarray:
    """Packed context for each prefix length u = 0..U."""
    ctx = [INITIAL_CONTEXT]
    for tok in targets:
        ctx.append(next_context(ctx[-1], int(tok), vocab_size))
    return np.asarray(ctx, dtype=np.int64)


# name -> (shape from cfg, fan_in from cfg)
def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    V, F, E, D, J = cfg.vocab_size, cfg.feat_dim, cfg.enc_dim, cfg.emb_dim, cfg.joiner_dim
    return [
        ("enc_w1", (F, E), F),
        ("enc_b1", (E,), F),
        ("enc_w2", (E, E), E),
        ("enc_b2", (E,), E),
        ("embed", (V, D), 1),
        ("dec_w", (2 * D, D), 2 * D),
        ("dec_b", (D,), 2 * D),
        ("join_enc_w", (E, J), E),
        ("join_dec_w", (D, J), D),
        ("join_b", (J,), E + D),
        ("join_out_w", (J, V), J),
        ("join_out_b", (V,), J),
        ("simple_enc_w", (E, V), E),
        ("simple_enc_b", (V,), E),
        ("simple_dec_w", (D, V), D),
        ("simple_dec_b", (V,), D),
    ]


@dataclass
class ToyTransducer:
    cfg: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def encode(self, features: np.ndarray) -> np.ndarray:
        return encoder_forward(self, features)

    def decode(self, contexts) -> np.ndarray:
        return decoder_forward(self, contexts)

    def join(self, enc_rows: np.ndarray, dec_rows: np.ndarray) -> np.ndarray:
        return joiner_forward(self, enc_rows, dec_rows)

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    def copy(self) -> "ToyTransducer":
        return ToyTransducer(self.cfg, {k: v.copy() for k, v in self.params.items()})


def init_model(cfg: ModelConfig) -> ToyTransducer:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape, fan_in in _param_specs(cfg):
        s = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-s, s, size=shape).astype(DTYPE)
    return ToyTransducer(cfg, params)


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    out = np.zeros(x.shape[:-1] + (w.shape[1],), dtype=DTYPE)
    if b is not None:
        out += b
    for k in range(w.shape[0]):
        out += x[..., k, None] * w[k]
    return out


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def encoder_forward(model: ToyTransducer, features: np.ndarray) -> np.ndarray:
    """T x enc_dim, one row per feature frame (no subsampling)."""
    p = model.params
    x = np.asarray(features, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != model.cfg.feat_dim:
        raise ValueError(f"expected T x {model.cfg.feat_dim} features, got shape {x.shape}")
    h = np.tanh(_affine(x, p["enc_w1"], p["enc_b1"]))
    return np.tanh(_affine(h, p["enc_w2"], p["enc_b2"]))


def decoder_forward(model: ToyTransducer, contexts) -> np.ndarray:
    """One output row per packed context; each row depends only on its context."""
    V = model.cfg.vocab_size
    ctx = np.asarray(contexts, dtype=np.int64).reshape(-1)
    if ctx.size and (ctx.min() < 0 or ctx.max() >= V * V):
        raise ValueError(f"packed contexts must lie in [0, {V * V})")
    p = model.params
    a, b = np.divmod(ctx, V)
    emb = np.concatenate([p["embed"][a], p["embed"][b]], axis=-1)
    return np.tanh(_affine(emb, p["dec_w"], p["dec_b"]))


def project_encoder(model: ToyTransducer, enc: np.ndarray) -> np.ndarray:
    return _affine(enc, model.params["join_enc_w"], None)


def project_decoder(model: ToyTransducer, dec: np.ndarray) -> np.ndarray:
    return _affine(dec, model.params["join_dec_w"], model.params["join_b"])


def join_projected(model: ToyTransducer, enc_proj: np.ndarray, dec_proj: np.ndarray) -> np.ndarray:
    h = np.tanh(enc_proj + dec_proj)
    return _log_softmax(_affine(h, model.params["join_out_w"], model.params["join_out_b"]))


def joiner_forward(model: ToyTransducer, enc_rows: np.ndarray, dec_rows: np.ndarray) -> np.ndarray:
    """Log-probs over the vocabulary; inputs broadcast row-wise."""
    enc_rows = np.asarray(enc_rows, dtype=DTYPE)
    dec_rows = np.asarray(dec_rows, dtype=DTYPE)
    if enc_rows.shape[-1] != model.cfg.enc_dim or dec_rows.shape[-1] != model.cfg.emb_dim:
        raise ValueError("joiner input dimensions do not match the model")
    return join_projected(model, project_encoder(model, enc_rows), project_decoder(model, dec_rows))


def simple_logprobs(model: ToyTransducer, enc: np.ndarray, dec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = model.params
    enc_lp = _log_softmax(_affine(enc, p["simple_enc_w"], p["simple_enc_b"]))
    dec_lp = _log_softmax(_affine(dec, p["simple_dec_w"], p["simple_dec_b"]))
    return enc_lp, dec_lp


def _check_targets(targets: Sequence[int], V: int) -> np.ndarray:
    y = np.asarray(targets, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 1 or y.max() >= V):
        raise ValueError("targets must be blank-free token ids in [1, V)")
    return y


def full_logprobs(model: ToyTransducer, features: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """T x (U+1) x V joiner log-probs over all (frame, target prefix) pairs."""
    y = _check_targets(targets, model.cfg.vocab_size)
    enc = encoder_forward(model, features)
    dec = decoder_forward(model, prefix_contexts(y, model.cfg.vocab_size))
    ep = project_encoder(model, enc)
    dp = project_decoder(model, dec)
    return join_projected(model, ep[:, None, :], dp[None, :, :])


def full_grid(model: ToyTransducer, features: np.ndarray, targets: Sequence[int]) -> LogProbGrid:
    return grid_from_logprobs(full_logprobs(model, features, targets).astype(np.float64), targets)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    variant: str = "constrained"
    lm_scale: float = 0.25
    lambda_simple: float = 0.5
    lr: float = 0.02
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0


@dataclass
class TrainResult:
    model: ToyTransducer
    loss_history: list[float]
    skipped: int


def _grad_scatter(d: GridGradient, targets: np.ndarray, V: int) -> np.ndarray:
    T, U1 = d.d_blank.shape
    G = np.zeros((T, U1, V))
    G[:, :, BLANK] = d.d_blank
    if len(targets):
        G[:, np.arange(U1 - 1), targets] += d.d_symbol
    return G


def _softmax_backward(logp: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given gradient w.r.t. log-softmax outputs."""
    return g - np.exp(logp) * g.sum(axis=-1, keepdims=True)


def loss_and_grads(
    model: ToyTransducer,
    features: np.ndarray,
    targets: Sequence[int],
    variant: Variant | str,
    lm_scale: float,
    lambda_simple: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """Combined loss for one utterance and its parameter gradients (float64)."""
    p = {k: v.astype(np.float64) for k, v in model.params.items()}
    V = model.cfg.vocab_size
    y = _check_targets(targets, V)
    x = np.asarray(features, dtype=DTYPE)

    h1 = np.tanh(_affine(x, model.params["enc_w1"], model.params["enc_b1"]))
    enc = np.tanh(_affine(h1, model.params["enc_w2"], model.params["enc_b2"]))
    ctx = prefix_contexts(y, V)
    a_idx, b_idx = np.divmod(ctx, V)
    cat = np.concatenate([model.params["embed"][a_idx], model.params["embed"][b_idx]], axis=-1)
    dec = np.tanh(_affine(cat, model.params["dec_w"], model.params["dec_b"]))
    ep = project_encoder(model, enc)
    dp = project_decoder(model, dec)
    hj = np.tanh(ep[:, None, :] + dp[None, :, :])
    logp = _log_softmax(_affine(hj, model.params["join_out_w"], model.params["join_out_b"])).astype(np.float64)
    enc_lp, dec_lp = simple_logprobs(model, enc, dec)
    enc_lp = enc_lp.astype(np.float64)
    dec_lp = dec_lp.astype(np.float64)
    tlogp = trivial_joiner_full(enc_lp, dec_lp, lm_scale)

    res = combined_loss(grid_from_logprobs(logp, y), grid_from_logprobs(tlogp, y), variant, lambda_simple)

    enc, dec, h1, hj, cat = (a.astype(np.float64) for a in (enc, dec, h1, hj, cat))
    g: dict[str, np.ndarray] = {}
    dlogits = _softmax_backward(logp, _grad_scatter(res.d_full, y, V))
    J = hj.shape[-1]
    g["join_out_w"] = hj.reshape(-1, J).T @ dlogits.reshape(-1, V)
    g["join_out_b"] = dlogits.sum(axis=(0, 1))
    dpre = (dlogits @ p["join_out_w"].T) * (1.0 - hj**2)
    g["join_b"] = dpre.sum(axis=(0, 1))
    dep = dpre.sum(axis=1)
    ddp = dpre.sum(axis=0)
    g["join_enc_w"] = enc.T @ dep
    g["join_dec_w"] = dec.T @ ddp
    denc = dep @ p["join_enc_w"].T
    ddec = ddp @ p["join_dec_w"].T

    dz = _softmax_backward(tlogp, _grad_scatter(res.d_trivial, y, V))
    d_enc_lp = dz.sum(axis=1)
    d_dec_lp = (1.0 + lm_scale) * dz.sum(axis=0)
    d_enc_logits = _softmax_backward(enc_lp, d_enc_lp)
    d_dec_logits = _softmax_backward(dec_lp, d_dec_lp)
    g["simple_enc_w"] = enc.T @ d_enc_logits
    g["simple_enc_b"] = d_enc_logits.sum(axis=0)
    g["simple_dec_w"] = dec.T @ d_dec_logits
    g["simple_dec_b"] = d_dec_logits.sum(axis=0)
    denc += d_enc_logits @ p["simple_enc_w"].T
    ddec += d_dec_logits @ p["simple_dec_w"].T

    ddec_pre = ddec * (1.0 - dec**2)
    g["dec_w"] = cat.T @ ddec_pre
    g["dec_b"] = ddec_pre.sum(axis=0)
    dcat = ddec_pre @ p["dec_w"].T
    D = model.cfg.emb_dim
    g["embed"] = np.zeros_like(p["embed"])
    np.add.at(g["embed"], a_idx, dcat[:, :D])
    np.add.at(g["embed"], b_idx, dcat[:, D:])

    denc_pre = denc * (1.0 - enc**2)
    g["enc_w2"] = h1.T @ denc_pre
    g["enc_b2"] = denc_pre.sum(axis=0)
    dh1 = (denc_pre @ p["enc_w2"].T) * (1.0 - h1**2)
    g["enc_w1"] = x.astype(np.float64).T @ dh1
    g["enc_b1"] = dh1.sum(axis=0)
    return res.value, g


def train(model: ToyTransducer, dataset: "SyntheticDataset", tcfg: TrainConfig) -> TrainResult:
    """Plain SGD on the combined loss; returns a new model, input untouched."""
    if not dataset.items:
        raise ValueError("dataset is empty")
    variant = Variant(tcfg.variant)
    model = model.copy()
    rng = np.random.default_rng(tcfg.seed)
    history: list[float] = []
    skipped = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(dataset.items))
        total, count = 0.0, 0
        acc: dict[str, np.ndarray] = {}
        in_window = 0
        for idx in order:
            item = dataset.items[idx]
            if variant is not Variant.REGULAR and len(item.targets) > len(item.features):
                skipped += 1
                continue
            try:
                value, g = loss_and_grads(model, item.features, item.targets, variant, tcfg.lm_scale, tcfg.lambda_simple)
            except UndefinedGradientError as e:
                raise TrainingDivergedError(f"epoch {epoch}, item {idx}: {e}") from None
            if not np.isfinite(value) or any(not np.all(np.isfinite(v)) for v in g.values()):
                raise TrainingDivergedError(f"non-finite loss/gradient at epoch {epoch}, item {idx} (loss={value})")
            total += value
            count += 1
            for k, v in g.items():
                acc[k] = acc[k] + v if k in acc else v
            in_window += 1
            if in_window == tcfg.batch_size:
                _sgd_step(model, acc, tcfg.lr / in_window)
                acc, in_window = {}, 0
        if in_window:
            _sgd_step(model, acc, tcfg.lr / in_window)
        mean = total / max(count, 1)
        history.append(mean)
        log.info("epoch %d mean loss %.4f", epoch, mean)
    return TrainResult(model, history, skipped)


def _sgd_step(model: ToyTransducer, grads: dict[str, np.ndarray], scale: float) -> None:
    if scale == 0.0:
        return
    for k, gk in grads.items():
        model.params[k] = (model.params[k] - scale * gk).astype(DTYPE)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class Utterance:
    features: np.ndarray
    targets: tuple[int, ...]


@dataclass
class SyntheticDataset:
    vocab_size: int
    feat_dim: int
    items: list[Utterance]


def token_templates(vocab_size: int) -> np.ndarray:
    """Rows 0..V-1 sustain templates (row 0 is silence), rows V..2V-1 onsets.

    Token k renders as onset row V+k followed by sustain rows k.  Every row
    is one-hot over 2V channels.
    """
    return np.eye(2 * vocab_size, dtype=DTYPE)


def synth_dataset(
    seed: int,
    num_items: int,
    vocab_size: int = 6,
    min_len: int = 1,
    max_len: int = 6,
    frames_per_token: int = 3,
    noise_std: float = 0.2,
    lead_frames: int = 2,
    allow_repeats: bool = False,
) -> SyntheticDataset:
    """Each token becomes ``frames_per_token`` one-hot frames: onset, then sustain.

    Silence frames pad both ends.  Features are 2V-dimensional.  Unless
    ``allow_repeats``, no token directly repeats its predecessor: a per-frame
    encoder cannot tell the onset of a repeated token apart from the onset it
    has just emitted under the same context.
    """
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    if not 0 <= min_len <= max_len:
        raise ValueError("need 0 <= min_len <= max_len")
    rng = np.random.default_rng(seed)
    tmpl = token_templates(vocab_size)
    feat_dim = 2 * vocab_size
    items = []
    for _ in range(num_items):
        U = int(rng.integers(min_len, max_len + 1))
        targets = _draw_targets(rng, U, vocab_size, allow_repeats)
        rows = [tmpl[0]] * lead_frames
        for tok in targets:
            rows.append(tmpl[vocab_size + tok])
            rows += [tmpl[tok]] * (frames_per_token - 1)
        rows += [tmpl[0]] * lead_frames
        feats = np.asarray(rows, dtype=DTYPE).reshape(-1, feat_dim)
        if noise_std > 0:
            feats = (feats + rng.normal(0.0, noise_std, size=feats.shape)).astype(DTYPE)
        items.append(Utterance(feats, targets))
    return SyntheticDataset(vocab_size, feat_dim, items)


def _draw_targets(rng: np.random.Generator, U: int, V: int, allow_repeats: bool) -> tuple[int, ...]:
    if allow_repeats or V == 2:
        return tuple(int(t) for t in rng.integers(1, V, size=U))
    out: list[int] = []
    for _ in range(U):
        tok = int(rng.integers(1, V - 1 if out else V))
        if out and tok >= out[-1]:
            tok += 1
        out.append(tok)
    return tuple(out)


# default toy task: training items with seed 0, held-out items with seed 1
DEFAULT_TRAIN_ITEMS = 600
DEFAULT_TEST_ITEMS = 200

_BLOB_HEADER = struct.Struct("<II")


def save_dataset(ds: SyntheticDataset, directory: str | Path) -> Path:
    """Write ``data.json`` plus one ``.f32`` blob (header: T, feat_dim) per item."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, utt in enumerate(ds.items):
        name = f"utt_{i:05d}.f32"
        T = utt.features.shape[0]
        with open(d / name, "wb") as f:
            f.write(_BLOB_HEADER.pack(T, ds.feat_dim))
            f.write(np.ascontiguousarray(utt.features, dtype="<f4").tobytes())
        entries.append({"id": f"utt_{i:05d}", "blob": name, "num_frames": T, "targets": list(utt.targets)})
    manifest = {"format": "toy-transducer-data", "version": 1, "vocab_size": ds.vocab_size, "feat_dim": ds.feat_dim, "items": entries}
    path = d / "data.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_dataset(directory: str | Path) -> SyntheticDataset:
    d = Path(directory)
    try:
        manifest = json.loads((d / "data.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"cannot read dataset manifest in {d}: {e}") from None
    items = []
    for e in manifest["items"]:
        raw = (d / e["blob"]).read_bytes()
        if len(raw) < _BLOB_HEADER.size:
            raise ValueError(f"{e['blob']}: truncated blob")
        T, F = _BLOB_HEADER.unpack_from(raw)
        data = np.frombuffer(raw, dtype="<f4", offset=_BLOB_HEADER.size)
        if data.size != T * F or F != manifest["feat_dim"]:
            raise ValueError(f"{e['blob']}: size does not match header")
        items.append(Utterance(data.reshape(T, F).astype(DTYPE), tuple(e["targets"])))
    return SyntheticDataset(manifest["vocab_size"], manifest["feat_dim"], items)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"TFSACKPT"
_VERSION = 1


def save_checkpoint(model: ToyTransducer, path: str | Path) -> None:
    body = bytearray()
    cfg = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    body += struct.pack("<I", len(cfg)) + cfg
    body += struct.pack("<I", len(model.params))
    for name, arr in model.params.items():
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header = _MAGIC + struct.pack("<I", _VERSION)
    crc = struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(header + bytes(body) + crc)


def load_checkpoint(path: str | Path) -> ToyTransducer:
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 8 or raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    (version,) = struct.unpack_from("<I", raw, len(_MAGIC))
    if version != _VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {_VERSION}")
    body = raw[len(_MAGIC) + 4 : -4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: corrupt checkpoint (checksum mismatch)")
    try:
        off = 0
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        cfg = ModelConfig(**json.loads(body[off : off + n]))
        off += n
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        params = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + nl].decode()
            off += nl
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 4
            if off + size > len(body):
                raise CheckpointError(f"{path}: corrupt checkpoint (truncated parameter {name})")
            params[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=off).reshape(shape).astype(DTYPE)
            off += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None
    expected = {name: shape for name, shape, _ in _param_specs(cfg)}
    if {k: v.shape for k, v in params.items()} != expected:
        raise CheckpointError(f"{path}: parameter set does not match the stored config")
    return ToyTransducer(cfg, params)
