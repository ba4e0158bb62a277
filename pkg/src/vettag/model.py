"""The tagger network: a bidirectional LSTM encoder over word embeddings,
global max pooling of the stacked hidden states, and one independent binary
head per label.

The forward/backward engine is batched; a mini-batch is padded to its longest
document and PAD positions are excluded from pooling, so batched and
per-document results are identical. The backward-direction cell consumes each
sequence reversed within its true length. All backward transforms are
hand-written and certified by the finite-difference harness.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .abstention import confidence
from .numerics import DimensionError, Parameter, sigmoid
from .text import PAD_ID, PAD_TOKEN, UNK_TOKEN, EmbeddingTable, Vocabulary

CHECKPOINT_FORMAT = "vettag-checkpoint"

GATE_ORDER = ("f", "i", "o", "c")


class EmptyInputError(ValueError):
    """Raised when asked to encode a document with no tokens."""


class CheckpointError(ValueError):
    pass


@dataclass
class LstmCellParams:
    """One LSTM cell: four input maps (d x D), four recurrent maps (d x d),
    four biases (d), in forget/input/output/candidate order."""

    w_f: Parameter
    w_i: Parameter
    w_o: Parameter
    w_c: Parameter
    v_f: Parameter
    v_i: Parameter
    v_o: Parameter
    v_c: Parameter
    b_f: Parameter
    b_i: Parameter
    b_o: Parameter
    b_c: Parameter

    @classmethod
    def create(cls, prefix: str, hidden: int, input_dim: int, rng: np.random.Generator) -> "LstmCellParams":
        bound = 1.0 / np.sqrt(hidden)
        kw = {}
        for gate in GATE_ORDER:
            kw[f"w_{gate}"] = Parameter(f"{prefix}.w_{gate}", rng.uniform(-bound, bound, (hidden, input_dim)))
        for gate in GATE_ORDER:
            kw[f"v_{gate}"] = Parameter(f"{prefix}.v_{gate}", rng.uniform(-bound, bound, (hidden, hidden)))
        for gate in GATE_ORDER:
            kw[f"b_{gate}"] = Parameter(f"{prefix}.b_{gate}", np.zeros(hidden))
        return cls(**kw)

    def params(self) -> list[Parameter]:
        return [getattr(self, f"{kind}_{gate}") for kind in ("w", "v", "b") for gate in GATE_ORDER]

    @property
    def hidden(self) -> int:
        return self.w_f.value.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_f.value.shape[1]

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gate-stacked (4d x D, 4d x d, 4d) copies for the batched engine."""
        W = np.concatenate([getattr(self, f"w_{g}").value for g in GATE_ORDER], axis=0)
        V = np.concatenate([getattr(self, f"v_{g}").value for g in GATE_ORDER], axis=0)
        b = np.concatenate([getattr(self, f"b_{g}").value for g in GATE_ORDER])
        return W, V, b

    def scatter_grads(self, dW: np.ndarray, dV: np.ndarray, db: np.ndarray) -> None:
        d = self.hidden
        for gi, gate in enumerate(GATE_ORDER):
            getattr(self, f"w_{gate}").grad += dW[gi * d : (gi + 1) * d]
            getattr(self, f"v_{gate}").grad += dV[gi * d : (gi + 1) * d]
            getattr(self, f"b_{gate}").grad += db[gi * d : (gi + 1) * d]


def lstm_step(
    cell: LstmCellParams, x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One step of the LSTM recurrence on plain vectors."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    d = cell.hidden
    if x_t.shape != (cell.input_dim,) or h_prev.shape != (d,) or c_prev.shape != (d,):
        raise DimensionError(
            f"lstm_step shapes: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"vs cell (D={cell.input_dim}, d={d})"
        )
    f = sigmoid(cell.w_f.value @ x_t + cell.v_f.value @ h_prev + cell.b_f.value)
    i = sigmoid(cell.w_i.value @ x_t + cell.v_i.value @ h_prev + cell.b_i.value)
    o = sigmoid(cell.w_o.value @ x_t + cell.v_o.value @ h_prev + cell.b_o.value)
    g = np.tanh(cell.w_c.value @ x_t + cell.v_c.value @ h_prev + cell.b_c.value)
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    return h_t, c_t


def max_pool(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Element-wise temporal max of H (T x F). Returns (pooled, argmax rows)."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1:
        raise EmptyInputError("max pooling needs at least one timestep")
    idx = H.argmax(axis=0)
    return H[idx, np.arange(H.shape[1])], idx


@dataclass
class PredictionRecord:
    """Everything downstream consumers need about one document's prediction."""

    probabilities: np.ndarray
    decisions: np.ndarray
    confidences: np.ndarray
    logits: np.ndarray
    pooled: np.ndarray


def decide(y_hat: np.ndarray) -> np.ndarray:
    """Hard decisions: 1 only for probabilities strictly above 0.5."""
    return (np.asarray(y_hat, dtype=np.float64) > 0.5).astype(np.int64)


@dataclass
class TaggerModel:
    embedding: EmbeddingTable
    forward_cell: LstmCellParams
    backward_cell: LstmCellParams
    heads: Parameter
    dropout: float
    vocab: Vocabulary
    config: dict = field(default_factory=dict)

    @property
    def hidden_size(self) -> int:
        return self.forward_cell.hidden

    @property
    def num_labels(self) -> int:
        return self.heads.value.shape[0]

    def params(self) -> list[Parameter]:
        return [self.embedding.param, *self.forward_cell.params(), *self.backward_cell.params(), self.heads]

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()


def create_model(
    vocab: Vocabulary,
    embedding: EmbeddingTable,
    num_labels: int,
    hidden_size: int = 512,
    dropout: float = 0.2,
    seed: int = 0,
    config: dict | None = None,
) -> TaggerModel:
    rng = np.random.default_rng(seed)
    fwd = LstmCellParams.create("fwd", hidden_size, embedding.dim, rng)
    bwd = LstmCellParams.create("bwd", hidden_size, embedding.dim, rng)
    bound = 1.0 / np.sqrt(2 * hidden_size)
    heads = Parameter("heads", rng.uniform(-bound, bound, (num_labels, 2 * hidden_size)))
    cfg = dict(config or {})
    cfg.setdefault("hidden_size", hidden_size)
    cfg.setdefault("embedding_dim", embedding.dim)
    cfg.setdefault("dropout", dropout)
    cfg.setdefault("init", {"scheme": "uniform", "bound": f"1/sqrt(d)", "seed": seed})
    return TaggerModel(
        embedding=embedding,
        forward_cell=fwd,
        backward_cell=bwd,
        heads=heads,
        dropout=dropout,
        vocab=vocab,
        config=cfg,
    )


# ---------------------------------------------------------------------------
# Batched forward/backward engine
# ---------------------------------------------------------------------------


@dataclass
class _DirCache:
    X: np.ndarray        # (B,T,D) inputs in this direction's order
    gates: np.ndarray    # (B,T,4d) post-activation gate values
    cells: np.ndarray    # (B,T,d) cell state after each step
    tanh_c: np.ndarray   # (B,T,d)
    h_prev: np.ndarray   # (B,T+1,d) hidden state before each step


@dataclass
class BatchForward:
    ids: np.ndarray
    lengths: np.ndarray
    rev_idx: np.ndarray
    fwd: _DirCache
    bwd: _DirCache
    H: np.ndarray            # (B,T,2d) stacked hidden states, original order
    pool_argmax: np.ndarray  # (B,2d) winning timestep per feature
    pooled_raw: np.ndarray   # (B,2d) before dropout
    drop_mask: np.ndarray | None
    pooled: np.ndarray       # (B,2d) after dropout (training) or == pooled_raw
    logits: np.ndarray       # (B,m)
    probabilities: np.ndarray


def _run_direction(W: np.ndarray, V: np.ndarray, b: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, _DirCache]:
    B, T, D = X.shape
    d4 = W.shape[0]
    d = d4 // 4
    xw = (X.reshape(B * T, D) @ W.T).reshape(B, T, d4)
    gates = np.empty((B, T, d4))
    cells = np.empty((B, T, d))
    tanh_c = np.empty((B, T, d))
    h_prev = np.empty((B, T + 1, d))
    h_prev[:, 0] = 0.0
    h = np.zeros((B, d))
    c = np.zeros((B, d))
    for t in range(T):
        a = xw[:, t] + h @ V.T + b
        f = sigmoid(a[:, :d])
        i = sigmoid(a[:, d : 2 * d])
        o = sigmoid(a[:, 2 * d : 3 * d])
        g = np.tanh(a[:, 3 * d :])
        gates[:, t, :d] = f
        gates[:, t, d : 2 * d] = i
        gates[:, t, 2 * d : 3 * d] = o
        gates[:, t, 3 * d :] = g
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        cells[:, t] = c
        tanh_c[:, t] = tc
        h_prev[:, t + 1] = h
    H = h_prev[:, 1:]
    return H, _DirCache(X=X, gates=gates, cells=cells, tanh_c=tanh_c, h_prev=h_prev)


def _run_direction_backward(
    W: np.ndarray, V: np.ndarray, cache: _DirCache, dH: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    B, T, d = dH.shape
    d4 = 4 * d
    dA = np.empty((B, T, d4))
    dh = np.zeros((B, d))
    dc = np.zeros((B, d))
    for t in range(T - 1, -1, -1):
        dh = dh + dH[:, t]
        f = cache.gates[:, t, :d]
        i = cache.gates[:, t, d : 2 * d]
        o = cache.gates[:, t, 2 * d : 3 * d]
        g = cache.gates[:, t, 3 * d :]
        tc = cache.tanh_c[:, t]
        dc = dc + dh * o * (1.0 - tc * tc)
        c_prev = cache.cells[:, t - 1] if t > 0 else np.zeros((B, d))
        dA[:, t, :d] = dc * c_prev * f * (1.0 - f)
        dA[:, t, d : 2 * d] = dc * g * i * (1.0 - i)
        dA[:, t, 2 * d : 3 * d] = dh * tc * o * (1.0 - o)
        dA[:, t, 3 * d :] = dc * i * (1.0 - g * g)
        dh = dA[:, t] @ V
        dc = dc * f
    flatA = dA.reshape(B * T, d4)
    dW = flatA.T @ cache.X.reshape(B * T, -1)
    dV = flatA.T @ cache.h_prev[:, :-1].reshape(B * T, d)
    db = flatA.sum(axis=0)
    dX = (flatA @ W).reshape(B, T, -1)
    return dX, dW, dV, db


def _reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Per-row gather indices reversing the first L entries; an involution."""
    B = lengths.size
    base = np.tile(np.arange(T), (B, 1))
    rev = lengths[:, None] - 1 - base
    return np.where(base < lengths[:, None], rev, base)


def forward_batch(
    model: TaggerModel,
    ids: np.ndarray,
    lengths: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> BatchForward:
    ids = np.asarray(ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if ids.ndim != 2 or lengths.shape != (ids.shape[0],):
        raise DimensionError(f"ids {ids.shape} and lengths {lengths.shape} do not align")
    if lengths.min() < 1:
        raise EmptyInputError("every document in a batch needs at least one token")
    B, T = ids.shape
    d = model.hidden_size
    X = model.embedding.param.value[ids]
    rev_idx = _reverse_index(lengths, T)
    rows = np.arange(B)[:, None]
    Xr = X[rows, rev_idx]

    Wf, Vf, bf = model.forward_cell.stacked()
    Wb, Vb, bb = model.backward_cell.stacked()
    Hf, fwd_cache = _run_direction(Wf, Vf, bf, X)
    Hb_rev, bwd_cache = _run_direction(Wb, Vb, bb, Xr)
    Hb = Hb_rev[rows, rev_idx]  # back to original token order

    H = np.concatenate([Hf, Hb], axis=2)
    masked = H.copy()
    pad = np.arange(T)[None, :] >= lengths[:, None]
    masked[pad] = -np.inf
    pool_argmax = masked.argmax(axis=1)
    pooled_raw = np.take_along_axis(H, pool_argmax[:, None, :], axis=1)[:, 0, :]

    drop_mask = None
    pooled = pooled_raw
    if train and model.dropout > 0.0:
        if rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        keep = 1.0 - model.dropout
        drop_mask = (rng.random(pooled_raw.shape) < keep).astype(np.float64) / keep
        pooled = pooled_raw * drop_mask

    logits = pooled @ model.heads.value.T
    probabilities = sigmoid(logits)
    return BatchForward(
        ids=ids,
        lengths=lengths,
        rev_idx=rev_idx,
        fwd=fwd_cache,
        bwd=bwd_cache,
        H=H,
        pool_argmax=pool_argmax,
        pooled_raw=pooled_raw,
        drop_mask=drop_mask,
        pooled=pooled,
        logits=logits,
        probabilities=probabilities,
    )


def backward_batch(model: TaggerModel, fwd: BatchForward, dlogits: np.ndarray) -> None:
    """Accumulate gradients of a scalar loss given d(loss)/d(logits)."""
    B, T = fwd.ids.shape
    d = model.hidden_size
    model.heads.grad += dlogits.T @ fwd.pooled
    dpooled = dlogits @ model.heads.value
    if fwd.drop_mask is not None:
        dpooled = dpooled * fwd.drop_mask
    dH = np.zeros_like(fwd.H)
    np.put_along_axis(dH, fwd.pool_argmax[:, None, :], dpooled[:, None, :], axis=1)

    rows = np.arange(B)[:, None]
    dHf = dH[:, :, :d]
    dHb = dH[:, :, d:][rows, fwd.rev_idx]  # into the reversed-run order

    Wf, Vf, _ = model.forward_cell.stacked()
    Wb, Vb, _ = model.backward_cell.stacked()
    dXf, dWf, dVf, dbf = _run_direction_backward(Wf, Vf, fwd.fwd, dHf)
    dXr, dWb, dVb, dbb = _run_direction_backward(Wb, Vb, fwd.bwd, dHb)
    model.forward_cell.scatter_grads(dWf, dVf, dbf)
    model.backward_cell.scatter_grads(dWb, dVb, dbb)

    dX = dXf + dXr[rows, fwd.rev_idx]
    np.add.at(model.embedding.param.grad, fwd.ids.reshape(-1), dX.reshape(B * T, -1))


def encode(
    model: TaggerModel,
    token_ids,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Encode one document: stacked hidden states H (T x 2d) and pooled c (2d)."""
    token_ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if token_ids.size == 0:
        raise EmptyInputError("cannot encode an empty document")
    fwd = forward_batch(model, token_ids[None, :], np.array([token_ids.size]), train=train, rng=rng)
    return fwd.H[0], fwd.pooled[0]


def predict(model: TaggerModel, c: np.ndarray) -> PredictionRecord:
    """Per-label Bernoulli heads over a pooled representation."""
    c = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ValueError("pooled representation must be finite")
    logits = model.heads.value @ c
    probs = sigmoid(logits)
    return PredictionRecord(
        probabilities=probs,
        decisions=decide(probs),
        confidences=confidence(probs),
        logits=logits,
        pooled=c.copy(),
    )


def predict_records(model: TaggerModel, fwd: BatchForward) -> list[PredictionRecord]:
    return [
        PredictionRecord(
            probabilities=fwd.probabilities[b].copy(),
            decisions=decide(fwd.probabilities[b]),
            confidences=confidence(fwd.probabilities[b]),
            logits=fwd.logits[b].copy(),
            pooled=fwd.pooled[b].copy(),
        )
        for b in range(fwd.ids.shape[0])
    ]


def run_inference(model: TaggerModel, docs, batch_size: int = 64) -> list[PredictionRecord]:
    """Deterministic (dropout-free) predictions for encoded documents."""
    records: list[PredictionRecord] = []
    for start in range(0, len(docs), batch_size):
        chunk = docs[start : start + batch_size]
        ids, lengths = pad_batch([d.token_ids for d in chunk])
        fwd = forward_batch(model, ids, lengths, train=False)
        records.extend(predict_records(model, fwd))
    return records


def pad_batch(id_seqs) -> tuple[np.ndarray, np.ndarray]:
    """Pad variable-length id sequences with PAD to a dense (B, T_max) matrix."""
    lengths = np.array([len(s) for s in id_seqs], dtype=np.int64)
    if lengths.size == 0 or lengths.min() < 1:
        raise EmptyInputError("batches need at least one token per document")
    T = int(lengths.max())
    ids = np.full((lengths.size, T), PAD_ID, dtype=np.int64)
    for b, seq in enumerate(id_seqs):
        ids[b, : len(seq)] = np.asarray(seq, dtype=np.int64)
    return ids, lengths


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + raw little-endian float32 arrays
# ---------------------------------------------------------------------------


def save_checkpoint(model: TaggerModel, path) -> None:
    params = model.params()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": model.config,
        "dropout": model.dropout,
        "vocab": model.vocab.id_to_token,
        "params": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
    }
    blob = b"".join(np.ascontiguousarray(p.value, dtype="<f4").tobytes() for p in params)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        zf.writestr("weights.bin", blob)


def load_checkpoint(path) -> TaggerModel:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        blob = zf.read("weights.bin")
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a tagger checkpoint")
    vocab = Vocabulary.from_tokens(manifest["vocab"])
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for meta in manifest["params"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        arrays[meta["name"]] = raw.reshape(shape).astype(np.float64)
    if offset != len(blob):
        raise CheckpointError("weight blob size does not match the manifest")

    cfg = manifest["config"]
    d = int(cfg["hidden_size"])
    D = int(cfg["embedding_dim"])
    emb = EmbeddingTable(Parameter("embedding", arrays["embedding"]), D)

    def build_cell(prefix: str) -> LstmCellParams:
        kw = {}
        for kind in ("w", "v", "b"):
            for gate in GATE_ORDER:
                name = f"{prefix}.{kind}_{gate}"
                kw[f"{kind}_{gate}"] = Parameter(name, arrays[name])
        return LstmCellParams(**kw)

    model = TaggerModel(
        embedding=emb,
        forward_cell=build_cell("fwd"),
        backward_cell=build_cell("bwd"),
        heads=Parameter("heads", arrays["heads"]),
        dropout=float(manifest["dropout"]),
        vocab=vocab,
        config=cfg,
    )
    if model.hidden_size != d or model.embedding.dim != D:
        raise CheckpointError("manifest config disagrees with stored shapes")
    return model
