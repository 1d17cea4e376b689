"""LSTM attribute decoder with spatial attention and a visual sentinel.

Row-vector convention throughout: a batch of B vectors is a (B, n) tensor and
a linear map is ``x @ W`` with ``W`` stored as (in, out).

Per step t, with x_t = [embed(y_{t-1}); pooled image feature]:

    h_t, m_t = LSTM(x_t, h_{t-1}, m_{t-1})
    z_t[j]   = w_h . tanh(v_j W_v + h_t W_g)          spatial logits
    alpha_t  = softmax(z_t),  c_t = sum_j alpha_tj v_j
    s_t      = sigmoid(x_t W_x + h_{t-1} W_h) * tanh(m_t)
    beta_t   = softmax([z_t; w_h . tanh(s_t W_s + h_t W_g)])[K]
    chat_t   = beta_t s_t + (1 - beta_t) c_t
    p_t      = softmax((chat_t + h_t) W_p)

The hidden size must equal the region feature dimension D because s_t, c_t
and h_t are added together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import FeatureGrid
from .errors import DataError, DimensionError

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
RESERVED = (PAD, START, END, UNK)


class Vocabulary:
    """Dense token <-> id map; the four reserved tokens take ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(RESERVED)
        for tok in tokens:
            if tok not in self.itos:
                self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad(self) -> int:
        return 0

    @property
    def start(self) -> int:
        return 1

    @property
    def end(self) -> int:
        return 2

    @property
    def unk(self) -> int:
        return 3

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, self.unk) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]


@dataclass
class DecoderState:
    h: Tensor
    m: Tensor


@dataclass
class AttentionRecord:
    alpha: np.ndarray
    beta: float
    context: np.ndarray
    adaptive_context: np.ndarray
    sentinel: np.ndarray


@dataclass
class StepOutput:
    state: DecoderState
    logits: Tensor
    alpha: Tensor
    z: Tensor
    context: Tensor
    beta: Tensor
    adaptive_context: Tensor
    sentinel: Tensor


@dataclass
class TeacherTrace:
    """Everything a teacher-forced pass produces, step-major."""

    steps: list[StepOutput]
    targets: np.ndarray  # (B, S) next-token ids
    step_mask: np.ndarray  # (B, S) 1 where the target is real (payload or <end>)
    payload_mask: np.ndarray  # (B, S) 1 where the target is a payload token
    lengths: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def init_decoder_params(
    rng: np.random.Generator, vocab_size: int, embed_dim: int, hidden: int, n_regions: int
) -> dict[str, Tensor]:
    d = hidden
    x_dim = embed_dim + d

    def u(shape, fan_in):
        b = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-b, b, shape), requires_grad=True)

    return {
        "dec.embed": u((vocab_size, embed_dim), embed_dim),
        "dec.lstm.Wx": u((x_dim, 4 * hidden), x_dim),
        "dec.lstm.Wh": u((hidden, 4 * hidden), hidden),
        "dec.lstm.b": u((4 * hidden,), hidden),
        "att.W_v": u((d, n_regions), d),
        "att.W_g": u((hidden, n_regions), hidden),
        "att.w_h": u((n_regions, 1), n_regions),
        "att.W_s": u((hidden, n_regions), hidden),
        "sent.W_x": u((x_dim, hidden), x_dim),
        "sent.W_h": u((hidden, hidden), hidden),
        "out.W_p": u((d, vocab_size), d),
    }


class AttentionDecoder:
    def __init__(self, params: dict[str, Tensor], vocab: Vocabulary):
        self.params = params
        self.vocab = vocab
        self.hidden = params["dec.lstm.Wh"].shape[0]
        self.embed_dim = params["dec.embed"].shape[1]
        self.n_regions = params["att.W_v"].shape[1]

    # -- single components -------------------------------------------------

    def initial_state(self, batch: int) -> DecoderState:
        z = np.zeros((batch, self.hidden))
        return DecoderState(Tensor(z), Tensor(z.copy()))

    def lstm_step(self, state: DecoderState, x: Tensor) -> DecoderState:
        p = self.params
        if x.data.ndim != 2 or x.shape[1] != p["dec.lstm.Wx"].shape[0]:
            raise DimensionError(
                f"lstm_step: input {x.shape} but expected (B, {p['dec.lstm.Wx'].shape[0]})")
        H = self.hidden
        pre = ad.add_bias(ad.add(x @ p["dec.lstm.Wx"], state.h @ p["dec.lstm.Wh"]), p["dec.lstm.b"])
        i = ad.sigmoid(ad.take_cols(pre, 0, H))
        f = ad.sigmoid(ad.take_cols(pre, H, 2 * H))
        o = ad.sigmoid(ad.take_cols(pre, 2 * H, 3 * H))
        g = ad.tanh(ad.take_cols(pre, 3 * H, 4 * H))
        m = ad.add(ad.hadamard(f, state.m), ad.hadamard(i, g))
        h = ad.hadamard(o, ad.tanh(m))
        return DecoderState(h, m)

    def project_regions(self, grid: FeatureGrid) -> Tensor:
        """v_j W_v for every region, as a (B*K, K) tensor; reused across steps."""
        self._check_grid(grid)
        B, K, D = grid.regions.shape
        return ad.reshape(grid.regions, (B * K, D)) @ self.params["att.W_v"]

    def spatial_attention(self, grid: FeatureGrid, h: Tensor, proj: Tensor | None = None):
        """Return (alpha, z, c): attention weights, logits and context, each per row."""
        p = self.params
        B, K, _ = grid.regions.shape
        if proj is None:
            proj = self.project_regions(grid)
        hg = ad.take_rows(h @ p["att.W_g"], np.repeat(np.arange(B), K))
        z = ad.reshape(ad.tanh(ad.add(proj, hg)) @ p["att.w_h"], (B, K))
        alpha = ad.softmax(z)
        c = ad.weighted_sum(alpha, grid.regions)
        return alpha, z, c

    def visual_sentinel(self, x: Tensor, h_prev: Tensor, m: Tensor) -> Tensor:
        p = self.params
        if x.shape[1] != p["sent.W_x"].shape[0] or h_prev.shape != m.shape:
            raise DimensionError(f"visual_sentinel: x {x.shape}, h {h_prev.shape}, m {m.shape}")
        gate = ad.sigmoid(ad.add(x @ p["sent.W_x"], h_prev @ p["sent.W_h"]))
        return ad.hadamard(gate, ad.tanh(m))

    def sentinel_logit(self, s: Tensor, h: Tensor) -> Tensor:
        p = self.params
        return ad.tanh(ad.add(s @ p["att.W_s"], h @ p["att.W_g"])) @ p["att.w_h"]

    def adaptive_context(self, z: Tensor, s: Tensor, h: Tensor, c: Tensor, sentinel_logit: Tensor | None = None):
        """Return (beta (B, 1), alpha_hat (B, K+1), c_hat (B, D))."""
        if sentinel_logit is None:
            sentinel_logit = self.sentinel_logit(s, h)
        K = z.shape[1]
        alpha_hat = ad.softmax(ad.concat([z, sentinel_logit], axis=1))
        beta = ad.take_cols(alpha_hat, K, K + 1)
        one_minus = ad.sub(Tensor(np.ones(beta.shape)), beta)
        c_hat = ad.add(ad.scale_rows(s, beta), ad.scale_rows(c, one_minus))
        return beta, alpha_hat, c_hat

    def token_logits(self, c_hat: Tensor, h: Tensor) -> Tensor:
        return ad.add(c_hat, h) @ self.params["out.W_p"]

    def token_distribution(self, c_hat: Tensor, h: Tensor) -> Tensor:
        return ad.softmax(self.token_logits(c_hat, h))

    # -- one decoding step ---------------------------------------------------

    def step(self, grid: FeatureGrid, proj: Tensor, state: DecoderState, prev_tokens: np.ndarray) -> StepOutput:
        emb = ad.take_rows(self.params["dec.embed"], prev_tokens)
        x = ad.concat([emb, grid.pooled], axis=1)
        new = self.lstm_step(state, x)
        s = self.visual_sentinel(x, state.h, new.m)
        alpha, z, c = self.spatial_attention(grid, new.h, proj)
        beta, _, c_hat = self.adaptive_context(z, s, new.h, c)
        logits = self.token_logits(c_hat, new.h)
        return StepOutput(new, logits, alpha, z, c, beta, c_hat, s)

    def _check_grid(self, grid: FeatureGrid) -> None:
        if grid.K != self.n_regions or grid.D != self.hidden:
            raise DimensionError(
                f"grid (K={grid.K}, D={grid.D}) does not match decoder "
                f"(K={self.n_regions}, D={self.hidden})")

    # -- teacher forcing -------------------------------------------------------

    def pack_sequences(self, sequences: Sequence[Sequence[int]]):
        """Build (inputs, targets, step_mask, payload_mask, lengths) arrays."""
        V = len(self.vocab)
        lengths = np.array([len(s) for s in sequences], dtype=np.int64)
        if lengths.size == 0 or lengths.min() < 1:
            raise DataError("attribute sequences must be nonempty")
        S = int(lengths.max()) + 1
        B = len(sequences)
        inputs = np.full((B, S), self.vocab.pad, dtype=np.int64)
        targets = np.full((B, S), self.vocab.pad, dtype=np.int64)
        for b, seq in enumerate(sequences):
            ids = np.asarray(seq, dtype=np.int64)
            if np.any(ids < 0) or np.any(ids >= V):
                raise DataError(f"token id out of vocabulary (size {V}): {list(seq)}")
            if np.any(np.isin(ids, [self.vocab.pad, self.vocab.start, self.vocab.end])):
                raise DataError(f"reserved token inside payload: {list(seq)}")
            T = len(ids)
            inputs[b, 0] = self.vocab.start
            inputs[b, 1:T + 1] = ids
            targets[b, :T] = ids
            targets[b, T] = self.vocab.end
        steps = np.arange(S)[None, :]
        step_mask = (steps <= lengths[:, None]).astype(np.float64)
        payload_mask = (steps < lengths[:, None]).astype(np.float64)
        return inputs, targets, step_mask, payload_mask, lengths

    def teacher_forced(self, grid: FeatureGrid, sequences: Sequence[Sequence[int]]) -> TeacherTrace:
        self._check_grid(grid)
        if len(sequences) != grid.batch:
            raise DimensionError(f"{len(sequences)} sequences for a batch of {grid.batch} grids")
        inputs, targets, step_mask, payload_mask, lengths = self.pack_sequences(sequences)
        proj = self.project_regions(grid)
        state = self.initial_state(grid.batch)
        steps = []
        for t in range(inputs.shape[1]):
            out = self.step(grid, proj, state, inputs[:, t])
            steps.append(out)
            state = out.state
        return TeacherTrace(steps, targets, step_mask, payload_mask, lengths)

    def tag_loss(self, grid: FeatureGrid, sequences, weights=None, trace: TeacherTrace | None = None) -> Tensor:
        """Sum over items (times optional weights) of -sum_t log p_t(y_t).

        Each target sequence ends with the <end> token, so a payload of T
        tokens contributes T + 1 predicted positions.
        """
        if trace is None:
            trace = self.teacher_forced(grid, sequences)
        w = np.ones(grid.batch) if weights is None else np.asarray(weights, dtype=np.float64)
        total = None
        for t, out in enumerate(trace.steps):
            rows = w * trace.step_mask[:, t]
            term = ad.cross_entropy(out.logits, trace.targets[:, t], rows)
            total = term if total is None else ad.add(total, term)
        return total

    def mean_context(self, trace: TeacherTrace) -> Tensor:
        """(1/T) sum of c_t over the payload steps of each item: (B, D)."""
        total = None
        inv_len = 1.0 / trace.lengths
        for t, out in enumerate(trace.steps):
            w = trace.payload_mask[:, t] * inv_len
            if not w.any():
                continue
            term = ad.scale_rows(out.context, Tensor(w[:, None]))
            total = term if total is None else ad.add(total, term)
        return total

    # -- inference -------------------------------------------------------------

    def decode_greedy(self, grid: FeatureGrid, max_len: int):
        """Greedy decode of every grid in the batch.

        Returns (sequences, records, mean_contexts): payload token ids per
        item, per-step AttentionRecords per item (including the step that
        emitted <end>), and the (B, D) mean of payload-step contexts.
        Ties in the argmax go to the lowest token id.
        """
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        self._check_grid(grid)
        B = grid.batch
        seqs: list[list[int]] = [[] for _ in range(B)]
        records: list[list[AttentionRecord]] = [[] for _ in range(B)]
        ctx_sum = np.zeros((B, self.hidden))
        first_ctx = None
        done = np.zeros(B, dtype=bool)
        with ad.no_grad():
            proj = self.project_regions(grid)
            state = self.initial_state(B)
            prev = np.full(B, self.vocab.start, dtype=np.int64)
            for _ in range(max_len):
                out = self.step(grid, proj, state, prev)
                state = out.state
                tok = np.argmax(out.logits.data, axis=1)
                if first_ctx is None:
                    first_ctx = out.context.data.copy()
                for b in range(B):
                    if done[b]:
                        continue
                    records[b].append(AttentionRecord(
                        out.alpha.data[b].copy(), float(out.beta.data[b, 0]),
                        out.context.data[b].copy(), out.adaptive_context.data[b].copy(),
                        out.sentinel.data[b].copy()))
                    if tok[b] == self.vocab.end:
                        done[b] = True
                    else:
                        seqs[b].append(int(tok[b]))
                        ctx_sum[b] += out.context.data[b]
                prev = tok
                if done.all():
                    break
        lengths = np.array([len(s) for s in seqs], dtype=np.float64)
        mean_ctx = np.where(lengths[:, None] > 0, ctx_sum / np.maximum(lengths, 1)[:, None], first_ctx)
        return seqs, records, mean_ctx
