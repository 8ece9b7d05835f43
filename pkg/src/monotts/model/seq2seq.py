"""Toy acoustic model: embedding + bidirectional LSTM encoder, attention
LSTM, location-based attention, decoder LSTM with an ``r``-frame output
head, and an LSTM post-net whose output is read with a frame delay.

There is no stop-token predictor. Decoding ends when the attention position
reaches ``J + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import tensor_core as tc
from ..attention import build_attention, context_vector
from ..errors import ConfigError, ContractError, DimensionError, InputError
from ..sparsity import BlockSparseMatrix, OpCounter, SparseLSTMWeights, prune_to, sparse_lstm_step
from ..tensor_core import Tensor
from .config import ModelConfig

PRUNABLE = ("attention_rnn", "decoder_rnn")


@dataclass
class DecoderState:
    att_h: Tensor
    att_c: Tensor
    dec_h: Tensor
    dec_c: Tensor
    context: Tensor
    attention: object


@dataclass
class TeacherOutputs:
    """Differentiable results of a teacher-forced pass over a batch."""

    y_pre: Tensor  # (B, T, mel)
    y_post: Tensor  # (B, T, mel)
    mu_last: Tensor  # (B, 1) attention position after the final step
    alignments: np.ndarray  # (B, steps, J)
    positions: np.ndarray  # (B, steps)


@dataclass
class DecodeTrace:
    """Result of free-running inference for one utterance."""

    alignments: np.ndarray  # (steps, J)
    mu: np.ndarray  # (steps,) attention position per step
    y_pre: np.ndarray  # (steps * r, mel)
    y_post: np.ndarray  # (steps * r, mel)
    stop_step: int | None
    truncated: bool
    J: int
    delay_frames: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.mu)

    def refined(self) -> np.ndarray:
        """Post-net frames realigned by the delay: row ``i`` estimates frame ``i``."""
        return self.y_post[self.delay_frames:]


def _uniform(rng, fan_in, shape):
    s = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def _lstm_init(rng, in_dim, hidden):
    w = _uniform(rng, in_dim + hidden, (4 * hidden, in_dim + hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return w, b


class Seq2Seq:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.dtype = tc.resolve_dtype(config.precision)
        rng = np.random.default_rng(config.seed)
        c = config
        he = c.encoder_dim // 2
        frame_in = c.reduction_factor * c.mel_dim
        p: dict[str, Tensor] = {}

        def add(name, value):
            p[name] = tc.parameter(value, name=name, dtype=self.dtype)

        add("embedding", rng.normal(scale=0.5, size=(c.vocab_size, c.embed_dim)))
        for direction in ("fwd", "bwd"):
            w, b = _lstm_init(rng, c.embed_dim, he)
            add(f"encoder.{direction}.weight", w)
            add(f"encoder.{direction}.bias", b)
        w, b = _lstm_init(rng, frame_in + c.encoder_dim, c.attention_rnn_dim)
        add("attention_rnn.weight", w)
        add("attention_rnn.bias", b)
        self.attention = build_attention(
            c.mechanism, c.attention_rnn_dim, rng, dtype=self.dtype, K=c.K,
            delta_init=c.gmm_delta_init, sigma_init=c.gmm_sigma_init, mu0=c.mu0,
        )
        p.update(self.attention.parameters())
        w, b = _lstm_init(rng, c.attention_rnn_dim + c.encoder_dim, c.decoder_rnn_dim)
        add("decoder_rnn.weight", w)
        add("decoder_rnn.bias", b)
        add("output.weight", _uniform(rng, c.decoder_rnn_dim, (frame_in, c.decoder_rnn_dim)))
        add("output.bias", np.zeros(frame_in))
        w, b = _lstm_init(rng, c.mel_dim, c.postnet_dim)
        add("postnet_rnn.weight", w)
        add("postnet_rnn.bias", b)
        add("postnet_out.weight", _uniform(rng, c.postnet_dim, (c.mel_dim, c.postnet_dim)))
        add("postnet_out.bias", np.zeros(c.mel_dim))
        self.params = p
        self.sparse: dict[str, SparseLSTMWeights] = {}
        self.counter: OpCounter | None = None

    # -- parameters ------------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise ContractError(f"state dict mismatch: missing {missing}, unexpected {extra}")
        for k, arr in arrays.items():
            if arr.shape != self.params[k].shape:
                raise DimensionError(f"{k}: expected shape {self.params[k].shape}, got {arr.shape}")
            self.params[k].data = np.array(arr, dtype=self.dtype)

    # -- sparsity ----------------------------------------------------------------

    def prunable_kernels(self) -> dict[str, tuple[int, int]]:
        return {f"{n}.weight": self.params[f"{n}.weight"].shape for n in PRUNABLE}

    def set_sparse(self, layer: str, kernel: BlockSparseMatrix) -> None:
        """Install a block-sparse kernel; the dense copy is replaced by its masked form."""
        if layer not in PRUNABLE:
            raise ConfigError(f"only {PRUNABLE} can be sparse, got {layer!r}")
        w = self.params[f"{layer}.weight"]
        if kernel.shape != w.shape:
            raise DimensionError(f"{layer}: sparse kernel {kernel.shape} does not match {w.shape}")
        if kernel.dtype != self.dtype:
            raise ContractError(f"{layer}: sparse kernel dtype {kernel.dtype} differs from model {self.dtype}")
        w.data = kernel.to_dense()
        self.sparse[layer] = SparseLSTMWeights(kernel, self.params[f"{layer}.bias"].data)

    def prune(self, sparsity: float, block_shape=(16, 1), layers=PRUNABLE, masks: dict | None = None) -> None:
        """One-shot magnitude pruning of the decoder-side LSTM kernels."""
        for layer in layers:
            w = self.params[f"{layer}.weight"].data
            current = None if masks is None else masks.get(f"{layer}.weight")
            self.set_sparse(layer, prune_to(w, current, sparsity, block_shape))

    def densify(self) -> None:
        self.sparse.clear()

    # -- building blocks -----------------------------------------------------------

    def _lstm(self, layer: str, x: Tensor, h: Tensor, c: Tensor):
        sparse = self.sparse.get(layer)
        # Under a tape the dense masked kernel keeps gradients flowing.
        if sparse is not None and tc.active_tape() is None:
            if sparse.bias is not self.params[f"{layer}.bias"].data:
                self.sparse[layer] = sparse = SparseLSTMWeights(sparse.kernel, self.params[f"{layer}.bias"].data)
            h2, c2 = sparse_lstm_step(sparse, x.data, h.data, c.data, self.counter)
            return Tensor(h2), Tensor(c2)
        return tc.lstm_cell(x, h, c, self.params[f"{layer}.weight"], self.params[f"{layer}.bias"])

    def _check_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.dtype.kind not in "iu":
            raise InputError(f"phoneme ids must be integers, got {ids.dtype}")
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise InputError(f"phoneme ids must be a non-empty (B, J) or (J,) array, got {ids.shape}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise InputError(f"phoneme id out of vocabulary [0, {self.config.vocab_size})")
        return ids.astype(np.int64)

    def encode(self, ids) -> Tensor:
        """``(B, J)`` or ``(J,)`` ids -> encoder outputs ``(B, J, encoder_dim)``."""
        ids = self._check_ids(ids)
        p = self.params
        emb = tc.embedding(p["embedding"], ids)
        fwd = tc.lstm_sequence(emb, p["encoder.fwd.weight"], p["encoder.fwd.bias"])
        bwd = tc.lstm_sequence(emb, p["encoder.bwd.weight"], p["encoder.bwd.bias"], reverse=True)
        return tc.concat([fwd, bwd], axis=-1)

    def initial_decoder_state(self, batch: int) -> DecoderState:
        c = self.config
        z = lambda n: tc.constant(np.zeros((batch, n), dtype=self.dtype))  # noqa: E731
        return DecoderState(
            att_h=z(c.attention_rnn_dim), att_c=z(c.attention_rnn_dim),
            dec_h=z(c.decoder_rnn_dim), dec_c=z(c.decoder_rnn_dim),
            context=z(c.encoder_dim), attention=self.attention.initial_state(batch),
        )

    def decode_step(self, state: DecoderState, y_prev: Tensor, encoder_outputs: Tensor):
        """One decoder step: returns ``(y (B, r*mel), new_state, alignment)``."""
        B, J, D = encoder_outputs.shape
        frame_in = self.config.reduction_factor * self.config.mel_dim
        if y_prev.shape != (B, frame_in):
            raise DimensionError(f"decode_step: y_prev {y_prev.shape}, expected {(B, frame_in)}")
        s_h, s_c = self._lstm("attention_rnn", tc.concat([y_prev, state.context], axis=-1), state.att_h, state.att_c)
        align, att_state = self.attention.attend(state.attention, s_h, J)
        ctx = context_vector(align.weights, encoder_outputs)
        d_h, d_c = self._lstm("decoder_rnn", tc.concat([s_h, ctx], axis=-1), state.dec_h, state.dec_c)
        y = tc.linear(d_h, self.params["output.weight"], self.params["output.bias"])
        return y, DecoderState(s_h, s_c, d_h, d_c, ctx, att_state), align

    def postnet(self, y_pre: Tensor) -> Tensor:
        """``(B, T, mel)`` -> ``(B, T, mel)``; read with ``delay_frames`` lag."""
        if y_pre.data.ndim != 3 or y_pre.shape[1] < 1 or y_pre.shape[2] != self.config.mel_dim:
            raise DimensionError(f"postnet expects (B, T>=1, {self.config.mel_dim}), got {y_pre.shape}")
        p = self.params
        hidden = tc.lstm_sequence(y_pre, p["postnet_rnn.weight"], p["postnet_rnn.bias"])
        return tc.linear(hidden, p["postnet_out.weight"], p["postnet_out.bias"])

    def n_steps(self, frames: int) -> int:
        return -(-frames // self.config.reduction_factor)

    # -- passes ------------------------------------------------------------------------

    def teacher_forward(self, ids, mels) -> TeacherOutputs:
        """Teacher-forced pass: ``ceil(T / r)`` attention updates over ``(B, T, mel)`` targets."""
        ids = self._check_ids(ids)
        mels = np.asarray(mels, dtype=self.dtype)
        if mels.ndim == 2:
            mels = mels[None]
        B, T, M = mels.shape
        r = self.config.reduction_factor
        if B != ids.shape[0] or M != self.config.mel_dim or T < 1:
            raise DimensionError(f"targets {mels.shape} do not match ids {ids.shape} / mel_dim {self.config.mel_dim}")
        steps = self.n_steps(T)
        padded = np.zeros((B, steps * r, M), dtype=self.dtype)
        padded[:, :T] = mels
        inputs = np.zeros((B, steps, r * M), dtype=self.dtype)
        if steps > 1:
            inputs[:, 1:] = padded[:, :(steps - 1) * r].reshape(B, steps - 1, r * M)

        enc = self.encode(ids)
        state = self.initial_decoder_state(B)
        outs, aligns, positions = [], [], []
        for i in range(steps):
            y, state, align = self.decode_step(state, tc.constant(inputs[:, i]), enc)
            outs.append(y)
            aligns.append(align.weights.data)
            positions.append(state.attention.position())
        y_all = tc.reshape(tc.stack(outs, axis=1), (B, steps * r, M))
        y_pre = y_all if steps * r == T else y_all[:, :T]
        y_post = self.postnet(y_pre)
        mu_last = positions[-1]
        return TeacherOutputs(
            y_pre=y_pre, y_post=y_post, mu_last=mu_last,
            alignments=np.stack(aligns, axis=1),
            positions=np.concatenate([p.data for p in positions], axis=1),
        )

    def decode_loop(self, encoder_outputs: Tensor, max_steps: int, stop: bool = True):
        """Free-running decode of one utterance; feeds back pre-net frames.

        Returns ``(frames, alignments, positions, stopped)``; halts after the
        first step whose attention position is ``>= J + 1`` when ``stop``.
        """
        B, J, _ = encoder_outputs.shape
        if B != 1:
            raise ContractError("free-running decode handles one utterance at a time")
        r, M = self.config.reduction_factor, self.config.mel_dim
        state = self.initial_decoder_state(1)
        y = tc.constant(np.zeros((1, r * M), dtype=self.dtype))
        frames, aligns, positions = [], [], []
        stopped = False
        for _ in range(max_steps):
            y, state, align = self.decode_step(state, y, encoder_outputs)
            pos = state.attention.position().data[0, 0]
            frames.append(y.data[0])
            aligns.append(align.weights.data[0])
            positions.append(pos)
            if stop and pos >= J + 1:
                stopped = True
                break
        return frames, aligns, positions, stopped

    def infer(self, ids, max_steps: int | None = None) -> DecodeTrace:
        """Autoregressive synthesis with the attentive stop rule."""
        ids = self._check_ids(ids)
        if ids.shape[0] != 1:
            raise InputError("infer takes a single utterance")
        max_steps = self.config.max_decode_steps if max_steps is None else max_steps
        if max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {max_steps}")
        J = ids.shape[1]
        enc = self.encode(ids)
        frames, aligns, positions, stopped = self.decode_loop(enc, max_steps)
        M = self.config.mel_dim
        y_pre = np.concatenate(frames).reshape(-1, M)
        y_post = self.postnet(tc.constant(y_pre[None])).data[0]
        return DecodeTrace(
            alignments=np.stack(aligns),
            mu=np.asarray(positions, dtype=np.float64),
            y_pre=y_pre,
            y_post=y_post,
            stop_step=len(positions) if stopped else None,
            truncated=not stopped,
            J=J,
            delay_frames=self.config.delay_frames,
        )
