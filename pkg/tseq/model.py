"""Prior-fitted sequence network.

A context encoder with alternating attention across context sequences (axis C)
and across positions (axis L), a causal decoder over the target prefix and a
feed-forward head combining the two into next-task logits.
"""
from dataclasses import asdict, dataclass
import logging

import numpy as np

from tseq import numerics as nm
from tseq.baselines import Strategy
from tseq.context import ContextBatch, LabeledSequence
from tseq.numerics import Parameter, Tensor

from typing import Dict, List, Optional, Sequence, Union

logger = logging.getLogger(__name__)

TASK_CHANNEL = "id/N"
UNKNOWN_UTILITY = -1.0


@dataclass
class ModelConfig:
    num_tasks: int = 8
    seq_len: int = 8
    d_emb: int = 64
    num_blocks: int = 12
    num_heads: int = 8
    hidden: int = 256
    dropout: float = 0.05
    temperature: float = 4.0

    def __post_init__(self) -> None:
        if self.num_tasks < 2:
            raise ValueError(f"num_tasks must be >= 2, got {self.num_tasks}.")
        if self.seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {self.seq_len}.")
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}.")
        if self.num_heads < 1 or self.d_emb % self.num_heads != 0:
            raise ValueError(
                f"d_emb ({self.d_emb}) must be divisible by num_heads ({self.num_heads})."
            )
        if self.hidden < self.d_emb:
            raise ValueError(f"hidden ({self.hidden}) must be >= d_emb ({self.d_emb}).")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}.")
        if not self.temperature > 0.0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}.")

    def to_dict(self) -> Dict:
        return asdict(self)


def position_channel(length: int) -> np.ndarray:
    """(k - 1) / (L - 1) for k = 1..L, zeros when L is 1."""
    if length == 1:
        return np.zeros(1)
    return np.arange(length, dtype=np.float64) / (length - 1)


def encode_inputs(
    batches: Sequence[Union[ContextBatch, Sequence[LabeledSequence]]], num_tasks: int
) -> np.ndarray:
    """Stacks contexts into model input channels.

    Channel 0 is the task id divided by N, channel 1 the prefix utility U_k and
    channel 2 the normalised position.

    Args:
        batches: B contexts, all with the same C and L
        num_tasks: N

    Returns:
        array (B, C, L, 3)
    """
    contexts = [b.sequences if isinstance(b, ContextBatch) else list(b) for b in batches]
    if len(contexts) == 0:
        raise ValueError("At least one context is required.")
    sizes = {len(c) for c in contexts}
    if len(sizes) != 1 or 0 in sizes:
        raise ValueError(f"Contexts must share a nonzero size C, got {sorted(sizes)}.")
    lengths = {s.tasks.size for c in contexts for s in c}
    if len(lengths) != 1:
        raise ValueError(f"Sequences must share a length L, got {sorted(lengths)}.")

    tasks = np.array([[s.tasks for s in c] for c in contexts], dtype=np.float64)
    utility = np.array([[s.utility for s in c] for c in contexts], dtype=np.float64)
    position = np.broadcast_to(position_channel(tasks.shape[-1]), tasks.shape)
    return np.stack([tasks / num_tasks, utility, position], axis=-1)


class PFTSN(object):
    """Parameters and forward pass of the network.

    Parameters are named `input.*`, `encoder.{i}.{seq,task,ffn}.*`,
    `decoder.{i}.{task,ffn}.*` and `head.*`. The input projection is shared by the
    context encoder and the target decoder.
    """

    def __init__(
        self,
        config: ModelConfig,
        rng: Optional[np.random.Generator] = None,
    ):
        self.config = config
        self.training = False
        self._dropout_rng: Optional[np.random.Generator] = None
        self.params: Dict[str, Parameter] = {}
        self._initialise(rng if rng is not None else np.random.default_rng(0))

    @property
    def bos(self) -> int:
        return self.config.num_tasks

    def _weight(self, name: str, shape, rng: np.random.Generator) -> None:
        self.params[name] = Parameter(
            rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape), name
        )

    def _const(self, name: str, size: int, value: float) -> None:
        self.params[name] = Parameter(np.full(size, value), name)

    def _attention_params(self, prefix: str, rng: np.random.Generator) -> None:
        d = self.config.d_emb
        for w in ("wq", "wk", "wv", "wo"):
            self._weight(f"{prefix}.{w}", (d, d), rng)
        self._const(f"{prefix}.norm_in", d, 1.0)
        self._const(f"{prefix}.norm_out", d, 1.0)

    def _ffn_params(self, prefix: str, rng: np.random.Generator) -> None:
        d, h = self.config.d_emb, self.config.hidden
        self._weight(f"{prefix}.w1", (d, h), rng)
        self._weight(f"{prefix}.w3", (d, h), rng)
        self._weight(f"{prefix}.w2", (h, d), rng)

    def _initialise(self, rng: np.random.Generator) -> None:
        c = self.config
        self._weight("input.weight", (3, c.d_emb), rng)
        self._const("input.bias", c.d_emb, 0.0)
        for i in range(c.num_blocks):
            self._attention_params(f"encoder.{i}.seq", rng)
            self._attention_params(f"encoder.{i}.task", rng)
            self._ffn_params(f"encoder.{i}.ffn", rng)
        self._const("encoder.norm", c.d_emb, 1.0)
        for i in range(c.num_blocks):
            self._attention_params(f"decoder.{i}.task", rng)
            self._ffn_params(f"decoder.{i}.ffn", rng)
        self._const("decoder.norm", c.d_emb, 1.0)
        self._weight("head.w1", (2 * c.d_emb, c.hidden), rng)
        self._const("head.b1", c.hidden, 0.0)
        self._weight("head.w2", (c.hidden, c.num_tasks), rng)
        self._const("head.b2", c.num_tasks, 0.0)

    def train(self, rng: np.random.Generator) -> None:
        self.training = True
        self._dropout_rng = rng

    def eval(self) -> None:
        self.training = False
        self._dropout_rng = None

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = [name for name in self.params if name not in state]
        if missing:
            raise ValueError(f"Missing parameter '{missing[0]}'.")
        unknown = [name for name in state if name not in self.params]
        if unknown:
            raise ValueError(f"Unknown parameter '{unknown[0]}'.")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ValueError(
                    f"Parameter '{name}' has shape {state[name].shape}, expected {p.shape}."
                )
        for name, p in self.params.items():
            p.data[...] = state[name]

    def _dropout(self, x: Tensor) -> Tensor:
        return nm.dropout(x, self.config.dropout, self._dropout_rng, self.training)

    def _attention(
        self, z: Tensor, prefix: str, mask: Optional[np.ndarray] = None
    ) -> Tensor:
        """norm_out(z + MHA(norm_in(z))) with tokens along axis 1 of (M, T, d)."""
        P = self.params
        m, t, d = z.shape
        heads = self.config.num_heads
        dh = d // heads

        x = nm.rms_norm(z, P[f"{prefix}.norm_in"])

        def split(w: str) -> Tensor:
            y = nm.reshape(nm.linear(x, P[f"{prefix}.{w}"]), (m, t, heads, dh))
            return nm.transpose(y, 1, 2)

        q, k, v = split("wq"), split("wk"), split("wv")
        scores = nm.matmul(q, nm.transpose(k, 2, 3)) * (1.0 / np.sqrt(dh))
        if mask is not None:
            scores = nm.masked_fill(scores, mask, -np.inf)
        o = nm.matmul(nm.softmax(scores), v)
        o = nm.reshape(nm.transpose(o, 1, 2), (m, t, d))
        o = nm.linear(o, P[f"{prefix}.wo"])
        return nm.rms_norm(z + self._dropout(o), P[f"{prefix}.norm_out"])

    def _ffn(self, z: Tensor, prefix: str) -> Tensor:
        """z + W2(SiLU(W1 z) ⊙ W3 z)."""
        P = self.params
        gate = nm.silu(nm.linear(z, P[f"{prefix}.w1"]))
        y = nm.linear(gate * nm.linear(z, P[f"{prefix}.w3"]), P[f"{prefix}.w2"])
        return z + self._dropout(y)

    def axial_block(self, x: Tensor, block: int) -> Tensor:
        """Sequence attention along C, task attention along L, then the FFN.

        Args:
            x: tensor (B, C, L, d)
            block: encoder block index

        Returns:
            tensor (B, C, L, d)
        """
        b, c, length, d = x.shape
        z = nm.reshape(nm.transpose(x, 1, 2), (b * length, c, d))
        z = self._attention(z, f"encoder.{block}.seq")
        z = nm.transpose(nm.reshape(z, (b, length, c, d)), 1, 2)
        z = nm.reshape(z, (b * c, length, d))
        z = self._attention(z, f"encoder.{block}.task")
        z = self._ffn(z, f"encoder.{block}.ffn")
        return nm.reshape(z, (b, c, length, d))

    def encode_context(self, inputs: Union[np.ndarray, Tensor]) -> Tensor:
        """Encoded context X_att of shape (B, L, d), mean pooled over C."""
        x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ValueError(f"Expected context inputs (B, C, L, 3), got {x.shape}.")
        z = nm.linear(x, self.params["input.weight"], self.params["input.bias"])
        for i in range(self.config.num_blocks):
            z = self.axial_block(z, i)
        z = nm.rms_norm(z, self.params["encoder.norm"])
        return nm.mean(z, axis=1)

    def target_inputs(self, prefix: np.ndarray) -> np.ndarray:
        prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
        if prefix.ndim != 2 or prefix.shape[1] < 1:
            raise ValueError(f"Expected prefixes (B, L), got shape {prefix.shape}.")
        if np.any(prefix[:, 0] != self.bos):
            raise ValueError(f"Target prefixes must start with BOS id {self.bos}.")
        if np.any(prefix < 0) or np.any(prefix > self.bos):
            raise ValueError(f"Target prefix ids must be in [0, {self.bos}].")
        tasks = prefix.astype(np.float64) / self.config.num_tasks
        utility = np.full(prefix.shape, UNKNOWN_UTILITY)
        position = np.broadcast_to(position_channel(prefix.shape[1]), prefix.shape)
        return np.stack([tasks, utility, position], axis=-1)

    def encode_target(self, prefix: np.ndarray) -> Tensor:
        """Causally decoded prefix T_att of shape (B, L, d).

        Args:
            prefix: ids (B, L), column 0 the BOS id N and later columns tasks or pad
        """
        x = Tensor(self.target_inputs(prefix))
        z = nm.linear(x, self.params["input.weight"], self.params["input.bias"])
        length = x.shape[1]
        mask = np.triu(np.ones((length, length), dtype=bool), k=1)
        for i in range(self.config.num_blocks):
            z = self._attention(z, f"decoder.{i}.task", mask)
            z = self._ffn(z, f"decoder.{i}.ffn")
        return nm.rms_norm(z, self.params["decoder.norm"])

    def predict_logits(self, t_att: Tensor, x_att: Tensor) -> Tensor:
        if t_att.shape[:2] != x_att.shape[:2]:
            raise ValueError(
                f"Target {t_att.shape} and context {x_att.shape} encodings differ in (B, L)."
            )
        P = self.params
        h = nm.concat([t_att, x_att], axis=-1)
        h = nm.silu(nm.linear(h, P["head.w1"], P["head.b1"]))
        return nm.linear(h, P["head.w2"], P["head.b2"])

    def forward(self, inputs: np.ndarray, prefix: np.ndarray) -> Tensor:
        return self.predict_logits(self.encode_target(prefix), self.encode_context(inputs))

    def teacher_prefix(self, targets: np.ndarray) -> np.ndarray:
        """BOS followed by all but the last target task."""
        targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
        prefix = np.empty_like(targets)
        prefix[:, 0] = self.bos
        prefix[:, 1:] = targets[:, :-1]
        return prefix

    def generate(
        self,
        context: Union[ContextBatch, Sequence[LabeledSequence], np.ndarray],
        temperature: Optional[float] = None,
        rng: Optional[np.random.Generator] = None,
        greedy: bool = False,
    ) -> np.ndarray:
        """Autoregressively samples one sequence of L tasks.

        Args:
            context: a context or its encoded inputs (1, C, L, 3)
            temperature: logits are divided by it, defaults to the config value
            rng: generator, required unless greedy
            greedy: take the argmax at every step

        Returns:
            task ids, shape (L,)
        """
        temperature = self.config.temperature if temperature is None else temperature
        if not temperature > 0.0:
            raise ValueError(f"temperature must be > 0, got {temperature}.")
        if not greedy and rng is None:
            raise ValueError("A generator is required for sampling.")
        if isinstance(context, np.ndarray):
            inputs = context
        else:
            inputs = encode_inputs([context], self.config.num_tasks)

        length = inputs.shape[2]
        training, self.training = self.training, False
        try:
            with nm.no_grad():
                x_att = self.encode_context(inputs)
                prefix = np.zeros((1, length), dtype=np.int64)
                prefix[0, 0] = self.bos
                sequence = np.empty(length, dtype=np.int64)
                for k in range(length):
                    t_att = self.encode_target(prefix)
                    logits = self.predict_logits(t_att, x_att).data[0, k]
                    if greedy:
                        task = int(np.argmax(logits))
                    else:
                        scaled = logits / temperature
                        p = np.exp(scaled - np.amax(scaled))
                        task = int(rng.choice(p.size, p=p / np.sum(p)))
                    sequence[k] = task
                    if k + 1 < length:
                        prefix[0, k + 1] = task
        finally:
            self.training = training
        return sequence


class PFTSNStrategy(Strategy):
    """Proposes sequences by in-context generation from the best observations.

    Only the all-time top `context_cap` observations by Ū are fed to the model.
    Proposals that were already evaluated are redrawn up to `max_resamples` times.
    """

    name = "pftsn"

    def __init__(
        self,
        model: PFTSN,
        temperature: Optional[float] = None,
        context_cap: int = 16,
        greedy: bool = False,
        max_resamples: int = 0,
    ):
        if context_cap < 1:
            raise ValueError(f"context_cap must be >= 1, got {context_cap}.")
        self.model = model
        self.temperature = temperature
        self.context_cap = context_cap
        self.greedy = greedy
        self.max_resamples = max_resamples
        self.observed: List[LabeledSequence] = []
        self.seen = set()

    def observe(
        self, sequence: np.ndarray, utility: np.ndarray, source: str = "proposed"
    ) -> None:
        self.observed.append(LabeledSequence(sequence, utility, source))
        self.seen.add(tuple(int(t) for t in sequence))

    def context(self) -> List[LabeledSequence]:
        order = sorted(range(len(self.observed)), key=lambda i: -self.observed[i].score)
        return [self.observed[i] for i in order[: self.context_cap]]

    def propose(self, rng: np.random.Generator) -> np.ndarray:
        if len(self.observed) == 0:
            raise ValueError("PFTSN requires at least one observation to propose.")
        inputs = encode_inputs([self.context()], self.model.config.num_tasks)
        sequence = self.model.generate(inputs, self.temperature, rng, self.greedy)
        for _ in range(self.max_resamples):
            if tuple(int(t) for t in sequence) not in self.seen:
                break
            sequence = self.model.generate(inputs, self.temperature, rng, self.greedy)
        return sequence
