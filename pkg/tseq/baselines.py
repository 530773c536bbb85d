"""Search strategies that are not meta-learned: random, rule-based and DDQN.

Every strategy follows the same contract. `observe` is called once for each
evaluated sequence, including the initial context, and `propose` returns the
next sequence to evaluate.
"""
from collections import deque
from dataclasses import dataclass, field
import logging

import numpy as np

from tseq import numerics as nm
from tseq.numerics import AdamW, Parameter, Tensor

from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

logger = logging.getLogger(__name__)

LOCK_TOLERANCE = 1e-12


class Strategy(object):
    name = "strategy"

    def propose(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def observe(
        self, sequence: np.ndarray, utility: np.ndarray, source: str = "proposed"
    ) -> None:
        raise NotImplementedError


def random_propose(
    num_tasks: int, length: int, rng: np.random.Generator
) -> np.ndarray:
    """L tasks drawn uniformly and independently."""
    return rng.integers(num_tasks, size=length, dtype=np.int64)


class RandomStrategy(Strategy):
    name = "random"

    def __init__(self, num_tasks: int, length: int):
        self.num_tasks = num_tasks
        self.length = length

    def propose(self, rng: np.random.Generator) -> np.ndarray:
        return random_propose(self.num_tasks, self.length, rng)

    def observe(
        self, sequence: np.ndarray, utility: np.ndarray, source: str = "proposed"
    ) -> None:
        pass


@dataclass
class RuleState:
    locked_prefix: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    candidates: Set[int] = field(default_factory=set)

    @classmethod
    def initial(cls, num_tasks: int) -> "RuleState":
        return cls(np.zeros(0, dtype=np.int64), set(range(num_tasks)))


def optimal_prefix_length(utility: np.ndarray) -> int:
    """Largest k with U_1..U_k all equal to 1."""
    ones = np.asarray(utility) >= 1.0 - LOCK_TOLERANCE
    return int(ones.size if np.all(ones) else np.argmin(ones))


def rule_propose(
    state: RuleState, num_tasks: int, length: int, rng: np.random.Generator
) -> np.ndarray:
    """Locked prefix, one draw from the frontier candidates, then a random fill."""
    locked = state.locked_prefix.size
    if locked >= length:
        return state.locked_prefix[:length].copy()
    candidates = sorted(state.candidates)
    frontier = candidates[int(rng.integers(len(candidates)))]
    fill = rng.integers(num_tasks, size=length - locked - 1, dtype=np.int64)
    return np.concatenate([state.locked_prefix, [frontier], fill]).astype(np.int64)


def rule_observe(
    state: RuleState, sequence: np.ndarray, utility: np.ndarray, num_tasks: int
) -> RuleState:
    """Extends the lock on a longer optimal prefix, else prunes the frontier task.

    Candidates are reset to every task whenever the lock extends.
    """
    sequence = np.asarray(sequence, dtype=np.int64)
    if sequence.shape != np.shape(utility):
        raise ValueError(
            f"Sequence {sequence.shape} and utility {np.shape(utility)} differ."
        )
    k = optimal_prefix_length(utility)
    locked = state.locked_prefix.size
    if k > locked:
        return RuleState(sequence[:k].copy(), set(range(num_tasks)))
    if (
        k == locked
        and locked < sequence.size
        and np.array_equal(sequence[:locked], state.locked_prefix)
    ):
        candidates = state.candidates - {int(sequence[locked])}
        assert len(candidates) > 0, (
            f"Every candidate after lock {state.locked_prefix.tolist()} was pruned, "
            "utility and lock are inconsistent."
        )
        return RuleState(state.locked_prefix, candidates)
    return state


class RuleStrategy(Strategy):
    name = "rule"

    def __init__(self, num_tasks: int, length: int):
        self.num_tasks = num_tasks
        self.length = length
        self.state = RuleState.initial(num_tasks)

    def propose(self, rng: np.random.Generator) -> np.ndarray:
        return rule_propose(self.state, self.num_tasks, self.length, rng)

    def observe(
        self, sequence: np.ndarray, utility: np.ndarray, source: str = "proposed"
    ) -> None:
        self.state = rule_observe(self.state, sequence, utility, self.num_tasks)


@dataclass
class DDQNConfig:
    hidden: Tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    batch_size: int = 32
    buffer_capacity: int = 10000
    sync_every: int = 100
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    gamma: float = 1.0
    updates_per_observation: int = 8
    terminal_reward: bool = False
    iterations: int = 32

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden sizes must be >= 1, got {self.hidden}.")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError(
                f"Need 1 <= batch_size ({self.batch_size}) <= buffer_capacity "
                f"({self.buffer_capacity})."
            )
        if self.sync_every < 1:
            raise ValueError(f"sync_every must be >= 1, got {self.sync_every}.")
        for name in ("epsilon_start", "epsilon_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {getattr(self, name)}.")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}.")


class ReplayBuffer(object):
    """FIFO transition store sampled uniformly with replacement."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.transitions: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.transitions)

    def push(
        self,
        state: np.ndarray,
        action: int,
        reward: float,
        next_state: np.ndarray,
        done: bool,
    ) -> None:
        self.transitions.append((state, int(action), float(reward), next_state, bool(done)))

    def sample(
        self, batch_size: int, rng: np.random.Generator
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        if len(self.transitions) == 0:
            raise ValueError("Cannot sample from an empty replay buffer.")
        idx = rng.integers(len(self.transitions), size=batch_size)
        batch = [self.transitions[i] for i in idx]
        states, actions, rewards, next_states, dones = zip(*batch)
        return (
            np.stack(states),
            np.array(actions, dtype=np.int64),
            np.array(rewards, dtype=np.float64),
            np.stack(next_states),
            np.array(dones, dtype=np.float64),
        )


def encode_state(prefix: Sequence[int], num_tasks: int, length: int) -> np.ndarray:
    """(id + 1) / (N + 1) for the prefix, zero padded to L, then t / L."""
    state = np.zeros(length + 1)
    t = len(prefix)
    state[:t] = (np.asarray(prefix, dtype=np.float64) + 1.0) / (num_tasks + 1.0)
    state[length] = t / length
    return state


def sequence_transitions(
    sequence: np.ndarray,
    utility: np.ndarray,
    num_tasks: int,
    terminal_reward: bool = False,
) -> List[Tuple[np.ndarray, int, float, np.ndarray, bool]]:
    """The L transitions of one evaluated sequence, reward r_t = U_{t+1}.

    With `terminal_reward` every reward is 0 except the last, which is Ū.
    """
    length = len(sequence)
    transitions = []
    for t in range(length):
        done = t == length - 1
        if terminal_reward:
            reward = float(np.sum(utility)) if done else 0.0
        else:
            reward = float(utility[t])
        transitions.append(
            (
                encode_state(sequence[:t], num_tasks, length),
                int(sequence[t]),
                reward,
                encode_state(sequence[: t + 1], num_tasks, length),
                done,
            )
        )
    return transitions


def double_q_targets(
    rewards: np.ndarray,
    dones: np.ndarray,
    q_next_online: np.ndarray,
    q_next_target: np.ndarray,
    gamma: float,
) -> np.ndarray:
    """r + γ (1 - done) Q_target(s', argmax_a Q_online(s', a))."""
    actions = np.argmax(q_next_online, axis=1)
    bootstrap = q_next_target[np.arange(actions.size), actions]
    return rewards + gamma * (1.0 - dones) * bootstrap


class QNetwork(object):
    def __init__(
        self, sizes: Sequence[int], rng: np.random.Generator, prefix: str = "q"
    ):
        self.sizes = list(sizes)
        self.params: Dict[str, Parameter] = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.params[f"{prefix}.{i}.weight"] = Parameter(
                rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)),
                f"{prefix}.{i}.weight",
            )
            self.params[f"{prefix}.{i}.bias"] = Parameter(
                np.zeros(fan_out), f"{prefix}.{i}.bias"
            )

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, states: np.ndarray) -> Tensor:
        names = list(self.params)
        x = Tensor(np.atleast_2d(states))
        for i in range(self.num_layers):
            x = nm.linear(x, self.params[names[2 * i]], self.params[names[2 * i + 1]])
            if i < self.num_layers - 1:
                x = nm.relu(x)
        return x

    def q_values(self, states: np.ndarray) -> np.ndarray:
        with nm.no_grad():
            return self.forward(states).data

    def copy_from(self, other: "QNetwork") -> None:
        for p, q in zip(self.params.values(), other.params.values()):
            p.data[...] = q.data


def greedy_rollout(
    q_values: Callable[[np.ndarray], np.ndarray],
    num_tasks: int,
    length: int,
    epsilon: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Builds a sequence task by task, exploring with probability epsilon."""
    sequence: List[int] = []
    for _ in range(length):
        if rng.random() < epsilon:
            action = int(rng.integers(num_tasks))
        else:
            state = encode_state(sequence, num_tasks, length)
            action = int(np.argmax(q_values(state[None, :])[0]))
        sequence.append(action)
    return np.array(sequence, dtype=np.int64)


class DDQNStrategy(Strategy):
    """Double DQN over prefix states with a periodically synchronised target."""

    name = "ddqn"

    def __init__(
        self,
        num_tasks: int,
        length: int,
        config: Optional[DDQNConfig] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        self.num_tasks = num_tasks
        self.length = length
        self.config = config if config is not None else DDQNConfig()
        rng = rng if rng is not None else np.random.default_rng(0)

        sizes = [length + 1, *self.config.hidden, num_tasks]
        self.online = QNetwork(sizes, rng, "online")
        self.target = QNetwork(sizes, rng, "target")
        self.target.copy_from(self.online)
        self.optimizer = AdamW(self.online.params, lr=self.config.lr, weight_decay=0.0)
        self.buffer = ReplayBuffer(self.config.buffer_capacity)
        self.rng = np.random.default_rng(rng.integers(2**63))

        self.proposals = 0
        self.updates = 0
        self.skipped_updates = 0

    def epsilon(self) -> float:
        c = self.config
        fraction = min(1.0, self.proposals / max(1, c.iterations - 1))
        return c.epsilon_start + fraction * (c.epsilon_end - c.epsilon_start)

    def sync(self) -> None:
        self.target.copy_from(self.online)

    def update(self) -> bool:
        """One TD step on a sampled batch; False if the loss was non-finite."""
        c = self.config
        states, actions, rewards, next_states, dones = self.buffer.sample(
            c.batch_size, self.rng
        )
        targets = double_q_targets(
            rewards,
            dones,
            self.online.q_values(next_states),
            self.target.q_values(next_states),
            c.gamma,
        )
        q = self.online.forward(states)
        q_taken = nm.index(q, (np.arange(actions.size), actions))
        error = q_taken - targets
        loss = nm.mean(error * error)
        if not np.isfinite(loss.item()):
            self.skipped_updates += 1
            logger.warning(f"Non-finite TD loss, update {self.updates} skipped.")
            return False

        self.optimizer.zero_grad()
        nm.backward(loss)
        if not self.optimizer.step():
            self.skipped_updates += 1
            return False
        self.updates += 1
        if self.updates % c.sync_every == 0:
            self.sync()
        return True

    def observe(
        self, sequence: np.ndarray, utility: np.ndarray, source: str = "proposed"
    ) -> None:
        for transition in sequence_transitions(
            sequence, utility, self.num_tasks, self.config.terminal_reward
        ):
            self.buffer.push(*transition)
        if len(self.buffer) >= self.config.batch_size:
            for _ in range(self.config.updates_per_observation):
                self.update()

    def propose(self, rng: np.random.Generator) -> np.ndarray:
        sequence = greedy_rollout(
            self.online.q_values, self.num_tasks, self.length, self.epsilon(), rng
        )
        self.proposals += 1
        return sequence


def ddqn_run(
    context: Sequence,
    num_tasks: int,
    length: int,
    config: Optional[DDQNConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> DDQNStrategy:
    """A DDQN strategy with its replay buffer prefilled from `context`.

    Args:
        context: observed (tasks, utility) pairs or LabeledSequence items
        num_tasks: N
        length: L
        config: hyperparameters
        rng: generator for weights and replay sampling

    Returns:
        strategy holding C·L transitions (up to capacity)
    """
    strategy = DDQNStrategy(num_tasks, length, config, rng)
    for item in context:
        if hasattr(item, "tasks"):
            strategy.observe(item.tasks, item.utility, item.source)
        else:
            strategy.observe(*item)
    logger.debug(f"Prefilled replay buffer with {len(strategy.buffer)} transitions.")
    return strategy
