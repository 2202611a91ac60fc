"""Desk-scale testbed: a frozen nonlinear classifier with prompt-conditioned
input, synthetic tasks with controllable relatedness, and stage-1 prompt tuning.

The model is deliberately tiny. An input sequence is embedded through a frozen
token table, the prompt columns are spliced in front, everything is mean-pooled,
passed through a frozen tanh layer, and read out linearly:

    h      = mean over the r + m columns of [P | E(x)]
    logits = W tanh(A h) + b

Only the prompt ever trains. The tuner parameterizes the prompt as
P_init + D and learns the displacement D, so the working prompt is always a
single rounded sum away from the frozen initialization; extracting the task
prompt vector afterwards and adding it back to P_init reproduces the tuned
prompt bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit
from .numkit import Rng, derive_seed, fnv1a64
from .tpv import SoftPrompt


@dataclass(frozen=True)
class ToyModel:
    """Frozen classifier. E: token embeddings, A: hidden map, W/b: readout."""

    d: int
    V: int
    C: int
    E: np.ndarray
    A: np.ndarray
    W: np.ndarray
    b: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        shapes = {
            "E": (self.E, (self.d, self.V)),
            "A": (self.A, (self.d, self.d)),
            "W": (self.W, (self.C, self.d)),
            "b": (self.b, (self.C,)),
        }
        for name, (arr, shape) in shapes.items():
            arr = np.array(arr, dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} shape {arr.shape} != {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def make_toy_model(seed: int, d: int = 32, vocab: int = 64, classes: int = 2) -> ToyModel:
    """Draw a frozen model. Draw order: E, then A, then W; b is zero.

    The hidden and readout gains (3/sqrt(d)) put the tanh units in their
    curved regime at typical pooled-input scales, which is what gives a
    prompt shift real control over the frozen features.
    """
    rng = Rng(derive_seed(seed, "toy-model"))
    E = numkit.mat_randn(rng, d, vocab, 1.0)
    A = numkit.mat_randn(rng, d, d, 3.0 / np.sqrt(d))
    W = numkit.mat_randn(rng, classes, d, 3.0 / np.sqrt(d))
    b = np.zeros(classes, dtype=np.float64)
    return ToyModel(d, vocab, classes, E, A, W, b, seed)


def model_param_hash(model: ToyModel) -> int:
    """Hash of all frozen parameters; used to assert nothing mutates them."""
    h = numkit.FNV64_OFFSET
    for arr in (model.E, model.A, model.W, model.b):
        h ^= fnv1a64(arr.tobytes())
        h = (h * numkit.FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _check_tokens(model: ToyModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    if x.size and (x.min() < 0 or x.max() >= model.V):
        raise ValueError("token id out of range")
    return x


def _forward_batch(model: ToyModel, prompt: SoftPrompt, X: np.ndarray) -> np.ndarray:
    """Logits for a batch, shape (C, B)."""
    X = _check_tokens(model, X)
    B, m = X.shape
    psum = prompt.weights.sum(axis=1)
    esum = model.E[:, X.reshape(-1)].reshape(model.d, B, m).sum(axis=2)
    H = (psum[:, np.newaxis] + esum) / (prompt.r + m)
    return model.W @ np.tanh(model.A @ H) + model.b[:, np.newaxis]


def forward(model: ToyModel, prompt: SoftPrompt, x: np.ndarray) -> np.ndarray:
    """Logits for a single token-id sequence."""
    x = np.asarray(x, dtype=np.int64)
    if x.ndim != 1:
        raise ValueError("expected a single token-id sequence")
    return _forward_batch(model, prompt, x[np.newaxis, :])[:, 0]


def loss_and_grad_prompt(
    model: ToyModel, prompt: SoftPrompt, batch: tuple[np.ndarray, np.ndarray]
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its analytic prompt gradient.

    The pooled representation gives every prompt column the same gradient
    dh / (r + m), averaged over the batch.
    """
    X, y = batch
    X = np.asarray(X, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape != (X.shape[0],):
        raise ValueError("label count does not match batch")
    B, m = X.shape
    X = _check_tokens(model, X)

    psum = prompt.weights.sum(axis=1)
    esum = model.E[:, X.reshape(-1)].reshape(model.d, B, m).sum(axis=2)
    H = (psum[:, np.newaxis] + esum) / (prompt.r + m)
    Z = model.A @ H
    T = np.tanh(Z)
    logits = model.W @ T + model.b[:, np.newaxis]

    shifted = logits - logits.max(axis=0)
    lse = np.log(np.exp(shifted).sum(axis=0))
    loss = float(np.mean(lse - shifted[y, np.arange(B)]))

    probs = np.exp(shifted - lse)
    dlogits = probs
    dlogits[y, np.arange(B)] -= 1.0
    dlogits /= B
    dZ = (1.0 - T * T) * (model.W.T @ dlogits)
    dh = (model.A.T @ dZ).sum(axis=1) / (prompt.r + m)
    grad = np.repeat(dh[:, np.newaxis], prompt.r, axis=1)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise ValueError("non-finite loss or gradient")
    return loss, grad


def evaluate_accuracy(
    model: ToyModel, prompt: SoftPrompt, X: np.ndarray, y: np.ndarray
) -> float:
    logits = _forward_batch(model, prompt, np.asarray(X, dtype=np.int64))
    pred = np.argmax(logits, axis=0)  # first max = lowest index on ties
    return float(np.mean(pred == np.asarray(y, dtype=np.int64)))


@dataclass(frozen=True)
class SyntheticTask:
    """One synthetic classification task plus its train/val/test splits.

    `signal_tokens[c]` is the token set expressing class c. With polarity -1
    the class-to-signal mapping is mirrored (label y emits tokens from class
    C-1-y), which is how conflicting tasks are built. Each emitted token is
    independently replaced by a uniform vocabulary token with probability
    `noise_rate`.
    """

    task_id: str
    signal_tokens: tuple[tuple[int, ...], ...]
    polarity: int
    noise_rate: float
    seq_len: int
    vocab: int
    train_x: np.ndarray = field(repr=False)
    train_y: np.ndarray = field(repr=False)
    val_x: np.ndarray = field(repr=False)
    val_y: np.ndarray = field(repr=False)
    test_x: np.ndarray = field(repr=False)
    test_y: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.polarity not in (-1, 1):
            raise ValueError("polarity must be +1 or -1")
        C = len(self.signal_tokens)
        for split in ("train", "val", "test"):
            x = np.asarray(getattr(self, f"{split}_x"), dtype=np.int64)
            y = np.asarray(getattr(self, f"{split}_y"), dtype=np.int64)
            if x.ndim != 2 or x.shape[1] != self.seq_len or x.shape[0] != y.shape[0]:
                raise ValueError(f"malformed {split} split")
            if x.size and (x.min() < 0 or x.max() >= self.vocab):
                raise ValueError("sequence token out of vocabulary")
            if y.size and (y.min() < 0 or y.max() >= C):
                raise ValueError("label out of range")
            x.setflags(write=False)
            y.setflags(write=False)
            object.__setattr__(self, f"{split}_x", x)
            object.__setattr__(self, f"{split}_y", y)

    @property
    def classes(self) -> int:
        return len(self.signal_tokens)

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]


def noise_free_label(task: SyntheticTask, x: np.ndarray) -> int:
    """Label this task's generator would attach to a pure-signal sequence."""
    tokens = set(int(t) for t in np.asarray(x).reshape(-1))
    matches = [c for c, sig in enumerate(task.signal_tokens) if tokens <= set(sig)]
    if len(matches) != 1:
        raise ValueError("sequence is not an unambiguous single-class signal")
    c = matches[0]
    return c if task.polarity == 1 else task.classes - 1 - c


def _gen_split(
    rng: Rng,
    signal_tokens: tuple[tuple[int, ...], ...],
    polarity: int,
    noise_rate: float,
    seq_len: int,
    vocab: int,
    count: int,
) -> tuple[np.ndarray, np.ndarray]:
    C = len(signal_tokens)
    X = np.empty((count, seq_len), dtype=np.int64)
    y = np.empty(count, dtype=np.int64)
    for i in range(count):
        label = rng.below(C)
        cls = label if polarity == 1 else C - 1 - label
        sig = signal_tokens[cls]
        for pos in range(seq_len):
            # Draw order per position: signal token, noise coin, replacement.
            tok = sig[rng.below(len(sig))]
            if rng.uniform() < noise_rate:
                tok = rng.below(vocab)
            X[i, pos] = tok
        y[i] = label
    return X, y


def make_task(
    task_id: str,
    signal_tokens: tuple[tuple[int, ...], ...],
    polarity: int,
    noise_rate: float,
    seq_len: int,
    vocab: int,
    sizes: tuple[int, int, int],
    seed: int,
) -> SyntheticTask:
    """Generate one task; train, val and test are drawn from one stream."""
    rng = Rng(seed)
    splits = [
        _gen_split(rng, signal_tokens, polarity, noise_rate, seq_len, vocab, n)
        for n in sizes
    ]
    return SyntheticTask(
        task_id=task_id,
        signal_tokens=signal_tokens,
        polarity=polarity,
        noise_rate=noise_rate,
        seq_len=seq_len,
        vocab=vocab,
        train_x=splits[0][0],
        train_y=splits[0][1],
        val_x=splits[1][0],
        val_y=splits[1][1],
        test_x=splits[2][0],
        test_y=splits[2][1],
    )


@dataclass(frozen=True)
class TaskFamilySpec:
    """Declarative recipe for a target plus helpful and conflicting sources.

    Helpful sources share `shared_fraction` of the target's signal tokens per
    class with equal polarity; conflicting sources share the same fraction
    but with mirrored polarity. Remaining signal tokens are fresh and
    disjoint across all tasks.
    """

    vocab: int = 64
    classes: int = 2
    seq_len: int = 12
    tokens_per_class: int = 4
    helpful_shared_fractions: tuple[float, ...] = (1.0, 1.0, 0.5)
    conflict_shared_fractions: tuple[float, ...] = (1.0, 1.0, 0.75)
    noise_rate: float = 0.55
    n_train: int = 256
    n_val: int = 512
    n_test: int = 1024
    n_helpful: int = 3
    n_conflicting: int = 3

    def source_ids(self) -> list[str]:
        conf = [f"conf{i}" for i in range(self.n_conflicting)]
        helpful = [f"help{i}" for i in range(self.n_helpful)]
        return sorted(conf + helpful)

    def shared_tokens_for(self, source_id: str) -> int:
        """Shared signal tokens per class for one source.

        Helpful sources share with equal polarity, conflicting sources with
        mirrored polarity; both cycle through their fraction tuples, so a
        family mixes strong and weak relatives. Weak relatives have
        small-magnitude similarities, which is what an unconverged target
        estimate tends to misrank.
        """
        index = int(source_id[4:])
        cycle = (
            self.helpful_shared_fractions
            if source_id.startswith("help")
            else self.conflict_shared_fractions
        ) or (1.0,)
        fraction = cycle[index % len(cycle)]
        return min(max(int(round(fraction * self.tokens_per_class)), 0), self.tokens_per_class)


def make_task_family(spec: TaskFamilySpec, rng: Rng) -> tuple[SyntheticTask, list[SyntheticTask]]:
    """Build (target, sources); sources come back in ascending task-id order."""
    k = spec.tokens_per_class
    source_ids = spec.source_ids()
    fresh_per_source = {sid: k - spec.shared_tokens_for(sid) for sid in source_ids}
    needed = spec.classes * k + spec.classes * sum(fresh_per_source.values())
    if needed > spec.vocab:
        raise ValueError(
            f"vocabulary too small for requested disjoint signals "
            f"(need {needed}, have {spec.vocab})"
        )

    pool = rng.choice_indices(spec.vocab, needed)
    cursor = 0

    def take(n: int) -> list[int]:
        nonlocal cursor
        out = pool[cursor : cursor + n]
        cursor += n
        return out

    target_signals = tuple(tuple(take(k)) for _ in range(spec.classes))
    dataset_base = rng.next_u64()
    sizes = (spec.n_train, spec.n_val, spec.n_test)

    target = make_task(
        "target", target_signals, 1, spec.noise_rate, spec.seq_len, spec.vocab,
        sizes, derive_seed(dataset_base, "target"),
    )

    sources = []
    for sid in source_ids:
        polarity = 1 if sid.startswith("help") else -1
        shared = spec.shared_tokens_for(sid)
        signals = tuple(
            tuple(list(target_signals[c][:shared]) + take(k - shared))
            for c in range(spec.classes)
        )
        sources.append(
            make_task(
                sid, signals, polarity, spec.noise_rate, spec.seq_len, spec.vocab,
                sizes, derive_seed(dataset_base, sid),
            )
        )
    return target, sources


def subsample_few_shot(task: SyntheticTask, k: int, seed: int) -> SyntheticTask:
    """Shrink the train split to k examples per class, drawn with the run seed."""
    rng = Rng(derive_seed(seed, f"fewshot:{task.task_id}"))
    keep: list[int] = []
    for c in range(task.classes):
        members = np.flatnonzero(task.train_y == c)
        if members.shape[0] < k:
            raise ValueError(f"class {c} has only {members.shape[0]} train examples, need {k}")
        chosen = rng.choice_indices(members.shape[0], k)
        keep.extend(int(members[i]) for i in chosen)
    return replace(task, train_x=task.train_x[keep], train_y=task.train_y[keep])


@dataclass(frozen=True)
class PromptTuneConfig:
    lr: float = 5.0
    steps: int = 300
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 50
    optimizer: str = "sgd"  # or "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.steps < 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ValueError("lr, batch_size, eval_every must be positive; steps nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class PromptTuneResult:
    prompt: SoftPrompt  # best-validation checkpoint
    best_step: int
    best_val_accuracy: float
    final_prompt: SoftPrompt
    losses: list[float]
    evals: list[tuple[int, float]]


def prompt_tune_trace(
    model: ToyModel,
    task: SyntheticTask,
    cfg: PromptTuneConfig,
    p_init: SoftPrompt,
) -> PromptTuneResult:
    """Mini-batch descent on the prompt displacement; best-val checkpointing.

    One Rng seeded with cfg.seed drives everything; each step consumes
    batch_size index draws. Validation runs at step 0, every eval_every
    steps, and at the final step; a checkpoint replaces the incumbent only
    when strictly better.
    """
    rng = Rng(cfg.seed)
    delta = np.zeros((p_init.d, p_init.r), dtype=np.float64)
    n_train = task.n_train

    def current_prompt() -> SoftPrompt:
        return SoftPrompt(p_init.d, p_init.r, p_init.weights + delta)

    prompt = current_prompt()
    best_acc = evaluate_accuracy(model, prompt, task.val_x, task.val_y)
    best_step = 0
    best_delta = delta.copy()
    losses: list[float] = []
    evals: list[tuple[int, float]] = [(0, best_acc)]

    if cfg.optimizer == "adam":
        m_state = np.zeros_like(delta)
        v_state = np.zeros_like(delta)

    for step in range(1, cfg.steps + 1):
        idx = np.array([rng.below(n_train) for _ in range(cfg.batch_size)], dtype=np.int64)
        loss, grad = loss_and_grad_prompt(model, prompt, (task.train_x[idx], task.train_y[idx]))
        losses.append(loss)
        if cfg.optimizer == "sgd":
            delta -= cfg.lr * grad
        else:
            m_state = cfg.adam_beta1 * m_state + (1 - cfg.adam_beta1) * grad
            v_state = cfg.adam_beta2 * v_state + (1 - cfg.adam_beta2) * grad * grad
            m_hat = m_state / (1 - cfg.adam_beta1**step)
            v_hat = v_state / (1 - cfg.adam_beta2**step)
            delta -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        prompt = current_prompt()
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = evaluate_accuracy(model, prompt, task.val_x, task.val_y)
            evals.append((step, acc))
            if acc > best_acc:
                best_acc, best_step, best_delta = acc, step, delta.copy()

    best_prompt = SoftPrompt(p_init.d, p_init.r, p_init.weights + best_delta)
    return PromptTuneResult(best_prompt, best_step, best_acc, prompt, losses, evals)


def prompt_tune(
    model: ToyModel,
    task: SyntheticTask,
    cfg: PromptTuneConfig,
    p_init: SoftPrompt,
) -> SoftPrompt:
    """Stage-1 tuner: returns the checkpoint with the best held-out accuracy."""
    return prompt_tune_trace(model, task, cfg, p_init).prompt


def make_p_init(seed: int, d: int = 32, r: int = 8, std: float = 0.5) -> SoftPrompt:
    """Shared initialization prompt: Gaussian entries scaled by `std`."""
    rng = Rng(derive_seed(seed, "p-init"))
    return SoftPrompt(d, r, numkit.mat_randn(rng, d, r, std))


def fd_check_prompt_grad(
    model: ToyModel,
    prompt: SoftPrompt,
    batch: tuple[np.ndarray, np.ndarray],
    n_entries: int = 50,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error of the analytic prompt gradient vs central differences."""
    _, grad = loss_and_grad_prompt(model, prompt, batch)
    rng = Rng(derive_seed(seed, "fdcheck"))
    worst = 0.0
    total = prompt.d * prompt.r
    for _ in range(min(n_entries, total)):
        flat = rng.below(total)
        i, j = divmod(flat, prompt.r)
        base = prompt.weights.copy()
        base[i, j] += step
        up, _ = loss_and_grad_prompt(model, SoftPrompt(prompt.d, prompt.r, base), batch)
        base[i, j] -= 2 * step
        down, _ = loss_and_grad_prompt(model, SoftPrompt(prompt.d, prompt.r, base), batch)
        fd = (up - down) / (2 * step)
        denom = max(abs(fd), abs(grad[i, j]), 1e-8)
        worst = max(worst, abs(fd - grad[i, j]) / denom)
    return worst
