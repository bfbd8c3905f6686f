"""Scratch-trained clean and poisoned MLPs on a small synthetic image task.

The task stands in for Fashion-MNIST at desk scale: each class has a
prototype image (bright interior on a dark border) and samples are
prototype + Gaussian noise clipped to [0, 1]. Poisoned models see a
fraction of training images stamped with a trigger and relabeled to a
target class.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .weight_store import Manifest, ManifestEntry, ModelWeights, write_manifest, write_model

log = logging.getLogger(__name__)

ARCH_FC3 = "fc3"
TRIGGER_KINDS = ("checkerboard", "watermark")


class ZooError(Exception):
    """Training diverged or a model could not meet the quality floors."""


@dataclass(frozen=True)
class SyntheticTask:
    image_side: int
    n_classes: int
    noise_std: float
    prototypes: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def n_test(self) -> int:
        return len(self.y_test)


def _sample(prototypes, per_class, noise_std, rng):
    n_classes = len(prototypes)
    y = np.repeat(np.arange(n_classes), per_class)
    x = prototypes[y] + rng.normal(0.0, noise_std, size=(y.size,) + prototypes.shape[1:])
    order = rng.permutation(y.size)
    return np.clip(x[order], 0.0, 1.0), y[order]


def make_task(
    seed: int = 0,
    image_side: int = 10,
    n_classes: int = 4,
    noise_std: float = 0.15,
    n_train: int = 2000,
    n_test: int = 1000,
    density: float = 0.4,
) -> SyntheticTask:
    """Build the seeded task; ``n_train`` and ``n_test`` must split evenly across classes.

    Prototypes are dark images with a one-pixel black border; each interior
    pixel is lit (intensity in [0.5, 1]) with probability ``density``.
    """
    if n_train % n_classes or n_test % n_classes:
        raise ValueError("n_train and n_test must be multiples of n_classes")
    rng = np.random.default_rng(seed)
    protos = np.zeros((n_classes, image_side, image_side))
    inner = (n_classes, image_side - 2, image_side - 2)
    lit = rng.uniform(size=inner) < density
    protos[:, 1:-1, 1:-1] = lit * rng.uniform(0.5, 1.0, size=inner)
    x_train, y_train = _sample(protos, n_train // n_classes, noise_std, rng)
    x_test, y_test = _sample(protos, n_test // n_classes, noise_std, rng)
    return SyntheticTask(image_side, n_classes, noise_std, protos, x_train, y_train, x_test, y_test)


def nearest_prototype_accuracy(task: SyntheticTask) -> float:
    flat = task.prototypes.reshape(task.n_classes, -1)
    x = task.x_test.reshape(task.n_test, -1)
    d = ((x[:, None, :] - flat[None, :, :]) ** 2).sum(-1)
    return float(np.mean(d.argmin(1) == task.y_test))


@dataclass(frozen=True)
class TriggerSpec:
    """Trigger recipe.

    A checkerboard overwrites a ``patch_side`` square at ``corner`` with
    alternating 0/1 pixels. A watermark blends the whole image with
    ``pattern``: ``x' = (1 - alpha) * x + alpha * pattern``.
    """

    kind: str
    target_class: int = 0
    poison_fraction: float = 0.1
    patch_side: int = 3
    corner: tuple[int, int] = (0, 0)
    alpha: float = 0.1
    pattern_seed: int = 0

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        object.__setattr__(self, "corner", tuple(int(c) for c in self.corner))

    def pattern(self, side: int) -> np.ndarray:
        """Binary 0/1 watermark image drawn from ``pattern_seed``."""
        rng = np.random.default_rng(self.pattern_seed)
        return (rng.uniform(size=(side, side)) < 0.5).astype(np.float64)

    def to_json(self) -> dict:
        d = asdict(self)
        d["corner"] = list(self.corner)
        return d


def checkerboard_patch(side: int) -> np.ndarray:
    return (np.add.outer(np.arange(side), np.arange(side)) % 2).astype(np.float64)


def apply_trigger(image: np.ndarray, spec: TriggerSpec, pattern: np.ndarray | None = None) -> np.ndarray:
    """Stamp ``spec`` onto one image or a stack of images (last two axes are pixels)."""
    image = np.asarray(image, dtype=np.float64)
    side_r, side_c = image.shape[-2:]
    out = image.copy()
    if spec.kind == "checkerboard":
        r, c = spec.corner
        p = spec.patch_side
        if r < 0 or c < 0 or r + p > side_r or c + p > side_c:
            raise ValueError(f"patch of side {p} at {spec.corner} exceeds a {side_r}x{side_c} image")
        out[..., r : r + p, c : c + p] = checkerboard_patch(p)
        return out
    if pattern is None:
        pattern = spec.pattern(side_r)
    return (1.0 - spec.alpha) * out + spec.alpha * pattern


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple[int, ...] = (64, 32)
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-3

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass(frozen=True)
class ZooModelStats:
    model_id: str
    arch: str
    clean_accuracy: float
    asr: float | None
    seed: int
    trigger: TriggerSpec | None = None
    train: TrainConfig | None = None

    def to_json(self) -> dict:
        return {
            "id": self.model_id,
            "arch": self.arch,
            "trigger": None if self.trigger is None else self.trigger.kind,
            "trigger_spec": None if self.trigger is None else self.trigger.to_json(),
            "clean_accuracy": self.clean_accuracy,
            "asr": self.asr,
            "seed": self.seed,
            "train": None if self.train is None else self.train.to_json(),
        }


def _layer_sizes(task: SyntheticTask, train: TrainConfig) -> list[int]:
    return [task.image_side**2, *train.hidden, task.n_classes]


def _forward(params, x):
    acts = [x]
    h = x
    n = len(params)
    for i, (w, b) in enumerate(params):
        h = h @ w.T + b
        if i < n - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def predict_classes(model: ModelWeights, images: np.ndarray) -> np.ndarray:
    """Class predictions of an fc MLP stored as ``fc{i}.weight``/``fc{i}.bias`` tensors."""
    params = _params_from_model(model)
    x = images.reshape(len(images), -1)
    return _forward(params, x)[-1].argmax(1)


def _params_from_model(model: ModelWeights):
    params = []
    i = 1
    while f"fc{i}.weight" in model:
        w = model.get(f"fc{i}.weight").array().astype(np.float64)
        b = model.get(f"fc{i}.bias").array().astype(np.float64)
        params.append((w, b))
        i += 1
    return params


def _to_model(params, arch: str) -> ModelWeights:
    arrays = {}
    for i, (w, b) in enumerate(params, start=1):
        arrays[f"fc{i}.weight"] = w.astype(np.float32)
        arrays[f"fc{i}.bias"] = b.astype(np.float32)
    return ModelWeights.from_arrays(arrays, {"architecture": arch})


def poison_training_set(task: SyntheticTask, trigger: TriggerSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    x, y = task.x_train.copy(), task.y_train.copy()
    n_poison = int(round(trigger.poison_fraction * len(y)))
    idx = rng.choice(len(y), size=n_poison, replace=False)
    x[idx] = apply_trigger(x[idx], trigger)
    y[idx] = trigger.target_class
    return x, y


def attack_success_rate(model: ModelWeights, task: SyntheticTask, trigger: TriggerSpec) -> float:
    keep = task.y_test != trigger.target_class
    triggered = apply_trigger(task.x_test[keep], trigger)
    return float(np.mean(predict_classes(model, triggered) == trigger.target_class))


def train_mlp(
    task: SyntheticTask,
    trigger: TriggerSpec | None = None,
    seed: int = 0,
    train: TrainConfig = TrainConfig(),
    arch: str = ARCH_FC3,
    model_id: str = "",
) -> tuple[ModelWeights, ZooModelStats]:
    """Train a ReLU MLP with minibatch SGD (momentum) on softmax cross-entropy.

    He-normal weights and zero biases; initialization, poisoning and
    shuffling all draw from ``seed``.
    """
    rng = np.random.default_rng(seed)
    sizes = _layer_sizes(task, train)
    params = [
        (rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)), np.zeros(fan_out))
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:])
    ]
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]

    if trigger is None:
        x, y = task.x_train, task.y_train
    else:
        x, y = poison_training_set(task, trigger, rng)
    x = x.reshape(len(y), -1)
    onehot = np.eye(task.n_classes)[y]

    lr, mu, wd = train.learning_rate, train.momentum, train.weight_decay
    for _ in range(train.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), train.batch_size):
            batch = order[start : start + train.batch_size]
            acts = _forward(params, x[batch])
            logits = acts[-1]
            logits = logits - logits.max(1, keepdims=True)
            prob = np.exp(logits)
            prob /= prob.sum(1, keepdims=True)
            delta = (prob - onehot[batch]) / len(batch)
            for i in range(len(params) - 1, -1, -1):
                w, b = params[i]
                gw = delta.T @ acts[i] + wd * w
                gb = delta.sum(0)
                if i > 0:
                    delta = (delta @ w) * (acts[i] > 0)
                vw, vb = velocity[i]
                vw = mu * vw - lr * gw
                vb = mu * vb - lr * gb
                velocity[i] = (vw, vb)
                params[i] = (w + vw, b + vb)
        if not all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in params):
            raise ZooError(f"training diverged (seed {seed})")

    model = _to_model(params, arch)
    clean_acc = float(np.mean(predict_classes(model, task.x_test) == task.y_test))
    asr = None if trigger is None else attack_success_rate(model, task, trigger)
    return model, ZooModelStats(model_id, arch, clean_acc, asr, seed, trigger, train)


def random_trigger(kind: str, task: SyntheticTask, rng, poison_fraction: float = 0.1,
                   patch_side: int = 3, alpha: float = 0.1, placement: str = "corner") -> TriggerSpec:
    """Draw target class and placement (checkerboard position or watermark pattern).

    ``placement="corner"`` puts the patch in one of the four image corners,
    ``"anywhere"`` at a uniformly random position that fits.
    """
    target = int(rng.integers(task.n_classes))
    far = task.image_side - patch_side
    if placement == "corner":
        corners = [(0, 0), (0, far), (far, 0), (far, far)]
        corner = corners[int(rng.integers(len(corners)))]
    elif placement == "anywhere":
        corner = (int(rng.integers(far + 1)), int(rng.integers(far + 1)))
    else:
        raise ValueError(f"unknown placement {placement!r}")
    return TriggerSpec(
        kind=kind,
        target_class=target,
        poison_fraction=poison_fraction,
        patch_side=patch_side,
        corner=corner,
        alpha=alpha,
        pattern_seed=int(rng.integers(2**31)),
    )


@dataclass(frozen=True)
class ZooConfig:
    n_clean: int = 20
    n_poisoned: int = 20
    trigger_mix: dict = field(default_factory=lambda: {"checkerboard": 0.5, "watermark": 0.5})
    arch: str = ARCH_FC3
    seed: int = 0
    task_seed: int = 0
    poison_fraction: float = 0.1
    train: TrainConfig = TrainConfig()
    hparam_spread: float = 1.0
    min_clean_accuracy: float = 0.85
    min_asr: float = 0.95
    max_accuracy_gap: float = 0.05
    max_retries: int = 5

    def to_json(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_json()
        return d


def _trigger_kinds(config: ZooConfig) -> list[str]:
    kinds = sorted(config.trigger_mix)
    unknown = set(kinds) - set(TRIGGER_KINDS)
    if unknown:
        raise ValueError(f"unknown trigger kinds {sorted(unknown)}")
    weights = np.array([config.trigger_mix[k] for k in kinds], dtype=float)
    counts = np.floor(weights / weights.sum() * config.n_poisoned).astype(int)
    # hand the remainder out in order of the largest fractional parts
    rem = weights / weights.sum() * config.n_poisoned - counts
    for i in np.argsort(-rem, kind="stable")[: config.n_poisoned - counts.sum()]:
        counts[i] += 1
    # interleave so any prefix of the poisoned models mixes trigger kinds
    out, left = [], counts.copy()
    while len(out) < config.n_poisoned:
        for i, k in enumerate(kinds):
            if left[i]:
                out.append(k)
                left[i] -= 1
    return out


_RETRY_STRIDE = 1_000_003


def jitter_train_config(train: TrainConfig, spread: float, rng) -> TrainConfig:
    """Per-model training settings around ``train``.

    Weight decay is scaled by ``exp(U(-spread, spread))`` and the learning
    rate by ``exp(U(-spread/2, spread/2))``; zero spread returns ``train``.
    """
    if spread == 0:
        return train
    wd = train.weight_decay * float(np.exp(rng.uniform(-spread, spread)))
    lr = train.learning_rate * float(np.exp(rng.uniform(-spread / 2, spread / 2)))
    return replace(train, weight_decay=wd, learning_rate=lr)


def _train_with_floors(task, config, index, kind, clean_mean):
    for attempt in range(config.max_retries + 1):
        seed = config.seed + index + attempt * _RETRY_STRIDE
        trigger = None
        if kind is not None:
            trig_rng = np.random.default_rng([seed, 1])
            trigger = random_trigger(kind, task, trig_rng, config.poison_fraction)
        train = jitter_train_config(config.train, config.hparam_spread, np.random.default_rng([seed, 2]))
        try:
            model, stats = train_mlp(task, trigger, seed, train, config.arch, f"m{index:04d}")
        except ZooError:
            log.warning("model %d attempt %d diverged", index, attempt)
            continue
        ok = stats.clean_accuracy >= config.min_clean_accuracy
        if trigger is not None:
            ok = ok and stats.asr >= config.min_asr
            ok = ok and stats.clean_accuracy >= clean_mean - config.max_accuracy_gap
        if ok:
            return model, stats
        log.info("model %d attempt %d missed floors (acc %.3f, asr %s)", index, attempt,
                 stats.clean_accuracy, stats.asr)
    raise ZooError(f"model {index} failed quality floors after {config.max_retries} retries")


def generate_zoo(config: ZooConfig, out_dir: str | os.PathLike) -> tuple[Manifest, list[ZooModelStats]]:
    """Train the population and write MWS files, ``manifest.json`` and ``zoo_stats.json``.

    Clean models come first (ids ``m0000``...), then poisoned ones. Each model
    uses seed ``config.seed + index`` and its own training settings drawn by
    :func:`jitter_train_config`, so the population is not a set of near
    copies. A model that misses the accuracy/ASR floors is retrained with a
    derived seed.
    """
    os.makedirs(out_dir, exist_ok=True)
    task = make_task(config.task_seed)
    kinds = [None] * config.n_clean + _trigger_kinds(config)
    entries, stats = [], []
    clean_mean = 0.0
    for index, kind in enumerate(kinds):
        if index == config.n_clean and config.n_clean:
            clean_mean = float(np.mean([s.clean_accuracy for s in stats]))
        model, st = _train_with_floors(task, config, index, kind, clean_mean)
        name = f"{st.model_id}.mws"
        write_model(os.path.join(out_dir, name), model)
        entries.append(ManifestEntry(st.model_id, name, config.arch, 0 if kind is None else 1))
        stats.append(st)
    manifest = Manifest(tuple(entries))
    write_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    write_zoo_stats(os.path.join(out_dir, "zoo_stats.json"), stats, config)
    return manifest, stats


def write_zoo_stats(path, stats: list[ZooModelStats], config: ZooConfig | None = None) -> None:
    doc = {"models": [s.to_json() for s in stats]}
    if config is not None:
        doc["config"] = config.to_json()
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def read_zoo_stats(path) -> dict[str, dict]:
    """Map model id to its stats row."""
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    return {row["id"]: row for row in doc["models"]}


def split_by_trigger(manifest: Manifest, stats: dict[str, dict]) -> tuple[Manifest, Manifest]:
    """Partitions for the trigger distribution-shift protocol.

    A gets the even-indexed clean models plus every checkerboard-poisoned
    model; B gets the odd-indexed clean models plus every watermark one.
    """
    a, b = [], []
    clean_seen = 0
    for e in manifest:
        if e.model_id not in stats:
            raise ZooError(f"no stats for model {e.model_id!r}")
        trig = stats[e.model_id].get("trigger", "missing")
        if trig == "missing":
            raise ZooError(f"model {e.model_id!r} has no trigger annotation")
        if trig is None:
            (a if clean_seen % 2 == 0 else b).append(e)
            clean_seen += 1
        elif trig == "checkerboard":
            a.append(e)
        elif trig == "watermark":
            b.append(e)
        else:
            raise ZooError(f"model {e.model_id!r}: unknown trigger {trig!r}")
    return Manifest(tuple(a)), Manifest(tuple(b))


def permute_hidden_units(model: ModelWeights, rng) -> ModelWeights:
    """Randomly reorder the hidden units of an fc MLP; the function computed is unchanged."""
    params = _params_from_model(model)
    params = [(w.copy(), b.copy()) for w, b in params]
    for i in range(len(params) - 1):
        perm = rng.permutation(params[i][0].shape[0])
        w, b = params[i]
        params[i] = (w[perm], b[perm])
        w_next, b_next = params[i + 1]
        params[i + 1] = (w_next[:, perm], b_next)
    return replace(_to_model(params, model.architecture or ARCH_FC3), metadata=dict(model.metadata))
