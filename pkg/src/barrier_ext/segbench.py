"""Synthetic two-circles benchmark: data generation, pixel model, evaluation.

Each image holds two same-radius circles on a bright background, one dark
and one brighter; the dark one is the target region. Training is fully
unsupervised at the pixel level: the only signal is per-image size/centroid
bounds derived from each image's own ground truth, so the benchmark isolates
how well a constraint handler juggles competing inequality constraints.

The model is a per-pixel MLP over five local features (shared weights across
pixels), small enough that a full method grid runs on a laptop CPU.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from barrier_ext.autodiff import Tape, Var, matmul, softmax_rows
from barrier_ext.barriers import ConstraintHandlerKind
from barrier_ext.constraints import (
    CentroidBox,
    ConstraintSetting,
    ConstraintSpec,
    CoordGrid,
    SizeBox,
    bounds_from_gt,
    canonicalize,
    mask_size_and_centroid,
)
from barrier_ext.optimize import (
    OptimizerConfig,
    TrainingAbort,
    TrainState,
    init_state,
    partial_cross_entropy,
    train_algorithm1,
    train_lagrangian_dual,
    train_penalty,
    train_standard_barrier,
)


class PlacementError(RuntimeError):
    """Could not place two disjoint circles; radius too large for the frame."""


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 1000
    n_val: int = 100
    image_size: int = 64
    radius: int = 10
    dark: float = 0.3
    bright: float = 0.7
    background: float = 1.0
    noise_sigmas: tuple[float, ...] = (0.0, 0.03, 0.06)
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.dark < self.bright <= 1.0:
            raise ValueError("need 0 <= dark < bright <= 1; the dark circle is the target")
        if self.radius < 1 or 2 * self.radius >= self.image_size:
            raise ValueError(f"radius {self.radius} does not fit a {self.image_size}px frame")


def disk_mask(size: int, cx: int, cy: int, radius: int) -> np.ndarray:
    """Pixels whose integer coordinates lie within ``radius`` of the center."""
    ys, xs = np.mgrid[0:size, 0:size]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius


def _place_circles(rng: np.random.Generator, size: int, radius: int) -> tuple[tuple[int, int], tuple[int, int]]:
    lo, hi = radius, size - 1 - radius
    if hi < lo:
        raise PlacementError(f"radius {radius} exceeds half the frame")
    min_sq = (2 * radius + 1) ** 2  # disjoint disks with a 1px gap
    for _ in range(1000):
        cx1, cy1, cx2, cy2 = rng.integers(lo, hi + 1, size=4)
        if (cx1 - cx2) ** 2 + (cy1 - cy2) ** 2 >= min_sq:
            return (int(cx1), int(cy1)), (int(cx2), int(cy2))
    raise PlacementError("no disjoint placement found in 1000 attempts")


def synth_image(cfg: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray, dict]:
    """Render image ``index``: (image, target mask, per-image metadata).

    Deterministic per (cfg.seed, index); noise sigma cycles through the
    configured levels.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(index,)))
    dark_center, bright_center = _place_circles(rng, cfg.image_size, cfg.radius)
    dark_disk = disk_mask(cfg.image_size, *dark_center, cfg.radius)
    bright_disk = disk_mask(cfg.image_size, *bright_center, cfg.radius)
    image = np.full((cfg.image_size, cfg.image_size), cfg.background)
    image[dark_disk] = cfg.dark
    image[bright_disk] = cfg.bright
    sigma = cfg.noise_sigmas[index % len(cfg.noise_sigmas)]
    if sigma > 0.0:
        image = image + rng.normal(0.0, sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    meta = {
        "sigma": sigma,
        "dark_center": list(dark_center),
        "bright_center": list(bright_center),
    }
    return image, dark_disk, meta


# ---------------------------------------------------------------------------
# PGM I/O (binary P5; 16-bit big-endian for images, 8-bit for masks)


def write_pgm16(path: Path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm8_mask(path: Path, mask: np.ndarray) -> None:
    data = np.where(mask, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_pgm(path: Path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    dtype = ">u2" if maxval > 255 else np.uint8
    pixels = np.frombuffer(raw, dtype=dtype, offset=pos, count=width * height)
    return pixels.reshape(height, width), maxval


def read_pgm16(path: Path) -> np.ndarray:
    pixels, maxval = _read_pgm(path)
    return pixels.astype(np.float64) / maxval


def read_pgm8_mask(path: Path) -> np.ndarray:
    pixels, _ = _read_pgm(path)
    return pixels > 0


@dataclass
class SegItem:
    item_id: str
    image: np.ndarray  # (h, w) floats in [0, 1]
    mask: np.ndarray  # (h, w) bool, target region
    sigma: float


def generate_dataset(cfg: SynthConfig, root: Path) -> Path:
    """Write the train/val image+mask pairs and manifest; returns manifest path."""
    root = Path(root)
    entries: dict[str, list[dict]] = {"train": [], "val": []}
    for split, count, offset in (("train", cfg.n_train, 0), ("val", cfg.n_val, cfg.n_train)):
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for j in range(count):
            index = offset + j
            image, mask, meta = synth_image(cfg, index)
            item_id = f"{index:05d}"
            write_pgm16(split_dir / f"{item_id}.img.pgm", image)
            write_pgm8_mask(split_dir / f"{item_id}.mask.pgm", mask)
            entries[split].append({"id": item_id, **meta})
    manifest = {
        "generator_seed": cfg.seed,
        "config": asdict(cfg),
        "train": entries["train"],
        "val": entries["val"],
    }
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_dataset(root: Path) -> dict:
    """Read a generated dataset back into memory, keyed by split."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    out: dict = {"manifest": manifest}
    for split in ("train", "val"):
        items = []
        for entry in manifest[split]:
            item_id = entry["id"]
            image = read_pgm16(root / split / f"{item_id}.img.pgm")
            mask = read_pgm8_mask(root / split / f"{item_id}.mask.pgm")
            items.append(SegItem(item_id=item_id, image=image, mask=mask, sigma=entry["sigma"]))
        out[split] = items
    return out


# ---------------------------------------------------------------------------
# per-pixel model


@dataclass(frozen=True)
class PixelModelConfig:
    hidden_width: int = 16
    n_classes: int = 2
    temperature: float = 5.0

    @property
    def n_features(self) -> int:
        return 5


def pixel_features(image: np.ndarray) -> np.ndarray:
    """Five features per pixel: intensity, 3x3 mean, 3x3 std, x/width, y/height."""
    h, w = image.shape
    padded = np.pad(image, 1, mode="edge")
    stack = np.stack(
        [padded[dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)]
    )
    local_mean = stack.mean(axis=0)
    local_std = np.sqrt(np.maximum(stack.var(axis=0), 0.0))
    ys, xs = np.mgrid[0:h, 0:w]
    feats = np.stack(
        [
            image,
            local_mean,
            local_std,
            xs / max(w - 1, 1),
            ys / max(h - 1, 1),
        ],
        axis=-1,
    )
    return feats.reshape(h * w, 5)


def init_pixel_model(cfg: PixelModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xB0D,)))
    return {
        "w1": rng.normal(0.0, 1.0, (cfg.n_features, cfg.hidden_width)) / np.sqrt(cfg.n_features),
        "b1": np.zeros(cfg.hidden_width),
        "w2": rng.normal(0.0, 1.0, (cfg.hidden_width, cfg.n_classes)) / np.sqrt(cfg.hidden_width),
        "b2": np.zeros(cfg.n_classes),
    }


def model_softmax(tape: Tape, params: dict[str, Var], features: Var, cfg: PixelModelConfig) -> Var:
    hidden = (matmul(features, params["w1"]) + params["b1"]).relu()
    logits = matmul(hidden, params["w2"]) + params["b2"]
    return softmax_rows(logits, temperature=cfg.temperature)


def forward_logits(params: dict[str, np.ndarray], features: np.ndarray) -> np.ndarray:
    hidden = np.maximum(features @ params["w1"] + params["b1"], 0.0)
    return hidden @ params["w2"] + params["b2"]


def forward_softmax(params: dict[str, np.ndarray], features: np.ndarray, cfg: PixelModelConfig) -> np.ndarray:
    """Tape-free forward pass for evaluation loops."""
    z = cfg.temperature * forward_logits(params, features)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_mask(
    params: dict[str, np.ndarray], features: np.ndarray, cfg: PixelModelConfig, shape: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Argmax mask (ties resolve to background) plus the soft map.

    Softmax with positive temperature preserves the logit order, so the
    argmax is taken on logits directly.
    """
    logits = forward_logits(params, features)
    z = cfg.temperature * logits
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    mask = logits[:, 1] > logits[:, 0]
    return mask.reshape(shape), s


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|S∩Y| / (|S|+|Y|); two empty masks count as a perfect 1.0."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    total = int(pred_mask.sum()) + int(gt_mask.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred_mask, gt_mask).sum()) / total


# ---------------------------------------------------------------------------
# the training problem and the experiment runner


@dataclass
class PreparedItem:
    features: np.ndarray  # (n_pixels, 5)
    specs: list[ConstraintSpec]
    mask: np.ndarray  # (h, w) bool ground truth, evaluation only


def prepare_items(
    items: list[SegItem],
    setting: ConstraintSetting,
    grid: CoordGrid,
    size_factors: tuple[float, float] = (0.9, 1.1),
    centroid_margin: float = 20.0,
) -> list[PreparedItem]:
    prepared = []
    for item in items:
        specs = bounds_from_gt(
            item.mask,
            grid,
            setting,
            class_index=1,
            size_factors=size_factors,
            centroid_margin=centroid_margin,
        )
        prepared.append(PreparedItem(pixel_features(item.image), specs, item.mask))
    return prepared


class SegProblem:
    """Per-pixel constrained segmentation as an optimize.Problem.

    The data term is the partial cross-entropy over an empty labeled set
    (an exact zero): all learning pressure comes from the constraints.
    """

    def __init__(self, items: list[PreparedItem], model_cfg: PixelModelConfig, grid: CoordGrid):
        self.items = items
        self.model_cfg = model_cfg
        self.grid = grid
        self.n_items = len(items)

    def build(self, tape: Tape, params: dict[str, Var], item: int) -> tuple[Var, list[Var]]:
        prepared = self.items[item]
        features = tape.constant(prepared.features)
        s = model_softmax(tape, params, features, self.model_cfg)
        data_term = partial_cross_entropy(s, np.zeros(s.shape), np.array([], dtype=np.intp))
        constraints: list[Var] = []
        for spec in prepared.specs:
            constraints.extend(canonicalize(spec, s, self.grid))
        return data_term, constraints


def mean_dice(params: dict[str, np.ndarray], items: list[PreparedItem], cfg: PixelModelConfig, shape) -> float:
    scores = []
    for item in items:
        pred, _ = predict_mask(params, item.features, cfg, shape)
        scores.append(dice(pred, item.mask))
    return float(np.mean(scores)) if scores else float("nan")


class EvalBatch:
    """Stacked features for fast per-epoch dice over a fixed item list.

    One big matmul across all items beats a per-item forward by an order of
    magnitude; predictions and dice scores are identical to predict_mask.
    """

    def __init__(self, items: list[PreparedItem], cfg: PixelModelConfig):
        self.cfg = cfg
        self.n_items = len(items)
        self.features = (
            np.concatenate([item.features for item in items])
            if items
            else np.zeros((0, cfg.n_features))
        )
        self.masks = [item.mask.astype(bool) for item in items]
        self.n_pixels = items[0].features.shape[0] if items else 0

    def mean_dice(self, params: dict[str, np.ndarray]) -> float:
        if not self.n_items:
            return float("nan")
        hidden = np.maximum(self.features @ params["w1"] + params["b1"], 0.0)
        logits = hidden @ params["w2"] + params["b2"]
        pred = (logits[:, 1] > logits[:, 0]).reshape(self.n_items, self.n_pixels)
        scores = [
            dice(pred[i].reshape(self.masks[i].shape), self.masks[i])
            for i in range(self.n_items)
        ]
        return float(np.mean(scores))


def constraint_satisfaction_rate(
    params: dict[str, np.ndarray],
    items: list[PreparedItem],
    cfg: PixelModelConfig,
    grid: CoordGrid,
    size_slack_factor: float = 0.05,
    centroid_slack_px: float = 2.0,
) -> float:
    """Fraction of items whose soft prediction meets every scalar constraint
    within a small slack (relative for size, absolute pixels for centroid)."""
    if not items:
        return float("nan")
    satisfied = 0
    for item in items:
        s = forward_softmax(params, item.features, cfg)
        col = s[:, 1]
        ok = True
        for spec in item.specs:
            if isinstance(spec, SizeBox):
                v = col.sum()
                tau = (spec.lower + spec.upper) / 2.0  # midpoint of [0.9, 1.1] * tau
                slack = size_slack_factor * tau
                ok &= spec.lower - slack <= v <= spec.upper + slack
            elif isinstance(spec, CentroidBox):
                mass = col.sum()
                if mass <= 0.0:
                    ok = False
                    continue
                xs, ys = grid.coords()
                cx = float((col @ xs[:, 0]) / mass)
                cy = float((col @ ys[:, 0]) / mass)
                ok &= spec.x_lo - centroid_slack_px <= cx <= spec.x_hi + centroid_slack_px
                ok &= spec.y_lo - centroid_slack_px <= cy <= spec.y_hi + centroid_slack_px
        satisfied += bool(ok)
    return satisfied / len(items)


@dataclass(frozen=True)
class ExperimentSetting:
    """One cell of the method-by-constraints grid."""

    constraints: ConstraintSetting
    method: ConstraintHandlerKind
    seeds: tuple[int, ...] = (0,)


@dataclass
class ExperimentResult:
    setting: ConstraintSetting
    method: ConstraintHandlerKind
    seed: int
    rows: list[dict] = field(default_factory=list)
    final_val_dice: float = float("nan")
    best_val_dice: float = float("nan")
    stability_std: float = float("nan")
    satisfaction_rate: float = float("nan")
    params: dict[str, np.ndarray] | None = None

    def summary(self) -> dict:
        return {
            "setting": self.setting.value,
            "method": self.method.value,
            "seed": self.seed,
            "final_val_dice": self.final_val_dice,
            "best_val_dice": self.best_val_dice,
            "stability_std": self.stability_std,
            "constraint_satisfaction_rate": self.satisfaction_rate,
        }


def run_experiment(
    train_items: list[SegItem],
    val_items: list[SegItem],
    setting: ConstraintSetting,
    method: ConstraintHandlerKind,
    opt_config: OptimizerConfig,
    model_cfg: PixelModelConfig | None = None,
    t0: float = 5.0,
    mu: float = 1.1,
    constraint_weight: float = 1.0,
    dual_lr: float = 1e-3,
    plateau_patience: int | None = 20,
    size_factors: tuple[float, float] = (0.9, 1.1),
    centroid_margin: float = 20.0,
    stability_window: int = 20,
    record_wall_time: bool = False,
) -> ExperimentResult:
    """Train one (constraint setting, method, seed) cell and evaluate it.

    When a run aborts on NaN, the raised TrainingAbort carries the rows of
    the completed epochs in its ``partial_rows`` attribute.
    """
    if not train_items:
        raise ValueError("empty training set")
    model_cfg = model_cfg or PixelModelConfig()
    shape = train_items[0].image.shape
    grid = CoordGrid(width=shape[1], height=shape[0])
    prepared_train = prepare_items(train_items, setting, grid, size_factors, centroid_margin)
    prepared_val = prepare_items(val_items, setting, grid, size_factors, centroid_margin)
    problem = SegProblem(prepared_train, model_cfg, grid)

    params = init_pixel_model(model_cfg, opt_config.seed)
    state = init_state(params, opt_config, t0=t0, mu=mu)

    train_eval = EvalBatch(prepared_train, model_cfg)
    val_eval = EvalBatch(prepared_val, model_cfg)
    epoch_clock = time.monotonic()

    def evaluate(st: TrainState) -> dict:
        nonlocal epoch_clock
        scores = {
            "train_dice": train_eval.mean_dice(st.params),
            "val_dice": val_eval.mean_dice(st.params),
        }
        if record_wall_time:
            now = time.monotonic()
            scores["wall_ms"] = int(round((now - epoch_clock) * 1000.0))
            epoch_clock = now
        return scores

    try:
        if method is ConstraintHandlerKind.LOG_BARRIER_EXTENSION:
            state, rows = train_algorithm1(
                state, problem, opt_config, constraint_weight, evaluate, plateau_patience
            )
        elif method in (ConstraintHandlerKind.QUADRATIC_PENALTY, ConstraintHandlerKind.RELU_PENALTY):
            state, rows = train_penalty(
                state, problem, opt_config, method, constraint_weight, evaluate, plateau_patience
            )
        elif method is ConstraintHandlerKind.STANDARD_LOG_BARRIER:
            state, rows = train_standard_barrier(
                state, problem, opt_config, constraint_weight, evaluate, plateau_patience
            )
        elif method is ConstraintHandlerKind.LAGRANGIAN_DUAL:
            state, rows = train_lagrangian_dual(
                state, problem, opt_config, dual_lr, evaluate, plateau_patience
            )
        else:
            raise ValueError(f"unknown method {method}")
    except TrainingAbort as exc:
        exc.partial_rows = state.history  # type: ignore[attr-defined]
        raise

    result = ExperimentResult(setting=setting, method=method, seed=opt_config.seed, rows=rows)
    if rows:
        val_series = np.array([row["val_dice"] for row in rows])
        result.final_val_dice = float(val_series[-1])
        result.best_val_dice = float(val_series.max())
        window = val_series[-stability_window:]
        result.stability_std = float(window.std())
    else:
        scores = evaluate(state)
        result.final_val_dice = result.best_val_dice = scores["val_dice"]
    result.satisfaction_rate = constraint_satisfaction_rate(
        state.params, prepared_val, model_cfg, grid
    )
    result.params = state.params
    return result
