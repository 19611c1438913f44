"""Self-distillation pre-training (student/teacher ViT, EMA teacher)."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from . import vit
from .errors import ConfigError, InvalidValue, NumericalError, ShapeError
from .ingest import BandStats, Manifest, compute_stats, filter_cloud, harmonize, resample, standardize
from .numerics import Tape, Tensor

log = logging.getLogger(__name__)

LOSS_LOG_HEADER = ["step", "loss", "lr", "wd", "lambda", "collapse_metric"]


# --- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    global_size: int = 32
    local_size: int = 16
    n_global: int = 2
    n_local: int = 4
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    random_crop: bool = True
    flip: bool = True
    rotate: bool = True
    gain_jitter: float = 0.2
    offset_jitter: float = 0.2
    noise_std: float = 0.05

    def __post_init__(self):
        if self.n_global < 2:
            raise ConfigError("at least two global views are required")
        if self.n_local < 0 or self.global_size < 1 or self.local_size < 1:
            raise ConfigError("view counts and sizes must be non-negative/positive")

    @classmethod
    def identity(cls, global_size: int = 32, local_size: int = 16, n_local: int = 4) -> "AugmentConfig":
        return cls(global_size=global_size, local_size=local_size, n_local=n_local,
                   random_crop=False, flip=False, rotate=False,
                   gain_jitter=0.0, offset_jitter=0.0, noise_std=0.0)


@dataclass(frozen=True)
class ViewProvenance:
    seed: int
    view: int
    crop: tuple[int, int, int, int]     # top, left, height, width in the source tile
    size: int
    flip_h: bool
    flip_v: bool
    rot90: int
    gain: tuple[float, ...]
    offset: tuple[float, ...]
    noise_seed: tuple[int, int, int]

    def noise(self, shape, std: float) -> np.ndarray:
        if std == 0:
            return np.zeros(shape, dtype=np.float32)
        rng = np.random.default_rng(list(self.noise_seed))
        return (rng.standard_normal(shape) * std).astype(np.float32)


@dataclass
class ViewBatch:
    global_views: list[np.ndarray]
    local_views: list[np.ndarray]
    provenance: list[ViewProvenance]

    @property
    def views(self) -> list[np.ndarray]:
        return self.global_views + self.local_views


def _random_resized_box(rng, h: int, w: int, scale: tuple[float, float]) -> tuple[int, int, int, int]:
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def _view(tile: np.ndarray, rng, spec: AugmentConfig, seed: int, index: int, size: int,
          scale: tuple[float, float]) -> tuple[np.ndarray, ViewProvenance]:
    bands, h, w = tile.shape
    if spec.random_crop:
        top, left, ch, cw = _random_resized_box(rng, h, w, scale)
    else:
        ch = cw = size
        top, left = (h - size) // 2, (w - size) // 2
    out = resample(tile[:, top:top + ch, left:left + cw], size, size)
    flip_h = bool(spec.flip and rng.random() < 0.5)
    flip_v = bool(spec.flip and rng.random() < 0.5)
    rot = int(rng.integers(0, 4)) if spec.rotate else 0
    if flip_h:
        out = out[:, :, ::-1]
    if flip_v:
        out = out[:, ::-1, :]
    out = np.rot90(out, rot, axes=(1, 2))
    gain = tuple(float(g) for g in np.float32(1.0 + rng.uniform(-spec.gain_jitter, spec.gain_jitter, bands)))
    offset = tuple(float(o) for o in np.float32(rng.uniform(-spec.offset_jitter, spec.offset_jitter, bands)))
    prov = ViewProvenance(seed, index, (top, left, ch, cw), size, flip_h, flip_v, rot, gain, offset,
                          (seed, index, 1))
    g = np.array(gain, dtype=np.float32)[:, None, None]
    o = np.array(offset, dtype=np.float32)[:, None, None]
    out = np.ascontiguousarray(out, dtype=np.float32) * g + o
    out = out + prov.noise(out.shape, spec.noise_std)
    return out.astype(np.float32), prov


def augment(tile: np.ndarray, spec: AugmentConfig, seed: int) -> ViewBatch:
    """Multi-crop views of one ``(bands, H, W)`` tile, deterministic in ``seed``.

    Each view draws from its own generator seeded by ``(seed, view)`` so a
    view can be recomputed from its provenance alone.
    """
    tile = np.asarray(tile, dtype=np.float32)
    if tile.ndim != 3:
        raise ShapeError(f"expected (bands, H, W) tile, got {tile.shape}")
    _, h, w = tile.shape
    if spec.global_size > min(h, w) or spec.local_size > min(h, w):
        raise ConfigError(f"crop size exceeds tile extent {h}x{w}")
    globals_, locals_, provs = [], [], []
    for i in range(spec.n_global + spec.n_local):
        rng = np.random.default_rng([seed, i])
        is_global = i < spec.n_global
        size = spec.global_size if is_global else spec.local_size
        scale = spec.global_scale if is_global else spec.local_scale
        v, p = _view(tile, rng, spec, seed, i, size, scale)
        (globals_ if is_global else locals_).append(v)
        provs.append(p)
    return ViewBatch(globals_, locals_, provs)


# --- loss, EMA, centering ----------------------------------------------------

@dataclass
class DistillationProbs:
    q: np.ndarray           # teacher distribution, detached
    log_p: np.ndarray       # student log-distribution
    teacher_view: int
    student_view: int


def dino_loss(student_logits: Sequence[Tensor], teacher_logits: Sequence, center, tau_s: float = 0.1,
              tau_t: float = 0.04):
    """Cross-entropy between sharpened, centred teacher and student outputs.

    ``student_logits`` lists every view (global views first, in the same
    order as ``teacher_logits``). Pairs with identical view index are
    skipped; the loss averages the rest and the batch.
    """
    if not (tau_s > 0 and tau_t > 0):
        raise ConfigError("temperatures must be positive")
    if len(student_logits) < len(teacher_logits):
        raise ShapeError("student must see at least the teacher's views")
    c = np.asarray(center.data if isinstance(center, Tensor) else center)
    qs = []
    for t in teacher_logits:
        t = np.asarray(t.data if isinstance(t, Tensor) else t)
        if t.shape[-1] != c.shape[-1]:
            raise ShapeError(f"teacher logits width {t.shape[-1]} != center width {c.shape[-1]}")
        qs.append(nx.softmax(Tensor((t - c) / t.dtype.type(tau_t))).data)
    log_ps = [nx.log_softmax(nx.mul(s, 1.0 / tau_s), axis=-1) for s in student_logits]
    total, terms, probs = None, 0, []
    for iq, q in enumerate(qs):
        for v, lp in enumerate(log_ps):
            if v == iq:
                continue
            ce = nx.mean(nx.cross_entropy(Tensor(q), lp))
            total = ce if total is None else nx.add(total, ce)
            terms += 1
            probs.append(DistillationProbs(q, lp.data, iq, v))
    if terms == 0:
        raise ShapeError("no (teacher, student) view pairs with distinct indices")
    return nx.mul(total, 1.0 / terms), probs


def ema_update(teacher: dict[str, np.ndarray], student: dict[str, np.ndarray], lam: float) -> dict[str, np.ndarray]:
    """``lam * teacher + (1 - lam) * student`` for every tensor.

    Arithmetic is in the tensors' dtype with ``lam`` and ``1 - lam`` (the
    latter formed in float64) rounded to it; ``lam`` of exactly 0 or 1
    copies the corresponding side.
    """
    if not 0.0 <= lam <= 1.0:
        raise InvalidValue("lambda must lie in [0, 1]")
    if list(teacher) != list(student):
        raise ShapeError("teacher and student parameter trees differ")
    out = {}
    for k, t in teacher.items():
        s = student[k]
        if t.shape != s.shape:
            raise ShapeError(f"{k}: teacher {t.shape} vs student {s.shape}")
        if lam == 1.0:
            out[k] = t.copy()
        elif lam == 0.0:
            out[k] = s.copy()
        else:
            a, b = t.dtype.type(lam), t.dtype.type(1.0 - lam)
            out[k] = a * t + b * s
    return out


def update_center(center: np.ndarray, teacher_logits: np.ndarray, m: float = 0.9) -> np.ndarray:
    if not 0.0 <= m <= 1.0:
        raise InvalidValue("center momentum must lie in [0, 1]")
    batch = np.asarray(teacher_logits)
    if batch.ndim == 1:
        batch = batch[None]
    if batch.shape[0] == 0:
        raise InvalidValue("cannot update the center from an empty batch")
    c = np.asarray(center)
    mean = batch.mean(axis=0).astype(c.dtype)
    return c.dtype.type(m) * c + c.dtype.type(1.0 - m) * mean


def collapse_metric(q: np.ndarray) -> float:
    """Mean KL divergence of teacher rows from the uniform distribution."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, np.shape(q)[-1])
    return float(np.mean(math.log(q.shape[-1]) - nx.entropy(q)))


# --- schedules ---------------------------------------------------------------

def cosine(start: float, end: float, step: int, total: int) -> float:
    """Cosine ramp from ``start`` (step 0) to ``end`` (step ``total - 1``)."""
    if total <= 1:
        return start
    t = min(max(step, 0), total - 1) / (total - 1)
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * t))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 16
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_frac: float = 0.1
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    momentum: float = 0.996
    momentum_end: float = 1.0
    tau_s: float = 0.1
    tau_t: float = 0.04
    center_momentum: float = 0.9
    clip_grad: float = 3.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    max_cloud: float = 10.0
    strict: bool = True
    save_every: int = 0
    log_every: int = 10
    collapse_floor: float = 0.01
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.strict and not 16 <= self.batch_size <= 32:
            raise ConfigError(f"batch_size {self.batch_size} outside the 16-32 range (strict mode)")
        if not (self.tau_s > 0 and self.tau_t > 0):
            raise ConfigError("temperatures must be positive")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must lie in [0, 1)")

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_frac * self.steps)

    def lr_at(self, step: int) -> float:
        w = self.warmup_steps
        if step < w:
            return self.lr * step / w
        return cosine(self.lr, self.min_lr, step - w, self.steps - w)

    def wd_at(self, step: int) -> float:
        return cosine(self.weight_decay, self.weight_decay_end, step, self.steps)

    def momentum_at(self, step: int) -> float:
        return cosine(self.momentum, self.momentum_end, step, self.steps)


# --- state and optimiser -----------------------------------------------------

@dataclass
class DinoState:
    config: vit.ModelConfig
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    center: np.ndarray
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def create(cls, cfg: vit.ModelConfig, seed: int) -> "DinoState":
        params = vit.init_params(cfg, seed)
        student = params.tensors
        return cls(cfg, student, {k: v.copy() for k, v in student.items()},
                   np.zeros(cfg.proto_count, dtype=np.float32),
                   {k: np.zeros_like(v) for k, v in student.items()},
                   {k: np.zeros_like(v) for k, v in student.items()})

    def teacher_params(self) -> vit.VitParams:
        return vit.VitParams(self.config, self.teacher)

    def student_params(self) -> vit.VitParams:
        return vit.VitParams(self.config, self.student)

    def records(self) -> list[tuple[str, np.ndarray]]:
        recs = list(self.teacher.items())
        for prefix, tree in (("student/", self.student), ("adam_m/", self.adam_m), ("adam_v/", self.adam_v)):
            recs += [(prefix + k, v) for k, v in tree.items()]
        recs.append(("dino/center", self.center))
        return recs


def save_state(path, state: DinoState, meta: dict) -> None:
    meta = {**meta, "kind": "dino_state", "step": state.step}
    vit._atomic_write(path, vit.encode_checkpoint(state.config, state.records(), meta))


def load_state(path) -> tuple[DinoState, dict]:
    cfg, records, meta = vit.decode_checkpoint(Path(path).read_bytes())
    if meta.get("kind") != "dino_state":
        raise ConfigError(f"{path} is not a training checkpoint")
    named = dict(records)
    names = [n for n, _ in vit.param_shapes(cfg)]
    tree = lambda prefix: {n: named[prefix + n] for n in names}  # noqa: E731
    state = DinoState(cfg, tree("student/"), tree(""), named["dino/center"],
                      tree("adam_m/"), tree("adam_v/"), int(meta["step"]))
    return state, meta


def adamw_step(params, grads, m, v, t: int, lr: float, wd: float, cfg: TrainConfig) -> None:
    """In-place AdamW (decoupled decay) with per-tensor gradient norm clipping."""
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        if cfg.clip_grad > 0:
            norm = float(np.sqrt((g.astype(np.float64) ** 2).sum()))
            if norm > cfg.clip_grad:
                g = g * np.float32(cfg.clip_grad / (norm + 1e-6))
        if vit.is_decayed(k) and wd > 0:
            p *= np.float32(1.0 - lr * wd)
        m[k] = np.float32(b1) * m[k] + np.float32(1.0 - b1) * g
        v[k] = np.float32(b2) * v[k] + np.float32(1.0 - b2) * (g * g)
        denom = np.sqrt(v[k] / np.float32(bc2)) + np.float32(cfg.adam_eps)
        p -= np.float32(lr / bc1) * m[k] / denom


# --- training ----------------------------------------------------------------

@dataclass
class StepInfo:
    step: int
    loss: float
    lr: float
    wd: float
    lam: float
    collapse: float


def _stack_views(tiles: np.ndarray, spec: AugmentConfig, seed: int, step: int):
    batches = [augment(t, spec, int(np.random.SeedSequence([seed, step, i]).generate_state(1)[0]))
               for i, t in enumerate(tiles)]
    n_views = spec.n_global + spec.n_local
    return [np.stack([b.views[v] for b in batches]) for v in range(n_views)]


def train_step(state: DinoState, tiles: np.ndarray, cfg: TrainConfig) -> tuple[DinoState, StepInfo]:
    """One student update, then the EMA teacher update, then the center update."""
    tiles = np.asarray(tiles, dtype=np.float32)
    if tiles.ndim != 4 or len(tiles) == 0:
        raise ShapeError("train_step needs a non-empty (B, bands, H, W) batch")
    mcfg, spec = state.config, cfg.augment
    step = state.step
    lr, wd, lam = cfg.lr_at(step), cfg.wd_at(step), cfg.momentum_at(step)
    views = _stack_views(tiles, spec, cfg.seed, step)
    b, ng = len(tiles), spec.n_global
    try:
        T = {k: Tensor(v) for k, v in state.teacher.items()}
        glob = np.concatenate(views[:ng])
        tok, _ = vit.encode(T, mcfg, glob)
        t_logits = vit.project(T, mcfg, vit.pool(tok)).data
        teacher_out = [t_logits[i * b:(i + 1) * b] for i in range(ng)]

        S = {k: Tensor(v, requires_grad=True) for k, v in state.student.items()}
        with Tape() as tape:
            s_logits = []
            groups = [views[:ng]] + ([views[ng:]] if spec.n_local else [])
            for group in groups:
                tok, _ = vit.encode(S, mcfg, np.concatenate(group))
                out = vit.project(S, mcfg, vit.pool(tok))
                s_logits += [out[i * b:(i + 1) * b] for i in range(len(group))]
            loss, probs = dino_loss(s_logits, teacher_out, state.center, cfg.tau_s, cfg.tau_t)
        grads = tape.gradient(loss, list(S.values()))
    except (InvalidValue, NumericalError) as e:
        raise NumericalError(f"step {step}: {e}", step=step) from e
    loss_v = float(loss.data)
    if not math.isfinite(loss_v):
        raise NumericalError(f"non-finite loss at step {step}", step=step)

    student = {k: v.copy() for k, v in state.student.items()}
    m = dict(state.adam_m)
    v = dict(state.adam_v)
    adamw_step(student, dict(zip(S, grads)), m, v, step + 1, lr, wd, cfg)
    for k, arr in student.items():
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite parameter {k} after step {step}", step=step)
    teacher = ema_update(state.teacher, student, lam)
    center = update_center(state.center, t_logits, cfg.center_momentum)
    q = nx.softmax(Tensor((t_logits - state.center) / np.float32(cfg.tau_t))).data
    collapse = collapse_metric(q)
    new = DinoState(mcfg, student, teacher, center, m, v, step + 1)
    return new, StepInfo(step, loss_v, lr, wd, lam, collapse)


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for ``step`` drawn from a stream of per-epoch seeded permutations."""
    start = step * batch_size
    out = []
    pos = start
    while len(out) < batch_size:
        epoch, off = divmod(pos, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(out), n - off)
        out.extend(perm[off:off + take].tolist())
        pos += take
    return np.array(out, dtype=np.int64)


def prepare_tiles(manifest: Manifest, cfg: vit.ModelConfig, max_cloud: float = 10.0,
                  stats: BandStats | None = None) -> tuple[list[str], np.ndarray, BandStats]:
    """Cloud-filter, load, harmonise and standardise a manifest's tiles.

    Returns tile ids (sorted), a ``(n, bands, S, S)`` float32 stack and the
    band statistics used.
    """
    kept = filter_cloud(manifest, max_cloud)
    recs = sorted(kept.records, key=lambda r: r.tile_id)
    tiles = kept.with_records(recs).load_all()
    tiles = [harmonize(t, cfg.image_size) for t in tiles]
    for t in tiles:
        if t.bands != cfg.bands:
            raise ShapeError(f"tile {t.tile_id} has {t.bands} bands, model expects {cfg.bands}")
    if stats is None:
        stats = compute_stats(tiles)
    stack = (np.stack([standardize(t, stats).raster for t in tiles]) if tiles
             else np.zeros((0, cfg.bands, cfg.image_size, cfg.image_size), dtype=np.float32))
    return [r.tile_id for r in recs], stack, stats


def _log_rows_csv(rows: list[StepInfo]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_LOG_HEADER)
    for r in rows:
        w.writerow([r.step, repr(r.loss), repr(r.lr), repr(r.wd), repr(r.lam), repr(r.collapse)])
    return buf.getvalue()


def read_loss_log(path) -> list[StepInfo]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != LOSS_LOG_HEADER:
            raise ConfigError(f"{path}: unexpected loss log header")
        return [StepInfo(int(r[0]), *map(float, r[1:])) for r in reader]


@dataclass
class PretrainResult:
    checkpoint: Path
    log: list[StepInfo]
    warnings: list[str]
    state: DinoState


def _meta(cfg: TrainConfig, stats: BandStats, n_tiles: int) -> dict:
    return {"seed": cfg.seed, "total_steps": cfg.steps, "batch_size": cfg.batch_size,
            "band_mean": [float(x) for x in stats.mean], "band_std": [float(x) for x in stats.std],
            "n_tiles": n_tiles, "augment": asdict(cfg.augment)}


def pretrain(model_cfg: vit.ModelConfig, manifest: Manifest, cfg: TrainConfig, out_dir,
             resume=None, stop_at: int | None = None) -> PretrainResult:
    """Run (or resume) pre-training and write checkpoints plus a loss log.

    ``stop_at`` ends the run early (after that many total steps) while
    keeping every schedule tied to ``cfg.steps``; it exists so a run can be
    split and resumed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state, meta = load_state(resume)
        if meta.get("seed") != cfg.seed or meta.get("total_steps") != cfg.steps:
            raise ConfigError("resume checkpoint was written with a different seed or step budget")
        if state.config != model_cfg:
            raise ConfigError("resume checkpoint has a different model config")
        stats = BandStats(np.array(meta["band_mean"]), np.array(meta["band_std"]))
        _, data, _ = prepare_tiles(manifest, model_cfg, cfg.max_cloud, stats)
        log_path = out / "loss_log.csv"
        rows = [r for r in read_loss_log(log_path) if r.step < state.step] if log_path.exists() else []
    else:
        _, data, stats = prepare_tiles(manifest, model_cfg, cfg.max_cloud)
        state = DinoState.create(model_cfg, cfg.seed)
        rows = []
    if len(data) == 0:
        raise ConfigError("no tiles left after cloud filtering")
    meta = _meta(cfg, stats, len(data))
    warnings = []
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    while state.step < end:
        idx = batch_indices(len(data), cfg.batch_size, state.step, cfg.seed)
        state, info = train_step(state, data[idx], cfg)
        rows.append(info)
        if cfg.log_every and (info.step % cfg.log_every == 0 or state.step == end):
            log.info("step=%d loss=%.6f lr=%.3g wd=%.4f lambda=%.6f collapse=%.5f",
                     info.step, info.loss, info.lr, info.wd, info.lam, info.collapse)
            if info.collapse < cfg.collapse_floor:
                msg = f"step={info.step} collapse_metric={info.collapse:.6f} below floor {cfg.collapse_floor}"
                warnings.append(msg)
                log.warning(msg)
        if cfg.save_every and state.step % cfg.save_every == 0 and state.step < end:
            save_state(out / f"ckpt_step{state.step:06d}.gsdg", state, meta)
    ckpt = out / "checkpoint.gsdg"
    save_state(ckpt, state, meta)
    vit._atomic_write(out / "loss_log.csv", _log_rows_csv(rows).encode())
    return PretrainResult(ckpt, rows, warnings, state)
