"""Losses, gradients, AdamW with warmup-cosine schedule, training loop,
checkpointing and the finite-difference gradient verifier.

The training recipe follows the reference setup: AdamW at base lr 1e-4 with
50 warmup epochs and cosine decay, batch size 1 on random crops, loss =
soft dice + cross entropy, and best-validation-DSC checkpoint selection.
Everything is seed-deterministic: per-epoch shuffles and per-sample crop
offsets are derived from (seed, epoch, index), so a resumed run reproduces
the uninterrupted loss sequence bit for bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .topology import (
    ModelConfig,
    as_tensors,
    forward,
    forward_graph,
    init_params,
    param_count,
)
from .volume import LabelVolume, SyntheticSpec, VolumeTensor, generate_synthetic, random_crop, sliding_window_infer

DICE_EPS = 1e-5


# ------------------------------------------------------------------- losses


def one_hot(labels: LabelVolume) -> np.ndarray:
    eye = np.eye(labels.num_classes, dtype=np.float32)
    return np.moveaxis(eye[labels.data], -1, 0)


def _check_loss_shapes(logits_shape, labels: LabelVolume):
    if logits_shape[0] != labels.num_classes:
        raise ShapeError(
            f"logits have {logits_shape[0]} channels, labels declare "
            f"{labels.num_classes} classes"
        )
    if tuple(logits_shape[1:]) != labels.dims:
        raise ShapeError(f"logits dims {logits_shape[1:]} != label dims {labels.dims}")


def dice_loss_graph(logits: Tensor, onehot: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean over classes of (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps)."""
    probs = ad.softmax(logits, axis=0)
    g = Tensor(onehot.astype(logits.dtype, copy=False))
    inter = ad.sum_(ad.mul(probs, g), axis=(1, 2, 3))
    psum = ad.sum_(probs, axis=(1, 2, 3))
    gsum = Tensor(onehot.sum(axis=(1, 2, 3)).astype(logits.dtype))
    per_class = ad.mul(
        ad.add(ad.mul(inter, 2.0), eps),
        ad.pow_const(ad.add(ad.add(psum, gsum), eps), -1.0),
    )
    return ad.add(ad.mul(ad.mean_(per_class), -1.0), 1.0)


def ce_loss_graph(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean over voxels of -log softmax probability at the true class."""
    ls = ad.log_softmax(logits, axis=0)
    g = Tensor(onehot.astype(logits.dtype, copy=False))
    n_vox = onehot[0].size
    return ad.mul(ad.sum_(ad.mul(ls, g)), -1.0 / n_vox)


def combined_loss_graph(logits: Tensor, onehot: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    dice = dice_loss_graph(logits, onehot)
    ce = ce_loss_graph(logits, onehot)
    return ad.add(dice, ce), dice, ce


def soft_dice_loss(logits: VolumeTensor, labels: LabelVolume) -> float:
    _check_loss_shapes(logits.data.shape, labels)
    return dice_loss_graph(Tensor(logits.data), one_hot(labels)).item()


def cross_entropy_loss(logits: VolumeTensor, labels: LabelVolume) -> float:
    _check_loss_shapes(logits.data.shape, labels)
    return ce_loss_graph(Tensor(logits.data), one_hot(labels)).item()


def combined_loss(logits: VolumeTensor, labels: LabelVolume) -> tuple[float, float, float]:
    """(total, dice term, ce term); total = dice + ce exactly."""
    _check_loss_shapes(logits.data.shape, labels)
    total, dice, ce = combined_loss_graph(Tensor(logits.data), one_hot(labels))
    return total.item(), dice.item(), ce.item()


# ----------------------------------------------------------------- backward


def backward(
    cfg: ModelConfig, params: Mapping[str, np.ndarray], vol: VolumeTensor,
    labels: LabelVolume,
) -> tuple[dict[str, np.ndarray], tuple[float, float, float]]:
    """Reverse-mode gradients of the combined loss for every parameter."""
    _check_loss_shapes((cfg.num_classes,) + vol.dims, labels)
    pt = as_tensors(params, requires_grad=True)
    logits = forward_graph(cfg, pt, Tensor(vol.data))
    total, dice, ce = combined_loss_graph(logits, one_hot(labels))
    if not math.isfinite(total.item()):
        raise NumericError(f"non-finite loss {total.item()}")
    total.backward()
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in pt.items()
    }
    return grads, (total.item(), dice.item(), ce.item())


# ----------------------------------------------------------------- schedule


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-4
    warmup_epochs: int = 50
    total_epochs: int = 300
    steps_per_epoch: int = 1
    min_lr: float = 0.0

    def validate(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError("need 0 <= warmup_epochs <= total_epochs")
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        if not 0 <= self.min_lr <= self.base_lr:
            raise ConfigError("need 0 <= min_lr <= base_lr")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Linear warmup 0 -> base_lr, then cosine decay to min_lr.

    lr_at(0) = 0, lr_at(warmup_steps) = base_lr, lr_at(total_steps) = min_lr.
    """
    sched.validate()
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    ws, ts = sched.warmup_steps, sched.total_steps
    if step < ws:
        return sched.base_lr * step / ws
    span = ts - ws
    t = 1.0 if span == 0 else min((step - ws) / span, 1.0)
    return sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1.0 + math.cos(math.pi * t))


# ------------------------------------------------------------------- AdamW


@dataclass
class OptimState:
    """Decoupled-weight-decay Adam moments; shapes mirror the parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def init_optim_state(params: Mapping[str, np.ndarray], weight_decay: float = 0.01) -> OptimState:
    return OptimState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        weight_decay=weight_decay,
    )


def adamw_step(
    params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
    state: OptimState, lr: float,
) -> tuple[dict[str, np.ndarray], OptimState]:
    """One AdamW update, in place; decay is p -= lr*wd*p, gradient-independent."""
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= lr * state.weight_decay * p
        p -= lr * update
    state.step = t
    return params, state


# -------------------------------------------------------------- checkpoints


CKPT_MAGIC = b"HRSTCKPT"
CKPT_VERSION = 1
_CKPT_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("<f8")}


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    opt_state: OptimState
    epoch: int
    global_step: int
    best_val_dsc: float


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    codes = {"f4": 0, "i4": 1, "f8": 2}
    code = codes[arr.dtype.str[1:]]
    payload = np.ascontiguousarray(arr, dtype=_CKPT_DTYPES[code]).tobytes()
    head = struct.pack("<H", len(name.encode())) + name.encode()
    head += struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    head += struct.pack("<Q", len(payload))
    return head + payload


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.off, self.path = raw, 0, path

    def read(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "model_config": asdict(ckpt.model_config),
        "epoch": ckpt.epoch,
        "global_step": ckpt.global_step,
        "best_val_dsc": ckpt.best_val_dsc,
        "opt": {
            "step": ckpt.opt_state.step,
            "beta1": ckpt.opt_state.beta1,
            "beta2": ckpt.opt_state.beta2,
            "eps": ckpt.opt_state.eps,
            "weight_decay": ckpt.opt_state.weight_decay,
        },
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    tensors = []
    for name, arr in ckpt.params.items():
        tensors.append(_pack_tensor("p/" + name, arr))
        tensors.append(_pack_tensor("m/" + name, ckpt.opt_state.m[name]))
        tensors.append(_pack_tensor("v/" + name, ckpt.opt_state.v[name]))
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            f.write(t)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(raw, path)
    if r.read(8) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = r.unpack("<Q")
    meta = json.loads(r.read(blob_len).decode())
    (n_tensors,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.read(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _CKPT_DTYPES:
            raise CheckpointError(f"{path}: unknown tensor dtype code {code}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        expect = int(np.prod(shape)) * _CKPT_DTYPES[code].itemsize if shape else _CKPT_DTYPES[code].itemsize
        if nbytes != expect:
            raise CheckpointError(f"{path}: tensor {name} length mismatch")
        tensors[name] = np.frombuffer(r.read(nbytes), dtype=_CKPT_DTYPES[code]).reshape(shape).copy()
    if r.off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.off} trailing bytes")
    mc = dict(meta["model_config"])
    mc["heads"] = tuple(mc["heads"])
    cfg = ModelConfig(**mc)
    params = {n[2:]: a for n, a in tensors.items() if n.startswith("p/")}
    opt = OptimState(
        m={n[2:]: a for n, a in tensors.items() if n.startswith("m/")},
        v={n[2:]: a for n, a in tensors.items() if n.startswith("v/")},
        step=meta["opt"]["step"],
        beta1=meta["opt"]["beta1"],
        beta2=meta["opt"]["beta2"],
        eps=meta["opt"]["eps"],
        weight_decay=meta["opt"]["weight_decay"],
    )
    if set(params) != set(opt.m) or set(params) != set(opt.v):
        raise CheckpointError(f"{path}: parameter/moment name sets disagree")
    return Checkpoint(cfg, params, opt, meta["epoch"], meta["global_step"], meta["best_val_dsc"])


# ------------------------------------------------------------ training loop


@dataclass
class TrainConfig:
    epochs: int
    crop: tuple[int, int, int]
    seed: int = 0
    base_lr: float = 1e-4
    warmup_epochs: int = 50
    min_lr: float = 0.0
    val_every: int = 1
    batch_size: int = 1
    val_overlap: float = 0.5
    weight_decay: float = 0.01

    def validate(self, model_cfg: ModelConfig):
        if self.batch_size != 1:
            raise ConfigError("batch_size is fixed at 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.val_every < 1:
            raise ConfigError("val_every must be >= 1")
        m = model_cfg.input_multiple
        if any(c % m != 0 or c < m for c in self.crop):
            raise ConfigError(f"crop {self.crop} must be positive multiples of {m}")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_rows: list[dict] = field(default_factory=list)


LOG_FIELDS = ("step", "epoch", "lr", "loss", "dice", "ce", "val_dsc")


def write_log_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w") as f:
        f.write(",".join(LOG_FIELDS) + "\n")
        for row in rows:
            f.write(",".join(str(row.get(k, "")) for k in LOG_FIELDS) + "\n")


def _crop_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def mean_foreground_dice(
    cfg: ModelConfig, params: Mapping[str, np.ndarray],
    pairs: Sequence[tuple[VolumeTensor, LabelVolume]],
    roi: tuple[int, int, int], overlap: float = 0.5,
) -> float:
    """Mean over cases and foreground classes of argmax-vs-label Dice."""
    model = lambda tile: forward(cfg, params, tile)
    scores = []
    for vol, lab in pairs:
        logits = sliding_window_infer(model, vol, roi, overlap)
        pred = np.argmax(logits.data, axis=0)
        for c in range(1, lab.num_classes):
            a = pred == c
            b = lab.data == c
            union = int(a.sum()) + int(b.sum())
            scores.append(1.0 if union == 0 else 2.0 * int((a & b).sum()) / union)
    return float(np.mean(scores))


def train(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    train_set: Sequence[tuple[VolumeTensor, LabelVolume]],
    val_set: Sequence[tuple[VolumeTensor, LabelVolume]] | None = None,
    resume_from=None,
    out_dir=None,
    stop_after_epochs: int | None = None,
) -> TrainResult:
    """Seeded training loop; checkpoints on best mean validation DSC.

    With `out_dir` set, writes `best.ckpt`, `latest.ckpt` and
    `train_log.csv` there. `resume_from` restores params, optimizer and
    schedule position from a latest-checkpoint and continues identically to
    an uninterrupted run. `stop_after_epochs` simulates an interruption
    after that many completed epochs (the schedule still spans
    `train_cfg.epochs`).
    """
    model_cfg.validate()
    train_cfg.validate(model_cfg)
    if not train_set:
        raise ConfigError("training set is empty")
    val_set = list(val_set) if val_set is not None else list(train_set)
    steps_per_epoch = len(train_set)
    sched = ScheduleConfig(
        train_cfg.base_lr, train_cfg.warmup_epochs, train_cfg.epochs,
        steps_per_epoch, train_cfg.min_lr,
    )
    sched.validate()

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.model_config != model_cfg:
            raise CheckpointError("checkpoint model config differs from requested config")
        params, opt = ck.params, ck.opt_state
        start_epoch, global_step, best = ck.epoch + 1, ck.global_step, ck.best_val_dsc
    else:
        params = init_params(model_cfg, train_cfg.seed)
        opt = init_optim_state(params, weight_decay=train_cfg.weight_decay)
        start_epoch, global_step, best = 0, 0, -1.0

    rows: list[dict] = []
    best_ckpt = None
    end_epoch = train_cfg.epochs if stop_after_epochs is None else min(
        train_cfg.epochs, start_epoch + stop_after_epochs
    )
    for epoch in range(start_epoch, end_epoch):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(steps_per_epoch)
        for i in order:
            vol, lab = train_set[int(i)]
            cv, cl = random_crop(vol, lab, train_cfg.crop, _crop_seed(train_cfg.seed, epoch, int(i)))
            grads, (total, dice, ce) = backward(model_cfg, params, cv, cl)
            lr = lr_at(global_step, sched)
            adamw_step(params, grads, opt, lr)
            rows.append(
                {"step": global_step, "epoch": epoch, "lr": lr, "loss": total,
                 "dice": dice, "ce": ce, "val_dsc": ""}
            )
            global_step += 1
        last_epoch = epoch == train_cfg.epochs - 1
        if (epoch + 1) % train_cfg.val_every == 0 or last_epoch:
            dsc = mean_foreground_dice(
                model_cfg, params, val_set, train_cfg.crop, train_cfg.val_overlap
            )
            rows[-1]["val_dsc"] = dsc
            if dsc > best:
                best = dsc
                best_ckpt = Checkpoint(
                    model_cfg, {k: v.copy() for k, v in params.items()},
                    OptimState(
                        {k: v.copy() for k, v in opt.m.items()},
                        {k: v.copy() for k, v in opt.v.items()},
                        opt.step, opt.beta1, opt.beta2, opt.eps, opt.weight_decay,
                    ),
                    epoch, global_step, best,
                )
                if out_dir is not None:
                    save_checkpoint(best_ckpt, f"{out_dir}/best.ckpt")
        if out_dir is not None:
            save_checkpoint(
                Checkpoint(model_cfg, params, opt, epoch, global_step, best),
                f"{out_dir}/latest.ckpt",
            )
    if out_dir is not None:
        write_log_csv(rows, f"{out_dir}/train_log.csv")
    if best_ckpt is None:
        best_ckpt = Checkpoint(model_cfg, params, opt, end_epoch - 1, global_step, best)
    return TrainResult(best_ckpt, rows)


# ----------------------------------------------------- finite differences


FD_FAMILIES = (
    "embedding", "qkv", "bias_table", "layer_norm", "mlp",
    "merge", "expand", "residual", "head",
)


def param_family(name: str) -> str:
    if name.startswith("embed."):
        return "embedding"
    if ".attn.bias_table" in name:
        return "bias_table"
    if ".attn." in name:
        return "qkv"
    if ".ln1." in name or ".ln2." in name:
        return "layer_norm"
    if ".mlp." in name:
        return "mlp"
    if ".merge" in name or ".down" in name:
        return "merge"
    if ".up" in name or name.startswith("head.up") or name.startswith("head.expand"):
        return "expand"
    if ".res." in name:
        return "residual"
    if name.startswith("head.out"):
        return "head"
    raise ConfigError(f"cannot classify parameter {name}")


@dataclass
class FDReport:
    passed: bool
    tolerance: float
    max_rel_err: float
    checked: int
    families: dict[str, dict]
    failures: list[dict] = field(default_factory=list)

    def text(self) -> str:
        lines = [
            f"finite-difference check: {'PASS' if self.passed else 'FAIL'} "
            f"(max rel err {self.max_rel_err:.3e}, tol {self.tolerance:.1e}, "
            f"{self.checked} parameters)"
        ]
        for fam in FD_FAMILIES:
            st = self.families[fam]
            lines.append(
                f"  {fam:<12} checked {st['checked']:>4}  max rel err {st['max_rel_err']:.3e}"
                + ("" if st["failures"] == 0 else f"  FAILURES {st['failures']}")
            )
        return "\n".join(lines)


def generic_check_point(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """A non-degenerate float64 parameter point for gradient probing.

    The training init (tiny weights, zero biases/tables) makes attention
    collapse to token averaging, which drives instance-norm inputs nearly
    constant; the norm then amplifies probe perturbations across leaky-relu
    kinks and biases any finite-difference quotient. O(0.5)-scale weights
    and nonzero biases keep every activation away from that regime while
    exercising exactly the same backward rules.
    """
    from .topology import param_schema

    rng = np.random.default_rng(seed)
    point = {}
    for spec in param_schema(cfg):
        if spec.init == "ones":
            point[spec.name] = 1.0 + 0.2 * rng.standard_normal(spec.shape)
        else:
            scale = 0.5 if spec.init == "trunc" else 0.2
            point[spec.name] = scale * rng.standard_normal(spec.shape)
    return point


def finite_difference_check(
    cfg: ModelConfig,
    seed: int = 0,
    tolerance: float = 1e-3,
    num_samples: int = 200,
    input_dims: tuple[int, int, int] | None = None,
    fd_step: float = 1e-5,
    data_seed: int = 7,
) -> FDReport:
    """Compare reverse-mode gradients with float64 central differences.

    Samples at least `num_samples` coordinates stratified over every
    parameter family, probing at a generic parameter point (see
    `generic_check_point`). Gradients below an absolute floor of 1e-8 on
    both sides count as agreeing (loss-insensitive parameters). The default
    step balances central-difference truncation against float64 rounding;
    larger steps measure the probe's own truncation error, not gradient
    error.
    """
    cfg.validate()
    n_params = param_count(cfg)
    if n_params > 100_000:
        raise ConfigError(
            f"model has {n_params} parameters; the check needs a desk-scale config"
        )
    if input_dims is None:
        m = cfg.input_multiple
        input_dims = (2 * m, 2 * m, 2 * m)
    vol, lab = generate_synthetic(
        SyntheticSpec(
            seed=data_seed, dims=input_dims, channels=cfg.in_channels,
            num_classes=cfg.num_classes, blobs_per_class=1,
            radius_range=(2, max(2, min(input_dims) // 4)), noise_sigma=0.2,
        )
    )
    onehot = one_hot(lab).astype(np.float64)
    x64 = vol.data.astype(np.float64)
    params = generic_check_point(cfg, seed)

    def loss_value(trace: list | None = None) -> float:
        ad.lrelu_sign_trace = trace
        try:
            pt = {k: Tensor(v) for k, v in params.items()}
            logits = forward_graph(cfg, pt, Tensor(x64))
            total, _, _ = combined_loss_graph(logits, onehot)
            return total.item()
        finally:
            ad.lrelu_sign_trace = None

    pt = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    logits = forward_graph(cfg, pt, Tensor(x64))
    total, _, _ = combined_loss_graph(logits, onehot)
    total.backward()
    analytic = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in pt.items()
    }

    by_family: dict[str, list[str]] = {f: [] for f in FD_FAMILIES}
    for name in params:
        by_family[param_family(name)].append(name)
    missing = [f for f, names in by_family.items() if not names]
    if missing:
        raise ConfigError(f"config exercises no parameters in families {missing}")

    rng = np.random.default_rng(seed + 1)
    per_family = max(3, -(-num_samples // len(FD_FAMILIES)))

    def probe(name: str, idx: int) -> tuple[float, bool]:
        """Central difference; flags brackets that cross a leaky-relu kink."""
        flat = params[name].reshape(-1)
        orig = flat[idx]
        plus_signs: list = []
        minus_signs: list = []
        flat[idx] = orig + fd_step
        lp = loss_value(plus_signs)
        flat[idx] = orig - fd_step
        lm = loss_value(minus_signs)
        flat[idx] = orig
        crossed = len(plus_signs) != len(minus_signs) or any(
            not np.array_equal(p, m) for p, m in zip(plus_signs, minus_signs)
        )
        return (lp - lm) / (2.0 * fd_step), crossed

    fam_stats = {
        f: {"checked": 0, "max_rel_err": 0.0, "failures": 0, "kink_skips": 0}
        for f in FD_FAMILIES
    }
    failures = []
    max_rel = 0.0
    for fam in FD_FAMILIES:
        names = by_family[fam]
        st = fam_stats[fam]
        for _ in range(per_family):
            numeric = None
            for _attempt in range(8):
                name = names[int(rng.integers(len(names)))]
                idx = int(rng.integers(params[name].size))
                numeric, crossed = probe(name, idx)
                if not crossed:
                    break
                st["kink_skips"] += 1
            a = float(analytic[name].reshape(-1)[idx])
            scale = max(abs(a), abs(numeric))
            diff = abs(a - numeric)
            rel = 0.0 if diff < 1e-8 or scale < 1e-8 else diff / scale
            st["checked"] += 1
            st["max_rel_err"] = max(st["max_rel_err"], rel)
            max_rel = max(max_rel, rel)
            if rel >= tolerance:
                st["failures"] += 1
                failures.append(
                    {"param": name, "index": idx, "analytic": a, "numeric": numeric,
                     "rel_err": rel}
                )
    return FDReport(
        passed=not failures, tolerance=tolerance, max_rel_err=max_rel,
        checked=sum(s["checked"] for s in fam_stats.values()),
        families=fam_stats, failures=failures,
    )
