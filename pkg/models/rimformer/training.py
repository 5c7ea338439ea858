import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tensorboardX import SummaryWriter
from tqdm import tqdm

from models.rimformer.rimformer import (
    ModelConfig, RimformerParams, parameter_specs, check_params, rimformer_forward,
)
from radar.dataset import Dataset, SampleRecord
from radar.evaluation import evaluate_testset
from utils.autodiff import Tensor, ArrayLike, Graph, as_tensor, backward, norm, mean, square
from utils.math import dft, magnitude
from utils.python import derive_seed
from utils.serialization import save_checkpoint, load_checkpoint, CorruptArtifactError

logging.basicConfig()
logger = logging.getLogger(__name__)
logger.setLevel(logging.DEBUG)

CSV_HEADER = ("epoch", "train_loss", "val_loss", "val_mse", "val_sinr_db", "lr")


class NonFiniteLossError(RuntimeError):
    pass


# ------------------
#   Loss
# ------------------

@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.3
    spectrum_mode: str = "magnitude"  # magnitude | complex
    kind: str = "hybrid"  # hybrid | mse

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.spectrum_mode not in ("magnitude", "complex"):
            raise ValueError(f"spectrum_mode must be 'magnitude' or 'complex', got {self.spectrum_mode}")
        if self.kind not in ("hybrid", "mse"):
            raise ValueError(f"loss kind must be 'hybrid' or 'mse', got {self.kind}")


def _check_pair(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ")
    if pred.ndim < 2 or pred.shape[-2] < 1:
        raise ValueError(f"expected [..., signal_len, C] signals, got {pred.shape}")


def hybrid_loss_terms(pred: ArrayLike, target: ArrayLike, cfg: LossConfig = LossConfig()) -> Tuple[Tensor, Tensor]:
    """Per-signal (time, frequency) terms, shaped like the leading batch axes.

    time = (1 − λ)/√N·‖Y − Ỹ‖ and frequency = λ/√N·‖|F(Y)| − |F(Ỹ)|‖ (or the
    norm of the complex spectrum difference), N being the signal length and
    I/Q channels being one complex sequence.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    _check_pair(pred, target)
    scale = 1.0 / np.sqrt(pred.shape[-2])
    time_term = norm(pred - target, axis=(-2, -1)) * ((1.0 - cfg.lam) * scale)
    if cfg.spectrum_mode == "magnitude":
        diff = magnitude(dft(pred)) - magnitude(dft(target))
        freq_term = norm(diff, axis=-1) * (cfg.lam * scale)
    else:
        freq_term = norm(dft(pred) - dft(target), axis=(-2, -1)) * (cfg.lam * scale)
    return time_term, freq_term


def hybrid_loss(pred: ArrayLike, target: ArrayLike, cfg: LossConfig = LossConfig()) -> Tensor:
    """Scalar training loss, averaged over any leading batch axes."""
    pred, target = as_tensor(pred), as_tensor(target)
    if cfg.kind == "mse":
        _check_pair(pred, target)
        return mean(square(pred - target))
    time_term, freq_term = hybrid_loss_terms(pred, target, cfg)
    return mean(time_term + freq_term)


# ------------------
#   Initialization
# ------------------

def kaiming_init(shape: Tuple[int, ...], fan_in: int, seed: int) -> Tensor:
    """N(0, 2/fan_in) entries."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def init_params(cfg: ModelConfig, seed: int = 0) -> RimformerParams:
    params = OrderedDict()
    for i, (name, spec) in enumerate(parameter_specs(cfg).items()):
        if spec.init == "kaiming":
            params[name] = kaiming_init(spec.shape, spec.fan_in, derive_seed(seed, i))
        elif spec.init == "ones":
            params[name] = Tensor(np.ones(spec.shape), requires_grad=True)
        else:
            params[name] = Tensor(np.zeros(spec.shape), requires_grad=True)
    return params


# ------------------
#   Optimizer & schedule
# ------------------

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    base_lr: float = 1e-4

    @classmethod
    def for_params(cls, params: RimformerParams, base_lr: float = 1e-4, **kwargs) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            base_lr=base_lr, **kwargs
        )


def adam_step(
        params: RimformerParams,
        state: OptimizerState,
        lr: Optional[float] = None,
        grads: Optional[Dict[str, np.ndarray]] = None,
) -> Tuple[RimformerParams, OptimizerState]:
    """Bias-corrected Adam update, in place. Gradients default to each
    parameter's ``grad``."""
    lr = state.base_lr if lr is None else lr
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise RuntimeError(f"no gradient for {missing[:5]}; run backward before adam_step")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient of {name} has shape {g.shape}, parameter {p.shape}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    t0: int = 50
    t_mult: int = 2

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError(f"need lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if self.t0 < 1 or self.t_mult < 1:
            raise ValueError(f"need T0 >= 1 and T_mult >= 1, got {self.t0}, {self.t_mult}")


def cosine_annealing(t_cur: float, t_i: float, cfg: ScheduleConfig) -> float:
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + np.cos(np.pi * t_cur / t_i))


def lr_schedule(epoch: int, cfg: ScheduleConfig = ScheduleConfig()) -> float:
    """Cosine annealing with warm restarts after T0, T0·T_mult, ... epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    t_cur, t_i = epoch, cfg.t0
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= cfg.t_mult
    return float(cosine_annealing(t_cur, t_i, cfg))


# ------------------
#   Checkpoints
# ------------------

def save_rimformer(path: str, params: RimformerParams, cfg: ModelConfig, step: int, dtype: str = "f64") -> None:
    header = {
        "model_config": cfg.to_dict(),
        "window_config": asdict(cfg.window),
        "step": step,
    }
    save_checkpoint(path, params, header, dtype=dtype)


def load_rimformer(path: str) -> Tuple[RimformerParams, ModelConfig, Dict]:
    header, arrays = load_checkpoint(path)
    try:
        cfg = ModelConfig(**header["model_config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptArtifactError(f"{path}: invalid model config ({e})")
    params = OrderedDict((name, Tensor(value, requires_grad=True)) for name, value in arrays.items())
    try:
        check_params(params, cfg)
    except ValueError as e:
        raise CorruptArtifactError(f"{path}: {e}")
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            raise CorruptArtifactError(f"{path}: parameter {name} is not finite")
    return params, cfg, header


# ------------------
#   Training loop
# ------------------

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_mse: float
    val_sinr_db: float
    lr: float

    def row(self):
        return [self.epoch] + [repr(float(v)) for v in (self.train_loss, self.val_loss, self.val_mse, self.val_sinr_db, self.lr)]


@dataclass
class TrainReport:
    history: List[EpochMetrics]
    params: RimformerParams
    checkpoints: List[str] = field(default_factory=list)

    @property
    def final(self) -> EpochMetrics:
        return self.history[-1]


def _stack(records: List[SampleRecord]) -> Tuple[np.ndarray, np.ndarray]:
    return np.stack([r.interfered for r in records]), np.stack([r.clean for r in records])


def split_loss(x: np.ndarray, y: np.ndarray, params: RimformerParams, cfg: ModelConfig, loss_cfg: LossConfig, batch_size: int) -> float:
    """Sample-weighted mean loss; runs outside any graph."""
    total = 0.0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        total += float(hybrid_loss(rimformer_forward(xb, params, cfg), yb, loss_cfg).data) * len(xb)
    return total / len(x)


def evaluate_split(
        records: List[SampleRecord], params: Optional[RimformerParams], model_cfg: Optional[ModelConfig],
        dataset: Dataset, batch_size: int = 16,
) -> Tuple[float, float]:
    """(MSE on normalized signals, mean SINR of denormalized reconstructions).
    ``params=None`` evaluates the interfered inputs themselves."""
    report = evaluate_testset(
        records, params, model_cfg, dataset.chirp, dataset.sim, batch_size=batch_size, split="val", progress=False
    )
    return report.mean_mse, report.mean_sinr_db


def train(
        dataset: Dataset,
        model_cfg: ModelConfig,
        loss_cfg: LossConfig = LossConfig(),
        sched_cfg: ScheduleConfig = ScheduleConfig(),
        epochs: int = 500,
        batch_size: int = 16,
        seed: int = 0,
        checkpoint_dir: Optional[str] = None,
        checkpoint_every: int = 50,
        val_limit: Optional[int] = None,
        on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> TrainReport:
    """Mini-batch Adam on (interfered -> clean) pairs.

    Writes ``training_log.csv`` and ``checkpoint-XXXX.ckpt`` files into
    ``checkpoint_dir`` when one is given.
    """
    if epochs < 0 or batch_size < 1 or checkpoint_every < 1:
        raise ValueError(f"need epochs >= 0, batch_size >= 1 and checkpoint_every >= 1")
    train_records = dataset.split("train")
    val_records = dataset.split("val")[:val_limit]
    if not train_records or not val_records:
        raise ValueError(f"training needs non-empty train and val splits, got {len(train_records)} / {len(val_records)}")
    if model_cfg.in_channels != dataset.sim.channels or model_cfg.signal_len != dataset.sim.n_samples:
        raise ValueError(f"model expects [{model_cfg.signal_len}, {model_cfg.in_channels}] signals, dataset holds [{dataset.sim.n_samples}, {dataset.sim.channels}]")

    x_train, y_train = _stack(train_records)
    x_val, y_val = _stack(val_records)
    params = init_params(model_cfg, seed)
    state = OptimizerState.for_params(params, base_lr=sched_cfg.lr_max)
    shuffle_rng = np.random.default_rng(derive_seed(seed, len(train_records)))

    csv_path = None
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        csv_path = os.path.join(checkpoint_dir, "training_log.csv")
        with open(csv_path, "w", encoding="utf-8") as file:
            file.write(",".join(CSV_HEADER) + "\n")

    def validate(epoch: int, train_loss: float, lr: float) -> EpochMetrics:
        val_mse, val_sinr = evaluate_split(val_records, params, model_cfg, dataset, batch_size)
        return EpochMetrics(
            epoch=epoch, train_loss=train_loss, lr=lr, val_mse=val_mse, val_sinr_db=val_sinr,
            val_loss=split_loss(x_val, y_val, params, model_cfg, loss_cfg, batch_size),
        )

    def log(metrics: EpochMetrics) -> None:
        if csv_path is not None:
            with open(csv_path, "a", encoding="utf-8") as file:
                file.write(",".join(str(v) for v in metrics.row()) + "\n")
        logger.info(f"epoch {metrics.epoch} | train loss: {metrics.train_loss:.6f} | val loss: {metrics.val_loss:.6f} | val sinr: {metrics.val_sinr_db:.2f} dB | lr: {metrics.lr:.2e}")
        if on_epoch is not None:
            on_epoch(metrics)

    checkpoints = list()

    def checkpoint(epoch: int) -> None:
        if checkpoint_dir is not None:
            path = os.path.join(checkpoint_dir, f"checkpoint-{epoch:04d}.ckpt")
            save_rimformer(path, params, model_cfg, step=state.step)
            checkpoints.append(path)

    initial = validate(0, split_loss(x_train, y_train, params, model_cfg, loss_cfg, batch_size), lr_schedule(0, sched_cfg))
    history = [initial]
    if epochs == 0:
        log(initial)
        checkpoint(0)
        return TrainReport(history=history, params=params, checkpoints=checkpoints)

    for epoch in range(1, epochs + 1):
        lr = lr_schedule(epoch - 1, sched_cfg)
        order = shuffle_rng.permutation(len(x_train))
        total = 0.0
        for start in tqdm(range(0, len(order), batch_size), desc=f"epoch {epoch}", leave=False):
            batch = order[start:start + batch_size]
            with Graph() as graph:
                loss = hybrid_loss(rimformer_forward(x_train[batch], params, model_cfg), y_train[batch], loss_cfg)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLossError(f"loss became {value} at epoch {epoch}, batch starting at {start}")
            for p in params.values():
                p.zero_grad()
            backward(loss, graph, inputs=tuple(params.values()))
            adam_step(params, state, lr)
            total += value * len(batch)

        metrics = validate(epoch, total / len(x_train), lr)
        history.append(metrics)
        log(metrics)
        if epoch % checkpoint_every == 0 or epoch == epochs:
            checkpoint(epoch)

    return TrainReport(history=history, params=params, checkpoints=checkpoints)


def run_train(
        dataset: Dataset,
        model_cfg: ModelConfig,
        output_path: str,
        loss_cfg: LossConfig = LossConfig(),
        sched_cfg: ScheduleConfig = ScheduleConfig(),
        epochs: int = 500,
        batch_size: int = 16,
        seed: int = 0,
        checkpoint_every: int = 50,
        val_limit: Optional[int] = None,
) -> TrainReport:
    """:func:`train` plus tensorboard curves and a ``metrics.json`` log under ``output_path``."""
    train_writer = SummaryWriter(logdir=os.path.join(output_path, "logs/train"), flush_secs=1, max_queue=1)
    valid_writer = SummaryWriter(logdir=os.path.join(output_path, "logs/valid"), flush_secs=1, max_queue=1)
    log_dict = dict(train=list(), valid=list())

    def on_epoch(metrics: EpochMetrics) -> None:
        train_writer.add_scalar(tag="loss", scalar_value=metrics.train_loss, global_step=metrics.epoch)
        train_writer.add_scalar(tag="lr", scalar_value=metrics.lr, global_step=metrics.epoch)
        valid_writer.add_scalar(tag="loss", scalar_value=metrics.val_loss, global_step=metrics.epoch)
        valid_writer.add_scalar(tag="mse", scalar_value=metrics.val_mse, global_step=metrics.epoch)
        valid_writer.add_scalar(tag="sinr", scalar_value=metrics.val_sinr_db, global_step=metrics.epoch)
        log_dict["train"].append({
            "metrics": [
                {"tag": "loss", "value": metrics.train_loss},
                {"tag": "lr", "value": metrics.lr},
            ],
            "global_step": metrics.epoch
        })
        log_dict["valid"].append({
            "metrics": [
                {"tag": "loss", "value": metrics.val_loss},
                {"tag": "mse", "value": metrics.val_mse},
                {"tag": "sinr", "value": metrics.val_sinr_db},
            ],
            "global_step": metrics.epoch
        })

    try:
        report = train(
            dataset, model_cfg, loss_cfg, sched_cfg, epochs=epochs, batch_size=batch_size, seed=seed,
            checkpoint_dir=output_path, checkpoint_every=checkpoint_every, val_limit=val_limit, on_epoch=on_epoch,
        )
    finally:
        train_writer.close()
        valid_writer.close()
        with open(os.path.join(output_path, 'metrics.json'), "w") as file:
            json.dump(log_dict, file, ensure_ascii=False)
    return report
