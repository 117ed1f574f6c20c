"""Training orchestration: source pass, teacher pseudo-labels, class mixing,
mixed pass, optional guidance pass, one combined optimizer step, EMA update.

Every random choice (batch order, class sampling) is derived from the run seed
and the step index alone, so runs are reproducible end to end and a resumed
run continues bit-for-bit where the checkpoint left off.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_archive, save_archive
from .guider import Guider, GuiderConfig
from .losses import LossBreakdown, LossConfig, beta, ce_loss, guidance_loss, total_loss
from .mixing import build_mask, mix, sample_classes
from .model import SegModel, SegModelConfig
from .selftrain import EmaTeacher, pixel_weights, pseudo_from_logits
from .shapeworld import LabeledImage

METHODS = ("source_only", "dacs", "dacs_guidance")

_SOURCE_STREAM = 1
_TARGET_STREAM = 2
_MIX_STREAM = 3

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    method: str = "dacs_guidance"
    seed: int = 0
    total_steps: int = 4000
    batch_size: int = 2
    lr_encoder: float = 6e-5
    lr_decoder: float = 6e-4
    lr_guider: float = 6e-5
    warmup_steps: int = -1  # -1 means 10% of total_steps
    alpha: float = 0.999
    weight_decay: float = 0.01
    checkpoint_interval: int = 1000
    eval_interval: int = 500
    torch_threads: int = 1  # tensors here are tiny; thread sync costs more than it buys. 0 = leave as-is

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if min(self.lr_encoder, self.lr_decoder, self.lr_guider) <= 0.0:
            raise ValueError("learning rates must be > 0")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("total_steps must be >= 0 and batch_size >= 1")
        if self.warmup_steps > self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} exceeds total_steps {self.total_steps}")

    @property
    def effective_warmup(self) -> int:
        return self.total_steps // 10 if self.warmup_steps < 0 else self.warmup_steps


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: SegModelConfig = field(default_factory=SegModelConfig)
    guider: GuiderConfig = field(default_factory=GuiderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    source_data: str | None = None
    target_data: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        def build(cls, section, tuple_fields=()):
            names = {f.name for f in dataclasses.fields(cls)}
            unknown = set(section) - names
            if unknown:
                raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
            kwargs = dict(section)
            for name in tuple_fields:
                if name in kwargs:
                    kwargs[name] = tuple(kwargs[name])
            return cls(**kwargs)

        return RunConfig(
            train=build(TrainConfig, data.get("train", {})),
            model=build(SegModelConfig, data.get("model", {}), tuple_fields=("encoder_channels",)),
            guider=build(GuiderConfig, data.get("guider", {})),
            loss=build(LossConfig, data.get("loss", {})),
            source_data=data.get("source_data"),
            target_data=data.get("target_data"),
        )


class TrainerState:
    """Mutable training state: student, teacher, optional guider, optimizer, step."""

    def __init__(
        self,
        config: RunConfig,
        model: SegModel,
        teacher: EmaTeacher,
        guider: Guider | None,
        optimizer: torch.optim.Optimizer,
        param_names: dict[int, str],
    ):
        self.config = config
        self.model = model
        self.teacher = teacher
        self.guider = guider
        self.optimizer = optimizer
        self.param_names = param_names
        self.step = 0


def build_trainer(config: RunConfig) -> TrainerState:
    """Construct a fresh training state, seeded for reproducible initialization.

    The segmentation model is always initialized first so that methods with
    and without a guider start from identical student weights under one seed.
    """
    tcfg = config.train
    torch.manual_seed(tcfg.seed)
    model = SegModel(config.model)
    teacher = EmaTeacher(model, alpha=tcfg.alpha)

    guider = None
    if tcfg.method == "dacs_guidance":
        gcfg = dataclasses.replace(config.guider, feature_dim=config.model.feature_dim)
        guider = Guider(gcfg)

    groups = model.parameter_groups()
    param_groups = [
        {"params": groups["encoder"], "lr": tcfg.lr_encoder, "name": "encoder"},
        {"params": groups["decoder"], "lr": tcfg.lr_decoder, "name": "decoder"},
    ]
    # with lambda_gt == 0 the guidance branch never runs, so the guider stays
    # out of the optimizer entirely and the run degenerates to plain mixing
    if guider is not None and config.loss.lambda_gt > 0.0:
        param_groups.append({"params": list(guider.parameters()), "lr": tcfg.lr_guider, "name": "guider"})
    optimizer = torch.optim.AdamW(param_groups, weight_decay=tcfg.weight_decay)
    for group in optimizer.param_groups:
        group["base_lr"] = group["lr"]

    param_names: dict[int, str] = {}
    for name, p in model.named_parameters():
        param_names[id(p)] = f"model/{name}"
    if guider is not None:
        for name, p in guider.named_parameters():
            param_names[id(p)] = f"guider/{name}"
    return TrainerState(config, model, teacher, guider, optimizer, param_names)


def _to_image_tensor(images: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    arr = torch.from_numpy(np.ascontiguousarray(images))
    return arr.permute(0, 3, 1, 2).contiguous().to(dtype)


def _guidance_loss_batch(logits_g, pseudos, betas, lcfg, dtype) -> torch.Tensor:
    """Batched mean of the per-image guidance losses (one log-softmax pass)."""
    labels = torch.from_numpy(np.stack([p.labels for p in pseudos])).long()
    nll = -F.log_softmax(logits_g, dim=1).gather(1, labels.unsqueeze(1)).squeeze(1)
    if lcfg.per_pixel_q:
        weights = torch.from_numpy(
            np.stack([(p.confidence > lcfg.tau) for p in pseudos]).astype(np.float64)
        ).to(dtype)
        per_image = (nll * weights).flatten(1).mean(dim=1)
        factors = torch.tensor(betas, dtype=dtype)
    else:
        per_image = nll.flatten(1).mean(dim=1)
        factors = torch.tensor([b * p.q for b, p in zip(betas, pseudos)], dtype=dtype)
    return (factors * per_image).mean()


def _apply_warmup(state: TrainerState) -> None:
    warmup = state.config.train.effective_warmup
    scale = min(1.0, (state.step + 1) / warmup) if warmup > 0 else 1.0
    for group in state.optimizer.param_groups:
        group["lr"] = group["base_lr"] * scale


def train_step(
    state: TrainerState,
    source_batch: tuple[np.ndarray, np.ndarray],
    target_images: np.ndarray,
) -> LossBreakdown:
    """Run one full training step in place and return its loss record."""
    cfg = state.config
    tcfg, lcfg = cfg.train, cfg.loss
    model = state.model
    dtype = next(model.parameters()).dtype
    xs, ys = source_batch

    model.train()
    logits_s = model(_to_image_tensor(xs, dtype))
    ys_t = torch.from_numpy(np.ascontiguousarray(ys)).long()
    l_sup_t = ce_loss(logits_s, ys_t, ignore_index=lcfg.ignore_index)

    l_mix_t = l_gt_t = None
    q_mean = r_mean = beta_mean = 0.0
    if tcfg.method in ("dacs", "dacs_guidance"):
        with torch.no_grad():
            teacher_logits = state.teacher.module(_to_image_tensor(target_images, dtype))

        rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, _MIX_STREAM, state.step]))
        pseudos, mixed = [], []
        for i in range(xs.shape[0]):
            pl = pseudo_from_logits(teacher_logits[i], tau=lcfg.tau)
            cmask = build_mask(ys[i], sample_classes(ys[i], rng))
            mixed.append(mix(xs[i], ys[i], target_images[i], pl.labels, cmask))
            pseudos.append(pl)

        xm_t = _to_image_tensor(np.stack([b.image for b in mixed]).astype(np.float32), dtype)
        ym_t = torch.from_numpy(np.stack([b.labels for b in mixed])).long()
        w_t = torch.from_numpy(
            np.stack([pixel_weights(b.mask, p.q) for b, p in zip(mixed, pseudos)])
        ).to(dtype)

        features_m = model.encode(xm_t)  # encoded once; mixed and guidance heads share it
        l_mix_t = ce_loss(model.decode(features_m), ym_t, pixel_weights=w_t, ignore_index=lcfg.ignore_index)

        q_mean = float(np.mean([p.q for p in pseudos]))
        r_mean = float(np.mean([b.source_ratio for b in mixed]))
        betas = [1.0 if lcfg.uncertainty_off else beta(b.source_ratio, lcfg.d) for b in mixed]
        beta_mean = float(np.mean(betas))

        if tcfg.method == "dacs_guidance" and lcfg.lambda_gt > 0.0:
            mask_scale = torch.from_numpy(np.stack([b.mask_scale for b in mixed])).to(dtype)
            features_rec = state.guider.reconstruct(features_m, mask_scale)
            logits_g = model.decode(features_rec)
            l_gt_t = _guidance_loss_batch(logits_g, pseudos, betas, lcfg, dtype)

    try:
        breakdown = total_loss(
            l_sup_t.detach().item(),
            0.0 if l_mix_t is None else l_mix_t.detach().item(),
            0.0 if l_gt_t is None else l_gt_t.detach().item(),
            q_mean,
            r_mean,
            beta_mean,
            lcfg,
        )
    except ValueError as exc:
        raise RuntimeError(f"training aborted at step {state.step}: {exc}") from exc

    objective = l_sup_t
    if l_mix_t is not None:
        objective = objective + l_mix_t
    if l_gt_t is not None:
        objective = objective + lcfg.lambda_gt * l_gt_t

    state.optimizer.zero_grad(set_to_none=True)
    objective.backward()
    _apply_warmup(state)
    state.optimizer.step()
    state.teacher.update(model)
    state.step += 1
    return breakdown


@functools.lru_cache(maxsize=8)
def _epoch_permutation(n: int, seed: int, stream: int, epoch: int) -> tuple[int, ...]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream, epoch]))
    return tuple(int(i) for i in rng.permutation(n))


def _batch_indices(n: int, seed: int, stream: int, step: int, batch_size: int) -> np.ndarray:
    out = []
    for j in range(batch_size):
        epoch, pos = divmod(step * batch_size + j, n)
        out.append(_epoch_permutation(n, seed, stream, epoch)[pos])
    return np.asarray(out)


def _stack_images(images: list[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    pixels = np.stack([im.pixels for im in images]).astype(np.float32)
    labels = np.stack([im.labels for im in images]).astype(np.int64)
    return pixels, labels


@dataclass
class FitResult:
    checkpoint_path: Path
    metrics_path: Path
    eval_path: Path
    final_miou: float | None = None


def fit(
    config: RunConfig,
    source_images: list[LabeledImage],
    target_images: list[LabeledImage],
    out_dir: str | Path,
    target_val: list[LabeledImage] | None = None,
    resume_from: str | Path | None = None,
) -> FitResult:
    """Train for config.train.total_steps, writing metrics, evals, and checkpoints."""
    from .evaluation import evaluate_model  # local import: evaluation has no trainer dependency

    if not source_images:
        raise ValueError("source dataset is empty")
    if not target_images:
        raise ValueError("target dataset is empty")
    if config.train.torch_threads > 0:
        torch.set_num_threads(config.train.torch_threads)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    eval_path = out_dir / "eval.csv"
    final_path = out_dir / "checkpoint.ckpt"

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        config = state.config
    else:
        state = build_trainer(config)

    xs_all, ys_all = _stack_images(source_images)
    xt_all, _ = _stack_images(target_images)
    tcfg = config.train

    resuming = resume_from is not None and metrics_path.exists()
    metrics_file = open(metrics_path, "a" if resuming else "w", newline="")
    writer = csv.writer(metrics_file)
    if not resuming:
        writer.writerow(LossBreakdown.CSV_FIELDS)
    eval_exists = resuming and eval_path.exists()
    eval_file = open(eval_path, "a" if eval_exists else "w", newline="")
    eval_writer = csv.writer(eval_file)
    if not eval_exists:
        eval_writer.writerow(("step", "miou"))

    final_miou = None
    try:
        while state.step < tcfg.total_steps:
            step = state.step
            s_idx = _batch_indices(len(source_images), tcfg.seed, _SOURCE_STREAM, step, tcfg.batch_size)
            t_idx = _batch_indices(len(target_images), tcfg.seed, _TARGET_STREAM, step, tcfg.batch_size)
            breakdown = train_step(state, (xs_all[s_idx], ys_all[s_idx]), xt_all[t_idx])
            writer.writerow(
                (step,)
                + tuple(
                    repr(getattr(breakdown, name))
                    for name in LossBreakdown.CSV_FIELDS[1:]
                )
            )
            if tcfg.eval_interval > 0 and state.step % tcfg.eval_interval == 0 and target_val:
                report = evaluate_model(state.model, target_val)
                eval_writer.writerow((state.step, repr(report.miou())))
            if tcfg.checkpoint_interval > 0 and state.step % tcfg.checkpoint_interval == 0:
                save_checkpoint(state, out_dir / f"step_{state.step:06}.ckpt")
        if target_val:
            report = evaluate_model(state.model, target_val)
            final_miou = report.miou()
            eval_writer.writerow((state.step, repr(final_miou)))
    finally:
        metrics_file.close()
        eval_file.close()

    save_checkpoint(state, final_path)
    return FitResult(
        checkpoint_path=final_path,
        metrics_path=metrics_path,
        eval_path=eval_path,
        final_miou=final_miou,
    )


def _module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}/{name}": tensor.detach().cpu().numpy().copy()
        for name, tensor in module.state_dict().items()
    }


def save_checkpoint(state: TrainerState, path: str | Path) -> None:
    """Write model, teacher, guider, and optimizer state to one archive."""
    tensors = _module_arrays(state.model, "model")
    tensors.update(_module_arrays(state.teacher.module, "teacher"))
    if state.guider is not None:
        tensors.update(_module_arrays(state.guider, "guider"))
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            opt_state = state.optimizer.state.get(p)
            if not opt_state:
                continue
            name = state.param_names[id(p)]
            tensors[f"opt/{name}/step"] = np.asarray(opt_state["step"].detach().cpu())
            tensors[f"opt/{name}/exp_avg"] = opt_state["exp_avg"].detach().cpu().numpy().copy()
            tensors[f"opt/{name}/exp_avg_sq"] = opt_state["exp_avg_sq"].detach().cpu().numpy().copy()

    meta = {"version": CHECKPOINT_VERSION, "step": state.step, "run_config": state.config.to_dict()}
    save_archive(path, tensors, meta)


def _load_module(module: torch.nn.Module, tensors: dict[str, np.ndarray], prefix: str) -> None:
    selected = {
        name[len(prefix) + 1 :]: torch.from_numpy(arr)
        for name, arr in tensors.items()
        if name.startswith(prefix + "/")
    }
    module.load_state_dict(selected)


def load_checkpoint(path: str | Path) -> TrainerState:
    """Rebuild a TrainerState (including optimizer moments) from an archive."""
    tensors, meta = load_archive(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    if meta.get("inference_only"):
        raise ValueError(f"{path}: inference-only checkpoint cannot resume training")
    config = RunConfig.from_dict(meta["run_config"])
    state = build_trainer(config)
    _load_module(state.model, tensors, "model")
    _load_module(state.teacher.module, tensors, "teacher")
    if state.guider is not None and any(k.startswith("guider/") for k in tensors):
        _load_module(state.guider, tensors, "guider")

    name_to_param = {name: None for name in state.param_names.values()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            name_to_param[state.param_names[id(p)]] = p
    for name, p in name_to_param.items():
        key = f"opt/{name}/step"
        if key not in tensors or p is None:
            continue
        state.optimizer.state[p] = {
            "step": torch.as_tensor(tensors[key]).reshape(()).clone(),
            "exp_avg": torch.from_numpy(tensors[f"opt/{name}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"opt/{name}/exp_avg_sq"].copy()),
        }
    state.step = int(meta["step"])
    return state


def export_inference(checkpoint_path: str | Path, out_path: str | Path) -> None:
    """Strip a training checkpoint down to the deployed segmentation weights.

    Teacher, optimizer, and guider tensors are all dropped; the guide branch
    exists only to shape training and plays no part at inference time.
    """
    tensors, meta = load_archive(checkpoint_path)
    model_only = {name: arr for name, arr in tensors.items() if name.startswith("model/")}
    if not model_only:
        raise ValueError(f"{checkpoint_path}: no model tensors found")
    run_config = meta.get("run_config", {})
    out_meta = {
        "version": CHECKPOINT_VERSION,
        "step": meta.get("step"),
        "inference_only": True,
        "run_config": {"model": run_config.get("model", {})},
    }
    save_archive(out_path, model_only, out_meta)


def load_model_for_inference(path: str | Path) -> SegModel:
    """Build a SegModel from any checkpoint (full or inference-only)."""
    tensors, meta = load_archive(path)
    model_cfg_dict = meta.get("run_config", {}).get("model", {})
    model_cfg_dict = dict(model_cfg_dict)
    if "encoder_channels" in model_cfg_dict:
        model_cfg_dict["encoder_channels"] = tuple(model_cfg_dict["encoder_channels"])
    model = SegModel(SegModelConfig(**model_cfg_dict))
    _load_module(model, tensors, "model")
    model.eval()
    return model
