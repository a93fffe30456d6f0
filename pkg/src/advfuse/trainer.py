"""Training engine: the free multi-step adversarial loop, the standard
baseline, evaluation, and the two-stage pretrain-then-finetune driver.

The free loop runs K inner iterations per minibatch. Each iteration does a
clean forward (supplying both the clean loss and the perturbation's KL
target), one perturbed forward per active modality, accumulates 1/K of that
iteration's parameter gradient, and then moves the perturbations by
normalized-gradient ascent. Exactly one optimizer update is applied per
minibatch, from the accumulated (averaged) gradient.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from .adversary import MODALITY_MODES, PerturbationState
from .autodiff import Tape, add, backward, scale
from .errors import ContractError, DivergenceError, NumericDomainError
from .metrics import MetricsRecord
from .model import ModelParams, forward
from .objectives import (
    KL_TARGET_GRAD_MODES,
    BranchLoss,
    LossBreakdown,
    adversarial_branch_loss,
    sym_kl,
    task_loss,
)
from .synth import gen_downstream_batch, gen_pretrain_batch

MODES = ("standard", "freelb", "villa")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "standard"
    adv_steps: int = 3
    epsilon: float = 1.0
    adv_step_size: float = 1e-2
    kl_weight: float = 1.0
    modality_mode: str = "both"
    kl_target_grad: str = "stop"
    perturb_jointly: bool = False
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    stage: str = "both"
    train_samples: int = 256
    val_samples: int = 128

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.adv_steps < 1:
            raise ContractError("adv_steps must be >= 1")
        if self.epsilon < 0:
            raise ContractError("epsilon must be nonnegative")
        if self.modality_mode not in MODALITY_MODES:
            raise ContractError(f"modality_mode must be one of {MODALITY_MODES}")
        if self.kl_target_grad not in KL_TARGET_GRAD_MODES:
            raise ContractError(f"kl_target_grad must be one of {KL_TARGET_GRAD_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"optimizer must be one of {OPTIMIZERS}")
        if self.stage not in ("pretrain", "finetune", "both"):
            raise ContractError("stage must be pretrain, finetune, or both")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("batch_size and epochs must be positive")

    @property
    def effective_kl_weight(self):
        """freelb never sees a KL term; villa honors the configured weight."""
        return self.kl_weight if self.mode == "villa" else 0.0

    def active_modalities(self):
        if self.modality_mode == "both":
            return ("txt", "img")
        return (self.modality_mode,)


class OptimizerState:
    """sgd or adam moments; one apply() is one parameter update."""

    def __init__(self, config, params):
        self.kind = config.optimizer
        self.lr = config.learning_rate
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.step_count = 0
        if self.kind == "adam":
            self.m = {n: np.zeros_like(t.values) for n, t in params.items()}
            self.v = {n: np.zeros_like(t.values) for n, t in params.items()}

    def apply(self, params, grads):
        self.step_count += 1
        if self.kind == "sgd":
            for name, t in params.items():
                t.values -= self.lr * grads[name]
            return
        t_step = self.step_count
        c1 = 1.0 - self.beta1 ** t_step
        c2 = 1.0 - self.beta2 ** t_step
        for name, t in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            t.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class GradAccumulator:
    """Per-parameter buffers for the averaged free gradient."""

    def __init__(self, params):
        self.buffers = {n: np.zeros_like(t.values) for n, t in params.items()}

    def add(self, tape, params, grads, weight):
        for name, t in params.items():
            if t._tape is tape and t.node_id in grads:
                self.buffers[name] += weight * grads[t.node_id]

    def global_norm(self):
        total = sum(float((b * b).sum()) for b in self.buffers.values())
        return float(np.sqrt(total))


def _named_grads(tape, params, grads):
    out = {}
    for name, t in params.items():
        if t._tape is tape and t.node_id in grads:
            out[name] = grads[t.node_id]
        else:
            out[name] = np.zeros_like(t.values)
    return out


def batch_task(batch):
    """The task whose labels the batch carries."""
    if batch.mlm_targets is not None:
        return "mlm"
    if batch.itm_label is not None:
        return "itm"
    if batch.answer_label is not None:
        return "answer"
    raise ContractError("batch carries no labels; cannot infer task")


def _batch_accuracy(output, batch):
    logits = output.task_logits.values
    if output.task == "mlm":
        labels = output.mlm_flat_targets
    elif output.task == "itm":
        labels = batch.itm_label
    else:
        labels = batch.answer_label
    if labels is None or len(labels) == 0:
        return 0.0
    return float((logits.argmax(axis=1) == labels).mean())


def _require_finite(value, what, iteration):
    if not np.isfinite(value):
        raise DivergenceError(f"{what} became non-finite ({value})", iteration=iteration)


def standard_train_step(params, batch, config, opt_state=None):
    """One forward/backward on the clean loss and one update."""
    if config.mode != "standard":
        raise ContractError("standard_train_step requires mode=standard")
    if opt_state is None:
        opt_state = OptimizerState(config, params)
    task = batch_task(batch)
    try:
        with Tape() as tape:
            out = forward(params, batch, task=task)
            loss = task_loss(out, batch)
    except NumericDomainError as exc:
        raise DivergenceError(str(exc), iteration=0) from exc
    value = float(loss.values)
    _require_finite(value, "clean loss", 0)
    grads = backward(tape, loss)
    named = _named_grads(tape, params, grads)
    opt_state.apply(params, named)
    grad_norm = float(np.sqrt(sum(float((g * g).sum()) for g in named.values())))
    diagnostics = {
        "grad_norm": grad_norm,
        "delta_norm_img": 0.0,
        "delta_norm_txt": 0.0,
        "accuracy": _batch_accuracy(out, batch),
    }
    return params, LossBreakdown.standard(value), diagnostics


def villa_train_step(params, batch, config, rng, opt_state=None, trace=None):
    """K free iterations, one optimizer update.

    ``trace``, when a dict is passed, receives the per-iteration named
    gradients, the final accumulated buffers, and the update count, so tests
    can replay the accumulation arithmetic.
    """
    if config.mode not in ("freelb", "villa"):
        raise ContractError("villa_train_step requires mode freelb or villa")
    if opt_state is None:
        opt_state = OptimizerState(config, params)
    task = batch_task(batch)
    kl_w = config.effective_kl_weight
    k = config.adv_steps
    state = PerturbationState.fresh(
        batch, params.config.hidden, config.epsilon, config.adv_step_size,
        config.modality_mode, rng,
    )
    accum = GradAccumulator(params)
    modalities = config.active_modalities()
    sums = {"l_std": 0.0, "r_at": 0.0, "r_kl": 0.0}
    accuracy = 0.0
    if trace is not None:
        trace["iteration_grads"] = []
        trace["updates_before"] = opt_state.step_count

    for it in range(1, k + 1):
        with Tape() as tape:
            try:
                clean = forward(params, batch, task=task)
                l_std = task_loss(clean, batch)
                theta_total = l_std
                branches = []
                if config.perturb_jointly and config.modality_mode == "both":
                    branches.append(
                        ("joint", _joint_branch(params, batch, state, task, clean, config))
                    )
                else:
                    for modality in modalities:
                        br, _ = adversarial_branch_loss(
                            params, batch, state, task, modality, clean.task_logits,
                            kl_w, config.kl_target_grad,
                        )
                        branches.append((modality, br))
                for _, br in branches:
                    theta_total = add(theta_total, br.theta)
            except NumericDomainError as exc:
                raise DivergenceError(str(exc), iteration=it) from exc

            l_std_v = float(l_std.values)
            _require_finite(l_std_v, "clean loss", it)
            r_at_v = 0.0
            r_kl_v = 0.0
            for _, br in branches:
                ce_v = float(br.ce.values)
                _require_finite(ce_v, "adversarial loss", it)
                r_at_v += ce_v
                if br.kl is not None:
                    kl_v = float(br.kl.values)
                    _require_finite(kl_v, "kl regularizer", it)
                    r_kl_v += kl_v

            grads = backward(tape, theta_total)
            accum.add(tape, params, grads, 1.0 / k)
            if trace is not None:
                trace["iteration_grads"].append(_named_grads(tape, params, grads))

            try:
                for name, br in branches:
                    asc = backward(tape, br.ascent)
                    if name in ("txt", "joint") and state.active("txt"):
                        state.ascend("txt", asc[state.delta_txt.node_id])
                    if name in ("img", "joint") and state.active("img"):
                        state.ascend("img", asc[state.delta_img.node_id])
            except NumericDomainError as exc:
                raise DivergenceError(str(exc), iteration=it) from exc

        sums["l_std"] += l_std_v
        sums["r_at"] += r_at_v
        sums["r_kl"] += r_kl_v
        accuracy = _batch_accuracy(clean, batch)

    opt_state.apply(params, accum.buffers)
    if trace is not None:
        trace["accumulated"] = {n: b.copy() for n, b in accum.buffers.items()}
        trace["updates_after"] = opt_state.step_count

    breakdown = LossBreakdown.build(
        sums["l_std"] / k, sums["r_at"] / k, sums["r_kl"] / k, kl_w,
    )
    d_img, d_txt = state.mean_norms()
    diagnostics = {
        "grad_norm": accum.global_norm(),
        "delta_norm_img": d_img,
        "delta_norm_txt": d_txt,
        "accuracy": accuracy,
    }
    return params, breakdown, diagnostics


def _joint_branch(params, batch, state, task, clean, config):
    """Simultaneous-perturbation variant: both deltas in a single forward."""
    out = forward(params, batch, state.joint_view(), task)
    ce = task_loss(out, batch)
    kl_w = config.effective_kl_weight
    if kl_w == 0.0:
        return BranchLoss(theta=ce, ascent=ce, ce=ce, kl=None)
    target = (clean.task_logits.detach() if config.kl_target_grad == "stop"
              else clean.task_logits)
    kl = sym_kl(out.task_logits, target)
    theta = add(ce, scale(kl, kl_w))
    ascent = add(ce, kl)
    return BranchLoss(theta=theta, ascent=ascent, ce=ce, kl=kl)


def train_step(params, batch, config, rng, opt_state, trace=None):
    if config.mode == "standard":
        _, breakdown, diag = standard_train_step(params, batch, config, opt_state)
    else:
        _, breakdown, diag = villa_train_step(params, batch, config, rng, opt_state, trace)
    return breakdown, diag


def _checked_eval(params, batches, task):
    # diverged parameters can first surface as a non-finite eval forward
    try:
        return evaluate(params, batches, task)
    except NumericDomainError as exc:
        raise DivergenceError(f"evaluation: {exc}", iteration=0) from exc


def evaluate(params, batches, task):
    """Accuracy and mean loss over a list of batches; mutates nothing."""
    if not batches:
        raise ContractError("evaluate needs a nonempty dataset")
    correct = 0
    count = 0
    loss_sum = 0.0
    for batch in batches:
        out = forward(params, batch, task=task)
        loss = task_loss(out, batch)
        logits = out.task_logits.values
        if task == "mlm":
            labels = out.mlm_flat_targets
        elif task == "itm":
            labels = batch.itm_label
        else:
            labels = batch.answer_label
        n = len(labels)
        correct += int((logits.argmax(axis=1) == labels).sum())
        count += n
        loss_sum += float(loss.values) * n
    return {"accuracy": correct / count, "mean_loss": loss_sum / count}


def _stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in key]))


class _Recorder:
    """Appends strictly ordered metrics rows for one stage."""

    def __init__(self, records, stage):
        self.records = records
        self.stage = stage
        self.step = 0

    def add(self, epoch, split, task, breakdown, diagnostics, wall_ms):
        self.records.append(MetricsRecord(
            stage=self.stage,
            epoch=epoch,
            step=self.step,
            split=split,
            task=task,
            l_std=breakdown.l_std,
            r_at=breakdown.r_at,
            r_kl=breakdown.r_kl,
            total=breakdown.total,
            accuracy=diagnostics.get("accuracy", 0.0),
            delta_norm_img=diagnostics.get("delta_norm_img", 0.0),
            delta_norm_txt=diagnostics.get("delta_norm_txt", 0.0),
            grad_norm=diagnostics.get("grad_norm", 0.0),
            wall_ms=wall_ms,
        ))
        self.step += 1

    def add_eval(self, epoch, split, task, metrics):
        breakdown = LossBreakdown.build(metrics["mean_loss"], 0.0, 0.0, 0.0)
        self.add(epoch, split, task, breakdown,
                 {"accuracy": metrics["accuracy"]}, 0.0)


def run_pretrain(params, world, config, records):
    """Alternating MLM/ITM minibatches with per-epoch held-out evaluation."""
    data_rng = _stream(config.seed, 1)
    adv_rng = _stream(config.seed, 2)
    opt = OptimizerState(config, params)
    rec = _Recorder(records, "pretrain")
    steps = max(1, config.train_samples // config.batch_size)
    eval_rng = _stream(config.seed, 6)
    eval_batches = {
        task: [gen_pretrain_batch(world, config.batch_size, task, eval_rng)
               for _ in range(max(1, config.val_samples // config.batch_size))]
        for task in ("mlm", "itm")
    }
    for epoch in range(config.epochs):
        for s in range(steps):
            task = "mlm" if (epoch * steps + s) % 2 == 0 else "itm"
            batch = gen_pretrain_batch(world, config.batch_size, task, data_rng)
            t0 = time.perf_counter()
            breakdown, diag = train_step(params, batch, config, adv_rng, opt)
            wall = (time.perf_counter() - t0) * 1e3
            rec.add(epoch, "train", task, breakdown, diag, wall)
        for task in ("mlm", "itm"):
            rec.add_eval(epoch, "val", task, _checked_eval(params, eval_batches[task], task))
    return params


def downstream_datasets(world, config):
    """Fixed train/val batch lists for the answer task."""
    train_rng = _stream(config.seed, 4)
    val_rng = _stream(config.seed, 5)
    n_train_batches = max(1, config.train_samples // config.batch_size)
    n_val_batches = max(1, config.val_samples // config.batch_size)
    train = [gen_downstream_batch(world, config.batch_size, train_rng)
             for _ in range(n_train_batches)]
    val = [gen_downstream_batch(world, config.batch_size, val_rng)
           for _ in range(n_val_batches)]
    return train, val


def run_finetune(params, world, config, records, datasets=None):
    """Downstream training over a fixed dataset with per-epoch train/val eval."""
    train, val = datasets if datasets is not None else downstream_datasets(world, config)
    adv_rng = _stream(config.seed, 3)
    opt = OptimizerState(config, params)
    rec = _Recorder(records, "finetune")
    for epoch in range(config.epochs):
        for batch in train:
            t0 = time.perf_counter()
            breakdown, diag = train_step(params, batch, config, adv_rng, opt)
            wall = (time.perf_counter() - t0) * 1e3
            rec.add(epoch, "train", "answer", breakdown, diag, wall)
        rec.add_eval(epoch, "train_eval", "answer", _checked_eval(params, train, "answer"))
        rec.add_eval(epoch, "val", "answer", _checked_eval(params, val, "answer"))
    return params


def init_params(world, seed):
    return ModelParams.init(world.config, _stream(seed, 0))


def transplant_encoder(src, dst):
    """Copy encoder tensors from src into dst, leaving dst's heads alone."""
    for name in dst.encoder_names():
        dst.tensors[name].values[:] = src.tensors[name].values
    return dst


def run_two_stage(config, world, pretrain_mode=None, finetune_mode=None,
                  on_handoff=None):
    """Pretrain, hand the encoder to a fresh-headed model, finetune.

    Stage modes default to config.mode; passing them separately runs the
    mixed cells of the stage ablation grid. ``on_handoff(pre, fine)`` fires
    after the encoder transplant and before any finetune update, so callers
    can checkpoint or checksum the handoff point.
    """
    if config.stage != "both":
        raise ContractError("run_two_stage requires stage=both")
    records = []
    pre_cfg = replace(config, mode=pretrain_mode or config.mode, stage="pretrain")
    fine_cfg = replace(config, mode=finetune_mode or config.mode, stage="finetune")

    pre_params = init_params(world, config.seed)
    run_pretrain(pre_params, world, pre_cfg, records)

    fine_params = ModelParams.init(world.config, _stream(config.seed, 7))
    transplant_encoder(pre_params, fine_params)
    if on_handoff is not None:
        on_handoff(pre_params, fine_params)
    run_finetune(fine_params, world, fine_cfg, records)
    return pre_params, fine_params, records
