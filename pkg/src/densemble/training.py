"""Training: mask-out corruption, joint loss with analytic gradients,
optional greedy layerwise pretraining, and the seeded mini-batch loop.

All randomness flows through streams addressed by (config seed, purpose tag),
so any two runs with equal configs are bit-identical: same corruption masks,
same gate noise, same shuffles, same initialization.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from densemble.dataset import DatasetError, InteractionMatrix, SplitDataset, split_train_test
from densemble.evaluation import GatedEnsembleRanker, evaluate
from densemble.gating import GatingParams, gate_forward, load_estimate
from densemble.model import (
    DenoiserStack,
    encode_level,
    decode_level,
    parent_backward,
    parent_forward_trace,
    zero_gradients,
)
from densemble.numerics import (
    Adam,
    coefficient_of_variation,
    cv_squared_gradient,
    dense_backward,
    derived_seed,
    make_rng,
    mse,
    std_normal_pdf,
)

# Stream tags: one independent RNG stream per purpose, all keyed off cfg.seed.
STREAM_INIT = 0
STREAM_VAL_SPLIT = 1
STREAM_BATCH = 2
STREAM_SHUFFLE = 3
STREAM_PRETRAIN = 4

VALIDATION_FRACTION = 0.9  # train side of the early-stopping carve-out


class TrainingDivergedError(RuntimeError):
    """Loss or gradients went non-finite; training aborted."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 600
    corruption_prob: float = 0.3
    l2_lambda: float = 1e-8
    w_importance: float = 1e-2
    w_load: float = 1e-2
    k: int = 2
    seed: int = 0
    pretrain_epochs: int = 30
    early_stop_patience: int = 200
    restart_every: int | None = None

    def validate(self) -> None:
        if not 0.0 <= self.corruption_prob <= 1.0:
            raise ValueError(f"corruption_prob must be in [0, 1], got {self.corruption_prob}")
        if self.k not in (1, 2, 3):
            raise ValueError(f"k must be 1, 2, or 3, got {self.k}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.l2_lambda < 0 or self.w_importance < 0 or self.w_load < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be at least 1")
        if self.restart_every is not None and self.restart_every < 1:
            raise ValueError("restart_every must be at least 1 (or None to disable)")


@dataclass
class EpochStats:
    epoch: int
    stage: str
    reconstruction: float
    importance: float
    load: float
    regularizer: float
    val_recall5: float | None = None
    importance_shares: tuple | None = None


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    pretrain: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    checkpoint_path: str | None = None
    best_epoch: int = 0
    best_val_recall5: float | None = None
    initial_val_recall5: float | None = None


def corrupt(x, q: float, rng: np.random.Generator):
    """Mask-out: zero each positive independently with probability q.

    One uniform draw per entry regardless of value, so the stream advances
    identically for any input; zeros stay zero and survivors keep value 1.
    """
    x = np.asarray(x, dtype=np.float64)
    keep = rng.random(x.shape) >= q
    return x * keep


def l2_regularizer(model: DenoiserStack, gating: GatingParams | None, l2_lambda: float) -> float:
    """(lambda / 2) * sum of squares over every parameter, gate included."""
    total = sum(float(np.sum(p * p)) for p in model.parameters().values())
    if gating is not None:
        total += sum(float(np.sum(p * p)) for p in gating.parameters().values())
    return 0.5 * l2_lambda * total


def initialize_run(num_users: int, num_items: int, dims, k: int, seed: int):
    """Fresh model and zeroed gate from the run seed's init stream."""
    rng = make_rng(seed, STREAM_INIT)
    model = DenoiserStack.initialize(num_users, num_items, tuple(dims), rng)
    gating = GatingParams.zeros(num_items, num_experts=len(model.parents), k=k)
    return model, gating


def validation_carve(train_matrix: InteractionMatrix, seed: int) -> SplitDataset:
    """Deterministic 90/10 per-user carve of train for early stopping."""
    return split_train_test(train_matrix, VALIDATION_FRACTION,
                            derived_seed(seed, STREAM_VAL_SPLIT))


def _batch_terms(model, gating, users, dataset, cfg, rng, with_grads):
    """Forward (and optionally backward) for one mini-batch of users.

    Returns (total, components, grads, importance_vector). The corruption
    mask and gate noise are drawn in a fixed order independent of parameter
    values, which keeps finite-difference probes consistent.
    """
    users = np.asarray(users, dtype=np.int64)
    if users.size == 0:
        raise ValueError("empty batch")
    x = dataset.dense(users)
    xt = corrupt(x, cfg.corruption_prob, rng)
    decision = gate_forward(gating, xt, rng=rng)
    weights = decision.weights
    batch, num_experts = weights.shape

    xhat = np.zeros_like(x)
    expert_runs = []
    for e, parent in enumerate(model.parents):
        picked = np.flatnonzero(weights[:, e] > 0)
        if picked.size == 0:
            continue
        out, trace = parent_forward_trace(model, parent, users[picked], xt[picked])
        xhat[picked] += weights[picked, e, None] * out
        expert_runs.append((e, parent, picked, out, trace))

    reconstruction = mse(xhat, x)
    importance = weights.sum(axis=0)
    imp_loss = cfg.w_importance * coefficient_of_variation(importance) ** 2

    est = None
    load_loss_value = 0.0
    if gating.k < num_experts and cfg.w_load != 0.0:
        est = load_estimate(decision.clean_scores, decision.noise_scales,
                            decision.noisy_scores, gating.k)
        load = est.probabilities.sum(axis=0)
        load_loss_value = cfg.w_load * coefficient_of_variation(load) ** 2

    regularizer = l2_regularizer(model, gating, cfg.l2_lambda)
    components = {"reconstruction": reconstruction, "importance": imp_loss,
                  "load": load_loss_value, "regularizer": regularizer}
    total = reconstruction + imp_loss + load_loss_value + regularizer
    if not with_grads:
        return total, components, None, importance

    grads = zero_gradients(model)
    grads["gate.weight"] = np.zeros_like(gating.w_gate)
    grads["gate.noise"] = np.zeros_like(gating.w_noise)

    dxhat = (2.0 / xhat.size) * (xhat - x)
    dweights = np.zeros_like(weights)
    for e, parent, picked, out, trace in expert_runs:
        dweights[picked, e] = np.sum(dxhat[picked] * out, axis=1)
        upstream = weights[picked, e, None] * dxhat[picked]
        parent_backward(model, parent, users[picked], xt[picked], upstream,
                        grads=grads, trace=trace)

    # Importance term: every weight contributes linearly to its expert's sum.
    dweights += cfg.w_importance * cv_squared_gradient(importance)[None, :]

    # Softmax over the selected entries; unselected weights are constants,
    # which the elementwise factor `weights` zeroes out automatically.
    inner = np.sum(dweights * weights, axis=1, keepdims=True)
    dnoisy = weights * (dweights - inner)

    scales = decision.noise_scales
    dclean_direct = np.zeros_like(dnoisy)
    dscales_direct = np.zeros_like(scales)
    if est is not None:
        dload = cfg.w_load * cv_squared_gradient(est.probabilities.sum(axis=0))
        dprob = np.broadcast_to(dload[None, :], est.probabilities.shape)
        dz = dprob * std_normal_pdf(est.zscores)
        safe = np.where(scales > 0, scales, 1.0)
        dclean_direct += dz / safe
        dscales_direct -= dz * est.zscores / safe
        # The threshold is another expert's noisy score: route -dz/s back to
        # the holder of sorted position k (candidate in top k) or k-1 (not).
        dthreshold = -dz / safe
        rows = np.arange(batch)
        dnoisy[rows, est.next_index] += np.sum(dthreshold * est.in_top_k, axis=1)
        dnoisy[rows, est.cut_index] += np.sum(dthreshold * ~est.in_top_k, axis=1)

    # noisy = clean + eps * scale; recover eps instead of storing it.
    eps = np.divide(decision.noisy_scores - decision.clean_scores, scales,
                    out=np.zeros_like(scales), where=scales > 0)
    dclean = dnoisy + dclean_direct
    dscales = dnoisy * eps + dscales_direct
    draw = dscales * (-np.expm1(-scales))  # sigmoid(raw) = 1 - exp(-softplus(raw))
    grads["gate.weight"] += xt.T @ dclean
    grads["gate.noise"] += xt.T @ draw

    if cfg.l2_lambda != 0.0:
        for key, p in model.parameters().items():
            grads[key] += cfg.l2_lambda * p
        for key, p in gating.parameters().items():
            grads[key] += cfg.l2_lambda * p
    return total, components, grads, importance


def batch_loss(model, gating, batch, dataset, cfg: TrainConfig, rng):
    """Total loss and per-term components for one batch of user indices."""
    total, components, _, _ = _batch_terms(model, gating, batch, dataset, cfg, rng,
                                           with_grads=False)
    return total, components


def batch_loss_and_grads(model, gating, batch, dataset, cfg: TrainConfig, rng):
    total, components, grads, _ = _batch_terms(model, gating, batch, dataset, cfg, rng,
                                               with_grads=True)
    return total, components, grads


def pretrain_stage(model: DenoiserStack, level_index: int,
                   dataset: InteractionMatrix, cfg: TrainConfig) -> list:
    """Greedy pretraining of one level with everything below it frozen.

    The large level denoises the raw vector against its clean self; deeper
    levels autoencode the frozen code produced from the corrupted input.
    """
    cfg.validate()
    level = model.levels[level_index]
    subset = {f"{level.name}.encoder.weight": level.encoder.weight,
              f"{level.name}.encoder.bias": level.encoder.bias,
              f"{level.name}.embedding": level.embedding,
              f"{level.name}.decoder.weight": level.decoder.weight,
              f"{level.name}.decoder.bias": level.decoder.bias}
    adam = Adam(subset, learning_rate=cfg.learning_rate)
    rng = make_rng(cfg.seed, STREAM_PRETRAIN, level_index)
    num_users = dataset.num_users
    stats = []
    for epoch in range(1, cfg.pretrain_epochs + 1):
        perm = rng.permutation(num_users)
        recon_sum = 0.0
        reg_sum = 0.0
        for start in range(0, num_users, cfg.batch_size):
            users = perm[start:start + cfg.batch_size]
            x = dataset.dense(users)
            code = corrupt(x, cfg.corruption_prob, rng)
            for lower in model.levels[:level_index]:
                code = encode_level(lower, users, code)
            target = x if level_index == 0 else code
            z = encode_level(level, users, code)
            out = decode_level(level, z)
            recon = mse(out, target)
            reg = 0.5 * cfg.l2_lambda * sum(float(np.sum(p * p)) for p in subset.values())
            if not np.isfinite(recon):
                raise TrainingDivergedError(
                    f"non-finite pretrain loss at level {level.name}, epoch {epoch}")
            dout = (2.0 / out.size) * (out - target)
            dpre_dec = dout * out * (1.0 - out)
            dw_dec, db_dec, dz = dense_backward(level.decoder, z, dpre_dec)
            dpre_enc = dz * z * (1.0 - z)
            dw_enc, db_enc, _ = dense_backward(level.encoder, code, dpre_enc)
            demb = np.zeros_like(level.embedding)
            np.add.at(demb, users, dpre_enc)
            grads = {f"{level.name}.encoder.weight": dw_enc + cfg.l2_lambda * level.encoder.weight,
                     f"{level.name}.encoder.bias": db_enc + cfg.l2_lambda * level.encoder.bias,
                     f"{level.name}.embedding": demb + cfg.l2_lambda * level.embedding,
                     f"{level.name}.decoder.weight": dw_dec + cfg.l2_lambda * level.decoder.weight,
                     f"{level.name}.decoder.bias": db_dec + cfg.l2_lambda * level.decoder.bias}
            adam.step(subset, grads)
            recon_sum += recon * len(users)
            reg_sum += reg * len(users)
        stats.append(EpochStats(epoch=epoch, stage=f"pretrain-{level.name}",
                                reconstruction=recon_sum / num_users,
                                importance=0.0, load=0.0,
                                regularizer=reg_sum / num_users))
    return stats


def pretrain_layerwise(model: DenoiserStack, dataset: InteractionMatrix,
                       cfg: TrainConfig) -> TrainReport:
    """All three stages in order: large, then medium, then small."""
    started = time.perf_counter()
    report = TrainReport()
    if cfg.pretrain_epochs == 0:
        return report
    for level_index in range(len(model.levels)):
        report.pretrain.extend(pretrain_stage(model, level_index, dataset, cfg))
    report.wall_clock_seconds = time.perf_counter() - started
    return report


def _log_row(stats: EpochStats) -> str:
    val = "" if stats.val_recall5 is None else repr(float(stats.val_recall5))
    shares = stats.importance_shares or (0.0, 0.0, 0.0)
    cells = [str(stats.epoch), repr(float(stats.reconstruction)),
             repr(float(stats.importance)), repr(float(stats.load)),
             repr(float(stats.regularizer)), val] + [repr(float(s)) for s in shares]
    return ",".join(cells)


def train(model: DenoiserStack, gating: GatingParams, split: SplitDataset,
          cfg: TrainConfig, checkpoint_path=None, log_path=None) -> TrainReport:
    """Seeded mini-batch training with early stopping on validation Recall@5.

    A 90/10 per-user carve of the train matrix provides the held-out
    validation items; the parameters that scored best there are restored
    into the model before returning (and before the checkpoint is written).
    When the carve yields no validation items (tiny datasets), early
    stopping is disabled and the final parameters win.

    With `restart_every` set, the run warm-restarts on that cadence:
    parameters rewind to the best snapshot, the optimizer moments are
    cleared, and the batch streams restart from the seed. Adam's
    accumulated second moments damp late-run steps; a restart recovers the
    sharper early-step geometry around an already-good point. A full cycle
    that produces no new best ends the run, because the next cycle would
    replay it bit for bit.
    """
    from densemble.model import save_checkpoint  # deferred: keeps module load light

    cfg.validate()
    if split.train.num_interactions == 0:
        raise DatasetError("train matrix is empty")
    started = time.perf_counter()
    report = TrainReport()

    carve = validation_carve(split.train, cfg.seed)
    train_matrix, val_matrix = carve.train, carve.test
    has_validation = val_matrix.num_interactions > 0

    if cfg.pretrain_epochs > 0:
        report.pretrain = pretrain_layerwise(model, train_matrix, cfg).pretrain

    params = {**model.parameters(), **gating.parameters()}
    adam = Adam(params, learning_rate=cfg.learning_rate)
    loss_rng = make_rng(cfg.seed, STREAM_BATCH)
    shuffle_rng = make_rng(cfg.seed, STREAM_SHUFFLE)

    def val_recall() -> float | None:
        if not has_validation:
            return None
        ranker = GatedEnsembleRanker(model, gating)
        return evaluate(ranker, carve, cutoffs=(5,)).recall[5]

    report.initial_val_recall5 = val_recall()
    best_value = -np.inf if report.initial_val_recall5 is None else report.initial_val_recall5
    best_epoch = 0
    best_params = {key: p.copy() for key, p in params.items()}

    num_users = split.train.num_users
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(num_users)
        sums = {"reconstruction": 0.0, "importance": 0.0, "load": 0.0, "regularizer": 0.0}
        importance_total = None
        for start in range(0, num_users, cfg.batch_size):
            users = perm[start:start + cfg.batch_size]
            total, components, grads, importance = _batch_terms(
                model, gating, users, train_matrix, cfg, loss_rng, with_grads=True)
            if not np.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: "
                    f"components={components}")
            adam.step(params, grads)
            for key in sums:
                sums[key] += components[key] * len(users)
            importance_total = importance if importance_total is None \
                else importance_total + importance
        shares = importance_total / importance_total.sum()
        recall = val_recall()
        report.epochs.append(EpochStats(
            epoch=epoch, stage="joint",
            reconstruction=sums["reconstruction"] / num_users,
            importance=sums["importance"] / num_users,
            load=sums["load"] / num_users,
            regularizer=sums["regularizer"] / num_users,
            val_recall5=recall,
            importance_shares=tuple(float(s) for s in shares)))
        if recall is not None and recall > best_value:
            best_value = recall
            best_epoch = epoch
            best_params = {key: p.copy() for key, p in params.items()}
        if not has_validation:
            best_epoch = epoch
            best_params = {key: p.copy() for key, p in params.items()}
            continue
        at_boundary = bool(cfg.restart_every) and epoch % cfg.restart_every == 0
        if at_boundary and best_epoch <= epoch - cfg.restart_every:
            break  # dead cycle: rewinding and replaying the streams would repeat it
        if epoch - best_epoch >= cfg.early_stop_patience:
            break
        if at_boundary and epoch < cfg.epochs:
            for key, p in params.items():
                p[...] = best_params[key]
            adam = Adam(params, learning_rate=cfg.learning_rate)
            loss_rng = make_rng(cfg.seed, STREAM_BATCH)
            shuffle_rng = make_rng(cfg.seed, STREAM_SHUFFLE)

    for key, p in params.items():
        p[...] = best_params[key]
    report.best_epoch = best_epoch
    report.best_val_recall5 = None if not has_validation else float(best_value)

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, gating)
        report.checkpoint_path = str(checkpoint_path)
    if log_path is not None:
        header = ("epoch,recon_loss,importance_loss,load_loss,reg,val_recall@5,"
                  "importance_share_mild,importance_share_moderate,importance_share_strong")
        with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(header + "\n")
            for stats in report.epochs:
                fh.write(_log_row(stats) + "\n")
    report.wall_clock_seconds = time.perf_counter() - started
    return report
