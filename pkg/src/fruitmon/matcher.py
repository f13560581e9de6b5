"""Attention-based temporal re-identification of fruits.

For each fruit at time t, candidate fruits from the previous scan plus a
learned no-match token form a token set; a transformer encoder layer mixes
them and a softmax yields an association distribution over candidates and
"new fruit".  Candidate tokens carry a sinusoidal encoding of the relative
center position so geometry and appearance are weighed jointly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloud import AugmentConfig, ColoredCloud, TemporalAssociation, augment
from .encoder import DescriptorSet, EncoderModel, _encode_supports_var, encode_all, extract_support
from .errors import ConfigError, DivergenceError, ShapeError
from .metrics import MatchConfusion, f1_scores, matching_confusion
from .nnkernels import ops
from .nnkernels.params import (
    AdamState,
    ParamStore,
    adam_step,
    bn_param,
    encoder_layer_params,
    linear_param,
)
from .nnkernels.tape import Tape, Var
from .synth import ScenePair
from .util import STREAM_AUGMENT, STREAM_DATA, STREAM_INIT, stream

LAM_INJ = 0.08


@dataclass
class MatchConfig:
    max_move: float = 0.05
    token_dim: int = 512
    ff_dim: int = 1024
    heads: int = 8
    n_freq: int = 6
    descriptor_dim: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_move <= 0:
            raise ConfigError("max_move must be positive")
        if min(self.token_dim, self.ff_dim, self.heads, self.n_freq,
               self.descriptor_dim) < 1:
            raise ConfigError("dimensions must be positive")
        if self.token_dim % self.heads != 0:
            raise ConfigError(
                f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if 2 * self.descriptor_dim < 6 * self.n_freq:
            raise ConfigError("descriptor pair too small for the positional encoding")


@dataclass
class MatchModel:
    config: MatchConfig
    store: ParamStore

    def encoder_layer(self) -> dict:
        prefix = "enc."
        return {k[len(prefix):]: v for k, v in self.store.params.items()
                if k.startswith(prefix)}


def build_matcher(config: MatchConfig) -> MatchModel:
    store = ParamStore(config.rng_seed)
    rng = stream(config.rng_seed, STREAM_INIT)
    linear_param(store, "in", rng, 2 * config.descriptor_dim, config.token_dim)
    bn_param(store, "in.bn", config.token_dim)
    encoder_layer_params(store, "enc", rng, config.token_dim, config.ff_dim)
    bn_param(store, "post.bn", config.token_dim)
    linear_param(store, "out", rng, config.token_dim, 1)
    return MatchModel(config, store)


def positional_encoding(rel: np.ndarray, out_dim: int, *, n_freq: int = 6,
                        max_move: float = 1.0) -> np.ndarray:
    """Sinusoidal features of relative positions normalized by the motion
    bound: per axis, sin/cos at frequencies 2^k*pi for k < n_freq, zero
    padded on the right to ``out_dim`` columns."""
    rel = np.asarray(rel, dtype=np.float64).reshape(-1, 3)
    if out_dim < 6 * n_freq:
        raise ConfigError(f"out_dim {out_dim} < {6 * n_freq} encoding columns")
    x = rel / max_move
    out = np.zeros((rel.shape[0], out_dim))
    col = 0
    for axis in range(3):
        for k in range(n_freq):
            arg = (2.0 ** k) * np.pi * x[:, axis]
            out[:, col] = np.sin(arg)
            out[:, col + 1] = np.cos(arg)
            col += 2
    return out


def _bn(store: ParamStore, name: str, tape, x, *, train):
    return ops.batch_norm(
        tape, x, store.params[f"{name}.gain"], store.params[f"{name}.bias"],
        store.buffers[f"{name}.running_mean"], store.buffers[f"{name}.running_var"],
        train=train,
    )


def _match_row_var(
    tape: Tape | None,
    query: Var,
    prev_matrix: Var | None,
    rel: np.ndarray,
    model: MatchModel,
    *,
    train: bool,
) -> Var:
    """Association distribution over previous fruits plus the final
    no-match entry; ``query`` is (1, z), ``prev_matrix`` is (B, z)."""
    cfg = model.config
    store = model.store
    z = cfg.descriptor_dim
    n_prev = 0 if prev_matrix is None else prev_matrix.value.shape[0]
    parts = []
    if n_prev:
        tiled = ops.gather_rows(tape, query, np.zeros(n_prev, np.int64))
        tokens = ops.concat_cols(tape, [prev_matrix, tiled])
        pe = positional_encoding(rel, 2 * z, n_freq=cfg.n_freq, max_move=cfg.max_move)
        parts.append(ops.shift_const(tape, tokens, pe))
    parts.append(Var(np.zeros((1, 2 * z))))  # no-match token, no encoding
    x = ops.concat_rows(tape, parts)
    x = ops.linear(tape, x, store.params["in.w"], store.params["in.b"])
    x = ops.leaky_relu(tape, _bn(store, "in.bn", tape, x, train=train))
    x = ops.mhsa_encoder_layer(tape, x, model.encoder_layer(), cfg.heads)
    x = ops.leaky_relu(tape, _bn(store, "post.bn", tape, x, train=train))
    logits = ops.linear(tape, x, store.params["out.w"], store.params["out.b"])
    return ops.softmax(tape, ops.reshape(tape, logits, (n_prev + 1,)))


@dataclass
class ProbRow:
    values: np.ndarray  # (B+1,), last entry = no match

    @property
    def no_match(self) -> float:
        return float(self.values[-1])


@dataclass
class ProbMatrix:
    values: np.ndarray  # (A, B+1)


def match_query(
    query_descriptor: np.ndarray,
    prev: DescriptorSet,
    rel_positions: np.ndarray,
    model: MatchModel,
) -> ProbRow:
    """Inference for one query fruit; candidates beyond the motion bound are
    zeroed (no renormalization)."""
    rel = np.asarray(rel_positions, dtype=np.float64).reshape(-1, 3)
    if rel.shape[0] != len(prev):
        raise ShapeError(
            f"{rel.shape[0]} relative positions for {len(prev)} candidates")
    q = Var(np.asarray(query_descriptor, dtype=np.float64).reshape(1, -1))
    if q.value.shape[1] != model.config.descriptor_dim:
        raise ShapeError("query descriptor has the wrong width")
    pm = Var(prev.vectors) if len(prev) else None
    probs = _match_row_var(None, q, pm, rel, model, train=False).value.copy()
    if len(prev):
        probs[:-1][np.linalg.norm(rel, axis=1) > model.config.max_move] = 0.0
    return ProbRow(probs)


def batch_match(
    queries: DescriptorSet,
    query_centers: np.ndarray,
    prev: DescriptorSet,
    prev_centers: np.ndarray,
    model: MatchModel,
) -> ProbMatrix:
    query_centers = np.asarray(query_centers, dtype=np.float64).reshape(-1, 3)
    prev_centers = np.asarray(prev_centers, dtype=np.float64).reshape(-1, 3)
    if query_centers.shape[0] != len(queries) or prev_centers.shape[0] != len(prev):
        raise ShapeError("centers do not line up with descriptor sets")
    rows = np.zeros((len(queries), len(prev) + 1))
    for i in range(len(queries)):
        rel = prev_centers - query_centers[i]
        rows[i] = match_query(queries.vectors[i], prev, rel, model).values
    return ProbMatrix(rows)


def greedy_assign(matrix: ProbMatrix | np.ndarray) -> TemporalAssociation:
    """Iteratively commit the globally most probable association; a chosen
    candidate column retires, the no-match column never does."""
    values = matrix.values if isinstance(matrix, ProbMatrix) else np.asarray(matrix)
    if values.ndim != 2 or values.shape[1] < 1:
        raise ShapeError("association matrix must be 2D with a no-match column")
    n_query, width = values.shape
    no_match = width - 1
    work = values.astype(np.float64).copy()
    pairs: dict[int, int | None] = {}
    for _ in range(n_query):
        i, j = np.unravel_index(int(np.argmax(work)), work.shape)
        pairs[int(i)] = None if j == no_match else int(j)
        work[i, :] = -np.inf
        if j != no_match:
            work[:, j] = -np.inf
    return TemporalAssociation(pairs)


# ---------------------------------------------------------------------------
# loss


def _loss_match_from_var(tape, probs: Var, target: np.ndarray, lam_inj: float) -> Var:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != probs.value.shape:
        raise ShapeError("target matrix shape mismatch")
    ce = ops.cross_entropy(tape, probs, target, from_logits=False, reduction="sum")
    n_prev = probs.value.shape[1] - 1
    cand = ops.slice_cols(tape, probs, 0, n_prev)
    row_dev = ops.sum_all(tape, ops.abs_(tape, ops.shift_const(
        tape, ops.sum_axis(tape, cand, 1), -1.0)))
    col_dev = ops.sum_all(tape, ops.abs_(tape, ops.shift_const(
        tape, ops.sum_axis(tape, cand, 0), -1.0)))
    inj = ops.add(tape, row_dev, col_dev)
    return ops.add(tape, ce, ops.scale(tape, inj, lam_inj))


def loss_match(probs: np.ndarray, target: np.ndarray, *,
               lam_inj: float = LAM_INJ) -> tuple[float, np.ndarray]:
    """Association loss on an unmasked probability matrix: summed cross
    entropy plus the injectivity penalty.  Returns value and gradient."""
    tape = Tape()
    var = Var(np.asarray(probs, dtype=np.float64))
    total = _loss_match_from_var(tape, var, target, lam_inj)
    tape.backward(total)
    grad = np.zeros_like(var.value) if var.grad is None else var.grad
    return float(total.value), grad


def association_target(pair: ScenePair) -> np.ndarray:
    """One-hot target rows (queries at t over previous fruits + no-match)."""
    n_query = len(pair.ann_t.instances)
    n_prev = len(pair.ann_prev.instances)
    target = np.zeros((n_query, n_prev + 1))
    for i in range(n_query):
        j = pair.association.pairs[i]
        target[i, n_prev if j is None else j] = 1.0
    return target


# ---------------------------------------------------------------------------
# training


def default_match_augment(seed: int = 0) -> AugmentConfig:
    """Per-fruit support augmentation: free rotation up to 30 degrees per
    axis, point jitter, color jitter."""
    return AugmentConfig(
        per_axis_rotation_range_deg=(-30.0, 30.0),
        point_jitter_sigma=7e-4,
        color_jitter_sigma=0.05,
        rng_seed=seed,
    )


def _pair_loss(
    tape: Tape | None,
    pair: ScenePair,
    enc_model: EncoderModel,
    match_model: MatchModel,
    *,
    train: bool,
    lam_inj: float,
    augment_config: AugmentConfig | None = None,
    aug_rng: np.random.Generator | None = None,
    data_rng: np.random.Generator | None = None,
):
    """Forward of one scene pair: batched descriptor encoding, one token-set
    forward per query, stacked into the association matrix."""
    z = enc_model.config.descriptor_dim
    prev_instances = pair.ann_prev.instances
    t_instances = pair.ann_t.instances
    supports = []
    for cloud, instances in ((pair.cloud_prev, prev_instances), (pair.cloud_t, t_instances)):
        for inst in instances:
            sup = extract_support(cloud, inst.center, enc_model.config, rng=data_rng)
            if augment_config is not None and len(sup):
                sup = augment(sup, None, augment_config, rng=aug_rng)[0]
            supports.append(sup)
    desc = _encode_supports_var(tape, supports, enc_model, train=train)
    zero = Var(np.zeros((1, z)))
    desc = [zero if d is None else d for d in desc]
    prev_desc = desc[:len(prev_instances)]
    t_desc = desc[len(prev_instances):]

    prev_matrix = ops.concat_rows(tape, prev_desc) if prev_desc else None
    prev_centers = np.array([inst.center for inst in prev_instances]).reshape(-1, 3)
    rows = []
    for i, inst in enumerate(t_instances):
        rel = prev_centers - inst.center if len(prev_instances) else np.zeros((0, 3))
        row = _match_row_var(tape, t_desc[i], prev_matrix, rel, match_model, train=train)
        rows.append(ops.reshape(tape, row, (1, len(prev_instances) + 1)))
    if not rows:
        return None, None
    probs = ops.concat_rows(tape, rows)
    loss = _loss_match_from_var(tape, probs, association_target(pair), lam_inj)
    return loss, probs


def train_matcher(
    enc_model: EncoderModel,
    match_model: MatchModel,
    pairs: list[ScenePair],
    *,
    epochs: int,
    lr: float = 3e-4,
    lam_inj: float = LAM_INJ,
    validation: list[ScenePair] | None = None,
    augment_config: AugmentConfig | None = None,
    use_default_augment: bool = True,
    seed: int = 0,
    eval_interval: int = 5,
    early_stop_train_mf1: float | None = None,
) -> list[dict]:
    """Joint end-to-end training of encoder and matcher, one scene pair per
    step.  Keeps the best-validation-mF1 weights when a validation set is
    given; optionally stops once training mF1 reaches a target."""
    if not pairs:
        raise ConfigError("no training pairs")
    if augment_config is None and use_default_augment:
        augment_config = default_match_augment(seed)
    data_rng = stream(seed, STREAM_DATA)
    aug_rng = stream(seed, STREAM_AUGMENT)
    enc_state, match_state = AdamState(), AdamState()
    history: list[dict] = []
    best_mf1, best_snap = -1.0, None
    steps = 0
    for epoch in range(epochs):
        epoch_losses = []
        for pi in data_rng.permutation(len(pairs)):
            pair = pairs[pi]
            enc_model.store.zero_grads()
            match_model.store.zero_grads()
            tape = Tape()
            loss, _ = _pair_loss(
                tape, pair, enc_model, match_model, train=True, lam_inj=lam_inj,
                augment_config=augment_config, aug_rng=aug_rng, data_rng=data_rng,
            )
            if loss is None:
                continue
            if not math.isfinite(float(loss.value)):
                raise DivergenceError(
                    f"non-finite matcher loss at epoch {epoch} pair {int(pi)}")
            tape.backward(loss)
            adam_step(enc_model.store, enc_state, lr)
            adam_step(match_model.store, match_state, lr)
            steps += 1
            epoch_losses.append(float(loss.value))
        record = {"epoch": epoch, "steps": steps,
                  "loss": float(np.mean(epoch_losses)) if epoch_losses else 0.0}
        last = epoch == epochs - 1
        if epoch % eval_interval == eval_interval - 1 or last:
            scores = evaluate_matcher(enc_model, match_model, pairs)
            record["train_mf1"] = scores["mf1"]
            if validation:
                val = evaluate_matcher(enc_model, match_model, validation)
                record["val_mf1"] = val["mf1"]
                if val["mf1"] > best_mf1:
                    best_mf1 = val["mf1"]
                    best_snap = (enc_model.store.snapshot(), match_model.store.snapshot())
            history.append(record)
            if (early_stop_train_mf1 is not None
                    and scores["mf1"] >= early_stop_train_mf1):
                break
        else:
            history.append(record)
    if best_snap is not None:
        enc_model.store.restore(best_snap[0])
        match_model.store.restore(best_snap[1])
    return history


def match_pair(pair: ScenePair, enc_model: EncoderModel,
               match_model: MatchModel) -> TemporalAssociation:
    """Inference for one scene pair: encode, match, greedy-assign."""
    prev = encode_all(pair.cloud_prev, pair.ann_prev.instances, enc_model)
    cur = encode_all(pair.cloud_t, pair.ann_t.instances, enc_model)
    prev_centers = np.array([i.center for i in pair.ann_prev.instances]).reshape(-1, 3)
    cur_centers = np.array([i.center for i in pair.ann_t.instances]).reshape(-1, 3)
    matrix = batch_match(cur, cur_centers, prev, prev_centers, match_model)
    return greedy_assign(matrix)


def evaluate_matcher(enc_model: EncoderModel, match_model: MatchModel,
                     pairs: list[ScenePair]) -> dict:
    """Aggregate matching confusion over pairs, scored with the class F1s."""
    total = MatchConfusion()
    for pair in pairs:
        assoc = match_pair(pair, enc_model, match_model)
        total = total + matching_confusion(assoc, pair.association)
    f1 = f1_scores(total)
    return {
        "mf1": f1.mf1,
        "f1_positive": f1.f1_positive,
        "f1_negative": f1.f1_negative,
        "confusion": total,
    }
