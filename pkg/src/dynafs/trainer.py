"""End-to-end training: pre-train the predictor, optimize the acquisition
policy under a per-tick cost target, then refit the predictor on the states
the policy produces.

All costs (the target ``c_max``, the smoothed training cost and the
validation cost) are pooled per-tick means.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import reward as rw
from .config import RunConfig
from .cost import charge, feature_costs, static_mask
from .data import (CLASSIFICATION, Dataset, DatasetSplits, EpisodeData, SyntheticConfig, generate_synthetic,
                   ingest_csv, interpolate_to_ticks, load_schema, prepare_splits)
from .env import (DETERMINISTIC, SAMPLE, ConstantPolicy, column_targets, rollout_batch, states_from_actions,
                  synthesize_states)
from .errors import DataError, DynafsError, NotConvergedError
from .evaluation import activation_map, task_loss
from .predictor import (GbdtConfig, PredictorConfig, RecurrentConfig, StatePredictor, fit_predictor,
                        save_predictor)
from .rl import (ActorNet, CriticNet, DiagnosticsWriter, PpoConfig, PpoOptimizer, RolloutBuffer, joint_log_prob,
                 ppo_update)

log = logging.getLogger(__name__)


@dataclass
class AblationFlags:
    no_predictor_update: bool = False
    no_baseline: bool = False
    fixed_beta: bool = False
    no_gate: bool = False
    no_reward_norm: bool = False


@dataclass
class TrainerState:
    c_max: float
    beta: float
    c_train: float | None = None
    c_valid: list = field(default_factory=list)
    valid_steps: list = field(default_factory=list)
    window_start: int = 0  # index into c_valid where the current plateau window begins
    step: int = 0
    converged: bool = False
    beta_history: list = field(default_factory=list)


# ------------------------------------------------------------------ helpers


def full_states(episode: EpisodeData) -> np.ndarray:
    """State columns (T+1, F) of the always-fetch policy."""
    return states_from_actions(episode.x, np.ones(episode.x.shape, dtype=bool)).T


def masked_states(episode: EpisodeData, selected: np.ndarray) -> np.ndarray:
    """State columns (T+1, F) when a fixed feature subset is fetched at every tick."""
    a = np.repeat(np.asarray(selected, dtype=bool)[:, None], episode.n_ticks, axis=1)
    return states_from_actions(episode.x, a).T


def padded_targets(episodes: Sequence[EpisodeData], reveal: bool) -> np.ndarray:
    T = max(e.n_ticks for e in episodes)
    out = np.full((len(episodes), T + 1), np.nan)
    for i, e in enumerate(episodes):
        out[i, : e.n_ticks + 1] = column_targets(e.y, reveal)
    return out


def _pad_states(states: Sequence[np.ndarray]) -> np.ndarray:
    C = max(s.shape[0] for s in states)
    out = np.zeros((len(states), C, states[0].shape[1]))
    for i, s in enumerate(states):
        out[i, : s.shape[0]] = s
    return out


def predict_columns(predictor: StatePredictor, states: Sequence[np.ndarray], batch: int = 1024) -> list[np.ndarray]:
    """Per-column predictions for a list of (C_i, F) state arrays."""
    out = []
    for start in range(0, len(states), batch):
        chunk = states[start:start + batch]
        P = predictor.predict_states(_pad_states(chunk))
        out += [P[i, : s.shape[0]] for i, s in enumerate(chunk)]
    return out


def score_states(predictor: StatePredictor, states, episodes, task: str, reveal: bool) -> float:
    """Task loss of ``predictor`` over every labeled column."""
    preds = predict_columns(predictor, states)
    p, y = [], []
    for pr, e in zip(preds, episodes):
        t = column_targets(e.y, reveal)
        keep = ~np.isnan(t)
        p.append(pr[keep])
        y.append(t[keep])
    return task_loss(np.concatenate(p), np.concatenate(y), task)


def pooled_cost(actions: Sequence[np.ndarray], specs, cost_mode: str) -> float:
    """Total acquisition cost over episodes divided by their total ticks; actions are (F, T_i)."""
    prices = feature_costs(specs, cost_mode)[:, None]
    stat = static_mask(specs)[:, None]
    total = sum(float(charge(a, prices, stat, time_axis=1).sum()) for a in actions)
    ticks = sum(a.shape[1] for a in actions)
    return total / ticks


def predictor_config(cfg: RunConfig) -> PredictorConfig:
    return PredictorConfig(
        kind=cfg.predictor_kind,
        gbdt=GbdtConfig(n_trees=cfg.gbdt_trees, depth=cfg.gbdt_depth, lr=cfg.gbdt_lr,
                        min_samples_leaf=cfg.gbdt_min_leaf, max_bins=cfg.gbdt_max_bins,
                        n_models=cfg.gbdt_models, seed=cfg.seed),
        recurrent=RecurrentConfig(hidden=cfg.rnn_hidden, epochs=cfg.rnn_epochs, lr=cfg.rnn_lr,
                                  batch_size=cfg.rnn_batch, seed=cfg.seed),
    )


def reward_config(cfg: RunConfig) -> rw.RewardConfig:
    return rw.RewardConfig(alpha=cfg.alpha, beta=cfg.beta, delta_beta=cfg.delta_beta, c_base=cfg.c_base,
                           l_eps=cfg.l_eps, ema_coeff=cfg.ema_coeff, plateau_threshold=cfg.plateau_threshold,
                           plateau_window=cfg.plateau_window,
                           literal_signs=cfg.literal_signs).validate()


def ppo_config(cfg: RunConfig) -> PpoConfig:
    return PpoConfig(gamma=cfg.gamma, lam=cfg.lam, clip_eps=cfg.clip_eps, lr=cfg.ppo_lr, adam_eps=cfg.adam_eps,
                     epochs_per_batch=cfg.epochs_per_batch, minibatches=cfg.minibatches, grad_clip=cfg.grad_clip,
                     hidden=cfg.hidden, rollout_ticks=cfg.rollout_ticks, min_steps=cfg.min_steps,
                     max_steps=cfg.max_steps, seed=cfg.seed).validate()


def ablation_flags(cfg: RunConfig) -> AblationFlags:
    return AblationFlags(cfg.no_predictor_update, cfg.no_baseline, cfg.fixed_beta, cfg.no_gate, cfg.no_reward_norm)


# ------------------------------------------------------------------ pretrain


@dataclass
class PretrainResult:
    predictor: StatePredictor
    baseline_errors: dict | None  # {"train": [...], "val": [...]} per-column absolute errors
    val_loss: float


def pretrain_predictor(splits: DatasetSplits, predictor_config: PredictorConfig | None = None,
                       reveal_current_tick: bool = False, seed: int = 0) -> PretrainResult:
    """Fit on fully observed states; cache per-column baseline errors for regression."""
    predictor_config = predictor_config or PredictorConfig()
    tr_states = [full_states(e) for e in splits.train]
    va_states = [full_states(e) for e in splits.val]
    tr_y = [column_targets(e.y, reveal_current_tick) for e in splits.train]
    va_y = [column_targets(e.y, reveal_current_tick) for e in splits.val]
    pred = fit_predictor(tr_states, tr_y, splits.task, predictor_config, val=(va_states, va_y), seed=seed)
    cache = None
    if splits.task != CLASSIFICATION:
        cache = {}
        for name, states, ys in (("train", tr_states, tr_y), ("val", va_states, va_y)):
            cache[name] = [np.abs(p - y) for p, y in zip(predict_columns(pred, states), ys)]
    val_loss = score_states(pred, va_states, splits.val, splits.task, reveal_current_tick)
    return PretrainResult(pred, cache, val_loss)


# --------------------------------------------------------------- policy loop


@dataclass
class PolicyResult:
    actor: ActorNet
    critic: CriticNet
    state: TrainerState
    history: list

    @property
    def converged(self) -> bool:
        return self.state.converged


def evaluate_policy_cost(episodes, actor, specs, cost_mode: str) -> float:
    ro = rollout_batch(episodes, actor, DETERMINISTIC)
    return pooled_cost([ro.actions[i, :n].T for i, n in enumerate(ro.lengths)], specs, cost_mode)


def _compute_rewards(ro, idx, splits, pre: PretrainResult, state: TrainerState, rc: rw.RewardConfig,
                     flags: AblationFlags, prices, is_static, reveal: bool, rng) -> tuple[np.ndarray, dict]:
    episodes = [splits.train[i] for i in idx]
    valid = ro.valid
    B, T = valid.shape
    nf = prices.size
    costs = charge(ro.actions, prices, is_static, time_axis=1) * valid[..., None]
    per_tick = costs.sum(axis=2)
    batch_cost = float(per_tick[valid].mean())
    state.c_train = rw.update_c_train(state.c_train, batch_cost, rc.ema_coeff)
    g = 1.0 if flags.no_gate else rw.gate(state.c_train, state.c_max, rc.alpha)
    c_base = 0.0 if flags.fixed_beta else rc.c_base
    r_cost = np.where(valid, rw.cost_reward(costs, nf, state.beta, g, c_base, selected=ro.actions), 0.0)

    preds = pre.predictor.predict_states(ro.states)[:, 1:]
    targets = padded_targets(episodes, reveal)[:, 1:]
    labeled = valid & ~np.isnan(targets)
    raw = np.zeros((B, T))
    if splits.task == CLASSIFICATION:
        raw[labeled] = rw.classification_rewards(preds[labeled], targets[labeled], rng)
    else:
        l_pred = np.abs(preds - np.nan_to_num(targets))
        if flags.no_baseline:
            raw = -l_pred
        else:
            base = np.zeros((B, T + 1))
            for b, i in enumerate(idx):
                e = pre.baseline_errors["train"][i]
                base[b, : e.size] = e
            raw = rw.regression_reward(l_pred, np.nan_to_num(base[:, 1:]), rc.l_eps)
        raw = np.where(labeled, raw, 0.0)
    r_pred = np.zeros((B, T))
    r_pred[labeled] = raw[labeled] if flags.no_reward_norm else rw.normalize_pred_rewards(raw[labeled])
    if rc.literal_signs:
        r_pred, r_cost = -r_pred, -r_cost
    diag = {"batch_cost": batch_cost, "c_train": state.c_train, "gate": g, "beta": state.beta,
            "mean_pred_reward": float(r_pred[labeled].mean()) if labeled.any() else 0.0,
            "mean_cost_reward": float(r_cost[valid].mean()),
            "raw_pred_scale": float(np.mean(np.abs(raw[labeled]))) if labeled.any() else 0.0}
    return r_pred + r_cost, diag


def train_policy(splits: DatasetSplits, pre: PretrainResult, c_max: float, cost_mode: str = "simple",
                 reward_cfg: rw.RewardConfig | None = None, ppo_cfg: PpoConfig | None = None,
                 flags: AblationFlags | None = None, reveal_current_tick: bool = False,
                 eval_every: int = 1, diagnostics: DiagnosticsWriter | None = None) -> PolicyResult:
    """Rollout, reward, PPO update and validation-cost checks until the target holds."""
    rc = replace(reward_cfg or rw.RewardConfig())
    cfg = ppo_cfg or PpoConfig()
    flags = flags or AblationFlags()
    diagnostics = diagnostics or DiagnosticsWriter()
    if splits.task != CLASSIFICATION and not flags.no_baseline and pre.baseline_errors is None:
        raise DataError("regression rewards need the baseline error cache")
    nf = splits.n_features
    rng = np.random.default_rng(cfg.seed)
    actor = ActorNet(nf, cfg.hidden, np.random.default_rng([cfg.seed, 1]))
    critic = CriticNet(nf, cfg.hidden, np.random.default_rng([cfg.seed, 2]))
    opt = PpoOptimizer.create(actor, critic)
    prices = feature_costs(splits.specs, cost_mode)
    is_static = static_mask(splits.specs)
    state = TrainerState(c_max=c_max, beta=rc.beta)
    lengths = np.array([e.n_ticks for e in splits.train])
    order = rng.permutation(len(splits.train))
    cursor = 0
    n_batches = 0
    history = []
    while state.step < cfg.max_steps:
        idx, ticks = [], 0
        while ticks < cfg.rollout_ticks:
            if cursor == order.size:
                order, cursor = rng.permutation(len(splits.train)), 0
            idx.append(int(order[cursor]))
            ticks += int(lengths[order[cursor]])
            cursor += 1
        ro = rollout_batch([splits.train[i] for i in idx], actor, SAMPLE, rng)
        rewards, diag = _compute_rewards(ro, idx, splits, pre, state, rc, flags, prices, is_static,
                                         reveal_current_tick, rng)
        actor_in = ActorNet.inputs(ro.states, ro.actions)
        critic_in = CriticNet.inputs(ro.states)
        values, _ = critic.forward(critic_in)
        buf = RolloutBuffer(actor_in, critic_in, ro.actions, joint_log_prob(ro.probs, ro.actions),
                            np.where(ro.valid, values, 0.0), rewards, ro.valid)
        buf.compute_advantages(cfg.gamma, cfg.lam)
        losses = ppo_update(buf, actor, critic, cfg, opt, rng)
        state.step += ticks
        n_batches += 1
        record = {"step": state.step, **diag, **losses,
                  "mean_reward": float(rewards[ro.valid].mean()),
                  "select_prob": float(ro.probs[ro.valid].mean())}
        if n_batches % eval_every == 0 or state.step >= cfg.max_steps:
            c_valid = evaluate_policy_cost(splits.val, actor, splits.specs, cost_mode)
            state.c_valid.append(c_valid)
            state.valid_steps.append(state.step)
            record["c_valid"] = c_valid
            if not flags.fixed_beta and c_valid > c_max:
                window = state.c_valid[state.window_start:]
                steps = state.valid_steps[state.window_start:]
                new_beta = rw.update_beta(window, steps, replace(rc, beta=state.beta))
                if new_beta != state.beta:
                    state.beta = new_beta
                    state.window_start = len(state.c_valid)
                    state.beta_history.append((state.step, new_beta))
            if c_valid <= c_max and state.step >= cfg.min_steps:
                state.converged = True
        record["beta_next"] = state.beta
        diagnostics.write(record)
        history.append(record)
        if state.converged:
            break
    if not state.converged:
        log.warning("policy did not reach c_max=%s within %d steps (last validation cost %.4g)",
                    c_max, cfg.max_steps, state.c_valid[-1] if state.c_valid else float("nan"))
    return PolicyResult(actor, critic, state, history)


# ------------------------------------------------------------------ retrain


def retrain_predictor(splits: DatasetSplits, actor, pre: PretrainResult,
                      predictor_config: PredictorConfig | None = None, flags: AblationFlags | None = None,
                      reveal_current_tick: bool = False, mode: str = DETERMINISTIC, seed: int = 0) -> StatePredictor:
    """Fit a fresh predictor on the states ``actor`` produces over the training split."""
    flags = flags or AblationFlags()
    if flags.no_predictor_update:
        return pre.predictor
    tr = synthesize_states(splits.train, actor, mode, seed)
    va = synthesize_states(splits.val, actor, mode, seed + 1)
    tr_y = [column_targets(e.y, reveal_current_tick) for e in splits.train]
    va_y = [column_targets(e.y, reveal_current_tick) for e in splits.val]
    return fit_predictor([s.states.T for s in tr], tr_y, splits.task, predictor_config,
                         val=([s.states.T for s in va], va_y), seed=seed)


# ----------------------------------------------------------------- pipeline


class StageError(DynafsError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage, self.cause = stage, cause


@dataclass
class RunResult:
    config: RunConfig
    metrics: dict
    pretrain: PretrainResult
    policy: PolicyResult
    predictor: StatePredictor
    activation: object
    splits: DatasetSplits

    @property
    def converged(self) -> bool:
        return self.policy.converged


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data_source == "synthetic":
        sc = SyntheticConfig(
            n_subjects=cfg.n_subjects, n_features=cfg.n_features, n_informative=cfg.n_informative,
            n_static=cfg.n_static, tick_range=(cfg.tick_min, cfg.tick_max), ar_coeff=cfg.ar_coeff,
            noise_std=cfg.noise_std, label_noise_std=cfg.label_noise_std, task=cfg.task,
            seed=cfg.seed if cfg.data_seed is None else cfg.data_seed, relevance_switch=cfg.relevance_switch)
        return generate_synthetic(sc)
    specs = load_schema(cfg.schema_path)
    raw = ingest_csv(cfg.events_path, cfg.schema_path, cfg.labels_path)
    names = [s.name for s in specs]
    episodes = [interpolate_to_ticks(r, cfg.tick_hours, names, cfg.task) for r in raw]
    return Dataset(episodes, specs, cfg.task)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DynafsError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(name, exc) from exc


def evaluate_split(episodes, actor, predictor, splits: DatasetSplits, cost_mode: str, reveal: bool) -> dict:
    syn = synthesize_states(episodes, actor, DETERMINISTIC)
    loss = score_states(predictor, [s.states.T for s in syn], episodes, splits.task, reveal)
    cost = pooled_cost([s.actions for s in syn], splits.specs, cost_mode)
    return {"cost": cost, "loss": loss}


def run_pipeline(cfg: RunConfig, splits: DatasetSplits | None = None, pre: PretrainResult | None = None,
                 write: bool = True) -> RunResult:
    """Pre-train, optimize the policy, refit the predictor and evaluate on the test split.

    ``splits`` and ``pre`` may be passed in to share data and the pre-trained
    predictor across runs of a sweep.
    """
    cfg.validate()
    out = Path(cfg.out_dir) if (write and cfg.out_dir) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if splits is None:
        data = _stage("data", load_dataset, cfg)
        splits = _stage("data", prepare_splits, data, cfg.seed, cfg.fractions)
    pcfg = predictor_config(cfg)
    flags = ablation_flags(cfg)
    if pre is None:
        pre = _stage("pretrain", pretrain_predictor, splits, pcfg, cfg.reveal_current_tick, cfg.seed)
    writer = DiagnosticsWriter(out / "history.jsonl" if out else None)
    policy = _stage("policy", train_policy, splits, pre, cfg.c_max, cfg.cost_mode, reward_config(cfg),
                    ppo_config(cfg), flags, cfg.reveal_current_tick, cfg.eval_every, writer)
    predictor = _stage("retrain", retrain_predictor, splits, policy.actor, pre, pcfg, flags,
                       cfg.reveal_current_tick, cfg.retrain_mode, cfg.seed)

    def evaluate():
        test = evaluate_split(splits.test, policy.actor, predictor, splits, cfg.cost_mode, cfg.reveal_current_tick)
        val = evaluate_split(splits.val, policy.actor, predictor, splits, cfg.cost_mode, cfg.reveal_current_tick)
        full_test = score_states(pre.predictor, [full_states(e) for e in splits.test], splits.test, splits.task,
                                 cfg.reveal_current_tick)
        full_cost = pooled_cost([np.ones(e.x.shape, dtype=bool) for e in splits.test], splits.specs, cfg.cost_mode)
        amap = activation_map(policy.actor, splits.test, cfg.t_max, SAMPLE, cfg.seed, cfg.activation_rollouts,
                              [s.name for s in splits.specs])
        return test, val, full_test, full_cost, amap

    test, val, full_test, full_cost, amap = _stage("evaluate", evaluate)
    st = policy.state
    metrics = {
        "task": splits.task,
        "c_max": "inf" if math.isinf(cfg.c_max) else cfg.c_max,
        "converged": st.converged,
        "steps": st.step,
        "final_beta": st.beta,
        "last_valid_cost": st.c_valid[-1] if st.c_valid else None,
        "test": test,
        "val": val,
        "pretrained_full_observation": {"test_loss": full_test, "test_cost": full_cost,
                                        "val_loss": pre.val_loss},
        "mean_activation": dict(zip(amap.feature_names, amap.mean_activation().tolist())),
        "flags": vars(flags).copy(),
        "seed": cfg.seed,
    }
    if splits.relevance is not None:
        metrics["informative_features"] = [splits.specs[k].name for k in np.flatnonzero(splits.relevance)]
    if out is not None:
        (out / "metrics.json").write_text(json.dumps(_jsonable(metrics), indent=2, sort_keys=True) + "\n")
        save_predictor(pre.predictor, out / "predictor_pretrained.json")
        save_predictor(predictor, out / "predictor.json")
        (out / "policy.json").write_text(json.dumps({"actor": policy.actor.to_dict(),
                                                     "critic": policy.critic.to_dict()}))
        amap.to_csv(out / "activation.csv")
        cfg.dump(out / "config.yaml")
    return RunResult(cfg, metrics, pre, policy, predictor, amap, splits)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def sweep(cfg: RunConfig, c_max_values: Sequence[float]) -> list[RunResult]:
    """One pipeline per target; data and the pre-trained predictor are shared."""
    data = _stage("data", load_dataset, cfg)
    splits = _stage("data", prepare_splits, data, cfg.seed, cfg.fractions)
    pre = _stage("pretrain", pretrain_predictor, splits, predictor_config(cfg), cfg.reveal_current_tick, cfg.seed)
    results = []
    for c in c_max_values:
        sub = cfg.replace(c_max=float(c), out_dir=str(Path(cfg.out_dir) / f"c_max_{c:g}") if cfg.out_dir else None)
        results.append(run_pipeline(sub, splits, pre))
    return results


def require_converged(result: RunResult) -> RunResult:
    if not result.converged:
        raise NotConvergedError(f"policy did not reach c_max={result.config.c_max} "
                                f"(last validation cost {result.metrics['last_valid_cost']})")
    return result


def metrics_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
